//! Concrete stochastic-flow model families.
//!
//! A model is a law on random kernel rows `v_{r,x}(o)` over a finite offset
//! support. Rows are IID in time `r`; spatial structure depends on the family:
//!
//! * `ProductIid` draws one independent row per site.
//! * `Landscape` sets `K_r(x, x+o) = b(o) e^{ω_{r,x+o}} / Σ_o' b(o') e^{ω_{r,x+o'}}`
//!   with IID site weights `ω`, so nearby rows share weights.
//! * `TwoStepNn` composes two nearest-neighbour product layers onto `2Z`
//!   (reported on the reduced lattice with offsets `{-1, 0, 1}`).
//!
//! Environments are never stored: [`ModelSpec::fill_row`] regenerates a row
//! from an [`EnvKey`] through the counter-based hash in [`crate::rng`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::quad::gauss_legendre;
use crate::rng::{env_uniform, hash_site, hash_time, to_unit};

const ROW_TOL: f64 = 1e-12;
const BETA_TABLE: usize = 4096;
/// Variance threshold separating deterministic from random row moments.
pub const DETERMINISM_TOL: f64 = 1e-14;

/// Law of a scalar weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarLaw {
    /// `(probability, value)` pairs.
    Atoms {
        atoms: Vec<(f64, f64)>,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    Beta {
        a: f64,
        b: f64,
    },
}

impl ScalarLaw {
    pub fn uniform01() -> Self {
        ScalarLaw::Uniform { lo: 0.0, hi: 1.0 }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config { field: field.to_string(), msg: msg.to_string() });
        match self {
            ScalarLaw::Atoms { atoms } => {
                if atoms.is_empty() {
                    return bad("atom list is empty");
                }
                if atoms.iter().any(|(p, _)| *p < 0.0) {
                    return bad("negative atom probability");
                }
                let s: f64 = atoms.iter().map(|a| a.0).sum();
                if (s - 1.0).abs() > ROW_TOL {
                    return bad(&format!("atom probabilities sum to {s}"));
                }
            }
            ScalarLaw::Uniform { lo, hi } => {
                if !(hi > lo) {
                    return bad("uniform law needs lo < hi");
                }
            }
            ScalarLaw::Beta { a, b } => {
                if !(*a > 0.0 && *b > 0.0) {
                    return bad("beta parameters must be positive");
                }
            }
        }
        Ok(())
    }

    /// Exact raw moment `E[u^n]`.
    pub fn moment(&self, n: u32) -> f64 {
        match self {
            ScalarLaw::Atoms { atoms } => atoms.iter().map(|(p, v)| p * v.powi(n as i32)).sum(),
            ScalarLaw::Uniform { lo, hi } => {
                let k = n as i32 + 1;
                (hi.powi(k) - lo.powi(k)) / (k as f64 * (hi - lo))
            }
            ScalarLaw::Beta { a, b } => (0..n).map(|j| (a + j as f64) / (a + b + j as f64)).product(),
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            ScalarLaw::Atoms { atoms } => {
                atoms.iter().filter(|a| a.0 > 0.0).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), a| (lo.min(a.1), hi.max(a.1)))
            }
            ScalarLaw::Uniform { lo, hi } => (*lo, *hi),
            ScalarLaw::Beta { .. } => (0.0, 1.0),
        }
    }

    pub fn variance(&self) -> f64 {
        let m1 = self.moment(1);
        self.moment(2) - m1 * m1
    }

    /// Finite atomic approximation with `n` atoms: Gauss–Legendre nodes for
    /// uniform laws (exact moments up to degree `2n-1`), quantile midpoints
    /// for beta laws, identity for atomic laws.
    pub fn discretize(&self, n: usize) -> Vec<(f64, f64)> {
        match self {
            ScalarLaw::Atoms { atoms } => atoms.clone(),
            ScalarLaw::Uniform { lo, hi } => {
                let (x, w) = gauss_legendre(n);
                x.iter().zip(&w).map(|(x, w)| (0.5 * w, lo + (hi - lo) * 0.5 * (x + 1.0))).collect()
            }
            ScalarLaw::Beta { a, b } => {
                let d = Beta::new(*a, *b).expect("validated beta parameters");
                (0..n).map(|i| (1.0 / n as f64, d.inverse_cdf((i as f64 + 0.5) / n as f64))).collect()
            }
        }
    }
}

/// Compiled inverse-CDF sampler for a [`ScalarLaw`].
#[derive(Debug, Clone)]
enum ScalarSampler {
    Atoms { cdf: Vec<f64>, values: Vec<f64> },
    Uniform { lo: f64, width: f64 },
    Table(Vec<f64>),
}

impl ScalarSampler {
    fn new(law: &ScalarLaw) -> Self {
        match law {
            ScalarLaw::Atoms { atoms } => {
                let mut acc = 0.0;
                let cdf = atoms
                    .iter()
                    .map(|(p, _)| {
                        acc += p;
                        acc
                    })
                    .collect();
                ScalarSampler::Atoms { cdf, values: atoms.iter().map(|a| a.1).collect() }
            }
            ScalarLaw::Uniform { lo, hi } => ScalarSampler::Uniform { lo: *lo, width: hi - lo },
            // Stratified inverse-CDF table.
            ScalarLaw::Beta { a, b } => {
                let d = Beta::new(*a, *b).expect("validated beta parameters");
                ScalarSampler::Table((0..BETA_TABLE).map(|i| d.inverse_cdf((i as f64 + 0.5) / BETA_TABLE as f64)).collect())
            }
        }
    }

    #[inline]
    fn sample(&self, u: f64) -> f64 {
        match self {
            ScalarSampler::Atoms { cdf, values } => {
                let i = cdf.iter().position(|&c| u < c).unwrap_or(values.len() - 1);
                values[i]
            }
            ScalarSampler::Uniform { lo, width } => lo + width * u,
            ScalarSampler::Table(t) => t[((u * t.len() as f64) as usize).min(t.len() - 1)],
        }
    }
}

/// Law of a whole row for product models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RowLaw {
    /// Finitely many rows with their probabilities.
    Atomic(Vec<RowAtom>),
    /// `row = base + u * slope` with scalar `u`.
    Affine { base: Vec<f64>, slope: Vec<f64>, weight: ScalarLaw },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowAtom {
    pub prob: f64,
    pub row: Vec<f64>,
}

impl RowLaw {
    fn validate(&self, width: usize) -> Result<()> {
        let err = |msg: String| Err(Error::Config { field: "row_law".into(), msg });
        match self {
            RowLaw::Atomic(atoms) => {
                if atoms.is_empty() {
                    return err("no atoms".into());
                }
                let s: f64 = atoms.iter().map(|a| a.prob).sum();
                if (s - 1.0).abs() > ROW_TOL || atoms.iter().any(|a| a.prob < 0.0) {
                    return err(format!("atom probabilities sum to {s}"));
                }
                for (i, a) in atoms.iter().enumerate() {
                    if a.row.len() != width {
                        return err(format!("atom {i} has {} entries, expected {width}", a.row.len()));
                    }
                    check_prob_vector(&a.row).map_err(|m| Error::Config { field: format!("atoms[{i}].row"), msg: m })?;
                }
            }
            RowLaw::Affine { base, slope, weight } => {
                weight.validate("affine.weight")?;
                if base.len() != width || slope.len() != width {
                    return err("affine base/slope length mismatch".into());
                }
                let (lo, hi) = weight.support();
                for u in [lo, hi] {
                    let row: Vec<f64> = base.iter().zip(slope).map(|(b, s)| b + u * s).collect();
                    check_prob_vector(&row).map_err(|m| Error::Config { field: "affine".into(), msg: format!("at u={u}: {m}") })?;
                }
            }
        }
        Ok(())
    }

    /// `E[prod_i v(idx_i)]` for a multiset of offset indices.
    pub fn moment(&self, idx: &[usize]) -> f64 {
        match self {
            RowLaw::Atomic(atoms) => atoms.iter().map(|a| a.prob * idx.iter().map(|&i| a.row[i]).product::<f64>()).sum(),
            RowLaw::Affine { base, slope, weight } => {
                // Expand prod_i (base_i + u slope_i) as a polynomial in u.
                let mut poly = vec![1.0];
                for &i in idx {
                    let mut next = vec![0.0; poly.len() + 1];
                    for (d, c) in poly.iter().enumerate() {
                        next[d] += c * base[i];
                        next[d + 1] += c * slope[i];
                    }
                    poly = next;
                }
                poly.iter().enumerate().map(|(d, c)| c * weight.moment(d as u32)).sum()
            }
        }
    }

    fn is_deterministic(&self) -> bool {
        match self {
            RowLaw::Atomic(atoms) => {
                atoms.iter().filter(|a| a.prob > 0.0).all(|a| a.row.iter().zip(&atoms[0].row).all(|(x, y)| (x - y).abs() < ROW_TOL))
            }
            RowLaw::Affine { slope, weight, .. } => slope.iter().all(|s| s.abs() < ROW_TOL) || weight.variance() < DETERMINISM_TOL,
        }
    }
}

fn check_prob_vector(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|&v| v < -ROW_TOL) {
        return Err("negative entry".into());
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(format!("row sums to {s}"));
    }
    Ok(())
}

/// Compiled row sampler for a [`RowLaw`].
#[derive(Debug, Clone)]
enum RowSampler {
    Atomic { cdf: Vec<f64> },
    Affine { scalar: ScalarSampler },
}

impl RowSampler {
    fn new(law: &RowLaw) -> Self {
        match law {
            RowLaw::Atomic(atoms) => {
                let mut acc = 0.0;
                RowSampler::Atomic {
                    cdf: atoms
                        .iter()
                        .map(|a| {
                            acc += a.prob;
                            acc
                        })
                        .collect(),
                }
            }
            RowLaw::Affine { weight, .. } => RowSampler::Affine { scalar: ScalarSampler::new(weight) },
        }
    }

    #[inline]
    fn fill(&self, law: &RowLaw, u: f64, out: &mut [f64]) {
        match (self, law) {
            (RowSampler::Atomic { cdf }, RowLaw::Atomic(atoms)) => {
                let i = cdf.iter().position(|&c| u < c).unwrap_or(atoms.len() - 1);
                out.copy_from_slice(&atoms[i].row);
            }
            (RowSampler::Affine { scalar }, RowLaw::Affine { base, slope, .. }) => {
                let w = scalar.sample(u);
                for ((o, b), s) in out.iter_mut().zip(base).zip(slope) {
                    *o = (b + w * s).max(0.0);
                }
            }
            _ => unreachable!("sampler compiled from a different law"),
        }
    }
}

/// Rows of one environment at a fixed time; see [`ModelSpec::time_slice`].
pub struct TimeSlice<'a> {
    model: &'a ModelSpec,
    seed: u64,
    r: u64,
    time_hash: u64,
}

impl TimeSlice<'_> {
    /// Same values as `fill_row(EnvKey { seed, r, x })`.
    #[inline]
    pub fn fill(&self, x: i64, out: &mut [f64]) {
        match (&self.model.family, &self.model.sampler) {
            (Family::ProductIid { law }, Sampler::Product(s)) => s.fill(law, to_unit(hash_site(self.time_hash, x, 0)), out),
            _ => self.model.fill_row(EnvKey { seed: self.seed, r: self.r, x }, out),
        }
    }
}

/// Model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ProductIid {
        law: RowLaw,
    },
    Landscape {
        b_profile: Vec<f64>,
        weight: ScalarLaw,
        quadrature_atoms: usize,
    },
    /// Two composed nearest-neighbour layers; `inner` is a row law on `{-1, +1}`.
    TwoStepNn {
        inner: RowLaw,
    },
}

/// Key of one environment row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvKey {
    pub seed: u64,
    pub r: u64,
    pub x: i64,
}

/// A sampled row: probabilities on the model offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPMF {
    pub offsets: Vec<i64>,
    pub probs: Vec<f64>,
}

/// A stochastic-flow model.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub family: Family,
    /// Offsets on the base lattice, strictly increasing.
    pub offsets: Vec<i64>,
    /// Positions live on `lattice_scale * Z`.
    pub lattice_scale: f64,
    pub symmetry_order_p: u32,
    /// Default environment seed carried from the config.
    pub seed: u64,
    sampler: Sampler,
}

#[derive(Debug, Clone)]
enum Sampler {
    Product(RowSampler),
    Landscape { weight: ScalarSampler, exact_atoms: Vec<(f64, f64)> },
    TwoStep(RowSampler),
}

impl ModelSpec {
    fn build(name: String, family: Family, offsets: Vec<i64>) -> Result<Self> {
        let sampler = match &family {
            Family::ProductIid { law } => Sampler::Product(RowSampler::new(law)),
            Family::Landscape { weight, quadrature_atoms, .. } => {
                Sampler::Landscape { weight: ScalarSampler::new(weight), exact_atoms: weight.discretize(*quadrature_atoms) }
            }
            Family::TwoStepNn { inner } => Sampler::TwoStep(RowSampler::new(inner)),
        };
        let mut model = ModelSpec { name, family, offsets, lattice_scale: 1.0, symmetry_order_p: 0, seed: 0, sampler };
        model.check_aperiodic()?;
        model.symmetry_order_p = model.compute_symmetry_order()?;
        Ok(model)
    }

    fn check_aperiodic(&self) -> Result<()> {
        let mu = self.annealed_unit_masses();
        let support: Vec<i64> = self.offsets.iter().zip(&mu).filter(|(_, m)| **m > 0.0).map(|(o, _)| *o).collect();
        let base = support[0];
        let g = support.iter().fold(0i64, |g, &o| gcd(g, o - base));
        if g != 1 {
            return Err(Error::PeriodicSupport(g));
        }
        Ok(())
    }

    fn compute_symmetry_order(&self) -> Result<u32> {
        let s = self.offsets.len();
        let kmax = 4 * s as u32;
        for k in 1..=kmax {
            let w: Vec<f64> = self.offsets.iter().map(|&o| (o as f64).powi(k as i32)).collect();
            let mut var = 0.0;
            let mut mean = 0.0;
            for i in 0..s {
                mean += w[i] * self.moment_idx(&[i]);
                for j in 0..s {
                    var += w[i] * w[j] * self.moment_idx(&[i, j]);
                }
            }
            var -= mean * mean;
            let scale = w.iter().map(|x| x * x).sum::<f64>().max(1.0);
            if var > DETERMINISM_TOL * scale {
                return Ok(k);
            }
        }
        Err(Error::DegenerateModel(format!("row moments up to order {kmax} are deterministic")))
    }

    /// Number of offsets.
    pub fn width(&self) -> usize {
        self.offsets.len()
    }

    pub fn offset_index(&self, o: i64) -> Result<usize> {
        self.offsets.binary_search(&o).map_err(|_| Error::UnsupportedOffset(o))
    }

    /// Largest site separation at which two rows can be dependent.
    pub fn interaction_range(&self) -> i64 {
        match &self.family {
            Family::ProductIid { .. } => 0,
            Family::Landscape { .. } => self.offsets[self.offsets.len() - 1] - self.offsets[0],
            Family::TwoStepNn { .. } => 1,
        }
    }

    /// Largest absolute offset.
    pub fn max_step(&self) -> i64 {
        self.offsets.iter().map(|o| o.abs()).max().unwrap_or(0)
    }

    /// Annealed masses `E[v(o)]` in offset order.
    pub fn annealed_unit_masses(&self) -> Vec<f64> {
        (0..self.width()).map(|i| self.moment_idx(&[i])).collect()
    }

    fn moment_idx(&self, idx: &[usize]) -> f64 {
        let sites = vec![0i64; idx.len()];
        self.joint_moment_idx(&sites, idx)
    }

    /// `E[prod_i v(o_i)]` at a single site, `o_i` given as offsets.
    pub fn row_moment(&self, offsets: &[i64]) -> Result<f64> {
        let idx = offsets.iter().map(|&o| self.offset_index(o)).collect::<Result<Vec<_>>>()?;
        Ok(self.moment_idx(&idx))
    }

    /// Exact `E[prod_j v_{x_j}(o_j)]` with `o_j` given as offset indices.
    pub fn joint_moment_idx(&self, sites: &[i64], idx: &[usize]) -> f64 {
        debug_assert_eq!(sites.len(), idx.len());
        if sites.len() <= 1 || matches!(self.family, Family::ProductIid { .. }) {
            return self.component_moment(sites, idx);
        }
        // Rows farther apart than the interaction range are independent.
        let mut order: Vec<usize> = (0..sites.len()).collect();
        order.sort_by_key(|&i| sites[i]);
        let range = self.interaction_range();
        let mut total = 1.0;
        let mut start = 0;
        for end in 1..=order.len() {
            if end == order.len() || sites[order[end]] - sites[order[end - 1]] > range {
                let s: Vec<i64> = order[start..end].iter().map(|&i| sites[i]).collect();
                let j: Vec<usize> = order[start..end].iter().map(|&i| idx[i]).collect();
                total *= self.component_moment(&s, &j);
                start = end;
            }
        }
        total
    }

    fn component_moment(&self, sites: &[i64], idx: &[usize]) -> f64 {
        match (&self.family, &self.sampler) {
            (Family::ProductIid { law }, _) => {
                let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
                for (&x, &i) in sites.iter().zip(idx) {
                    groups.entry(x).or_default().push(i);
                }
                groups.values().map(|g| law.moment(g)).product()
            }
            (Family::Landscape { b_profile, .. }, Sampler::Landscape { exact_atoms, .. }) => {
                landscape_moment(&self.offsets, b_profile, exact_atoms, sites, idx)
            }
            (Family::TwoStepNn { inner }, _) => two_step_moment(inner, &self.offsets, sites, idx),
            _ => unreachable!(),
        }
    }

    /// Fills `out` with the row at `key`. Pure in `key`.
    #[inline]
    pub fn fill_row(&self, key: EnvKey, out: &mut [f64]) {
        match (&self.family, &self.sampler) {
            (Family::ProductIid { law }, Sampler::Product(s)) => {
                s.fill(law, env_uniform(key.seed, key.r, key.x, 0), out);
            }
            (Family::Landscape { b_profile, .. }, Sampler::Landscape { weight, .. }) => {
                let mut total = 0.0;
                for ((o, b), slot) in self.offsets.iter().zip(b_profile).zip(out.iter_mut()) {
                    let w = weight.sample(env_uniform(key.seed, key.r, key.x + o, 1));
                    *slot = b * w.exp();
                    total += *slot;
                }
                out.iter_mut().for_each(|v| *v /= total);
            }
            (Family::TwoStepNn { inner }, Sampler::TwoStep(s)) => {
                // Base-lattice site 2x; first layer at time 2r, second at 2r+1.
                let (r1, r2, b) = (2 * key.r, 2 * key.r + 1, 2 * key.x);
                let mut first = [0.0; 2];
                let mut left = [0.0; 2];
                let mut right = [0.0; 2];
                s.fill(inner, env_uniform(key.seed, r1, b, 0), &mut first);
                s.fill(inner, env_uniform(key.seed, r2, b - 1, 0), &mut left);
                s.fill(inner, env_uniform(key.seed, r2, b + 1, 0), &mut right);
                out[0] = first[0] * left[0];
                out[1] = first[0] * left[1] + first[1] * right[0];
                out[2] = first[1] * right[1];
            }
            _ => unreachable!(),
        }
    }

    /// Row reader for all sites at one time, with the time part of the hash
    /// computed once.
    pub fn time_slice(&self, seed: u64, r: u64) -> TimeSlice<'_> {
        TimeSlice { model: self, seed, r, time_hash: hash_time(seed, r) }
    }

    pub fn sample_row(&self, key: EnvKey) -> RowPMF {
        let mut probs = vec![0.0; self.width()];
        self.fill_row(key, &mut probs);
        RowPMF { offsets: self.offsets.clone(), probs }
    }

    /// Whether every row equals the annealed row almost surely.
    pub fn is_deterministic(&self) -> bool {
        match &self.family {
            Family::ProductIid { law } => law.is_deterministic(),
            _ => false,
        }
    }

    /// Exact `E[v(i) v(j)] - E v(i) E v(j)` for two rows at site separation `d`.
    pub fn pair_covariance(&self, d: i64, i: usize, j: usize) -> f64 {
        self.joint_moment_idx(&[d, 0], &[i, j]) - self.moment_idx(&[i]) * self.moment_idx(&[j])
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

fn landscape_moment(offsets: &[i64], b: &[f64], atoms: &[(f64, f64)], sites: &[i64], idx: &[usize]) -> f64 {
    let mut window: Vec<i64> = sites.iter().flat_map(|x| offsets.iter().map(move |o| x + o)).collect();
    window.sort_unstable();
    window.dedup();
    let pos = |y: i64| window.binary_search(&y).expect("site inside window");
    let mut weights = vec![0.0; window.len()];
    let mut total = 0.0;
    enumerate_atoms(atoms, &mut weights, 0, 1.0, &mut |w, prob| {
        let mut prod = 1.0;
        for (&x, &i) in sites.iter().zip(idx) {
            let denom: f64 = offsets.iter().zip(b).map(|(o, bo)| bo * w[pos(x + o)].exp()).sum();
            prod *= b[i] * w[pos(x + offsets[i])].exp() / denom;
        }
        total += prob * prod;
    });
    total
}

fn enumerate_atoms(atoms: &[(f64, f64)], w: &mut Vec<f64>, depth: usize, prob: f64, f: &mut impl FnMut(&[f64], f64)) {
    if depth == w.len() {
        f(w, prob);
        return;
    }
    for &(p, v) in atoms {
        if p == 0.0 {
            continue;
        }
        w[depth] = v;
        enumerate_atoms(atoms, w, depth + 1, prob * p, f);
    }
}

fn two_step_moment(inner: &RowLaw, offsets: &[i64], sites: &[i64], idx: &[usize]) -> f64 {
    // Each reduced offset o is reached by first steps s1 with s1 + s2 = 2o.
    let k = sites.len();
    let choices: Vec<Vec<(usize, usize)>> = idx
        .iter()
        .map(|&i| match offsets[i] {
            -1 => vec![(0, 0)],
            0 => vec![(0, 1), (1, 0)],
            1 => vec![(1, 1)],
            _ => vec![],
        })
        .collect();
    let mut total = 0.0;
    let mut pick = vec![0usize; k];
    loop {
        let mut first: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        let mut second: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for j in 0..k {
            let (s1, s2) = choices[j][pick[j]];
            let base = 2 * sites[j];
            first.entry(base).or_default().push(s1);
            let mid = base + if s1 == 0 { -1 } else { 1 };
            second.entry(mid).or_default().push(s2);
        }
        total += first.values().chain(second.values()).map(|g| inner.moment(g)).product::<f64>();
        // odometer
        let mut j = 0;
        loop {
            if j == k {
                return total;
            }
            pick[j] += 1;
            if pick[j] < choices[j].len() {
                break;
            }
            pick[j] = 0;
            j += 1;
        }
    }
}

/// Product model with finitely many rows.
pub fn make_product_model(offsets: &[i64], atoms: &[(f64, Vec<f64>)]) -> Result<ModelSpec> {
    let law = RowLaw::Atomic(atoms.iter().map(|(p, r)| RowAtom { prob: *p, row: r.clone() }).collect());
    make_product_model_with_law("product", offsets, law)
}

pub fn make_product_model_with_law(name: &str, offsets: &[i64], law: RowLaw) -> Result<ModelSpec> {
    check_offsets(offsets)?;
    law.validate(offsets.len())?;
    if law.is_deterministic() {
        return Err(Error::DegenerateModel("all rows are identical".into()));
    }
    ModelSpec::build(name.into(), Family::ProductIid { law }, offsets.to_vec())
}

/// Non-random kernel `K(x, x+o) = row(o)`. There is no random row moment,
/// so the scaling order `p` is supplied by the caller.
pub fn make_deterministic_model(offsets: &[i64], row: Vec<f64>, p: u32) -> Result<ModelSpec> {
    check_offsets(offsets)?;
    let law = RowLaw::Atomic(vec![RowAtom { prob: 1.0, row }]);
    law.validate(offsets.len())?;
    if p == 0 {
        return Err(Error::InvalidArgument("scaling order must be positive".into()));
    }
    let sampler = Sampler::Product(RowSampler::new(&law));
    let model = ModelSpec {
        name: "deterministic".into(),
        family: Family::ProductIid { law },
        offsets: offsets.to_vec(),
        lattice_scale: 1.0,
        symmetry_order_p: p,
        seed: 0,
        sampler,
    };
    model.check_aperiodic()?;
    Ok(model)
}

/// Product model whose rows are affine in one scalar weight.
pub fn make_affine_model(name: &str, offsets: &[i64], base: Vec<f64>, slope: Vec<f64>, weight: ScalarLaw) -> Result<ModelSpec> {
    make_product_model_with_law(name, offsets, RowLaw::Affine { base, slope, weight })
}

/// Random landscape model `b(o) e^{ω_{x+o}} / Σ b e^ω`. Continuous weight
/// laws are discretized into `quadrature_atoms` atoms for exact moments.
pub fn make_landscape_model(offsets: &[i64], b_profile: &[f64], weight: ScalarLaw, quadrature_atoms: usize) -> Result<ModelSpec> {
    check_offsets(offsets)?;
    weight.validate("weight_law")?;
    if b_profile.len() != offsets.len() || b_profile.iter().any(|b| *b < 0.0) {
        return Err(Error::Config { field: "b_profile".into(), msg: "must be nonnegative and aligned with offsets".into() });
    }
    match offsets.binary_search(&0) {
        Ok(i) if b_profile[i] > 0.0 => {}
        _ => return Err(Error::Config { field: "b_profile".into(), msg: "b(0) must be positive".into() }),
    }
    let active: Vec<i64> = offsets.iter().zip(b_profile).filter(|(_, b)| **b > 0.0).map(|(o, _)| *o).collect();
    let g = active.iter().fold(0i64, |g, &o| gcd(g, o));
    if g != 1 {
        return Err(Error::PeriodicSupport(g));
    }
    if weight.variance() < DETERMINISM_TOL {
        return Err(Error::DegenerateModel("landscape weights are deterministic".into()));
    }
    let family = Family::Landscape { b_profile: b_profile.to_vec(), weight, quadrature_atoms: quadrature_atoms.max(1) };
    ModelSpec::build("landscape".into(), family, offsets.to_vec())
}

/// Composes two nearest-neighbour layers (`inner` is a row law on `{-1, +1}`)
/// into a kernel on `2Z`, reported on the reduced lattice with offsets `{-1, 0, 1}`.
pub fn two_step_reduce(name: &str, inner: RowLaw) -> Result<ModelSpec> {
    inner.validate(2)?;
    if inner.is_deterministic() {
        return Err(Error::DegenerateModel("nearest-neighbour rows are identical".into()));
    }
    ModelSpec::build(name.into(), Family::TwoStepNn { inner }, vec![-1, 0, 1])
}

fn check_offsets(offsets: &[i64]) -> Result<()> {
    if offsets.is_empty() || offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config { field: "offsets".into(), msg: "must be nonempty and strictly increasing".into() });
    }
    Ok(())
}

/// Rescales the lattice so that the annealed step law has variance 1.
pub fn normalize_lattice(model: &ModelSpec) -> Result<ModelSpec> {
    let mu = model.annealed_unit_masses();
    let m1: f64 = model.offsets.iter().zip(&mu).map(|(o, m)| *o as f64 * m).sum();
    let m2: f64 = model.offsets.iter().zip(&mu).map(|(o, m)| (*o as f64).powi(2) * m).sum();
    let var = m2 - m1 * m1;
    if var <= 1e-300 {
        return Err(Error::ZeroVariance);
    }
    let mut out = model.clone();
    out.lattice_scale = 1.0 / var.sqrt();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Named models used across the toolkit.

/// Offsets `{0, 1}`, rows `[3/4, 1/4]` or `[1/4, 3/4]` with equal probability.
pub fn s1_model() -> ModelSpec {
    let mut m = make_product_model(&[0, 1], &[(0.5, vec![0.75, 0.25]), (0.5, vec![0.25, 0.75])]).expect("valid model");
    m.name = "s1".into();
    m
}

/// Offsets `{-1, 0, 1}`, rows `((1-u)/2, u, (1-u)/2)` with `u ~ Uniform[0, 1]`.
pub fn hass_model() -> ModelSpec {
    make_affine_model("hass", &[-1, 0, 1], vec![0.5, 0.0, 0.5], vec![-0.5, 1.0, -0.5], ScalarLaw::uniform01()).expect("valid model")
}

/// Nearest-neighbour walk stepping `+1` with probability `ω ~ Uniform[0,1]`,
/// reduced to two steps per time unit.
pub fn nn_uniform_two_step() -> ModelSpec {
    two_step_reduce("nn_uniform_two_step", RowLaw::Affine { base: vec![1.0, 0.0], slope: vec![-1.0, 1.0], weight: ScalarLaw::uniform01() })
        .expect("valid model")
}

// ---------------------------------------------------------------------------
// JSON configuration.

/// Structured model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub family: FamilyKind,
    #[serde(default)]
    pub offsets: Option<Vec<i64>>,
    #[serde(default)]
    pub atoms: Option<Vec<RowAtom>>,
    #[serde(default)]
    pub affine: Option<AffineConfig>,
    #[serde(default)]
    pub b_profile: Option<Vec<f64>>,
    #[serde(default)]
    pub weight_law: Option<ScalarLaw>,
    #[serde(default)]
    pub quadrature_atoms: Option<usize>,
    /// Nearest-neighbour row law on `{-1, +1}` for `two_step_nn`.
    #[serde(default)]
    pub nn_row: Option<NnRowConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    ProductIid,
    Landscape,
    TwoStepNn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub base: Vec<f64>,
    pub slope: Vec<f64>,
    pub weight: ScalarLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnRowConfig {
    #[serde(default)]
    pub atoms: Option<Vec<RowAtom>>,
    #[serde(default)]
    pub affine: Option<AffineConfig>,
}

fn missing(field: &str) -> Error {
    Error::Config { field: field.into(), msg: "required for this family".into() }
}

fn row_law(atoms: &Option<Vec<RowAtom>>, affine: &Option<AffineConfig>, field: &str) -> Result<RowLaw> {
    match (atoms, affine) {
        (Some(a), None) => Ok(RowLaw::Atomic(a.clone())),
        (None, Some(a)) => Ok(RowLaw::Affine { base: a.base.clone(), slope: a.slope.clone(), weight: a.weight.clone() }),
        _ => Err(Error::Config { field: field.into(), msg: "exactly one of `atoms` or `affine` is required".into() }),
    }
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config { field: format!("line {} column {}", e.line(), e.column()), msg: e.to_string() })
    }

    pub fn build(&self) -> Result<ModelSpec> {
        let mut model = match self.family {
            FamilyKind::ProductIid => {
                let offsets = self.offsets.as_ref().ok_or_else(|| missing("offsets"))?;
                make_product_model_with_law("product", offsets, row_law(&self.atoms, &self.affine, "atoms")?)?
            }
            FamilyKind::Landscape => {
                let offsets = self.offsets.as_ref().ok_or_else(|| missing("offsets"))?;
                let b = self.b_profile.as_ref().ok_or_else(|| missing("b_profile"))?;
                let w = self.weight_law.clone().ok_or_else(|| missing("weight_law"))?;
                make_landscape_model(offsets, b, w, self.quadrature_atoms.unwrap_or(4))?
            }
            FamilyKind::TwoStepNn => {
                let nn = self.nn_row.as_ref().ok_or_else(|| missing("nn_row"))?;
                two_step_reduce("two_step_nn", row_law(&nn.atoms, &nn.affine, "nn_row")?)?
            }
        };
        if let Some(name) = &self.name {
            model.name = name.clone();
        }
        model.seed = self.seed;
        if self.normalize {
            model = normalize_lattice(&model)?;
        }
        Ok(model)
    }
}

pub fn load_model(path: &std::path::Path) -> Result<ModelSpec> {
    ModelConfig::parse(&std::fs::read_to_string(path)?)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_slice_matches_fill_row() {
        for m in [s1_model(), hass_model(), nn_uniform_two_step()] {
            let slice = m.time_slice(9, 4);
            let (mut a, mut b) = (vec![0.0; m.width()], vec![0.0; m.width()]);
            for x in -20..20 {
                slice.fill(x, &mut a);
                m.fill_row(EnvKey { seed: 9, r: 4, x }, &mut b);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn s1_basics() {
        let m = s1_model();
        assert_eq!(m.symmetry_order_p, 1);
        assert_eq!(m.row_moment(&[1]).unwrap(), 0.5);
        assert!((m.row_moment(&[1, 1]).unwrap() - 5.0 / 16.0).abs() < 1e-15);
        assert!(matches!(m.row_moment(&[2]), Err(Error::UnsupportedOffset(2))));
    }

    #[test]
    fn hass_order_and_moment() {
        let m = hass_model();
        assert_eq!(m.symmetry_order_p, 2);
        assert!((m.row_moment(&[0, 0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn discretized_hass_converges() {
        let mut prev = f64::INFINITY;
        for n in [2usize, 4, 8, 16] {
            let law = ScalarLaw::Atoms { atoms: quantile_atoms(n) };
            let m = make_affine_model("h", &[-1, 0, 1], vec![0.5, 0.0, 0.5], vec![-0.5, 1.0, -0.5], law).unwrap();
            let err = (m.row_moment(&[0, 0]).unwrap() - 1.0 / 3.0).abs();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-3);
    }

    fn quantile_atoms(n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| (1.0 / n as f64, (i as f64 + 0.5) / n as f64)).collect()
    }

    #[test]
    fn nearest_neighbour_is_periodic() {
        let r = make_product_model(&[-1, 1], &[(0.5, vec![0.25, 0.75]), (0.5, vec![0.75, 0.25])]);
        assert!(matches!(r, Err(Error::PeriodicSupport(2))));
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let r = make_product_model(&[0, 1], &[(0.5, vec![0.5, 0.5]), (0.5, vec![0.5, 0.5])]);
        assert!(matches!(r, Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn landscape_construction() {
        let w = ScalarLaw::Atoms { atoms: vec![(0.5, -1.0), (0.5, 1.0)] };
        let m = make_landscape_model(&[-1, 0, 1], &[1.0, 1.0, 1.0], w.clone(), 2).unwrap();
        assert_eq!(m.symmetry_order_p, 1);
        assert!(matches!(make_landscape_model(&[0], &[1.0], w, 2), Err(Error::PeriodicSupport(0))));
    }

    #[test]
    fn normalization() {
        let s1 = normalize_lattice(&s1_model()).unwrap();
        assert!((s1.lattice_scale - 2.0).abs() < 1e-12);
        let h = normalize_lattice(&hass_model()).unwrap();
        assert!((h.lattice_scale - 2f64.sqrt()).abs() < 1e-12);
        let again = normalize_lattice(&h).unwrap();
        assert_eq!(again.lattice_scale, h.lattice_scale);
    }

    #[test]
    fn sampled_rows() {
        let m = s1_model();
        let key = EnvKey { seed: 3, r: 10, x: -4 };
        assert_eq!(m.sample_row(key), m.sample_row(key));
        for x in 0..50 {
            let row = m.sample_row(EnvKey { seed: 1, r: 0, x }).probs;
            assert!(row == vec![0.75, 0.25] || row == vec![0.25, 0.75]);
        }
    }

    #[test]
    fn landscape_neighbours_share_weights() {
        let w = ScalarLaw::Atoms { atoms: vec![(0.5, -1.0), (0.5, 1.0)] };
        let m = make_landscape_model(&[-1, 0, 1], &[1.0, 1.0, 1.0], w, 2).unwrap();
        for x in -20..20 {
            let a = m.sample_row(EnvKey { seed: 9, r: 4, x }).probs;
            let b = m.sample_row(EnvKey { seed: 9, r: 4, x: x + 1 }).probs;
            // Row x weights sites x-1, x, x+1; row x+1 weights x, x+1, x+2.
            // The ratio of the shared weights e^{ω_x} / e^{ω_{x+1}} must agree.
            assert!((a[1] / a[2] - b[0] / b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_rows_are_probability_vectors() {
        let m = nn_uniform_two_step();
        assert_eq!(m.symmetry_order_p, 1);
        for x in -10..10 {
            let row = m.sample_row(EnvKey { seed: 5, r: 2, x }).probs;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // E v(0) = E[a(1-b) + (1-a) b'] = 1/2.
        assert!((m.row_moment(&[0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let bad = r#"{"family":"product_iid","offsets":[0,1],"atoms":[],"colour":1}"#;
        assert!(matches!(ModelConfig::parse(bad), Err(Error::Config { .. })));
    }

    #[test]
    fn config_builds_s1() {
        let text = r#"{"name":"s1","family":"product_iid","offsets":[0,1],
            "atoms":[{"prob":0.5,"row":[0.75,0.25]},{"prob":0.5,"row":[0.25,0.75]}],"seed":11}"#;
        let m = ModelConfig::parse(text).unwrap().build().unwrap();
        assert_eq!(m.name, "s1");
        assert_eq!(m.seed, 11);
        assert!((m.lattice_scale - 2.0).abs() < 1e-12);
    }
}
