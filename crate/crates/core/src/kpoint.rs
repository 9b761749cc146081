//! k-point motions: exact joint one-step laws, exponential tilts, joint
//! cumulants, the correlation function `ζ`, and path simulators.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annealed::{annealed_law, log_mgf};
use crate::error::{Error, Result};
use crate::model::{EnvKey, ModelSpec};
use crate::rng::mix64;

/// Largest number of walkers for which joint tables are built.
pub const MAX_K: usize = 6;

/// Exact joint law of one step of `k` walkers started at `base`.
///
/// `probs` is indexed in mixed radix over offset indices, walker 0 most
/// significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointStepPMF {
    pub k: usize,
    pub base: Vec<i64>,
    pub scale: f64,
    pub offsets: Vec<i64>,
    pub probs: Vec<f64>,
}

impl JointStepPMF {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Offset indices of table entry `e`.
    pub fn decode(&self, mut e: usize, out: &mut [usize]) {
        let s = self.offsets.len();
        for slot in out.iter_mut().rev() {
            *slot = e % s;
            e /= s;
        }
    }

    /// Iterates `(offsets, probability)` over the table.
    pub fn entries(&self) -> impl Iterator<Item = (Vec<i64>, f64)> + '_ {
        let mut idx = vec![0usize; self.k];
        (0..self.len()).map(move |e| {
            self.decode(e, &mut idx);
            (idx.iter().map(|&i| self.offsets[i]).collect(), self.probs[e])
        })
    }

    /// Sum of the scaled offsets of entry `e`.
    fn step_sum(&self, e: usize) -> f64 {
        let mut idx = vec![0usize; self.k];
        self.decode(e, &mut idx);
        self.scale * idx.iter().map(|&i| self.offsets[i] as f64).sum::<f64>()
    }

    /// `E[prod_i (c Δ_i)^{r_i}]`.
    pub fn moment(&self, exponents: &[u32]) -> f64 {
        let mut idx = vec![0usize; self.k];
        let mut acc = 0.0;
        for e in 0..self.len() {
            self.decode(e, &mut idx);
            let mut term = self.probs[e];
            for (i, &r) in exponents.iter().enumerate() {
                if r > 0 {
                    term *= (self.scale * self.offsets[idx[i]] as f64).powi(r as i32);
                }
            }
            acc += term;
        }
        acc
    }

    /// Law of walker `i`'s offset.
    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.offsets.len()];
        let mut idx = vec![0usize; self.k];
        for e in 0..self.len() {
            self.decode(e, &mut idx);
            out[idx[i]] += self.probs[e];
        }
        out
    }
}

/// `p^(k)(x, ·)` as an exact table.
pub fn joint_kernel_pmf(model: &ModelSpec, x: &[i64]) -> Result<JointStepPMF> {
    let k = x.len();
    if k == 0 || k > MAX_K {
        return Err(Error::TooManyParticles { k, max: MAX_K });
    }
    let s = model.width();
    let size = s.pow(k as u32);
    let mut probs = Vec::with_capacity(size);
    let mut idx = vec![0usize; k];
    for e in 0..size {
        let mut r = e;
        for slot in idx.iter_mut().rev() {
            *slot = r % s;
            r /= s;
        }
        probs.push(model.joint_moment_idx(x, &idx));
    }
    Ok(JointStepPMF { k, base: x.to_vec(), scale: model.lattice_scale, offsets: model.offsets.clone(), probs })
}

/// `log Σ e^{β Σ_i c o_i} p^(k)(x, o)`.
pub fn tilt_log_normalizer(pk: &JointStepPMF, beta: f64) -> f64 {
    let expo: Vec<f64> = (0..pk.len()).map(|e| beta * pk.step_sum(e)).collect();
    let shift = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    shift + expo.iter().zip(&pk.probs).map(|(a, p)| (a - shift).exp() * p).sum::<f64>().ln()
}

/// Exponentially tilted table `∝ e^{β Σ c o_i} p^(k)`.
pub fn tilted_kernel_pmf(pk: &JointStepPMF, beta: f64) -> JointStepPMF {
    let log_z = tilt_log_normalizer(pk, beta);
    let probs = (0..pk.len()).map(|e| (beta * pk.step_sum(e) - log_z).exp() * pk.probs[e]).collect();
    JointStepPMF { probs, ..pk.clone() }
}

/// Joint cumulant `κ(Δ_{j_1}, ..., Δ_{j_m})` of scaled one-step increments of
/// walkers started at `x`, by the set-partition formula.
pub fn joint_cumulant(model: &ModelSpec, j: &[usize], x: &[i64]) -> Result<f64> {
    let pk = joint_kernel_pmf(model, x)?;
    if let Some(&bad) = j.iter().find(|&&i| i >= x.len()) {
        return Err(Error::InvalidArgument(format!("walker index {bad} out of range for k = {}", x.len())));
    }
    Ok(cumulant_from_table(&pk, j))
}

fn cumulant_from_table(pk: &JointStepPMF, j: &[usize]) -> f64 {
    let m = j.len();
    // Moments of every sub-multiset, keyed by bitmask.
    let mut sub = vec![0.0; 1 << m];
    let mut idx = vec![0usize; pk.k];
    for e in 0..pk.len() {
        pk.decode(e, &mut idx);
        let vals: Vec<f64> = j.iter().map(|&w| pk.scale * pk.offsets[idx[w]] as f64).collect();
        for (mask, slot) in sub.iter_mut().enumerate() {
            let mut t = pk.probs[e];
            for (b, v) in vals.iter().enumerate() {
                if mask & (1 << b) != 0 {
                    t *= v;
                }
            }
            *slot += t;
        }
    }
    let mut total = 0.0;
    for_each_partition(m, &mut |blocks: &[u32]| {
        let nb = blocks.len();
        let sign = if nb % 2 == 1 { 1.0 } else { -1.0 };
        let fact: f64 = (1..nb).map(|i| i as f64).product();
        total += sign * fact * blocks.iter().map(|&b| sub[b as usize]).product::<f64>();
    });
    total
}

/// Calls `f` with the block bitmasks of every set partition of `{0..m}`.
pub fn for_each_partition(m: usize, f: &mut impl FnMut(&[u32])) {
    fn rec(i: usize, m: usize, blocks: &mut Vec<u32>, f: &mut impl FnMut(&[u32])) {
        if i == m {
            f(blocks);
            return;
        }
        for b in 0..blocks.len() {
            blocks[b] |= 1 << i;
            rec(i + 1, m, blocks, f);
            blocks[b] &= !(1 << i);
        }
        blocks.push(1 << i);
        rec(i + 1, m, blocks, f);
        blocks.pop();
    }
    rec(0, m, &mut Vec::new(), f);
}

/// `(p!)^{-2} [Σ (c o_1)^p (c o_2)^p p^(2)((z,0), o) - m_p^2]`.
pub fn zeta(model: &ModelSpec, z: i64) -> f64 {
    let p = model.symmetry_order_p;
    let pk = joint_kernel_pmf(model, &[z, 0]).expect("two walkers");
    let mp: f64 = annealed_law(model).points().map(|(x, m)| x.powi(p as i32) * m).sum();
    let fact: f64 = (1..=p).map(|i| i as f64).product();
    (pk.moment(&[p, p]) - mp * mp) / (fact * fact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub separation: i64,
    pub max_gap: f64,
    /// Exponent tuple attaining the maximum.
    pub argmax: Vec<u32>,
}

/// For walkers at `0, d, 2d, ...`, the largest gap between a mixed joint
/// moment of scaled increments and its independent counterpart, over
/// exponents `0 ≤ r_i ≤ 4p - 1` with `2p ≤ Σ r_i ≤ 4p`.
pub fn decay_profile(model: &ModelSpec, k: usize, separations: &[i64]) -> Result<Vec<DecayRow>> {
    if !(2..=4).contains(&k) {
        return Err(Error::TooManyParticles { k, max: 4 });
    }
    let p = model.symmetry_order_p;
    let mu = annealed_law(model);
    let single: Vec<f64> = (0..4 * p).map(|r| mu.points().map(|(x, m)| x.powi(r as i32) * m).sum()).collect();
    let mut rows = Vec::with_capacity(separations.len());
    for &d in separations {
        let base: Vec<i64> = (0..k as i64).map(|i| i * d).collect();
        let pk = joint_kernel_pmf(model, &base)?;
        let mut best = (0.0, vec![0; k]);
        let mut r = vec![0u32; k];
        loop {
            let sum: u32 = r.iter().sum();
            if (2 * p..=4 * p).contains(&sum) {
                let indep: f64 = r.iter().map(|&ri| single[ri as usize]).product();
                let gap = (pk.moment(&r) - indep).abs();
                if gap > best.0 {
                    best = (gap, r.clone());
                }
            }
            // odometer over 0..4p-1
            let mut i = 0;
            while i < k {
                r[i] += 1;
                if r[i] < 4 * p {
                    break;
                }
                r[i] = 0;
                i += 1;
            }
            if i == k {
                break;
            }
        }
        rows.push(DecayRow { separation: d, max_gap: best.0, argmax: best.1 });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulantAuditRow {
    pub m: usize,
    pub indices: Vec<usize>,
    pub base: Vec<i64>,
    pub value: f64,
    /// Whether the vanishing rule forces this cumulant to be zero.
    pub must_vanish: bool,
    pub pass: bool,
}

/// Checks every sorted mixed multi-index of order `m ≤ 2p` on each base
/// tuple: orders below `2p` must vanish, and at `2p` only indices of the form
/// `{a × p, b × p}` may be nonzero.
pub fn cumulant_audit(model: &ModelSpec, bases: &[Vec<i64>], tol: f64) -> Result<Vec<CumulantAuditRow>> {
    let p = model.symmetry_order_p as usize;
    let mut rows = Vec::new();
    for base in bases {
        let pk = joint_kernel_pmf(model, base)?;
        let k = base.len();
        for m in 2..=2 * p {
            let mut j = vec![0usize; m];
            loop {
                let mut counts = vec![0usize; k];
                j.iter().for_each(|&w| counts[w] += 1);
                let distinct = counts.iter().filter(|&&c| c > 0).count();
                if distinct >= 2 {
                    let paired = m == 2 * p && distinct == 2 && counts.iter().all(|&c| c == 0 || c == p);
                    let value = cumulant_from_table(&pk, &j);
                    let must_vanish = !paired;
                    rows.push(CumulantAuditRow {
                        m,
                        indices: j.clone(),
                        base: base.clone(),
                        value,
                        must_vanish,
                        pass: !must_vanish || value.abs() <= tol,
                    });
                }
                if !next_sorted_multiindex(&mut j, k) {
                    break;
                }
            }
        }
    }
    Ok(rows)
}

fn next_sorted_multiindex(j: &mut [usize], k: usize) -> bool {
    let m = j.len();
    let mut i = m;
    while i > 0 {
        i -= 1;
        if j[i] + 1 < k {
            let v = j[i] + 1;
            j[i..].iter_mut().for_each(|x| *x = v);
            return true;
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Simulation.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Annealed,
    Tilted(f64),
    Quenched(u64),
}

/// Positions are unit-lattice sites; multiply by `scale` for positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KPointPath {
    pub k: usize,
    pub scale: f64,
    pub positions: Vec<Vec<i64>>,
    pub measure: Measure,
}

/// Cached tilted tables keyed by the configuration relative to walker 0.
pub struct TiltedKernels<'a> {
    model: &'a ModelSpec,
    beta: f64,
    range: i64,
    log_m: f64,
    single_cdf: Vec<f64>,
    cache: HashMap<Vec<i64>, TiltedEntry>,
}

struct TiltedEntry {
    cdf: Vec<f64>,
    /// `log Σ e^{βΣco} p^(k) - k log M(β)`.
    log_weight: f64,
}

impl<'a> TiltedKernels<'a> {
    pub fn new(model: &'a ModelSpec, beta: f64) -> Self {
        let mu = annealed_law(model);
        let log_m = log_mgf(&mu, beta);
        let mut acc = 0.0;
        let single_cdf = model
            .offsets
            .iter()
            .zip(model.annealed_unit_masses())
            .map(|(&o, m)| {
                acc += m * (beta * model.lattice_scale * o as f64 - log_m).exp();
                acc
            })
            .collect();
        TiltedKernels { model, beta, range: model.interaction_range(), log_m, single_cdf, cache: HashMap::new() }
    }

    pub fn log_mgf(&self) -> f64 {
        self.log_m
    }

    fn isolated(&self, x: &[i64]) -> bool {
        let mut s = x.to_vec();
        s.sort_unstable();
        s.windows(2).all(|w| w[1] - w[0] > self.range)
    }

    /// Advances `x` by one tilted step and returns the log-weight increment
    /// `log E[e^{βΣΔ}] - k log M(β)` at the pre-step configuration.
    pub fn step<R: Rng>(&mut self, x: &mut [i64], rng: &mut R) -> Result<f64> {
        if self.isolated(x) {
            for xi in x.iter_mut() {
                *xi += self.model.offsets[sample_cdf(&self.single_cdf, rng.gen())];
            }
            return Ok(0.0);
        }
        let key: Vec<i64> = x.iter().map(|&xi| xi - x[0]).collect();
        if !self.cache.contains_key(&key) {
            let pk = joint_kernel_pmf(self.model, &key)?;
            let log_z = tilt_log_normalizer(&pk, self.beta);
            let tilted = tilted_kernel_pmf(&pk, self.beta);
            let mut acc = 0.0;
            let cdf = tilted
                .probs
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect();
            self.cache.insert(key.clone(), TiltedEntry { cdf, log_weight: log_z - x.len() as f64 * self.log_m });
        }
        let entry = &self.cache[&key];
        let mut e = sample_cdf(&entry.cdf, rng.gen());
        let s = self.model.width();
        for xi in x.iter_mut().rev() {
            *xi += self.model.offsets[e % s];
            e /= s;
        }
        Ok(entry.log_weight)
    }
}

#[inline]
pub(crate) fn sample_cdf(cdf: &[f64], u: f64) -> usize {
    let target = u * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= target).min(cdf.len() - 1)
}

/// Simulates `k` walkers from `x0` for `steps` steps.
///
/// Annealed paths draw a fresh environment slice per step from the walker
/// RNG, so walkers sharing or neighbouring sites see correctly correlated
/// rows. Quenched paths read the fixed environment `EnvKey(seed, r, x)`.
pub fn simulate_kpoint(model: &ModelSpec, x0: &[i64], steps: usize, measure: Measure, walker_seed: u64) -> Result<KPointPath> {
    let k = x0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(walker_seed);
    let mut x = x0.to_vec();
    let mut positions = Vec::with_capacity(steps + 1);
    positions.push(x.clone());
    let mut row = vec![0.0; model.width()];
    let mut cdf = vec![0.0; model.width()];
    let mut tilted = match measure {
        Measure::Tilted(beta) => {
            if k > MAX_K {
                return Err(Error::TooManyParticles { k, max: MAX_K });
            }
            Some(TiltedKernels::new(model, beta))
        }
        _ => None,
    };
    for r in 0..steps {
        match measure {
            Measure::Tilted(_) => {
                tilted.as_mut().expect("built above").step(&mut x, &mut rng)?;
            }
            Measure::Annealed | Measure::Quenched(_) => {
                let (seed, time) = match measure {
                    Measure::Quenched(seed) => (seed, r as u64),
                    _ => (mix64(rng.gen()), 0),
                };
                for xi in x.iter_mut() {
                    model.fill_row(EnvKey { seed, r: time, x: *xi }, &mut row);
                    let mut acc = 0.0;
                    for (c, v) in cdf.iter_mut().zip(&row) {
                        acc += v;
                        *c = acc;
                    }
                    *xi += model.offsets[sample_cdf(&cdf, rng.gen())];
                }
            }
        }
        positions.push(x.clone());
    }
    Ok(KPointPath { k, scale: model.lattice_scale, positions, measure })
}

/// `V(r) = Σ_{s<r} F(|R^i_s - R^j_s|)` on scaled positions, for `r = 0..=steps`.
pub fn additive_functional(path: &KPointPath, i: usize, j: usize, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    if i == j || i >= path.k || j >= path.k {
        return Err(Error::InvalidArgument(format!("need distinct walkers below {}, got {i} and {j}", path.k)));
    }
    let mut out = Vec::with_capacity(path.positions.len());
    let mut acc = 0.0;
    out.push(0.0);
    for pos in &path.positions[..path.positions.len() - 1] {
        acc += f(path.scale * (pos[i] - pos[j]).abs() as f64);
        out.push(acc);
    }
    Ok(out)
}
