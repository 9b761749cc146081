//! Exact computations on the annealed one-step law `μ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Finite measure on `scale * Z`, stored as sorted `(site, mass)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticePMF {
    pub scale: f64,
    pub masses: Vec<(i64, f64)>,
}

impl LatticePMF {
    pub fn new(scale: f64, mut masses: Vec<(i64, f64)>) -> Self {
        masses.sort_by_key(|m| m.0);
        let mut merged: Vec<(i64, f64)> = Vec::with_capacity(masses.len());
        for (x, m) in masses {
            match merged.last_mut() {
                Some(last) if last.0 == x => last.1 += m,
                _ => merged.push((x, m)),
            }
        }
        LatticePMF { scale, masses: merged }
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().map(|m| m.1).sum()
    }

    pub fn mass_at(&self, site: i64) -> f64 {
        self.masses.binary_search_by_key(&site, |m| m.0).map_or(0.0, |i| self.masses[i].1)
    }

    /// `(position, mass)` pairs on the scaled lattice.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.masses.iter().map(move |&(x, m)| (self.scale * x as f64, m))
    }

    pub fn mean(&self) -> f64 {
        self.points().map(|(x, m)| x * m).sum::<f64>() / self.total()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.points().map(|(x, m)| (x - mean).powi(2) * m).sum::<f64>() / self.total()
    }

    /// Law of the sum of two independent draws.
    pub fn convolve(&self, other: &LatticePMF) -> LatticePMF {
        assert!((self.scale - other.scale).abs() < 1e-15 * self.scale.abs().max(1.0));
        let pairs = self.masses.iter().flat_map(|&(x, a)| other.masses.iter().map(move |&(y, b)| (x + y, a * b))).collect();
        LatticePMF::new(self.scale, pairs)
    }
}

/// `μ(c·o) = E v(o)` on the scaled lattice.
pub fn annealed_law(model: &ModelSpec) -> LatticePMF {
    let masses = model.offsets.iter().copied().zip(model.annealed_unit_masses()).filter(|m| m.1 != 0.0).collect();
    LatticePMF::new(model.lattice_scale, masses)
}

/// `M(λ) = Σ e^{λx} μ(x)`.
pub fn mgf(mu: &LatticePMF, lambda: f64) -> f64 {
    mu.points().map(|(x, m)| (lambda * x).exp() * m).sum()
}

pub fn log_mgf(mu: &LatticePMF, lambda: f64) -> f64 {
    let shift = mu.points().map(|(x, _)| lambda * x).fold(f64::NEG_INFINITY, f64::max);
    shift + mu.points().map(|(x, m)| (lambda * x - shift).exp() * m).sum::<f64>().ln()
}

/// Mean of the exponentially tilted law, `M'(λ)/M(λ)`.
pub fn drift_function(mu: &LatticePMF, lambda: f64) -> f64 {
    let shift = mu.points().map(|(x, _)| lambda * x).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, m) in mu.points() {
        let w = (lambda * x - shift).exp() * m;
        num += x * w;
        den += w;
    }
    num / den
}

/// Raw moments `m_1..m_k` and cumulants `κ_1..κ_k` (index 0 holds order 1).
pub fn moments_and_cumulants(mu: &LatticePMF, k_max: usize) -> (Vec<f64>, Vec<f64>) {
    let total = mu.total();
    let m: Vec<f64> = (1..=k_max).map(|n| mu.points().map(|(x, w)| x.powi(n as i32) * w).sum::<f64>() / total).collect();
    let mut kappa = vec![0.0; k_max];
    for n in 1..=k_max {
        let mut acc = m[n - 1];
        for j in 1..n {
            acc -= binomial(n - 1, j - 1) * kappa[j - 1] * m[n - j - 1];
        }
        kappa[n - 1] = acc;
    }
    (m, kappa)
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Smallest `k` whose `k`-th row moment is random.
pub fn symmetry_order(model: &ModelSpec) -> Result<u32> {
    if model.symmetry_order_p == 0 {
        return Err(Error::DegenerateModel("no random row moment".into()));
    }
    Ok(model.symmetry_order_p)
}

/// `(4p - 1) / (4p)` as a numerator/denominator pair.
pub fn crossover_exponent(p: u32) -> (u32, u32) {
    (4 * p - 1, 4 * p)
}

pub fn beta_n(n: u64, p: u32) -> f64 {
    (n as f64).powf(-1.0 / (4.0 * p as f64))
}

/// `d_N = N · M'(β)/M(β)` with `β = N^{-1/(4p)}`.
pub fn drift_dn(mu: &LatticePMF, n: u64, p: u32) -> f64 {
    n as f64 * drift_function(mu, beta_n(n, p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTable {
    pub n: u64,
    pub p: u32,
    pub beta: f64,
    pub d_n: f64,
    pub d_tilde_n: f64,
    /// `(exponent, coefficient)` with strictly decreasing exponents.
    pub expansion_terms: Vec<(f64, f64)>,
}

impl DriftTable {
    pub fn gap_over_sqrt_n(&self) -> f64 {
        (self.d_n - self.d_tilde_n) / (self.n as f64).sqrt()
    }
}

/// Cumulant expansion of `d_N` in powers `N^{(4p-k)/(4p)}`, keeping the
/// exponents that are at least `1/2`.
pub fn drift_expansion(mu: &LatticePMF, n: u64, p: u32) -> Result<DriftTable> {
    let var = mu.variance();
    if (var - 1.0).abs() > 1e-10 {
        return Err(Error::NotNormalized(var));
    }
    let kmax = 2 * p as usize;
    let (_, kappa) = moments_and_cumulants(mu, kmax + 1);
    let nf = n as f64;
    let q = 4.0 * p as f64;
    let terms: Vec<(f64, f64)> = (0..=kmax).map(|k| ((q - k as f64) / q, kappa[k] / factorial(k))).collect();
    let d_tilde_n = terms.iter().map(|(e, c)| c * nf.powf(*e)).sum();
    Ok(DriftTable { n, p, beta: beta_n(n, p), d_n: drift_dn(mu, n, p), d_tilde_n, expansion_terms: terms })
}

/// `D_{N,t,x} = exp(N^{(2p-1)/(4p)} x + [β d_N - N log M(β)] t)`.
pub fn renorm_d(mu: &LatticePMF, n: u64, p: u32, d_n: f64, t: f64, x: f64) -> f64 {
    let nf = n as f64;
    let beta = beta_n(n, p);
    let space = nf.powf((2.0 * p as f64 - 1.0) / (4.0 * p as f64)) * x;
    (space + (beta * d_n - nf * log_mgf(mu, beta)) * t).exp()
}
