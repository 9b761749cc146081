//! Reference values for the limiting equation: the heat kernel, exponential
//! moments of Brownian local time and the first two moments of the solution
//! with delta initial data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};
use crate::phi::Phi;
use crate::quad::{composite_with, gauss_hermite, gauss_legendre};
use crate::rng::derive_seed;
use crate::stats::{kahan_sum, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMethod {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

impl OracleMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            OracleMethod::ClosedForm => "closed_form",
            OracleMethod::Quadrature => "quadrature",
            OracleMethod::MonteCarlo => "monte_carlo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub method: OracleMethod,
    /// Refinement-halving change for quadrature, rounding scale for closed forms.
    pub error_bound: f64,
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonpositiveTime(t))
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `(2πt)^{-1/2} e^{-x²/2t}`.
pub fn heat_kernel(t: f64, x: f64) -> Result<f64> {
    check_time(t)?;
    Ok((-x * x / (2.0 * t)).exp() / (2.0 * PI * t).sqrt())
}

/// Joint density of `(W_t, L_t)` for a rate-2 Brownian motion `W` from 0,
/// `L` its semimartingale local time at 0, at `l > 0`.
pub fn local_time_joint_density(t: f64, w: f64, l: f64) -> Result<f64> {
    check_time(t)?;
    if l < 0.0 {
        return Ok(0.0);
    }
    let u = (l + w.abs()) / SQRT_2;
    Ok(0.5 * u / (2.0 * PI * t.powi(3)).sqrt() * (-u * u / (2.0 * t)).exp())
}

/// Integrates `f` against `p_t` over `[lo, hi]`, doubling panels until stable.
pub(crate) fn heat_integral(t: f64, f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> Result<OracleResult> {
    check_time(t)?;
    let (x, w) = gauss_legendre(16);
    let norm = 1.0 / (2.0 * PI * t).sqrt();
    let g = |y: f64| f(y) * (-y * y / (2.0 * t)).exp() * norm;
    let mut prev = composite_with(&x, &w, g, lo, hi, 8);
    let mut panels = 16;
    loop {
        let v = composite_with(&x, &w, g, lo, hi, panels);
        let diff = (v - prev).abs();
        if diff <= 1e-13 * v.abs().max(1.0) || panels >= 4096 {
            return Ok(OracleResult { value: v, method: OracleMethod::Quadrature, error_bound: diff });
        }
        prev = v;
        panels *= 2;
    }
}

/// `∫ p_t(x) φ(x) dx`.
pub fn she_moment_k1(t: f64, phi: &Phi) -> Result<OracleResult> {
    check_time(t)?;
    let reach = 16.0 * t.sqrt();
    let (mut lo, mut hi) = phi.support(1e-300);
    if let Phi::Gauss { .. } = phi {
        lo = lo.max(-reach);
        hi = hi.min(reach);
        if lo >= hi {
            return Ok(OracleResult { value: 0.0, method: OracleMethod::Quadrature, error_bound: 1e-300 });
        }
    } else if !lo.is_finite() {
        lo = -reach;
        hi = reach;
    }
    heat_integral(t, |x| phi.eval(x), lo, hi)
}

/// `E[e^{γ L_t}]` for the local time at 0 of a rate-2 Brownian motion.
pub fn local_time_mgf(gamma: f64, t: f64) -> Result<OracleResult> {
    check_time(t)?;
    let value = 2.0 * (gamma * gamma * t).exp() * normal_cdf(gamma * (2.0 * t).sqrt());
    Ok(OracleResult { value, method: OracleMethod::ClosedForm, error_bound: 4.0 * f64::EPSILON * value })
}

const K2_LEVELS: u32 = 4;

/// Interval carrying `φ` up to a relative `1e-17` of its peak.
fn effective_support(phi: &Phi) -> Option<(f64, f64)> {
    match *phi {
        Phi::Gauss { a, .. } => Some(phi.support(1e-17 * phi.eval(a))),
        Phi::Bump { .. } => Some(phi.support(0.0)),
        Phi::Const { .. } => None,
    }
}

fn she_k2_level(t: f64, phi: &Phi, g: f64, level: u32) -> f64 {
    let (hx, hw) = gauss_hermite(24 << level);
    let (lx, lw) = gauss_legendre(12);
    let panels = 4usize << level;
    let u_max = 2.0 * t * g.max(0.0) + 16.0 * t.sqrt();
    // Density of u = l + |w| per unit w; the w-integrand is even so [0, u] is doubled.
    let rho = |u: f64| (u / SQRT_2) / (2.0 * PI * t.powi(3)).sqrt() * (-u * u / (4.0 * t)).exp();
    let support = effective_support(phi);
    let s_scale = 2.0 * t.sqrt();
    let terms: Vec<f64> = hx
        .iter()
        .zip(&hw)
        .map(|(&xs, &ws)| {
            let s = s_scale * xs;
            // Both (s ± w)/2 must lie in the support of φ.
            let w_max = match support {
                Some((lo, hi)) => (2.0 * hi - s).min(s - 2.0 * lo).min(u_max),
                None => u_max,
            };
            if w_max <= 0.0 {
                return 0.0;
            }
            let pair = |w: f64| phi.eval(0.5 * (s + w)) * phi.eval(0.5 * (s - w));
            let near = composite_with(
                &lx,
                &lw,
                |u| rho(u) * composite_with(&lx, &lw, |w| (g * (u - w)).exp() * pair(w), 0.0, u, panels),
                0.0,
                w_max,
                3 * panels,
            );
            // Beyond w_max the w-integral factors out of the u-integral.
            let far = if w_max < u_max {
                let c = composite_with(&lx, &lw, |w| (-g * w).exp() * pair(w), 0.0, w_max, 3 * panels);
                c * composite_with(&lx, &lw, |u| rho(u) * (g * u).exp(), w_max, u_max, 3 * panels)
            } else {
                0.0
            };
            ws / PI.sqrt() * (near + far)
        })
        .collect();
    kahan_sum(terms)
}

/// `E[e^{γ² L_t(U¹ - U²)} φ(U¹_t) φ(U²_t)]` for independent standard Brownian
/// motions, by quadrature in the sum, the difference and the local time.
pub fn she_moment_k2(t: f64, phi: &Phi, gamma_sq: f64) -> Result<OracleResult> {
    check_time(t)?;
    let mut prev = she_k2_level(t, phi, gamma_sq, 0);
    let mut diff = f64::INFINITY;
    for level in 1..K2_LEVELS {
        let v = she_k2_level(t, phi, gamma_sq, level);
        diff = (v - prev).abs();
        prev = v;
        if diff <= 1e-9 * v.abs().max(1.0) {
            break;
        }
    }
    if diff > 1e-6 * prev.abs().max(1.0) {
        return Err(Error::QuadratureNotConverged(diff));
    }
    Ok(OracleResult { value: prev, method: OracleMethod::Quadrature, error_bound: diff })
}

/// Monte-Carlo value of `E[e^{γ Σ_{i<j} L(U^i - U^j)} ∏ φ(U^i_t)]` with a
/// discretisation-bias estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTimeEstimate {
    pub estimate: Estimate,
    /// Same paths read on a grid of twice the mesh.
    pub coarse: Estimate,
    /// `|fine - coarse| / (√2 - 1)`, the size of an `O(√mesh)` bias.
    pub bias: f64,
    pub mesh: f64,
}

const MC_CHUNK: usize = 1024;

/// Local times by the Tanaka estimator `|W_t| - Σ sign(W) ΔW` on the mesh.
pub fn mc_localtime(k: usize, t: f64, gamma: f64, phi: &Phi, n_paths: usize, mesh: f64, seed: u64) -> Result<LocalTimeEstimate> {
    check_time(t)?;
    if !(2..=4).contains(&k) {
        return Err(Error::InvalidArgument(format!("k = {k} outside 2..=4")));
    }
    if !(mesh > 0.0 && mesh <= 1e-3) {
        return Err(Error::InvalidArgument(format!("mesh {mesh} outside (0, 1e-3]")));
    }
    mc_localtime_any_mesh(k, t, gamma, phi, n_paths, mesh, seed)
}

pub(crate) fn mc_localtime_any_mesh(
    k: usize,
    t: f64,
    gamma: f64,
    phi: &Phi,
    n_paths: usize,
    mesh: f64,
    seed: u64,
) -> Result<LocalTimeEstimate> {
    let mut steps = (t / mesh).round() as usize;
    steps += steps % 2;
    let h = t / steps as f64;
    let sh = h.sqrt();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let chunks: Vec<Vec<(f64, f64)>> = (0..n_paths.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
            let count = MC_CHUNK.min(n_paths - c * MC_CHUNK);
            let mut u = vec![0.0; k];
            let mut u_coarse = vec![0.0; k];
            let mut fine = vec![0.0; pairs.len()];
            let mut coarse = vec![0.0; pairs.len()];
            let mut before = vec![0.0; pairs.len()];
            (0..count)
                .map(|_| {
                    u.iter_mut().for_each(|v| *v = 0.0);
                    u_coarse.iter_mut().for_each(|v| *v = 0.0);
                    fine.iter_mut().for_each(|v| *v = 0.0);
                    coarse.iter_mut().for_each(|v| *v = 0.0);
                    for step in 0..steps {
                        for (b, &(i, j)) in before.iter_mut().zip(&pairs) {
                            *b = u[i] - u[j];
                        }
                        for v in u.iter_mut() {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v += sh * z;
                        }
                        for (p, &(i, j)) in pairs.iter().enumerate() {
                            fine[p] -= sign(before[p]) * (u[i] - u[j] - before[p]);
                        }
                        if step % 2 == 1 {
                            for (p, &(i, j)) in pairs.iter().enumerate() {
                                let w0 = u_coarse[i] - u_coarse[j];
                                coarse[p] -= sign(w0) * (u[i] - u[j] - w0);
                            }
                            u_coarse.copy_from_slice(&u);
                        }
                    }
                    let prod: f64 = u.iter().map(|&x| phi.eval(x)).product();
                    let lt = |acc: &[f64]| -> f64 { pairs.iter().zip(acc).map(|(&(i, j), s)| (u[i] - u[j]).abs() + s).sum() };
                    ((gamma * lt(&fine)).exp() * prod, (gamma * lt(&coarse)).exp() * prod)
                })
                .collect()
        })
        .collect();
    let (f, c): (Vec<f64>, Vec<f64>) = chunks.into_iter().flatten().unzip();
    let estimate = Estimate::from_samples(&f, OracleMethod::MonteCarlo.as_str());
    let coarse = Estimate::from_samples(&c, OracleMethod::MonteCarlo.as_str());
    let bias = (estimate.value - coarse.value).abs() / (SQRT_2 - 1.0);
    Ok(LocalTimeEstimate { estimate, coarse, bias, mesh: h })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
