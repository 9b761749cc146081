//! The annealed difference chain of two walkers, ratio estimates of its
//! invariant measure, and the coefficients `γ(f)` and `γ_ext²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealed::{annealed_law, LatticePMF};
use crate::error::{Error, Result};
use crate::kpoint::{joint_kernel_pmf, sample_cdf, zeta};
use crate::model::{Family, ModelSpec};
use crate::stats::{batch_ratio, Estimate};

pub const BATCHES: usize = 32;

/// One row of the difference kernel; sites are unit-lattice indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffKernelRow {
    pub x: i64,
    pub law: LatticePMF,
}

/// Law of `y_1 - y_2` after one step of two walkers started at `(x, 0)`.
pub fn diff_kernel(model: &ModelSpec, x: i64) -> DiffKernelRow {
    let pk = joint_kernel_pmf(model, &[x, 0]).expect("two walkers");
    let masses = pk.entries().filter(|e| e.1 != 0.0).map(|(o, p)| (x + o[0] - o[1], p)).collect();
    DiffKernelRow { x, law: LatticePMF::new(model.lattice_scale, masses) }
}

/// Sampler with cached rows near the origin and the independent row beyond
/// the interaction range.
pub struct DiffChain {
    near: Vec<(Vec<i64>, Vec<f64>)>,
    radius: i64,
    far: (Vec<i64>, Vec<f64>),
}

fn cdf_of(row: &DiffKernelRow) -> (Vec<i64>, Vec<f64>) {
    let mut acc = 0.0;
    let steps = row.law.masses.iter().map(|m| m.0 - row.x).collect();
    let cdf = row
        .law
        .masses
        .iter()
        .map(|m| {
            acc += m.1;
            acc
        })
        .collect();
    (steps, cdf)
}

impl DiffChain {
    pub fn new(model: &ModelSpec) -> Self {
        let radius = model.interaction_range();
        let near = (-radius..=radius).map(|x| cdf_of(&diff_kernel(model, x))).collect();
        let far_x = radius + 1;
        let far = cdf_of(&diff_kernel(model, far_x));
        DiffChain { near, radius, far }
    }

    #[inline]
    pub fn step(&self, x: i64, u: f64) -> i64 {
        let (steps, cdf) = if x.abs() <= self.radius { &self.near[(x + self.radius) as usize] } else { &self.far };
        x + steps[sample_cdf(cdf, u)]
    }
}

/// Path `X_0 = x0, ..., X_steps` of the difference chain (unit sites).
pub fn simulate_diff_chain(model: &ModelSpec, x0: i64, steps: usize, seed: u64) -> Vec<i64> {
    let chain = DiffChain::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut path = Vec::with_capacity(steps + 1);
    let mut x = x0;
    path.push(x);
    for _ in 0..steps {
        x = chain.step(x, rng.gen());
        path.push(x);
    }
    path
}

/// `Σ f(X_k) / Σ g(X_k)` along one trajectory from 0, after a 1% burn-in,
/// with a batch-means standard error.
pub fn estimate_pi_ratio(model: &ModelSpec, f: impl Fn(i64) -> f64, g: impl Fn(i64) -> f64, steps: usize, seed: u64) -> Result<Estimate> {
    let chain = DiffChain::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = 0i64;
    let burn = steps / 100;
    for _ in 0..burn {
        x = chain.step(x, rng.gen());
    }
    let kept = steps - burn;
    let mut fs = vec![0.0; BATCHES];
    let mut gs = vec![0.0; BATCHES];
    let per = kept.div_ceil(BATCHES).max(1);
    for k in 0..kept {
        x = chain.step(x, rng.gen());
        let b = (k / per).min(BATCHES - 1);
        fs[b] += f(x);
        gs[b] += g(x);
    }
    let (value, se) = batch_ratio(&fs, &gs, BATCHES).ok_or(Error::ZeroDenominator)?;
    Ok(Estimate::new(value, se, kept.max(1) as u64, "ratio_ergodic"))
}

/// Origin mass `c^{-1}` of the invariant measure for product models with
/// `E[v(i)v(j)] = c μ(i) μ(j)` for all `i ≠ j`.
pub fn analytic_pi_origin(model: &ModelSpec) -> Result<f64> {
    if !matches!(model.family, Family::ProductIid { .. }) {
        return Err(Error::NotApplicable("the c-property is defined for product models only".into()));
    }
    let mu = model.annealed_unit_masses();
    let mut ratios = Vec::new();
    for i in 0..mu.len() {
        for j in 0..mu.len() {
            if i != j && mu[i] * mu[j] > 0.0 {
                ratios.push(model.joint_moment_idx(&[0, 0], &[i, j]) / (mu[i] * mu[j]));
            }
        }
    }
    let c = ratios[0];
    let dev = ratios.iter().map(|r| (r - c).abs()).fold(0.0, f64::max);
    if dev > 1e-12 {
        return Err(Error::NotApplicable(format!("c-property fails, max deviation {dev:.3e}")));
    }
    Ok(1.0 / c)
}

/// `h(x) = Σ_a |a| p_dif(x, a) - |x|` on the scaled lattice.
pub fn denominator_integrand(model: &ModelSpec, x: i64) -> f64 {
    let row = diff_kernel(model, x);
    row.law.points().map(|(a, m)| a.abs() * m).sum::<f64>() - model.lattice_scale * x.abs() as f64
}

/// Exact values of a function on `|x| ≤ radius`, zero beyond.
#[derive(Debug, Clone)]
pub struct WindowFn {
    radius: i64,
    values: Vec<f64>,
}

impl WindowFn {
    pub fn new(radius: i64, f: impl Fn(i64) -> f64) -> Self {
        WindowFn { radius, values: (-radius..=radius).map(f).collect() }
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    #[inline]
    pub fn eval(&self, x: i64) -> f64 {
        if x.abs() <= self.radius {
            self.values[(x + self.radius) as usize]
        } else {
            0.0
        }
    }
}

/// `h` tabulated; it vanishes once the chain cannot cross the origin in one step.
pub fn denominator_table(model: &ModelSpec) -> WindowFn {
    let span = model.offsets[model.width() - 1] - model.offsets[0];
    WindowFn::new(model.interaction_range().max(span), |x| denominator_integrand(model, x))
}

/// `ζ` tabulated; it vanishes beyond the interaction range.
pub fn zeta_table(model: &ModelSpec) -> WindowFn {
    WindowFn::new(model.interaction_range(), |z| zeta(model, z))
}

/// `γ(f) = ∫f dπ / ∫h dπ` by the ratio ergodic theorem.
pub fn gamma_f(model: &ModelSpec, f: impl Fn(i64) -> f64, steps: usize, seed: u64) -> Result<Estimate> {
    let h = denominator_table(model);
    let mut e = estimate_pi_ratio(model, f, |x| h.eval(x), steps, seed)?;
    e.method = "gamma_ratio".into();
    Ok(e)
}

fn require_normalized(model: &ModelSpec) -> Result<()> {
    let var = annealed_law(model).variance();
    if (var - 1.0).abs() > 1e-10 {
        return Err(Error::NotNormalized(var));
    }
    Ok(())
}

/// `γ_ext² = γ(ζ)` along a single trajectory.
pub fn gamma_ext_sq(model: &ModelSpec, steps: usize, seed: u64) -> Result<Estimate> {
    require_normalized(model)?;
    let z = zeta_table(model);
    gamma_f(model, |x| z.eval(x), steps, seed)
}

/// `γ_ext²` without simulation when `ζ` is a constant multiple of `h` on the
/// window where either is nonzero; `None` otherwise.
pub fn gamma_ext_sq_exact(model: &ModelSpec) -> Result<Option<f64>> {
    require_normalized(model)?;
    let z = zeta_table(model);
    let h = denominator_table(model);
    let r = h.radius().max(z.radius());
    let h0 = h.eval(0);
    if h0 <= 0.0 {
        return Ok(None);
    }
    let c = z.eval(0) / h0;
    let proportional = (-r..=r).all(|x| (z.eval(x) - c * h.eval(x)).abs() <= 1e-12 * (1.0 + c.abs()) * h0.max(z.eval(0).abs()));
    Ok(proportional.then_some(c))
}

/// Independent trajectories per seed, merged by inverse-variance weighting
/// in seed order.
pub fn gamma_ext_sq_seeds(model: &ModelSpec, steps: usize, seeds: &[u64]) -> Result<(Estimate, Vec<Estimate>)> {
    let parts: Vec<Estimate> = seeds.par_iter().map(|&s| gamma_ext_sq(model, steps, s)).collect::<Result<_>>()?;
    let mut merged = Estimate::merge(&parts);
    merged.method = "gamma_ratio_merged".into();
    Ok((merged, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{hass_model, make_landscape_model, make_product_model, normalize_lattice, s1_model, ScalarLaw};

    #[test]
    fn exact_gamma_when_proportional() {
        let s1 = normalize_lattice(&s1_model()).unwrap();
        assert!((gamma_ext_sq_exact(&s1).unwrap().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let nn = normalize_lattice(&crate::model::nn_uniform_two_step()).unwrap();
        assert!((gamma_ext_sq_exact(&nn).unwrap().unwrap() - 2f64.powf(-1.5)).abs() < 1e-10);
        assert_eq!(gamma_ext_sq_exact(&normalize_lattice(&hass_model()).unwrap()).unwrap(), None);
        assert!(gamma_ext_sq_exact(&s1_model()).is_err());
    }

    #[test]
    fn s1_rows() {
        let m = s1_model();
        let r0 = diff_kernel(&m, 0).law;
        assert_eq!(r0.masses, vec![(-1, 3.0 / 16.0), (0, 10.0 / 16.0), (1, 3.0 / 16.0)]);
        let r5 = diff_kernel(&m, 5).law;
        assert_eq!(r5.masses, vec![(4, 0.25), (5, 0.5), (6, 0.25)]);
    }

    #[test]
    fn rows_are_centred() {
        for m in [s1_model(), hass_model()] {
            for x in -4..=4 {
                let row = diff_kernel(&m, x);
                assert!((row.law.mean() - m.lattice_scale * x as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variance_is_two_away_from_origin() {
        let m = normalize_lattice(&hass_model()).unwrap();
        for x in [1, 2, 7] {
            assert!((diff_kernel(&m, x).law.variance() - 2.0).abs() < 1e-12);
        }
        // At the origin the shortfall is twice the same-site covariance of the increments.
        let cov = crate::kpoint::joint_cumulant(&m, &[0, 1], &[0, 0]).unwrap();
        assert!((diff_kernel(&m, 0).law.variance() - (2.0 - 2.0 * cov)).abs() < 1e-12);
    }

    #[test]
    fn path_basics() {
        assert_eq!(simulate_diff_chain(&s1_model(), 3, 0, 1), vec![3]);
        let p = simulate_diff_chain(&s1_model(), 0, 1000, 1);
        assert!(p.windows(2).all(|w| (w[1] - w[0]).abs() <= 1));
    }

    #[test]
    fn ratio_examples() {
        let m = s1_model();
        let one = estimate_pi_ratio(&m, |x| (x % 3) as f64, |x| (x % 3) as f64, 10_000, 1);
        if let Ok(e) = one {
            assert_eq!(e.value, 1.0);
        }
        let e = estimate_pi_ratio(&m, |x| f64::from(x == 0), |x| f64::from(x != 0 && x.abs() <= 4) / 8.0, 2_000_000, 2).unwrap();
        assert!((e.value - 4.0 / 3.0).abs() < 4.0 * e.stderr, "{e:?}");
        let e = estimate_pi_ratio(&m, |x| f64::from(x == 2), |x| f64::from(x == 5), 2_000_000, 3).unwrap();
        assert!((e.value - 1.0).abs() < 4.0 * e.stderr, "{e:?}");
        assert!(matches!(estimate_pi_ratio(&m, |_| 1.0, |_| 0.0, 1000, 1), Err(Error::ZeroDenominator)));
    }

    #[test]
    fn origin_mass() {
        assert!((analytic_pi_origin(&s1_model()).unwrap() - 4.0 / 3.0).abs() < 1e-14);
        // Pairwise ratios E[v(i)v(j)] / μ(i)μ(j) differ across pairs here.
        let indep = make_product_model(
            &[0, 1, 2],
            &[(0.5, vec![0.5, 0.0, 0.5]), (0.25, vec![0.0, 1.0, 0.0]), (0.25, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])],
        )
        .unwrap();
        assert!(matches!(analytic_pi_origin(&indep), Err(Error::NotApplicable(_))));
        let w = ScalarLaw::Atoms { atoms: vec![(0.5, -1.0), (0.5, 1.0)] };
        let l = make_landscape_model(&[-1, 0, 1], &[1.0, 1.0, 1.0], w, 2).unwrap();
        assert!(matches!(analytic_pi_origin(&l), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn denominators() {
        let m = s1_model();
        assert!((denominator_integrand(&m, 0) - 0.375).abs() < 1e-15);
        assert_eq!(denominator_integrand(&m, 1), 0.0);
        let h = hass_model();
        for x in [3, -3, 10] {
            assert!(denominator_integrand(&h, x).abs() < 1e-15);
        }
    }

    #[test]
    fn gamma_examples() {
        let m = normalize_lattice(&s1_model()).unwrap();
        let h = denominator_table(&m);
        assert_eq!(gamma_f(&m, |x| h.eval(x), 100_000, 1).unwrap().value, 1.0);
        assert_eq!(gamma_f(&m, |_| 0.0, 100_000, 1).unwrap().value, 0.0);
        let g = gamma_ext_sq(&m, 1_000_000, 4).unwrap();
        assert!((g.value - 1.0 / 3.0).abs() < 1e-12, "{g:?}");
        assert!(matches!(gamma_ext_sq(&s1_model(), 10, 1), Err(Error::NotNormalized(_))));
    }
}
