//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use kflow::annealed::{annealed_law, drift_expansion};
use kflow::diff_chain::{analytic_pi_origin, estimate_pi_ratio, gamma_ext_sq, gamma_ext_sq_exact};
use kflow::harness::{resolve_model, run_experiment, ExperimentConfig, ExperimentKind};
use kflow::kpoint::cumulant_audit;
use kflow::model::{Family, ModelSpec, RowLaw};
use kflow::oracle::{local_time_mgf, mc_localtime, normal_cdf, she_moment_k1, she_moment_k2};
use kflow::phi::Phi;
use kflow::quenched::{
    evolve_tilted_density, field_pairing, martingale_endpoints, moment_estimate, predictable_qv, tilted_walk_density, FieldScaling,
    DEFAULT_TRUNCATION,
};
use kflow::stats::z_score;
use kflow::Estimate;

type Outcome = (bool, String);
type Criterion = (u32, &'static str, fn() -> Outcome);

fn s1() -> ModelSpec {
    resolve_model("builtin:s1").unwrap()
}

fn hass() -> ModelSpec {
    resolve_model("builtin:hass").unwrap()
}

fn gauss() -> Phi {
    Phi::gauss(0.0, 0.5)
}

fn c1_gamma_toy() -> Outcome {
    let m = s1();
    let exact = gamma_ext_sq_exact(&m).unwrap().unwrap();
    let e = gamma_ext_sq(&m, 10_000_000, 101).unwrap();
    let rel = (e.value / (1.0 / 3.0) - 1.0).abs();
    let ok = (exact - 1.0 / 3.0).abs() < 1e-12 && rel < 0.02;
    (ok, format!("exact ratio {exact:.12}, simulated {:.5} ± {:.5} (rel. err {:.3}%, tol 2%)", e.value, e.stderr, 100.0 * rel))
}

fn c2_gamma_nn_uniform() -> Outcome {
    let m = resolve_model("builtin:nn_uniform_two_step").unwrap();
    let target = 8.0 * (1.0 / 12.0) / (1.0 - 4.0 / 12.0);
    let e = gamma_ext_sq(&m, 10_000_000, 202).unwrap();
    let exact = gamma_ext_sq_exact(&m).unwrap();
    let rel = (e.value / target - 1.0).abs();
    let offset = exact.map(|x| format!(", exact ratio {x:.8}, ratio to target {:.6}", x / target)).unwrap_or_default();
    (
        rel < 0.05,
        format!("target 8σ²/(1-4σ²) = {target}, simulated {:.5} ± {:.5} (rel. err {:.1}%, tol 5%){offset}", e.value, e.stderr, 100.0 * rel),
    )
}

fn c3_pi_origin() -> Outcome {
    let m = s1();
    let analytic = analytic_pi_origin(&m).unwrap();
    let e = match estimate_pi_ratio(&m, |x| f64::from(x == 0), |x| f64::from(x == 1), 10_000_000, 303) {
        Ok(e) => e,
        Err(err) => return (false, format!("analytic {analytic:.12}, estimator failed: {err}")),
    };
    let rel = (e.value / (4.0 / 3.0) - 1.0).abs();
    let ok = (analytic - 4.0 / 3.0).abs() < 1e-12 && rel < 0.02;
    (ok, format!("analytic {analytic:.12}, simulated {:.5} ± {:.5} (rel. err {:.3}%, tol 2%)", e.value, e.stderr, 100.0 * rel))
}

fn c4_first_moment() -> Outcome {
    let m = s1();
    let n = 4096;
    let rho = tilted_walk_density(&m, n, n).unwrap();
    let h = field_pairing(&rho, &m, n, &gauss()).unwrap();
    let oracle = she_moment_k1(1.0, &gauss()).unwrap().value;
    let rel = (h / oracle - 1.0).abs();
    (rel < 0.01, format!("pairing {h:.6} vs ∫p₁φ = {oracle:.6} (rel. err {:.3}%, tol 1%)", 100.0 * rel))
}

fn c5_second_moment() -> Outcome {
    let m = s1();
    let phi = gauss();
    let oracle = she_moment_k2(1.0, &phi, 1.0 / 3.0).unwrap();
    let mut ok = true;
    let mut parts = vec![format!("oracle {:.6}", oracle.value)];
    let mut gaps: Vec<(f64, f64)> = Vec::new();
    for (i, n) in [512u64, 2048, 8192].into_iter().enumerate() {
        let r = moment_estimate(&m, n, 1.0, &phi, 2, 4096, 5000 + i as u64).unwrap();
        let z_dt = r.z_score;
        let z_d = z_score(r.direct.value - oracle.value, r.direct.stderr, oracle.error_bound);
        let z_t = z_score(r.tilted.value - oracle.value, r.tilted.stderr, oracle.error_bound);
        ok &= z_dt <= 3.0 && z_d <= 3.0 && z_t <= 3.0;
        // Gap of the pooled estimate.
        let w_d = 1.0 / r.direct.stderr.powi(2);
        let w_t = 1.0 / r.tilted.stderr.powi(2);
        let pooled = (r.direct.value * w_d + r.tilted.value * w_t) / (w_d + w_t);
        gaps.push(((pooled - oracle.value).abs(), (w_d + w_t).sqrt().recip()));
        parts.push(format!(
            "N={n}: direct {:.5}±{:.5} tilted {:.5}±{:.5} z(d,t)={z_dt:.2} z(d,o)={z_d:.2} z(t,o)={z_t:.2}",
            r.direct.value, r.direct.stderr, r.tilted.value, r.tilted.stderr
        ));
    }
    let monotone = gaps.windows(2).all(|w| w[1].0 <= w[0].0 + 3.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt());
    ok &= monotone;
    parts.push(format!("gaps {:?} nonincreasing within 3 SE: {monotone}", gaps.iter().map(|g| format!("{:.5}", g.0)).collect::<Vec<_>>()));
    (ok, parts.join("; "))
}

fn c6_cumulants() -> Outcome {
    let bases: Vec<Vec<i64>> = vec![vec![0, 0], vec![0, 1], vec![0, 2], vec![0, 0, 0], vec![0, 1, 2]];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, m) in [("S1", s1()), ("Hass", hass())] {
        let rows = cumulant_audit(&m, &bases, 1e-12).unwrap();
        let p = m.symmetry_order_p as usize;
        let failures = rows.iter().filter(|r| !r.pass).count();
        let worst_vanishing = rows.iter().filter(|r| r.must_vanish).map(|r| r.value.abs()).fold(0.0, f64::max);
        let paired_nonzero = rows.iter().filter(|r| r.m == 2 * p && !r.must_vanish && r.value.abs() > 1e-12).count();
        ok &= failures == 0 && paired_nonzero > 0;
        parts.push(format!(
            "{name} (p={p}): {} cumulants, {failures} violations, max vanishing |κ| {worst_vanishing:.1e}, {paired_nonzero} nonzero paired",
            rows.len()
        ));
    }
    (ok, parts.join("; "))
}

/// Conditional variance of each step summed over the path, enumerating the
/// finite set of row atoms at every occupied site.
fn brute_force_qv(model: &ModelSpec, n: u64, seed: u64, phi: &Phi) -> f64 {
    let Family::ProductIid { law: RowLaw::Atomic(atoms) } = &model.family else { panic!("product model with atomic rows expected") };
    let sc = FieldScaling::new(model, n).unwrap();
    let mu = model.annealed_unit_masses();
    let zs = evolve_tilted_density(model, n, 1.0, seed, DEFAULT_TRUNCATION).unwrap();
    let mut total = 0.0;
    for z in &zs[..zs.len() - 1] {
        for (y, zm) in z.iter() {
            let w: Vec<f64> = model.offsets.iter().zip(&sc.tilt).map(|(&o, &t)| phi.eval(sc.position(y + o, z.r + 1)) * t).collect();
            let var: f64 =
                atoms.iter().map(|a| a.prob * w.iter().zip(&a.row).zip(&mu).map(|((w, v), m)| w * (v - m)).sum::<f64>().powi(2)).sum();
            total += zm * zm * var;
        }
    }
    total
}

fn c7_discrete_she() -> Outcome {
    let m = s1();
    let phi = gauss();
    let mut worst: f64 = 0.0;
    for seed in 1..=5 {
        let qv = predictable_qv(&m, 64, 1.0, seed, &phi).unwrap();
        worst = worst.max((qv.last() - brute_force_qv(&m, 64, seed, &phi)).abs());
    }
    let ends = martingale_endpoints(&m, 1024, 1.0, &phi, 10_000, 707).unwrap();
    let m2 = Estimate::from_samples(&ends.iter().map(|e| e.0 * e.0).collect::<Vec<_>>(), "m2");
    let qv = Estimate::from_samples(&ends.iter().map(|e| e.1).collect::<Vec<_>>(), "qv");
    let z = z_score(m2.value - qv.value, m2.stderr, qv.stderr);
    (
        worst < 1e-10 && z < 4.0,
        format!(
            "QV vs brute force max |diff| {worst:.1e} (tol 1e-10); E[M²] {:.5}±{:.5} vs E[<M>] {:.5}±{:.5}, z {z:.2} (tol 4)",
            m2.value, m2.stderr, qv.value, qv.stderr
        ),
    )
}

fn c8_drift() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, m) in [("S1", s1()), ("Hass", hass())] {
        let mu = annealed_law(&m);
        let gaps: Vec<f64> = (10..=24).map(|e| drift_expansion(&mu, 1u64 << e, m.symmetry_order_p).unwrap().gap_over_sqrt_n()).collect();
        let mags: Vec<f64> = gaps.iter().map(|g| g.abs()).collect();
        let decreasing = mags.windows(2).all(|w| w[1] < w[0]);
        let crossing = mags.iter().position(|&g| g < 0.05).map(|i| 10 + i);
        let below = crossing.is_some() && mags[crossing.unwrap() - 10..].iter().all(|&g| g < 0.05);
        ok &= decreasing && below;
        let cross = crossing.map_or("never".to_string(), |e| format!("from 2^{e}"));
        parts.push(format!(
            "{name}: gap {:.3e} at 2^10 to {:.3e} at 2^24, |gap| decreasing {decreasing}, below 0.05 {cross}",
            gaps[0],
            gaps[gaps.len() - 1]
        ));
    }
    (ok, parts.join("; "))
}

fn c9_oracles() -> Outcome {
    let mgf = local_time_mgf(1.0, 1.0).unwrap().value;
    let closed = 2.0 * std::f64::consts::E * normal_cdf(std::f64::consts::SQRT_2);
    let mc = mc_localtime(2, 1.0, 1.0, &Phi::Const { c: 1.0 }, 100_000, 1e-3, 909).unwrap();
    let mc_ok = (mc.estimate.value - mgf).abs() <= mc.bias + 4.0 * mc.estimate.stderr;
    let k1 = she_moment_k1(1.0, &gauss()).unwrap().value;
    let k2 = she_moment_k2(1.0, &gauss(), 0.0).unwrap().value;
    let ok = (mgf - closed).abs() < 1e-12 && (mgf - 5.009).abs() < 1e-3 && mc_ok && (k2 - k1 * k1).abs() < 1e-8;
    (
        ok,
        format!(
            "mgf(1,1) {mgf:.6}; MC {:.4} ± {:.4} with bias {:.4}; k2(γ=0) - k1² = {:.1e}",
            mc.estimate.value,
            mc.estimate.stderr,
            mc.bias,
            k2 - k1 * k1
        ),
    )
}

fn c10_reproducible() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in [ExperimentKind::MomentSweep, ExperimentKind::EstimateGamma, ExperimentKind::DiffchainStats] {
        let mut outputs = Vec::new();
        for (run, workers) in [(0, 1), (1, 8), (2, 8)] {
            let mut c = ExperimentConfig::new("builtin:s1", kind);
            c.out_dir = dir.path().join(format!("{}-{run}", kind.as_str()));
            c.workers = workers;
            c.n_grid = vec![128, 256];
            c.k_list = vec![1, 2];
            c.n_env = 128;
            c.steps = 100_000;
            c.seeds = vec![11, 12, 13];
            c.seed_base = 42;
            let r = run_experiment(&c).unwrap();
            outputs.push(std::fs::read(r.csv_path()).unwrap());
        }
        let same = outputs.windows(2).all(|w| w[0] == w[1]);
        ok &= same;
        parts.push(format!("{}: {} bytes, identical {same}", kind.as_str(), outputs[0].len()));
    }
    (ok, parts.join("; "))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "gamma_ext_sq toy model", c1_gamma_toy),
        (2, "gamma_ext_sq nearest-neighbour constant", c2_gamma_nn_uniform),
        (3, "invariant measure origin mass", c3_pi_origin),
        (4, "first moment", c4_first_moment),
        (6, "cumulant vanishing", c6_cumulants),
        (7, "discrete SHE identities", c7_discrete_she),
        (8, "drift expansion", c8_drift),
        (9, "oracle self-consistency", c9_oracles),
        (10, "reproducibility", c10_reproducible),
        (5, "second moment convergence", c5_second_moment),
    ];
    let filter: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut results = Vec::new();
    for (id, name, run) in criteria {
        if filter.as_ref().is_some_and(|f| !f.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = run();
        let line =
            format!("criterion {id:>2} {}: {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
        println!("{line}");
        results.push((id, pass));
    }
    results.sort();
    let failed: Vec<u32> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
