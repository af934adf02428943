//! End-to-end acceptance checks, one test per criterion.
//!
//! Each test prints a single `criterion N: PASS|FAIL ...` line straight to
//! stderr (bypassing output capture) and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use proxshuffle::analysis::{
    estimate_rate, lemma_ineq_verify, median, residual_stats_bruteforce, sigma_report, RateFit,
};
use proxshuffle::harness::{cmd_run, ExperimentPlan, ProblemSource, X1Config};
use proxshuffle::optimizer::{
    adaptive_trajectory_bound, epoch_update, run, schedule_params, Diagnostics, RunConfig,
};
use proxshuffle::permutation::PermutationStrategy;
use proxshuffle::problem::{
    compute_reference, make_hinge, make_lad, make_lasso, make_least_squares, make_quadratic,
    make_scaled_least_squares, ComponentKind, FiniteSumProblem, ReferenceSolution,
};
use proxshuffle::prox::Regularizer;
use proxshuffle::schedule::{
    binomial, gamma_weights, ScheduleOverrides, ScheduleParams, StepsizeRule, StepsizeSchedule,
};
use proxshuffle::Vector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn report(criterion: u32, ok: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let in_time = elapsed <= budget;
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {criterion}: {verdict} ({detail}; {:.2}s of {}s)",
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
    assert!(in_time, "criterion {criterion} over its time budget");
}

fn random_smooth(rng: &mut ChaCha20Rng, n: usize) -> FiniteSumProblem {
    let d = rng.random_range(1..=5usize);
    let seed: u64 = rng.random();
    let mut p = if rng.random_bool(0.5) {
        make_quadratic(n, d, seed, rng.random_range(0.0..0.5)).unwrap()
    } else {
        make_least_squares(n, d, seed, 1.0).unwrap()
    };
    p.reg = match rng.random_range(0..3u32) {
        0 => Regularizer::Zero,
        1 => Regularizer::l1(rng.random_range(0.01..0.5)).unwrap(),
        _ => Regularizer::sq_l2(rng.random_range(0.05..1.0), None).unwrap(),
    };
    p
}

// ---------------------------------------------------------------------------
// Lemma-level oracles

#[test]
fn criterion_01_residual_bounds_bruteforce() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut worst_any = f64::INFINITY;
    let mut worst_rand = f64::INFINITY;
    let mut nonzero_grad = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=6usize);
        let p = random_smooth(&mut rng, n);
        let r = compute_reference(&p, &Vector::zeros(p.dim()), None).unwrap();
        let s = sigma_report(&p, &r).unwrap();
        if s.grad_f_star_norm_sq > 1e-12 {
            nonzero_grad += 1;
        }
        let stats = residual_stats_bruteforce(&p, &r.x_star).unwrap();
        let ls = p.smooth_constants().unwrap();
        let l_bar = ls.iter().sum::<f64>() / n as f64;
        let nf = n as f64;
        let bound_any = nf * nf * l_bar * s.sigma_any_sq;
        let bound_rand = 2.0 / 3.0 * nf * l_bar * s.sigma_rand_sq;
        worst_any = worst_any.min((bound_any - stats.max) / bound_any.max(1e-300));
        worst_rand = worst_rand.min((bound_rand - stats.mean) / bound_rand.max(1e-300));
    }
    let ok = worst_any >= -1e-9 && worst_rand >= -1e-9 && nonzero_grad > 0;
    report(
        1,
        ok,
        start.elapsed(),
        Duration::from_secs(30),
        &format!(
            "200 instances, min relative slack any {worst_any:.3e}, rand {worst_rand:.3e}, {nonzero_grad} with grad f(x*) != 0"
        ),
    );
}

#[test]
fn criterion_02_recursion_bound_grid() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut worst = 0.0_f64;
    for a in [0.1, 1.0, 10.0] {
        for b in [0.1, 1.0, 10.0] {
            for c in [0.01, 0.1, 0.3] {
                for k in [50, 200, 500] {
                    let r = lemma_ineq_verify(a, b, c, k).unwrap();
                    checked += r.checked;
                    worst = worst.max(r.worst_ratio);
                    if !r.passed() {
                        failures.push((a, b, c, k));
                    }
                }
            }
        }
    }
    report(
        2,
        failures.is_empty(),
        start.elapsed(),
        Duration::from_secs(10),
        &format!("81 grid points, {checked} comparisons, worst ratio {worst:.6}, failures {failures:?}"),
    );
}

#[test]
fn criterion_03_descent_inequality() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let mut worst = f64::INFINITY;
    let mut epochs = 0;
    for i in 0..20 {
        let n = rng.random_range(2..=8usize);
        let d = rng.random_range(1..=5usize);
        let seed: u64 = rng.random();
        let mut p = if i % 4 < 2 {
            make_quadratic(n, d, seed, 0.1).unwrap()
        } else {
            make_least_squares(n, d, seed, 1.0).unwrap()
        };
        if i % 2 == 1 {
            p.reg = Regularizer::l1(0.1).unwrap();
        }
        let x1 = Vector::from_element(d, 1.0);
        let r = compute_reference(&p, &x1, None).unwrap();
        let cfg = RunConfig {
            k_epochs: 50,
            x1,
            strategy: PermutationStrategy::RandomReshuffle { seed },
            schedule: StepsizeSchedule::new(
                StepsizeRule::SmoothConvexRandom,
                schedule_params(&p, &r, 50).unwrap(),
            )
            .unwrap(),
            diagnostics: Diagnostics { check_descent: true, ..Diagnostics::default() },
        };
        let t = run(&p, &r, &cfg).unwrap();
        for rec in &t.records {
            worst = worst.min(rec.descent_margin.unwrap());
            epochs += 1;
        }
    }
    report(
        3,
        worst >= -1e-8 && epochs == 1000,
        start.elapsed(),
        Duration::from_secs(20),
        &format!("{epochs} epochs, z in {{x*, x_k}}, psi in {{0, l1}}, min margin {worst:.3e}"),
    );
}

#[test]
fn criterion_04_adaptive_trajectory_bound() {
    let start = Instant::now();
    let (c, delta, r_param) = (0.5, 1.0, 1.0);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut ok = true;
    for seed in 1..=10u64 {
        let p = make_lad(20, 4, seed, 1.0, None).unwrap();
        let x1 = Vector::zeros(4);
        let reference = compute_reference(&p, &x1, None).unwrap();
        let distance = (&reference.x_star - &x1).norm();
        let bound = (2.0 / (1.0 - c)) * distance + (c / (1.0 - c)) * r_param;
        assert_eq!(bound, adaptive_trajectory_bound(c, r_param, distance));
        let cfg = RunConfig {
            k_epochs: 500,
            x1,
            strategy: PermutationStrategy::RandomReshuffle { seed },
            schedule: StepsizeSchedule::new(
                StepsizeRule::LipAdaptive { c, delta, r: r_param },
                schedule_params(&p, &reference, 500).unwrap(),
            )
            .unwrap(),
            diagnostics: Diagnostics::default(),
        };
        let t = run(&p, &reference, &cfg).unwrap();
        for rec in &t.records {
            worst_excess = worst_excess.max(rec.displacement - bound);
            ok &= rec.displacement <= bound + 1e-9;
        }
    }
    report(
        4,
        ok,
        start.elapsed(),
        Duration::from_secs(30),
        &format!("10 LAD seeds, K = 500, max displacement minus bound {worst_excess:.3e}"),
    );
}

#[test]
fn criterion_05_gamma_binomial_identity() {
    let start = Instant::now();
    let (n, mu) = (6usize, 0.4);
    let mut worst = 0.0_f64;
    for m in [1u32, 2, 3, 5] {
        let params = ScheduleParams {
            n,
            k_total: 200,
            l_bar: 1.0,
            l_star: 1.0,
            g_bar: 1.0,
            mu_f: 0.0,
            mu_psi: mu,
            sigma_any_sq: 0.0,
            sigma_rand_sq: 0.0,
            d: 1.0,
        };
        let etas = StepsizeSchedule::new(StepsizeRule::StronglyPsi { m }, params)
            .unwrap()
            .sequence()
            .unwrap();
        for (i, g) in gamma_weights(mu, n, &etas).iter().enumerate() {
            let k = (i + 1) as u64;
            // independent product form: prod_{j=1}^{m-1} (k + j) / j
            let direct: f64 = (1..m as u64).map(|j| (k + j) as f64 / j as f64).product();
            let want = direct / (n as f64 * mu);
            assert_eq!(binomial(k + m as u64 - 1, m as u64 - 1), direct.round());
            worst = worst.max(((g - want) / want).abs());
        }
    }
    report(
        5,
        worst <= 1e-9,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("m in {{1,2,3,5}}, k <= 200, max relative error {worst:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// Rate windows

const RATE_KS: [usize; 6] = [32, 64, 128, 256, 512, 1024];
const RR_SEEDS: u64 = 11;

/// Median final gap per `K` (one run for deterministic orders).
fn sweep(
    p: &FiniteSumProblem,
    reference: &ReferenceSolution,
    x1: &Vector,
    rule: &StepsizeRule,
    random: bool,
) -> Vec<(f64, f64)> {
    RATE_KS
        .iter()
        .map(|&k| {
            let seeds = if random { RR_SEEDS } else { 1 };
            let gaps: Vec<f64> = (1..=seeds)
                .map(|s| {
                    let strategy = if random {
                        PermutationStrategy::RandomReshuffle { seed: s }
                    } else {
                        PermutationStrategy::Incremental { order: None }
                    };
                    let mut params = schedule_params(p, reference, k).unwrap();
                    ScheduleOverrides::default().apply(&mut params);
                    let cfg = RunConfig {
                        k_epochs: k,
                        x1: x1.clone(),
                        strategy,
                        schedule: StepsizeSchedule::new(rule.clone(), params).unwrap(),
                        diagnostics: Diagnostics::default(),
                    };
                    run(p, reference, &cfg).unwrap().records.last().unwrap().gap
                })
                .collect();
            (k as f64, median(&gaps).unwrap())
        })
        .collect()
}

fn window_check(
    criterion: u32,
    fits: &[(&str, RateFit)],
    window: (f64, f64),
    start: Instant,
    extra: &str,
) {
    let ok = fits.iter().all(|(_, f)| f.slope >= window.0 && f.slope <= window.1);
    let detail = fits
        .iter()
        .map(|(name, f)| format!("{name} slope {:.4} (r^2 {:.3})", f.slope, f.r_squared))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        criterion,
        ok,
        start.elapsed(),
        Duration::from_secs(120),
        &format!("{detail}, window [{}, {}]{extra}", window.0, window.1),
    );
}

#[test]
fn criterion_06_rate_strongly_convex_smooth() {
    let start = Instant::now();
    let p = make_quadratic(10, 5, 1, 0.1).unwrap();
    assert!(p.mu_f > 0.0);
    // start at x* so the shuffling-variance term sets the rate
    let reference = compute_reference(&p, &Vector::zeros(5), None).unwrap();
    let x1 = reference.x_star.clone();
    let reference = reference.with_start(&x1);
    let ig = estimate_rate(&sweep(&p, &reference, &x1, &StepsizeRule::SmoothStronglyAny, false)).unwrap();
    let rr = estimate_rate(&sweep(&p, &reference, &x1, &StepsizeRule::SmoothStronglyRandom, true)).unwrap();
    window_check(6, &[("IG", ig), ("RR", rr)], (-2.5, -1.6), start, "");
}

fn scaled_lsq_instance() -> (FiniteSumProblem, Vector, ReferenceSolution) {
    let d = 5;
    let scales: Vec<f64> = (0..d).map(|j| 10f64.powf(-2.5 * j as f64 / (d - 1) as f64)).collect();
    let mut p = make_scaled_least_squares(20, d, 2, 1.0, Some(&scales)).unwrap();
    p.mu_f = 0.0;
    let r0 = compute_reference(&p, &Vector::zeros(d), None).unwrap();
    let x1 = r0.x_star.add_scalar(0.01 / (d as f64).sqrt());
    let reference = r0.with_start(&x1);
    (p, x1, reference)
}

#[test]
fn criterion_07_rate_smooth_convex() {
    let start = Instant::now();
    let (p, x1, reference) = scaled_lsq_instance();
    // the stepsize must sit strictly below the smoothness cap (sigma branch active)
    let mut worst_ratio = 0.0_f64;
    for &k in &RATE_KS {
        let params = schedule_params(&p, &reference, k).unwrap();
        let cap = params.smooth_cap();
        for rule in [StepsizeRule::SmoothConvexAny, StepsizeRule::SmoothConvexRandom] {
            let eta = StepsizeSchedule::new(rule, params.clone()).unwrap().eta_at(1).unwrap();
            worst_ratio = worst_ratio.max(eta / cap);
        }
    }
    assert!(worst_ratio < 1.0, "smoothness cap binds: eta/cap = {worst_ratio}");
    let ig = estimate_rate(&sweep(&p, &reference, &x1, &StepsizeRule::SmoothConvexAny, false)).unwrap();
    let rr = estimate_rate(&sweep(&p, &reference, &x1, &StepsizeRule::SmoothConvexRandom, true)).unwrap();
    window_check(
        7,
        &[("IG", ig), ("RR", rr)],
        (-1.05, -0.55),
        start,
        &format!(", max eta/cap {worst_ratio:.3}"),
    );
}

#[test]
fn criterion_08_rate_lipschitz_linear_decay() {
    let start = Instant::now();
    let d = 16;
    let scales: Vec<f64> = (0..d).map(|j| 10f64.powf(-4.0 * j as f64 / (d - 1) as f64)).collect();
    let p = make_lad(40, d, 3, 0.0, Some(&scales)).unwrap();
    let r0 = compute_reference(&p, &Vector::zeros(d), None).unwrap();
    let x1 = r0.x_star.add_scalar(1.0);
    let reference = r0.with_start(&x1);
    let rule = StepsizeRule::LipLinearDecay { eta: 0.02 };
    let ig = estimate_rate(&sweep(&p, &reference, &x1, &rule, false)).unwrap();
    let rr = estimate_rate(&sweep(&p, &reference, &x1, &rule, true)).unwrap();
    window_check(
        8,
        &[("IG", ig), ("RR", rr)],
        (-0.70, -0.35),
        start,
        &format!(", reference residual {:.1e}", reference.residual),
    );
}

#[test]
fn criterion_09_rate_strongly_convex_psi() {
    let start = Instant::now();
    let p = make_hinge(20, 5, 6, 0.1, Regularizer::sq_l2(0.1, None).unwrap()).unwrap();
    let x1 = Vector::zeros(5);
    let reference = compute_reference(&p, &x1, None).unwrap();
    let rule = StepsizeRule::StronglyPsi { m: 2 };
    let ig = estimate_rate(&sweep(&p, &reference, &x1, &rule, false)).unwrap();
    let rr = estimate_rate(&sweep(&p, &reference, &x1, &rule, true)).unwrap();
    window_check(9, &[("IG", ig), ("RR", rr)], (-1.35, -0.75), start, "");
}

// ---------------------------------------------------------------------------
// Degeneracy, identities, reproducibility

#[test]
fn criterion_10_single_component_is_gradient_descent() {
    let start = Instant::now();
    let p = make_quadratic(1, 4, 10, 0.2).unwrap();
    let ComponentKind::Quadratic { hessian, linear, .. } = &p.components[0].kind else {
        panic!("quadratic expected")
    };
    let eta = 0.5 / p.components[0].smooth_l.unwrap();
    let x1 = Vector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
    let mut lib = x1.clone();
    let mut gd = x1.clone();
    let mut worst = 0.0_f64;
    for k in 1..=100 {
        lib = epoch_update(&p, k, &lib, eta, &[0], false).unwrap().x_next;
        // textbook step on 0.5 x'Ax - b'x
        let grad = hessian * &gd - linear;
        gd = &gd - grad * eta;
        worst = worst.max((&lib - &gd).amax());
    }
    let reference = compute_reference(&p, &x1, None).unwrap();
    let params = schedule_params(&p, &reference, 100).unwrap();
    let cfg = RunConfig {
        k_epochs: 100,
        x1,
        strategy: PermutationStrategy::RandomReshuffle { seed: 9 },
        schedule: StepsizeSchedule::new(StepsizeRule::ConstantEta { eta }, params).unwrap(),
        diagnostics: Diagnostics::default(),
    };
    let t = run(&p, &reference, &cfg).unwrap();
    let final_diff = (&t.final_iterate - &gd).amax();
    report(
        10,
        worst <= 1e-12 && final_diff <= 1e-12,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("100 steps, max per-iterate deviation {worst:.3e}, final {final_diff:.3e}"),
    );
}

#[test]
fn criterion_11_sigma_identity_without_psi() {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut count = 0;
    for seed in 0..40u64 {
        let n = 2 + (seed as usize % 9);
        let d = 1 + (seed as usize % 5);
        let problems = [
            make_quadratic(n, d, seed, 0.0).unwrap(),
            make_quadratic(n, d, seed, 0.3).unwrap(),
            make_least_squares(n, d, seed, 1.0).unwrap(),
            make_scaled_least_squares(n + d, d, seed, 0.5, Some(&vec![0.5; d])).unwrap(),
            make_lasso(n, d, seed, 1.0, 0.0).unwrap(),
        ];
        for p in problems {
            assert_eq!(p.reg, Regularizer::Zero);
            let r = compute_reference(&p, &Vector::zeros(d), None).unwrap();
            let s = sigma_report(&p, &r).unwrap();
            worst = worst.max((s.sigma_rand_sq - s.sigma_any_sq).abs() / s.sigma_any_sq.max(1.0));
            count += 1;
        }
    }
    report(
        11,
        worst <= 1e-10,
        start.elapsed(),
        Duration::from_secs(10),
        &format!("{count} generated instances, max |rand - any| {worst:.3e}"),
    );
}

#[test]
fn criterion_12_reproducible_traces() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut compared = 0;
    let strategies = [
        PermutationStrategy::RandomReshuffle { seed: 17 },
        PermutationStrategy::ShuffleOnce { seed: 17 },
        PermutationStrategy::EveryM { m: 3, seed: 17 },
        PermutationStrategy::Incremental { order: None },
    ];
    for (i, strategy) in strategies.into_iter().enumerate() {
        let mut bytes = Vec::new();
        for rep in 0..2 {
            let plan = ExperimentPlan {
                problem: ProblemSource::Generator("lasso n=8 d=4 lambda=0.05".into()),
                problem_seed: 4,
                regularizer: None,
                mu_f: None,
                reference_tol: None,
                seeds: vec![strategy.seed().unwrap_or(0)],
                strategy: strategy.clone(),
                permutation_file: None,
                rule: StepsizeRule::SmoothConvexRandom,
                overrides: ScheduleOverrides::default(),
                k: Some(60),
                k_list: Vec::new(),
                x1: X1Config::Keyword("ones".into()),
                output: Some(tmp.path().join(format!("s{i}-r{rep}"))),
                force: false,
                workers: 1,
                window: None,
                diagnostics: Diagnostics::all(),
            };
            cmd_run(&plan, &mut Vec::new()).unwrap();
            bytes.push(std::fs::read(tmp.path().join(format!("s{i}-r{rep}/trace.csv"))).unwrap());
        }
        identical &= bytes[0] == bytes[1] && !bytes[0].is_empty();
        compared += 1;
    }
    report(
        12,
        identical,
        start.elapsed(),
        Duration::from_secs(30),
        &format!("{compared} strategies run twice, trace CSVs byte-identical: {identical}"),
    );
}
