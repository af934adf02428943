//! Shuffling-uncertainty measures, permutation oracles, the algebraic
//! recursion check, and log-log rate fitting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::permutation::{all_permutations, PermutationStrategy, MAX_ENUMERATION_N};
use crate::problem::{FiniteSumProblem, ReferenceSolution};
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaReport {
    /// `(1/n) sum ||grad f_i(x*)||^2`
    pub sigma_any_sq: f64,
    /// `sigma_any_sq + n ||grad f(x*)||^2`
    pub sigma_rand_sq: f64,
    pub grad_f_star_norm_sq: f64,
}

pub fn component_gradients(p: &FiniteSumProblem, x: &Vector) -> Result<Vec<Vector>> {
    p.check_dim(x)?;
    Ok(p.components.iter().map(|c| c.gradient(x)).collect())
}

pub fn sigma_report(p: &FiniteSumProblem, reference: &ReferenceSolution) -> Result<SigmaReport> {
    let grads = component_gradients(p, &reference.x_star)?;
    let n = p.n() as f64;
    let sigma_any_sq = grads.iter().map(|g| g.norm_squared()).sum::<f64>() / n;
    let mean = grads.iter().fold(Vector::zeros(p.dim()), |acc, g| acc + g) / n;
    let grad_f_star_norm_sq = mean.norm_squared();
    Ok(SigmaReport {
        sigma_any_sq,
        sigma_rand_sq: sigma_any_sq + n * grad_f_star_norm_sq,
        grad_f_star_norm_sq,
    })
}

/// `R = sum_{i=2}^n (L_{sigma_i}/n) ||sum_{j<i} grad f_{sigma_j}(x*)||^2` from
/// precomputed component gradients.
pub fn residual_r_from(ls: &[f64], grads: &[Vector], perm: &[usize]) -> f64 {
    let n = ls.len() as f64;
    let Some(first) = grads.first() else { return 0.0 };
    let mut prefix = Vector::zeros(first.len());
    let mut total = 0.0;
    for (pos, &i) in perm.iter().enumerate() {
        if pos > 0 {
            total += ls[i] / n * prefix.norm_squared();
        }
        prefix += &grads[i];
    }
    total
}

pub fn residual_r(p: &FiniteSumProblem, perm: &[usize], x_star: &Vector) -> Result<f64> {
    let ls = p
        .smooth_constants()
        .ok_or_else(|| Error::MissingData("residual R needs every L_i".into()))?;
    if !crate::permutation::is_bijection(perm, p.n()) {
        return Err(Error::invalid("perm is not a permutation of [n]"));
    }
    let grads = component_gradients(p, x_star)?;
    Ok(residual_r_from(&ls, &grads, perm))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats {
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

/// Exact max and mean of `R` over all `n!` permutations.
pub fn residual_stats_bruteforce(p: &FiniteSumProblem, x_star: &Vector) -> Result<ResidualStats> {
    if p.n() > MAX_ENUMERATION_N {
        return Err(Error::invalid(format!(
            "brute force over all permutations is limited to n <= {MAX_ENUMERATION_N} (got n = {})",
            p.n()
        )));
    }
    let ls = p
        .smooth_constants()
        .ok_or_else(|| Error::MissingData("residual R needs every L_i".into()))?;
    let grads = component_gradients(p, x_star)?;
    let perms = all_permutations(p.n())?;
    let mut max = 0.0_f64;
    let mut sum = 0.0;
    for perm in &perms {
        let r = residual_r_from(&ls, &grads, perm);
        max = max.max(r);
        sum += r;
    }
    Ok(ResidualStats { max, mean: sum / perms.len() as f64, count: perms.len() })
}

/// Monte-Carlo mean and standard error of `R` under random reshuffling.
pub fn residual_monte_carlo(
    p: &FiniteSumProblem,
    x_star: &Vector,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let ls = p
        .smooth_constants()
        .ok_or_else(|| Error::MissingData("residual R needs every L_i".into()))?;
    let grads = component_gradients(p, x_star)?;
    let mut stream = PermutationStrategy::RandomReshuffle { seed }.stream(p.n())?;
    let (mut s1, mut s2) = (0.0, 0.0);
    for k in 1..=samples {
        let r = residual_r_from(&ls, &grads, stream.next_permutation(k)?);
        s1 += r;
        s2 += r * r;
    }
    let m = samples as f64;
    let mean = s1 / m;
    let var = (s2 / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
    Ok((mean, (var / m).sqrt()))
}

// ---------------------------------------------------------------------------
// Algebraic recursion

pub const MAX_RECURSION_K: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct RecursionReport {
    pub k_total: usize,
    /// Epochs where the bound was finite and compared.
    pub checked: usize,
    /// `(k, d_{k+1}, bound_k)` for every failed comparison.
    pub violations: Vec<(usize, f64, f64)>,
    /// First `k` at which the bound overflowed (it is vacuous from there on).
    pub vacuous_from: Option<usize>,
    /// `max_k d_{k+1} / bound_k` over checked epochs.
    pub worst_ratio: f64,
}

impl RecursionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn recursion_base(a: f64, b: f64, k: usize) -> f64 {
    let kf = k as f64;
    a / kf + b * (1.0 + kf.ln())
}

/// `(a/k + b(1 + log k)) sum_{i=0}^{k-1} (2c(1 + log k))^i`
pub fn recursion_bound(a: f64, b: f64, c: f64, k: usize) -> f64 {
    let q = 2.0 * c * (1.0 + (k as f64).ln());
    let geo = if (q - 1.0).abs() < 1e-12 {
        k as f64
    } else {
        (q.powi(k as i32) - 1.0) / (q - 1.0)
    };
    recursion_base(a, b, k) * geo
}

fn check_recursion_inputs(a: f64, b: f64, c: f64, k_total: usize) -> Result<()> {
    for (name, v) in [("a", a), ("b", b), ("c", c)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    if !(2..=MAX_RECURSION_K).contains(&k_total) {
        return Err(Error::invalid(format!(
            "K must lie in 2..={MAX_RECURSION_K} (the check is O(K^2)), got {k_total}"
        )));
    }
    Ok(())
}

/// Verifies the bound on a sequence `d_2, ..., d_{K+1}` where each term is
/// `scale_k` times the hypothesis right-hand side (`scale_k = 1` is extremal).
fn recursion_check(
    a: f64,
    b: f64,
    c: f64,
    k_total: usize,
    mut scale: impl FnMut() -> f64,
) -> RecursionReport {
    // d[j] holds d_{j+2}
    let mut d: Vec<f64> = Vec::with_capacity(k_total);
    let mut report = RecursionReport {
        k_total,
        checked: 0,
        violations: Vec::new(),
        vacuous_from: None,
        worst_ratio: 0.0,
    };
    for k in 1..=k_total {
        // sum_{l=2}^k d_l / (k - l + 2)
        let tail: f64 = (2..=k).map(|l| d[l - 2] / (k - l + 2) as f64).sum();
        let next = (recursion_base(a, b, k) + c * tail) * scale();
        d.push(next);
        let bound = recursion_bound(a, b, c, k);
        if !bound.is_finite() {
            report.vacuous_from.get_or_insert(k);
            continue;
        }
        report.checked += 1;
        report.worst_ratio = report.worst_ratio.max(next / bound);
        if next > bound * (1.0 + 1e-9) {
            report.violations.push((k, next, bound));
        }
    }
    report
}

/// Checks the recursion bound on the extremal sequence satisfying the
/// hypothesis with equality.
pub fn lemma_ineq_verify(a: f64, b: f64, c: f64, k_total: usize) -> Result<RecursionReport> {
    check_recursion_inputs(a, b, c, k_total)?;
    Ok(recursion_check(a, b, c, k_total, || 1.0))
}

/// Same check on a random sequence satisfying the hypothesis strictly.
pub fn lemma_ineq_random(a: f64, b: f64, c: f64, k_total: usize, seed: u64) -> Result<RecursionReport> {
    check_recursion_inputs(a, b, c, k_total)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Ok(recursion_check(a, b, c, k_total, || rng.random::<f64>()))
}

// ---------------------------------------------------------------------------
// Rate fitting

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(log K, log gap)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
    /// Input points dropped for a nonpositive or non-finite gap.
    pub dropped: Vec<(f64, f64)>,
}

pub const MIN_RATE_POINTS: usize = 4;

/// Ordinary least squares of `log gap` on `log K`.
pub fn estimate_rate(sweep: &[(f64, f64)]) -> Result<RateFit> {
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for &(k, gap) in sweep {
        if gap > 0.0 && gap.is_finite() && k > 0.0 {
            points.push((k.ln(), gap.ln()));
        } else {
            dropped.push((k, gap));
        }
    }
    if points.len() < MIN_RATE_POINTS {
        return Err(Error::invalid(format!(
            "rate fit needs at least {MIN_RATE_POINTS} points with positive gap, got {}",
            points.len()
        )));
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("rate fit needs at least two distinct K values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit { slope, intercept, r_squared, points, dropped })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

// ---------------------------------------------------------------------------
// Sampled inequality scans

#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub checked: usize,
    /// Most negative normalized margin seen (`>= 0` means every pair passed).
    pub worst_margin: f64,
    /// `(component, pair index)` of every violation.
    pub violations: Vec<(usize, usize)>,
}

impl ScanReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const SCAN_TOL: f64 = 1e-9;

fn sample_pair(rng: &mut ChaCha20Rng, center: &Vector, scale: f64) -> (Vector, Vector) {
    let d = center.len();
    let mut draw = || center + Vector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    (draw(), draw())
}

/// Checks `||grad f_i(x) - grad f_i(y)||^2 / (2 L_i) <= B_i(x, y) <= (L_i / 2) ||x - y||^2`
/// on random pairs around `center`.
pub fn cocoercivity_scan(
    p: &FiniteSumProblem,
    pairs: usize,
    seed: u64,
    center: &Vector,
    scale: f64,
) -> Result<ScanReport> {
    let ls = p
        .smooth_constants()
        .ok_or_else(|| Error::MissingData("cocoercivity needs every L_i".into()))?;
    p.check_dim(center)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = ScanReport { checked: 0, worst_margin: f64::INFINITY, violations: Vec::new() };
    for (i, c) in p.components.iter().enumerate() {
        let l = ls[i];
        for t in 0..pairs {
            let (x, y) = sample_pair(&mut rng, center, scale);
            let b = c.bregman(&x, &y);
            let dg = (c.gradient(&x) - c.gradient(&y)).norm_squared();
            let lower = if l > 0.0 { dg / (2.0 * l) } else if dg > 0.0 { f64::INFINITY } else { 0.0 };
            let upper = 0.5 * l * (&x - &y).norm_squared();
            let norm = 1.0 + b.abs();
            let margin = ((b - lower) / norm).min((upper - b) / norm);
            report.checked += 1;
            report.worst_margin = report.worst_margin.min(margin);
            if margin < -SCAN_TOL {
                report.violations.push((i, t));
            }
        }
    }
    Ok(report)
}

/// Checks `f_i(y) >= f_i(x) + <grad f_i(x), y - x>` on random pairs.
pub fn convexity_scan(
    p: &FiniteSumProblem,
    pairs: usize,
    seed: u64,
    center: &Vector,
    scale: f64,
) -> Result<ScanReport> {
    p.check_dim(center)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = ScanReport { checked: 0, worst_margin: f64::INFINITY, violations: Vec::new() };
    for (i, c) in p.components.iter().enumerate() {
        for t in 0..pairs {
            let (x, y) = sample_pair(&mut rng, center, scale);
            let fy = c.value(&y);
            let margin = (fy - c.value(&x) - c.gradient(&x).dot(&(&y - &x))) / (1.0 + fy.abs());
            report.checked += 1;
            report.worst_margin = report.worst_margin.min(margin);
            if margin < -SCAN_TOL {
                report.violations.push((i, t));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{compute_reference, make_least_squares, make_quadratic, Component};
    use crate::prox::Regularizer;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    fn toy(reg: Regularizer) -> FiniteSumProblem {
        FiniteSumProblem::shifted_squares(&[v(&[1.0]), v(&[-1.0])], reg).unwrap()
    }

    #[test]
    fn sigma_examples() {
        let p = toy(Regularizer::Zero);
        let r = compute_reference(&p, &v(&[1.0]), None).unwrap();
        let s = sigma_report(&p, &r).unwrap();
        assert_eq!(s.sigma_any_sq, 1.0);
        assert_eq!(s.sigma_rand_sq, 1.0);

        let q = toy(Regularizer::sq_l2(1.0, None).unwrap());
        let r = compute_reference(&q, &v(&[1.0]), None).unwrap();
        let s = sigma_report(&q, &r).unwrap();
        assert_eq!(s.sigma_rand_sq, s.sigma_any_sq);

        // interpolation: every component minimized at the same point
        let same = FiniteSumProblem::shifted_squares(&[v(&[2.0]), v(&[2.0])], Regularizer::Zero)
            .unwrap();
        let r = compute_reference(&same, &v(&[0.0]), None).unwrap();
        assert_eq!(sigma_report(&same, &r).unwrap().sigma_any_sq, 0.0);
    }

    #[test]
    fn sigma_identity_with_regularizer() {
        let mut p = make_quadratic(5, 3, 2, 0.1).unwrap();
        p.reg = Regularizer::sq_l2(0.8, Some(v(&[1.0, 2.0, -1.0]))).unwrap();
        let r = compute_reference(&p, &Vector::zeros(3), None).unwrap();
        let s = sigma_report(&p, &r).unwrap();
        let diff = s.sigma_rand_sq - s.sigma_any_sq - 5.0 * s.grad_f_star_norm_sq;
        assert!(diff.abs() <= 1e-12 * (1.0 + s.sigma_rand_sq));
        assert!(s.grad_f_star_norm_sq > 0.0);
    }

    #[test]
    fn residual_examples() {
        let p = toy(Regularizer::Zero);
        let x = v(&[0.0]);
        assert_eq!(residual_r(&p, &[0, 1], &x).unwrap(), 0.5);
        let stats = residual_stats_bruteforce(&p, &x).unwrap();
        assert_eq!(stats.mean, 0.5);
        assert_eq!(stats.max, 0.5);
        // closed form for n = 2
        let (l1, l2) = (1.0, 1.0);
        let (g1, g2): (f64, f64) = (1.0, 1.0);
        assert_eq!(stats.mean, (l1 * g2 * g2 + l2 * g1 * g1) / 4.0);

        let single = FiniteSumProblem::new(
            vec![Component::least_squares(v(&[1.0]), 2.0).unwrap()],
            Regularizer::Zero,
            0.0,
        )
        .unwrap();
        assert_eq!(residual_r(&single, &[0], &v(&[5.0])).unwrap(), 0.0);
    }

    #[test]
    fn bruteforce_refuses_large_n() {
        let p = make_least_squares(9, 2, 1, 0.1).unwrap();
        assert!(residual_stats_bruteforce(&p, &Vector::zeros(2)).is_err());
    }

    #[test]
    fn bounds_on_random_instances() {
        for seed in 0..50 {
            let n = 2 + (seed as usize % 5);
            let p = make_quadratic(n, 3, seed, 0.0).unwrap();
            let r = compute_reference(&p, &Vector::zeros(3), None).unwrap();
            let s = sigma_report(&p, &r).unwrap();
            let stats = residual_stats_bruteforce(&p, &r.x_star).unwrap();
            let nf = n as f64;
            let l_bar = p.l_bar().unwrap();
            assert!(stats.max <= nf * nf * l_bar * s.sigma_any_sq * (1.0 + 1e-9));
            assert!(stats.mean <= 2.0 / 3.0 * nf * l_bar * s.sigma_rand_sq * (1.0 + 1e-9));
        }
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let p = make_quadratic(5, 2, 44, 0.0).unwrap();
        let r = compute_reference(&p, &Vector::zeros(2), None).unwrap();
        let exact = residual_stats_bruteforce(&p, &r.x_star).unwrap().mean;
        let (mean, se) = residual_monte_carlo(&p, &r.x_star, 100_000, 3).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn recursion_degenerate_cases() {
        // k = 1: d_2 = a + b
        let rep = lemma_ineq_verify(2.0, 3.0, 0.1, 2).unwrap();
        assert!(rep.passed());
        // tiny c: sequence approaches the i = 0 term
        let rep = lemma_ineq_verify(1.0, 1.0, 1e-12, 50).unwrap();
        assert!(rep.passed());
        assert_relative_eq!(rep.worst_ratio, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn recursion_grid() {
        for a in [0.1, 1.0, 10.0] {
            for b in [0.1, 1.0, 10.0] {
                for c in [0.01, 0.1] {
                    let rep = lemma_ineq_verify(a, b, c, 500).unwrap();
                    assert!(rep.passed(), "a={a} b={b} c={c}: {:?}", rep.violations.first());
                    let rnd = lemma_ineq_random(a, b, c, 200, 7).unwrap();
                    assert!(rnd.passed());
                }
            }
        }
    }

    #[test]
    fn recursion_overflow_is_vacuous() {
        let rep = lemma_ineq_verify(1.0, 1.0, 5.0, 2000).unwrap();
        assert!(rep.vacuous_from.is_some());
        assert!(rep.passed());
        assert!(lemma_ineq_verify(1.0, 1.0, 0.1, 2001).is_err());
        assert!(lemma_ineq_verify(0.0, 1.0, 0.1, 10).is_err());
    }

    #[test]
    fn rate_fit_exact_power_law() {
        let pts: Vec<_> = [32.0, 64.0, 128.0, 256.0, 512.0]
            .iter()
            .map(|&k: &f64| (k, k.powi(-2)))
            .collect();
        let fit = estimate_rate(&pts).unwrap();
        assert!((fit.slope + 2.0).abs() <= 1e-12);
        let flat: Vec<_> = pts.iter().map(|&(k, _)| (k, 3.0)).collect();
        assert_eq!(estimate_rate(&flat).unwrap().slope, 0.0);
    }

    #[test]
    fn rate_fit_log_drift() {
        let pts: Vec<_> = (5..=11)
            .map(|e| {
                let k = 2f64.powi(e);
                (k, 5.0 * k.powf(-2.0 / 3.0) * (1.0 + k.ln()).cbrt())
            })
            .collect();
        let fit = estimate_rate(&pts).unwrap();
        assert!(fit.slope > -0.78 && fit.slope < -0.60, "{}", fit.slope);
    }

    #[test]
    fn rate_fit_guards() {
        let pts = [(32.0, 1.0), (64.0, 0.0), (128.0, -1.0), (256.0, 0.1), (512.0, 0.05)];
        assert!(estimate_rate(&pts).is_err());
        let pts = [(32.0, 1.0), (64.0, 0.0), (128.0, 0.3), (256.0, 0.1), (512.0, 0.05)];
        let fit = estimate_rate(&pts).unwrap();
        assert_eq!(fit.dropped, vec![(64.0, 0.0)]);
        assert!(estimate_rate(&[(1.0, 1.0)]).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn cocoercivity_controls() {
        let p = make_quadratic(4, 3, 5, 0.0).unwrap();
        let center = Vector::zeros(3);
        let good = cocoercivity_scan(&p, 1000, 1, &center, 3.0).unwrap();
        assert!(good.passed(), "{}", good.worst_margin);
        let bad = cocoercivity_scan(&p.with_scaled_smoothness(0.5), 1000, 1, &center, 3.0).unwrap();
        assert!(!bad.passed());
        let conv = convexity_scan(&p, 1000, 2, &center, 3.0).unwrap();
        assert!(conv.passed());
    }

    #[test]
    fn coincident_points_give_zero() {
        let p = make_quadratic(2, 2, 1, 0.0).unwrap();
        let x = v(&[0.3, -0.4]);
        for c in &p.components {
            assert_eq!(c.bregman(&x, &x), 0.0);
            assert_eq!((c.gradient(&x) - c.gradient(&x)).norm(), 0.0);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn slope_invariant_under_scaling(
                gaps in proptest::collection::vec(1e-6f64..1e3, 5),
                factor in 1e-3f64..1e3,
            ) {
                let ks = [32.0, 64.0, 128.0, 256.0, 512.0];
                let pts: Vec<_> = ks.iter().copied().zip(gaps.iter().copied()).collect();
                let scaled: Vec<_> = pts.iter().map(|&(k, g)| (k, g * factor)).collect();
                let a = estimate_rate(&pts).unwrap();
                let b = estimate_rate(&scaled).unwrap();
                prop_assert!((a.slope - b.slope).abs() <= 1e-12 * (1.0 + a.slope.abs()));
            }

            #[test]
            fn exact_power_laws_recovered(slope in -3.0f64..1.0, c in 1e-3f64..1e3) {
                let pts: Vec<_> = (3..9).map(|e| {
                    let k = 2f64.powi(e);
                    (k, c * k.powf(slope))
                }).collect();
                let fit = estimate_rate(&pts).unwrap();
                prop_assert!((fit.slope - slope).abs() <= 1e-12);
            }
        }
    }
}
