//! Closed-form proximal operators for the regularizer `psi`.
//!
//! Every prox here solves `argmin_x  n*psi(x) + ||x - y||^2 / (2*eta)` exactly.
//! Only the product `s = n*eta` matters; the `(eta, n)` pair is kept in the
//! public signatures so call sites line up with the epoch update.

use std::fmt;

use crate::error::{Error, Result};
use crate::descriptor::Descriptor;
use crate::Vector;

/// Relative tolerance used to decide set membership and active constraints.
pub const MEMBERSHIP_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    Zero,
    /// `lambda * ||x||_1`
    L1 { lambda: f64 },
    /// `(mu/2) * ||x - center||^2`; `None` means the origin.
    SqL2 { mu: f64, center: Option<Vector> },
    /// Indicator of `{x : ||x - center|| <= radius}`.
    BallIndicator { radius: f64, center: Option<Vector> },
    /// Indicator of `{x : lo <= x <= hi}`. A length-one bound broadcasts.
    BoxIndicator { lo: Vec<f64>, hi: Vec<f64> },
    /// `lambda * ||x||_1 + (mu/2) * ||x||^2`
    ElasticNet { lambda: f64, mu: f64 },
}

impl Regularizer {
    pub fn l1(lambda: f64) -> Result<Self> {
        positive("lambda", lambda)?;
        Ok(Regularizer::L1 { lambda })
    }

    pub fn sq_l2(mu: f64, center: Option<Vector>) -> Result<Self> {
        positive("mu", mu)?;
        finite_center(&center)?;
        Ok(Regularizer::SqL2 { mu, center })
    }

    pub fn ball(radius: f64, center: Option<Vector>) -> Result<Self> {
        positive("radius", radius)?;
        finite_center(&center)?;
        Ok(Regularizer::BallIndicator { radius, center })
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || hi.is_empty() {
            return Err(Error::invalid("box bounds must be non-empty"));
        }
        if lo.len() != hi.len() && lo.len() != 1 && hi.len() != 1 {
            return Err(Error::invalid("box bounds have different lengths"));
        }
        let len = lo.len().max(hi.len());
        for j in 0..len {
            let (l, h) = (bound_at(&lo, j), bound_at(&hi, j));
            if l.is_nan() || h.is_nan() || l > h {
                return Err(Error::invalid(format!("box bound {j}: need lo <= hi, got {l} > {h}")));
            }
        }
        Ok(Regularizer::BoxIndicator { lo, hi })
    }

    pub fn elastic_net(lambda: f64, mu: f64) -> Result<Self> {
        positive("lambda", lambda)?;
        positive("mu", mu)?;
        Ok(Regularizer::ElasticNet { lambda, mu })
    }

    /// Strong-convexity modulus certified by the variant.
    pub fn mu_psi(&self) -> f64 {
        match self {
            Regularizer::SqL2 { mu, .. } | Regularizer::ElasticNet { mu, .. } => *mu,
            _ => 0.0,
        }
    }

    pub fn is_indicator(&self) -> bool {
        matches!(
            self,
            Regularizer::BallIndicator { .. } | Regularizer::BoxIndicator { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::Zero => "zero",
            Regularizer::L1 { .. } => "l1",
            Regularizer::SqL2 { .. } => "sql2",
            Regularizer::BallIndicator { .. } => "ball",
            Regularizer::BoxIndicator { .. } => "box",
            Regularizer::ElasticNet { .. } => "elastic-net",
        }
    }

    /// Checks that vector-valued parameters agree with dimension `d`.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        let check = |len: usize| {
            if len == d || len == 1 {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: d, got: len })
            }
        };
        match self {
            Regularizer::SqL2 { center: Some(c), .. }
            | Regularizer::BallIndicator { center: Some(c), .. } => {
                if c.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: c.len() });
                }
                Ok(())
            }
            Regularizer::BoxIndicator { lo, hi } => {
                check(lo.len())?;
                check(hi.len())
            }
            _ => Ok(()),
        }
    }

    /// `psi(x)`, or `f64::INFINITY` outside the domain of an indicator.
    pub fn value(&self, x: &Vector) -> f64 {
        match self {
            Regularizer::Zero => 0.0,
            Regularizer::L1 { lambda } => lambda * x.lp_norm(1),
            Regularizer::SqL2 { mu, center } => 0.5 * mu * offset(x, center).norm_squared(),
            Regularizer::ElasticNet { lambda, mu } => {
                lambda * x.lp_norm(1) + 0.5 * mu * x.norm_squared()
            }
            Regularizer::BallIndicator { .. } | Regularizer::BoxIndicator { .. } => {
                if self.membership_residual(x) <= MEMBERSHIP_TOL * (1.0 + x.amax()) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Euclidean distance from `x` to the domain of `psi` (zero for full-domain variants).
    pub fn membership_residual(&self, x: &Vector) -> f64 {
        match self {
            Regularizer::BallIndicator { radius, center } => {
                (offset(x, center).norm() - radius).max(0.0)
            }
            Regularizer::BoxIndicator { lo, hi } => x
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let excess = (bound_at(lo, j) - v).max(v - bound_at(hi, j)).max(0.0);
                    excess * excess
                })
                .sum::<f64>()
                .sqrt(),
            _ => 0.0,
        }
    }

    /// Exact minimizer of `n*psi(x) + ||x - y||^2 / (2*eta)`.
    pub fn prox(&self, eta: f64, n: usize, y: &Vector) -> Vector {
        self.prox_scaled(eta * n as f64, y)
    }

    /// Prox with the combined parameter `s = n*eta`.
    pub fn prox_scaled(&self, s: f64, y: &Vector) -> Vector {
        match self {
            Regularizer::Zero => y.clone(),
            Regularizer::L1 { lambda } => soft_threshold(y, s * lambda),
            Regularizer::SqL2 { mu, center } => {
                let shrink = 1.0 / (1.0 + s * mu);
                match center {
                    None => y * shrink,
                    Some(c) => (y + c * (s * mu)) * shrink,
                }
            }
            Regularizer::ElasticNet { lambda, mu } => {
                soft_threshold(y, s * lambda) / (1.0 + s * mu)
            }
            Regularizer::BallIndicator { radius, center } => {
                let diff = offset(y, center);
                let norm = diff.norm();
                if norm <= *radius {
                    y.clone()
                } else {
                    let scaled = diff * (radius / norm);
                    match center {
                        None => scaled,
                        Some(c) => scaled + c,
                    }
                }
            }
            Regularizer::BoxIndicator { lo, hi } => Vector::from_iterator(
                y.len(),
                y.iter()
                    .enumerate()
                    .map(|(j, &v)| v.clamp(bound_at(lo, j), bound_at(hi, j))),
            ),
        }
    }

    /// Distance from `v` to the subdifferential of `psi` at `x`
    /// (`f64::INFINITY` when `x` is outside the domain).
    pub fn subdifferential_distance(&self, x: &Vector, v: &Vector) -> f64 {
        match self {
            Regularizer::Zero => v.norm(),
            Regularizer::L1 { lambda } => l1_subdiff_distance(x, v, *lambda),
            Regularizer::SqL2 { mu, center } => (v - offset(x, center) * *mu).norm(),
            Regularizer::ElasticNet { lambda, mu } => {
                let shifted = v - x * *mu;
                l1_subdiff_distance(x, &shifted, *lambda)
            }
            Regularizer::BallIndicator { radius, center } => {
                let diff = offset(x, center);
                let norm = diff.norm();
                let tol = MEMBERSHIP_TOL * radius.max(1.0);
                if norm > radius + tol {
                    f64::INFINITY
                } else if norm < radius - tol || norm == 0.0 {
                    v.norm()
                } else {
                    // normal cone {t*(x-c) : t >= 0}
                    let u = diff / norm;
                    let t = v.dot(&u).max(0.0);
                    (v - u * t).norm()
                }
            }
            Regularizer::BoxIndicator { lo, hi } => {
                let mut acc = 0.0;
                for (j, (&xj, &vj)) in x.iter().zip(v.iter()).enumerate() {
                    let (l, h) = (bound_at(lo, j), bound_at(hi, j));
                    let tol_l = MEMBERSHIP_TOL * (1.0 + l.abs());
                    let tol_h = MEMBERSHIP_TOL * (1.0 + h.abs());
                    if xj < l - tol_l || xj > h + tol_h {
                        return f64::INFINITY;
                    }
                    let at_lo = (xj - l).abs() <= tol_l;
                    let at_hi = (xj - h).abs() <= tol_h;
                    let r = match (at_lo, at_hi) {
                        (true, true) => 0.0,
                        (false, true) => (-vj).max(0.0),
                        (true, false) => vj.max(0.0),
                        (false, false) => vj.abs(),
                    };
                    acc += r * r;
                }
                acc.sqrt()
            }
        }
    }

    /// Magnitude of the first-order condition `0 in n*d(psi)(x) + (x - y)/eta`.
    pub fn prox_optimality_residual(&self, eta: f64, n: usize, y: &Vector, x: &Vector) -> f64 {
        let s = eta * n as f64;
        let v = (y - x) / s;
        n as f64 * self.subdifferential_distance(x, &v)
    }

    /// The subgradient of `psi` at `x_next` implied by the prox step:
    /// `(y - x_next) / (n*eta)`.
    ///
    /// Fails when `x_next` is not the prox of `y`.
    pub fn subgradient_from_prox(
        &self,
        eta: f64,
        n: usize,
        y: &Vector,
        x_next: &Vector,
    ) -> Result<Vector> {
        let expected = self.prox(eta, n, y);
        let err = (&expected - x_next).norm();
        if err > 1e-12 * (1.0 + y.norm()) {
            return Err(Error::Precondition(format!(
                "x_next is not prox(y): distance {err:e}"
            )));
        }
        Ok((y - x_next) / (eta * n as f64))
    }

    /// Canonical text form used by instance files and manifests.
    pub fn descriptor_string(&self) -> String {
        let vec = |v: &Vector| join(v.iter());
        match self {
            Regularizer::Zero => "zero".to_string(),
            Regularizer::L1 { lambda } => format!("l1 lambda={lambda:?}"),
            Regularizer::SqL2 { mu, center } => match center {
                None => format!("sql2 mu={mu:?}"),
                Some(c) => format!("sql2 mu={mu:?} center={}", vec(c)),
            },
            Regularizer::BallIndicator { radius, center } => match center {
                None => format!("ball radius={radius:?}"),
                Some(c) => format!("ball radius={radius:?} center={}", vec(c)),
            },
            Regularizer::BoxIndicator { lo, hi } => {
                format!("box lo={} hi={}", join(lo.iter()), join(hi.iter()))
            }
            Regularizer::ElasticNet { lambda, mu } => {
                format!("elastic-net lambda={lambda:?} mu={mu:?}")
            }
        }
    }

    /// Parses `name key=value ...` (see [`Descriptor`]).
    pub fn parse(text: &str) -> Result<Self> {
        let desc = Descriptor::parse(text)?;
        let center = |desc: &Descriptor| -> Result<Option<Vector>> {
            Ok(desc.get_list("center")?.map(Vector::from_vec))
        };
        let reg = match desc.name.as_str() {
            "zero" | "none" => Regularizer::Zero,
            "l1" => Regularizer::l1(desc.require_f64("lambda")?)?,
            "sql2" => Regularizer::sq_l2(desc.require_f64("mu")?, center(&desc)?)?,
            "ball" => Regularizer::ball(desc.require_f64("radius")?, center(&desc)?)?,
            "box" => Regularizer::boxed(
                desc.get_list("lo")?
                    .ok_or_else(|| Error::parse("box", "missing lo"))?,
                desc.get_list("hi")?
                    .ok_or_else(|| Error::parse("box", "missing hi"))?,
            )?,
            "elastic-net" | "elasticnet" => Regularizer::elastic_net(
                desc.require_f64("lambda")?,
                desc.require_f64("mu")?,
            )?,
            other => return Err(Error::parse("regularizer", format!("unknown variant '{other}'"))),
        };
        desc.ensure_consumed()?;
        Ok(reg)
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor_string())
    }
}

fn positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {value}")))
    }
}

fn finite_center(center: &Option<Vector>) -> Result<()> {
    match center {
        Some(c) if c.iter().any(|v| !v.is_finite()) => {
            Err(Error::invalid("center has non-finite coordinates"))
        }
        _ => Ok(()),
    }
}

fn bound_at(bounds: &[f64], j: usize) -> f64 {
    if bounds.len() == 1 {
        bounds[0]
    } else {
        bounds[j]
    }
}

fn offset(x: &Vector, center: &Option<Vector>) -> Vector {
    match center {
        None => x.clone(),
        Some(c) => x - c,
    }
}

fn join<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

pub fn soft_threshold(y: &Vector, threshold: f64) -> Vector {
    y.map(|v| {
        if v > threshold {
            v - threshold
        } else if v < -threshold {
            v + threshold
        } else {
            0.0
        }
    })
}

fn l1_subdiff_distance(x: &Vector, v: &Vector, lambda: f64) -> f64 {
    x.iter()
        .zip(v.iter())
        .map(|(&xj, &vj)| {
            let r = if xj > 0.0 {
                vj - lambda
            } else if xj < 0.0 {
                vj + lambda
            } else {
                (vj.abs() - lambda).max(0.0)
            };
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    fn all_variants(d: usize) -> Vec<Regularizer> {
        vec![
            Regularizer::Zero,
            Regularizer::l1(0.7).unwrap(),
            Regularizer::sq_l2(1.3, Some(Vector::from_element(d, 0.25))).unwrap(),
            Regularizer::ball(1.5, Some(Vector::from_element(d, -0.5))).unwrap(),
            Regularizer::boxed(vec![-1.0], vec![0.5]).unwrap(),
            Regularizer::elastic_net(0.4, 2.0).unwrap(),
        ]
    }

    fn random_vec(rng: &mut ChaCha20Rng, d: usize, scale: f64) -> Vector {
        Vector::from_fn(d, |_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn zero_is_identity() {
        let y = v(&[7.0, -3.0]);
        assert_eq!(Regularizer::Zero.prox(0.3, 4, &y), y);
    }

    #[test]
    fn l1_soft_threshold() {
        let reg = Regularizer::l1(1.0).unwrap();
        let out = reg.prox(0.25, 2, &v(&[2.0, -0.3, 0.5]));
        assert_eq!(out, v(&[1.5, 0.0, 0.0]));
    }

    #[test]
    fn sql2_shrinks() {
        let reg = Regularizer::sq_l2(2.0, None).unwrap();
        let out = reg.prox(1.0, 1, &v(&[3.0, -6.0]));
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], -2.0, epsilon = 1e-15);
    }

    #[test]
    fn ball_projects_radially() {
        let reg = Regularizer::ball(1.0, None).unwrap();
        let out = reg.prox(1.0, 1, &v(&[3.0, 4.0]));
        assert_abs_diff_eq!(out[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.8, epsilon = 1e-15);
        // on the boundary: unchanged
        let y = v(&[0.6, 0.8]);
        assert_eq!(reg.prox(1.0, 1, &y), y);
    }

    #[test]
    fn box_clamps() {
        let reg = Regularizer::boxed(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(reg.prox(1.0, 3, &v(&[-4.0, 5.0])), v(&[-1.0, 2.0]));
    }

    #[test]
    fn elastic_net_threshold_then_shrink() {
        let reg = Regularizer::elastic_net(1.0, 1.0).unwrap();
        // s = 1: soft-threshold 3 -> 2, then /2
        let out = reg.prox(0.5, 2, &v(&[3.0, 0.5]));
        assert_eq!(out, v(&[1.0, 0.0]));
    }

    #[test]
    fn constructor_validation() {
        assert!(Regularizer::l1(0.0).is_err());
        assert!(Regularizer::sq_l2(-1.0, None).is_err());
        assert!(Regularizer::ball(0.0, None).is_err());
        assert!(Regularizer::boxed(vec![1.0], vec![0.0]).is_err());
        assert!(Regularizer::elastic_net(1.0, f64::NAN).is_err());
    }

    #[test]
    fn indicator_value_outside_is_infinite() {
        let reg = Regularizer::ball(1.0, None).unwrap();
        assert_eq!(reg.value(&v(&[3.0, 4.0])), f64::INFINITY);
        assert_eq!(reg.value(&v(&[0.6, 0.8])), 0.0);
    }

    #[test]
    fn residual_zero_at_prox_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for reg in all_variants(4) {
            for _ in 0..200 {
                let y = random_vec(&mut rng, 4, 5.0);
                let eta = rng.random_range(0.01..2.0);
                let n = rng.random_range(1..6);
                let x = reg.prox(eta, n, &y);
                let r = reg.prox_optimality_residual(eta, n, &y, &x);
                assert!(r <= 1e-10, "{reg}: residual {r:e}");
            }
        }
    }

    #[test]
    fn l1_grid_search_agrees() {
        let reg = Regularizer::l1(1.3).unwrap();
        let (eta, n) = (0.4, 3);
        let s = eta * n as f64;
        for &y0 in &[-6.2, -1.0, 0.3, 1.55, 4.0, 9.1] {
            // brute force over x in [-10, 10] step 1e-4
            let objective = |x: f64| s * 1.3 * x.abs() + (x - y0).powi(2) / 2.0;
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..=200_000 {
                let x = -10.0 + i as f64 * 1e-4;
                let val = objective(x);
                if val < best.0 {
                    best = (val, x);
                }
            }
            let exact = reg.prox(eta, n, &v(&[y0]))[0];
            assert!((exact - best.1).abs() <= 1e-4, "y={y0}: prox {exact} grid {}", best.1);
        }
    }

    #[test]
    fn residual_positive_when_not_prox() {
        let reg = Regularizer::l1(5.0).unwrap();
        let y = v(&[1.0, -2.0]);
        assert!(reg.prox_optimality_residual(1.0, 1, &y, &y) > 0.1);
    }

    #[test]
    fn subgradient_from_prox_cases() {
        let y = v(&[2.0, -0.3, 0.5]);
        let g = Regularizer::Zero
            .subgradient_from_prox(0.5, 2, &y, &y)
            .unwrap();
        assert_eq!(g, Vector::zeros(3));

        let sq = Regularizer::sq_l2(0.8, None).unwrap();
        let x = sq.prox(0.5, 3, &y);
        let g = sq.subgradient_from_prox(0.5, 3, &y, &x).unwrap();
        assert!((g - &x * 0.8).norm() <= 1e-12);

        let l1 = Regularizer::l1(1.0).unwrap();
        let x = l1.prox(0.25, 2, &y);
        let g = l1.subgradient_from_prox(0.25, 2, &y, &x).unwrap();
        assert!((g[0] - 1.0).abs() <= 1e-12);
        assert!(g[1].abs() <= 1.0 && g[2].abs() <= 1.0);

        assert!(l1.subgradient_from_prox(0.25, 2, &y, &y).is_err());
    }

    #[test]
    fn implied_subgradient_is_member() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for reg in all_variants(3) {
            for _ in 0..200 {
                let y = random_vec(&mut rng, 3, 4.0);
                let eta = rng.random_range(0.05..1.5);
                let x = reg.prox(eta, 2, &y);
                let g = reg.subgradient_from_prox(eta, 2, &y, &x).unwrap();
                let dist = reg.subdifferential_distance(&x, &g);
                assert!(dist <= 1e-9, "{reg}: {dist:e}");
            }
        }
    }

    #[test]
    fn firm_nonexpansive() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for reg in all_variants(5) {
            for _ in 0..1000 {
                let y1 = random_vec(&mut rng, 5, 6.0);
                let y2 = random_vec(&mut rng, 5, 6.0);
                let s = rng.random_range(0.01..3.0);
                let dp = reg.prox_scaled(s, &y1) - reg.prox_scaled(s, &y2);
                let lhs = dp.norm_squared();
                let rhs = dp.dot(&(&y1 - &y2));
                assert!(lhs <= rhs + 1e-10 * (1.0 + rhs.abs()), "{reg}: {lhs} > {rhs}");
            }
        }
    }

    #[test]
    fn strong_convexity_certificate() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let regs = [
            Regularizer::sq_l2(1.7, Some(v(&[0.5, -1.0, 2.0]))).unwrap(),
            Regularizer::elastic_net(0.3, 0.9).unwrap(),
        ];
        for reg in regs {
            let mu = reg.mu_psi();
            for _ in 0..1000 {
                let y = random_vec(&mut rng, 3, 5.0);
                let x = reg.prox_scaled(0.7, &y);
                let g = reg.subgradient_from_prox(0.7, 1, &y, &x).unwrap();
                let z = random_vec(&mut rng, 3, 5.0);
                let bregman = reg.value(&z) - reg.value(&x) - g.dot(&(&z - &x));
                let floor = 0.5 * mu * (&z - &x).norm_squared();
                assert!(bregman >= floor - 1e-10 * (1.0 + floor), "{reg}: {bregman} < {floor}");
            }
        }
    }

    #[test]
    fn indicator_output_in_set() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for reg in all_variants(4).into_iter().filter(|r| r.is_indicator()) {
            for _ in 0..500 {
                let y = random_vec(&mut rng, 4, 10.0);
                let x = reg.prox(rng.random_range(0.1..2.0), 3, &y);
                assert!(reg.membership_residual(&x) <= 1e-12);
                assert_eq!(reg.value(&x), 0.0);
            }
        }
    }

    #[test]
    fn descriptor_round_trip() {
        for reg in all_variants(3) {
            let back = Regularizer::parse(&reg.descriptor_string()).unwrap();
            assert_eq!(back, reg);
        }
        assert!(Regularizer::parse("l1 lambda=1 bogus=2").is_err());
        assert!(Regularizer::parse("tv lambda=1").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prox_depends_only_on_product(
                ys in proptest::collection::vec(-20.0f64..20.0, 1..6),
                eta in 0.001f64..5.0,
                n in 1usize..50,
            ) {
                let y = Vector::from_vec(ys);
                for reg in all_variants(y.len()) {
                    let a = reg.prox(eta, n, &y);
                    let b = reg.prox(eta * n as f64, 1, &y);
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
