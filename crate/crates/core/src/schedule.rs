//! Stepsize rules `eta_k` for every problem class, including the adaptive
//! distance-based rule and its summability condition.
//!
//! All logarithms are natural.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::descriptor::Descriptor;
use crate::Vector;

/// Problem and horizon constants the rules are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub n: usize,
    pub k_total: usize,
    pub l_bar: f64,
    pub l_star: f64,
    pub g_bar: f64,
    pub mu_f: f64,
    pub mu_psi: f64,
    pub sigma_any_sq: f64,
    pub sigma_rand_sq: f64,
    pub d: f64,
}

impl ScheduleParams {
    /// `mu_F = mu_f + 2 mu_psi`.
    pub fn mu_big_f(&self) -> f64 {
        self.mu_f + 2.0 * self.mu_psi
    }

    pub fn log_factor(&self) -> f64 {
        1.0 + (self.k_total as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("n must be positive"));
        }
        if self.k_total < 2 {
            return Err(Error::invalid(format!(
                "the number of epochs K must satisfy K >= 2 (got {})",
                self.k_total
            )));
        }
        let named = [
            ("L_bar", self.l_bar),
            ("L_star", self.l_star),
            ("G_bar", self.g_bar),
            ("mu_f", self.mu_f),
            ("mu_psi", self.mu_psi),
            ("sigma_any_sq", self.sigma_any_sq),
            ("sigma_rand_sq", self.sigma_rand_sq),
            ("D", self.d),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.sigma_rand_sq < self.sigma_any_sq * (1.0 - 1e-12) {
            return Err(Error::invalid(format!(
                "sigma_rand_sq ({}) < sigma_any_sq ({})",
                self.sigma_rand_sq, self.sigma_any_sq
            )));
        }
        Ok(())
    }

    /// `1 / (4 n sqrt(2 L_bar L_star (1 + log K)))`.
    pub fn smooth_cap(&self) -> f64 {
        1.0 / (self.n as f64 * self.smooth_cap_denominator())
    }

    /// `1 / (n * max(4 sqrt(2 L_bar L_star (1 + log K)), mu_psi))`.
    pub fn smooth_cap_with_mu_psi(&self) -> f64 {
        1.0 / (self.n as f64 * self.smooth_cap_denominator().max(self.mu_psi))
    }

    fn smooth_cap_denominator(&self) -> f64 {
        4.0 * (2.0 * self.l_bar * self.l_star * self.log_factor()).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShuffleVariant {
    Any,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepsizeRule {
    SmoothConvexAny,
    SmoothConvexRandom,
    SmoothStronglyAny,
    SmoothStronglyRandom,
    /// `eta / sqrt(k)`
    LipSqrtK { eta: f64 },
    /// `eta / sqrt(K)`
    LipSqrtBigK { eta: f64 },
    /// `eta (K - k + 1) / K^{3/2}`
    LipLinearDecay { eta: f64 },
    /// `r_k c / (n G_bar sqrt(6 (1 + 1/delta) k (1 + log k)^{1+delta}))`
    LipAdaptive { c: f64, delta: f64, r: f64 },
    /// `m / (n mu_psi k)`
    StronglyPsi { m: u32 },
    ConstantEta { eta: f64 },
}

impl StepsizeRule {
    pub fn name(&self) -> &'static str {
        match self {
            StepsizeRule::SmoothConvexAny => "smooth-convex-any",
            StepsizeRule::SmoothConvexRandom => "smooth-convex-random",
            StepsizeRule::SmoothStronglyAny => "smooth-strongly-any",
            StepsizeRule::SmoothStronglyRandom => "smooth-strongly-random",
            StepsizeRule::LipSqrtK { .. } => "lip-sqrt-k",
            StepsizeRule::LipSqrtBigK { .. } => "lip-sqrt-bigk",
            StepsizeRule::LipLinearDecay { .. } => "lip-linear-decay",
            StepsizeRule::LipAdaptive { .. } => "lip-adaptive",
            StepsizeRule::StronglyPsi { .. } => "strongly-psi",
            StepsizeRule::ConstantEta { .. } => "constant",
        }
    }

    pub fn is_smooth_rule(&self) -> bool {
        matches!(
            self,
            StepsizeRule::SmoothConvexAny
                | StepsizeRule::SmoothConvexRandom
                | StepsizeRule::SmoothStronglyAny
                | StepsizeRule::SmoothStronglyRandom
        )
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, StepsizeRule::LipAdaptive { .. })
    }

    pub fn descriptor_string(&self) -> String {
        match self {
            StepsizeRule::LipSqrtK { eta }
            | StepsizeRule::LipSqrtBigK { eta }
            | StepsizeRule::LipLinearDecay { eta }
            | StepsizeRule::ConstantEta { eta } => format!("{} eta={eta:?}", self.name()),
            StepsizeRule::LipAdaptive { c, delta, r } => {
                format!("{} c={c:?} delta={delta:?} r={r:?}", self.name())
            }
            StepsizeRule::StronglyPsi { m } => format!("{} m={m}", self.name()),
            _ => self.name().to_string(),
        }
    }
}

impl fmt::Display for StepsizeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor_string())
    }
}

/// Manual replacements for constants normally taken from the reference solution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScheduleOverrides {
    pub d: Option<f64>,
    pub sigma_any_sq: Option<f64>,
    pub sigma_rand_sq: Option<f64>,
}

impl ScheduleOverrides {
    pub fn apply(&self, params: &mut ScheduleParams) {
        if let Some(d) = self.d {
            params.d = d;
        }
        if let Some(s) = self.sigma_any_sq {
            params.sigma_any_sq = s;
        }
        if let Some(s) = self.sigma_rand_sq {
            params.sigma_rand_sq = s;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_none() && self.sigma_any_sq.is_none() && self.sigma_rand_sq.is_none()
    }
}

/// Parses e.g. `lip-adaptive c=0.5 delta=1 r=1` or `smooth-convex-any D=2`.
pub fn parse_schedule(text: &str) -> Result<(StepsizeRule, ScheduleOverrides)> {
    let desc = Descriptor::parse(text)?;
    let eta = || desc.require_f64("eta");
    let rule = match desc.name.as_str() {
        "smooth-convex-any" => StepsizeRule::SmoothConvexAny,
        "smooth-convex-random" => StepsizeRule::SmoothConvexRandom,
        "smooth-strongly-any" => StepsizeRule::SmoothStronglyAny,
        "smooth-strongly-random" => StepsizeRule::SmoothStronglyRandom,
        "lip-sqrt-k" => StepsizeRule::LipSqrtK { eta: eta()? },
        "lip-sqrt-bigk" => StepsizeRule::LipSqrtBigK { eta: eta()? },
        "lip-linear-decay" => StepsizeRule::LipLinearDecay { eta: eta()? },
        "lip-adaptive" => StepsizeRule::LipAdaptive {
            c: desc.get_f64("c")?.unwrap_or(0.5),
            delta: desc.get_f64("delta")?.unwrap_or(1.0),
            r: desc.get_f64("r")?.unwrap_or(1.0),
        },
        "strongly-psi" => {
            let m = desc.get_u64("m")?.unwrap_or(2);
            let m = u32::try_from(m).map_err(|_| Error::parse("strongly-psi", "m too large"))?;
            StepsizeRule::StronglyPsi { m }
        }
        "constant" => StepsizeRule::ConstantEta { eta: eta()? },
        other => return Err(Error::parse("schedule", format!("unknown rule '{other}'"))),
    };
    let overrides = ScheduleOverrides {
        d: desc.get_f64("D")?,
        sigma_any_sq: desc.get_f64("sigma_any_sq")?,
        sigma_rand_sq: desc.get_f64("sigma_rand_sq")?,
    };
    desc.ensure_consumed()?;
    Ok((rule, overrides))
}

/// A rule bound to its constants; carries the running `r_k` for the adaptive rule.
#[derive(Debug, Clone)]
pub struct StepsizeSchedule {
    rule: StepsizeRule,
    params: ScheduleParams,
    r_state: f64,
    last_update: usize,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

impl StepsizeSchedule {
    pub fn new(rule: StepsizeRule, params: ScheduleParams) -> Result<Self> {
        params.validate()?;
        if rule.is_smooth_rule() {
            positive("L_bar", params.l_bar)?;
            positive("L_star", params.l_star)?;
        }
        match &rule {
            StepsizeRule::SmoothConvexAny | StepsizeRule::SmoothConvexRandom => {
                if params.d == 0.0 {
                    return Err(Error::invalid(
                        "D = 0 makes the smooth convex stepsize zero (x1 is already optimal)",
                    ));
                }
            }
            StepsizeRule::SmoothStronglyAny | StepsizeRule::SmoothStronglyRandom => {
                positive("mu_F", params.mu_big_f())?;
            }
            StepsizeRule::LipSqrtK { eta }
            | StepsizeRule::LipSqrtBigK { eta }
            | StepsizeRule::LipLinearDecay { eta }
            | StepsizeRule::ConstantEta { eta } => positive("eta", *eta)?,
            StepsizeRule::LipAdaptive { c, delta, r } => {
                check_adaptive(*c, *delta)?;
                positive("r", *r)?;
                positive("G_bar", params.g_bar)?;
            }
            StepsizeRule::StronglyPsi { m } => {
                if *m == 0 {
                    return Err(Error::invalid("m must be a positive integer"));
                }
                if params.mu_psi <= 0.0 {
                    return Err(Error::invalid("strongly-psi rule needs mu_psi > 0"));
                }
            }
        }
        let r_state = match &rule {
            StepsizeRule::LipAdaptive { r, .. } => *r,
            _ => 0.0,
        };
        Ok(StepsizeSchedule { rule, params, r_state, last_update: 0 })
    }

    pub fn rule(&self) -> &StepsizeRule {
        &self.rule
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn is_adaptive(&self) -> bool {
        self.rule.is_adaptive()
    }

    /// Current `r_k` of the adaptive rule.
    pub fn r_state(&self) -> f64 {
        self.r_state
    }

    /// Records `||x_k - x_1||` for epoch `k`; must be called for `k = 1, 2, ...` in order.
    pub fn update_adaptive_state(&mut self, k: usize, x_k: &Vector, x_1: &Vector) -> Result<f64> {
        if k != self.last_update + 1 {
            return Err(Error::OutOfOrder { expected: self.last_update + 1, got: k });
        }
        let disp = (x_k - x_1).norm();
        if !disp.is_finite() {
            return Err(Error::NumericalAbort { epoch: k, reason: "non-finite displacement".into() });
        }
        self.r_state = self.r_state.max(disp);
        self.last_update = k;
        Ok(self.r_state)
    }

    pub fn eta_at(&self, k: usize) -> Result<f64> {
        let p = &self.params;
        let big_k = p.k_total;
        if k == 0 || (k > big_k && !self.rule.is_adaptive()) {
            return Err(Error::invalid(format!("epoch {k} outside 1..={big_k}")));
        }
        let n = p.n as f64;
        let kf = k as f64;
        let bk = big_k as f64;
        let eta = match &self.rule {
            StepsizeRule::SmoothConvexAny => {
                let branch = sigma_branch(p.sigma_any_sq, |s| {
                    p.d.powf(2.0 / 3.0) / (n * (p.l_bar * s * bk * p.log_factor()).cbrt())
                });
                p.smooth_cap().min(branch)
            }
            StepsizeRule::SmoothConvexRandom => {
                let branch = sigma_branch(p.sigma_rand_sq, |s| {
                    p.d.powf(2.0 / 3.0) / (n * n * p.l_bar * s * bk * p.log_factor()).cbrt()
                });
                p.smooth_cap().min(branch)
            }
            StepsizeRule::SmoothStronglyAny | StepsizeRule::SmoothStronglyRandom => {
                let (variant, sigma) = if self.rule == StepsizeRule::SmoothStronglyAny {
                    (ShuffleVariant::Any, p.sigma_any_sq)
                } else {
                    (ShuffleVariant::Random, p.sigma_rand_sq)
                };
                let branch = sigma_branch(sigma, |_| {
                    u_factor(p, variant) / (n * p.mu_big_f() * bk)
                });
                p.smooth_cap_with_mu_psi().min(branch)
            }
            StepsizeRule::LipSqrtK { eta } => eta / kf.sqrt(),
            StepsizeRule::LipSqrtBigK { eta } => eta / bk.sqrt(),
            StepsizeRule::LipLinearDecay { eta } => eta * (bk - kf + 1.0) / bk.powf(1.5),
            StepsizeRule::LipAdaptive { c, delta, .. } => {
                if self.last_update != k {
                    return Err(Error::Precondition(format!(
                        "adaptive state is current through epoch {}, eta requested for {k}",
                        self.last_update
                    )));
                }
                self.r_state * adaptive_unit_eta(p.n, p.g_bar, *c, *delta, k)
            }
            StepsizeRule::StronglyPsi { m } => *m as f64 / (n * p.mu_psi * kf),
            StepsizeRule::ConstantEta { eta } => *eta,
        };
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::invalid(format!("rule {} produced eta = {eta}", self.rule)));
        }
        Ok(eta)
    }

    /// `eta_1, ..., eta_K` for non-adaptive rules.
    pub fn sequence(&self) -> Result<Vec<f64>> {
        if self.is_adaptive() {
            return Err(Error::Precondition(
                "adaptive stepsizes depend on the trajectory".into(),
            ));
        }
        (1..=self.params.k_total).map(|k| self.eta_at(k)).collect()
    }
}

/// A sigma-dependent branch; `+inf` when sigma is zero so the cap binds.
fn sigma_branch(sigma_sq: f64, f: impl Fn(f64) -> f64) -> f64 {
    if sigma_sq == 0.0 {
        f64::INFINITY
    } else {
        f(sigma_sq)
    }
}

/// `c / (n G_bar sqrt(6 (1 + 1/delta) k (1 + log k)^{1+delta}))`, the adaptive rule per unit `r_k`.
pub fn adaptive_unit_eta(n: usize, g_bar: f64, c: f64, delta: f64, k: usize) -> f64 {
    let kf = k as f64;
    let lk = 1.0 + kf.ln();
    c / (n as f64 * g_bar * (6.0 * (1.0 + 1.0 / delta) * kf * lk.powf(1.0 + delta)).sqrt())
}

/// `u = max(1, log(mu_F^3 D^2 K^2 / (L_bar sigma^2 (1 + log K))))`, with an
/// extra factor `n` inside the log for the random variant.
pub fn u_factor(p: &ScheduleParams, variant: ShuffleVariant) -> f64 {
    let (sigma, extra) = match variant {
        ShuffleVariant::Any => (p.sigma_any_sq, 1.0),
        ShuffleVariant::Random => (p.sigma_rand_sq, p.n as f64),
    };
    if sigma == 0.0 {
        return 1.0;
    }
    let k = p.k_total as f64;
    let arg = extra * p.mu_big_f().powi(3) * p.d * p.d * k * k
        / (p.l_bar * sigma * p.log_factor());
    if arg > 0.0 {
        arg.ln().max(1.0)
    } else {
        1.0
    }
}

fn check_adaptive(c: f64, delta: f64) -> Result<()> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::invalid(format!("adaptive rule needs 0 < c < 1, got c = {c}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("adaptive rule needs delta > 0, got {delta}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveFeasibility {
    /// `sum_{k <= terms} 6 G_bar^2 n^2 eta~_k^2`
    pub partial_sum: f64,
    pub terms: usize,
    /// `c^2`, the bound implied by `sum 1/(k (1 + log k)^{1+delta}) <= 1 + 1/delta`.
    pub analytic_bound: f64,
    pub ok: bool,
    pub near_threshold: bool,
}

pub const FEASIBILITY_TERMS: usize = 1_000_000;
const NEAR_THRESHOLD: f64 = 0.95;

/// Checks the summability condition of the adaptive rule. The summand
/// `6 G_bar^2 n^2 eta~_k^2 = c^2 / ((1 + 1/delta) k (1 + log k)^{1+delta})`
/// does not depend on `n` or `G_bar`.
pub fn adaptive_feasibility(c: f64, delta: f64) -> Result<AdaptiveFeasibility> {
    check_adaptive(c, delta)?;
    let scale = c * c / (1.0 + 1.0 / delta);
    // summed smallest-first for accuracy
    let partial_sum = (1..=FEASIBILITY_TERMS)
        .rev()
        .map(|k| {
            let kf = k as f64;
            scale / (kf * (1.0 + kf.ln()).powf(1.0 + delta))
        })
        .sum::<f64>();
    let analytic_bound = c * c;
    Ok(AdaptiveFeasibility {
        partial_sum,
        terms: FEASIBILITY_TERMS,
        analytic_bound,
        ok: partial_sum <= analytic_bound,
        near_threshold: analytic_bound > NEAR_THRESHOLD,
    })
}

/// `gamma_1 = eta_1`, `gamma_k = eta_k prod_{l=2}^k (1 + n eta_{l-1} mu_psi)`.
pub fn gamma_weights(mu_psi: f64, n: usize, etas: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(etas.len());
    let mut prod = 1.0;
    for (i, &eta) in etas.iter().enumerate() {
        if i > 0 {
            prod *= 1.0 + n as f64 * etas[i - 1] * mu_psi;
        }
        out.push(eta * prod);
    }
    out
}

/// `C(a, b)` as a float, exact for the small arguments used in checks.
pub fn binomial(a: u64, b: u64) -> f64 {
    if b > a {
        return 0.0;
    }
    let b = b.min(a - b);
    let mut acc = 1.0;
    for i in 0..b {
        acc = acc * (a - i) as f64 / (i + 1) as f64;
    }
    acc
}
