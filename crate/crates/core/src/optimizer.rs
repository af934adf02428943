//! The epoch loop: `n` permuted (sub)gradient steps, one prox step with
//! parameter `n * eta_k`, per-epoch records and optional diagnostics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{component_gradients, residual_r_from, sigma_report};
use crate::error::{Error, Result};
use crate::io::instance_digest;
use crate::permutation::{is_bijection, PermutationStrategy, PERMUTATION_RNG, SHUFFLE_ALGORITHM};
use crate::problem::{FiniteSumProblem, ReferenceSolution, GENERATOR_RNG};
use crate::schedule::{ScheduleParams, StepsizeSchedule};
use crate::Vector;

/// Any coordinate beyond this aborts the run.
pub const OVERFLOW_LIMIT: f64 = 1e150;
/// Descent margins must be `>= -DESCENT_TOL * max(1, scale)`.
pub const DESCENT_TOL: f64 = 1e-8;
/// Relative slack of the distance recursion check.
pub const RECURSION_TOL: f64 = 1e-7;
pub const MANIFEST_VERSION: u32 = 1;

pub const TRACE_HEADER: [&str; 9] = [
    "k",
    "eta",
    "gap",
    "dist_sq",
    "bregman",
    "residual_R",
    "displacement",
    "descent_margin",
    "wall_time_ns",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub record_bregman: bool,
    pub record_residual: bool,
    pub check_descent: bool,
    pub check_distance_recursion: bool,
    pub record_average: bool,
    /// Off by default so repeated runs produce identical bytes.
    pub record_wall_time: bool,
}

impl Diagnostics {
    /// Every diagnostic except wall-clock timing.
    pub fn all() -> Self {
        Diagnostics {
            record_bregman: true,
            record_residual: true,
            check_descent: true,
            check_distance_recursion: true,
            record_average: true,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub k_epochs: usize,
    pub x1: Vector,
    pub strategy: PermutationStrategy,
    pub schedule: StepsizeSchedule,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub k: usize,
    pub eta: f64,
    /// `F(x_{k+1}) - F*`
    pub gap: f64,
    /// `||x_{k+1} - x*||^2`
    pub dist_sq: f64,
    pub bregman: Option<f64>,
    pub residual_r: Option<f64>,
    /// `||x_{k+1} - x_1||`
    pub displacement: f64,
    /// Smallest descent margin over `z = x*` and `z = x_k`.
    pub descent_margin: Option<f64>,
    pub wall_time_ns: u64,
}

/// Builds the schedule constants from the problem and its reference solution.
pub fn schedule_params(
    p: &FiniteSumProblem,
    reference: &ReferenceSolution,
    k_total: usize,
) -> Result<ScheduleParams> {
    let s = sigma_report(p, reference)?;
    Ok(ScheduleParams {
        n: p.n(),
        k_total,
        l_bar: p.l_bar().unwrap_or(0.0),
        l_star: p.l_star().unwrap_or(0.0),
        g_bar: p.g_bar().unwrap_or(0.0),
        mu_f: p.mu_f,
        mu_psi: p.mu_psi(),
        sigma_any_sq: s.sigma_any_sq,
        sigma_rand_sq: s.sigma_rand_sq,
        d: reference.d,
    })
}

// ---------------------------------------------------------------------------
// One epoch

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutput {
    pub x_next: Vector,
    /// `x_k^1, ..., x_k^{n+1}` when requested; the last entry is the prox input.
    pub inner: Option<Vec<Vector>>,
}

fn guard(x: &Vector, k: usize, stage: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_LIMIT) {
        return Err(Error::NumericalAbort {
            epoch: k,
            reason: format!("iterate left [-1e150, 1e150] after the {stage}"),
        });
    }
    Ok(())
}

pub fn epoch_update(
    p: &FiniteSumProblem,
    k: usize,
    x_k: &Vector,
    eta: f64,
    perm: &[usize],
    keep_inner: bool,
) -> Result<EpochOutput> {
    p.check_dim(x_k)?;
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    let n = p.n();
    if !is_bijection(perm, n) {
        return Err(Error::invalid("perm is not a permutation of [n]"));
    }
    let mut x = x_k.clone();
    let mut inner = keep_inner.then(|| {
        let mut v = Vec::with_capacity(n + 1);
        v.push(x.clone());
        v
    });
    for &i in perm {
        let g = p.components[i].gradient(&x);
        x.axpy(-eta, &g, 1.0);
        guard(&x, k, "inner step")?;
        if let Some(v) = inner.as_mut() {
            v.push(x.clone());
        }
    }
    let x_next = p.reg.prox(eta, n, &x);
    guard(&x_next, k, "prox step")?;
    Ok(EpochOutput { x_next, inner })
}

// ---------------------------------------------------------------------------
// One-epoch descent inequality

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentCheck {
    /// Right-hand side minus left-hand side.
    pub margin: f64,
    /// Sum of the magnitudes of all terms.
    pub scale: f64,
    /// `margin - (B_psi(z, x_{k+1}) - mu_psi/2 ||z - x_{k+1}||^2)`; zero in exact arithmetic.
    pub identity_gap: f64,
}

impl DescentCheck {
    pub fn passed(&self) -> bool {
        self.margin >= -DESCENT_TOL * self.scale.max(1.0)
    }
}

/// Evaluates
/// `F(x_{k+1}) - F(z) <= ||z - x_k||^2/(2 n eta) - (1/eta + n mu_psi) ||z - x_{k+1}||^2/(2n)
///  - ||x_{k+1} - x_k||^2/(2 n eta) + (1/n) sum_i [B_{sigma_i}(x_{k+1}, x^i) - B_{sigma_i}(z, x^i)]`.
///
/// `inner` holds the retained iterates `x_k^1, ..., x_k^{n+1}`.
pub fn descent_inequality_check(
    p: &FiniteSumProblem,
    eta: f64,
    perm: &[usize],
    inner: &[Vector],
    x_next: &Vector,
    z: &Vector,
) -> Result<DescentCheck> {
    let n = p.n();
    if inner.len() != n + 1 || perm.len() != n {
        return Err(Error::MissingData(format!(
            "descent check needs {} inner iterates, got {}",
            n + 1,
            inner.len()
        )));
    }
    p.check_dim(z)?;
    let f_next = p.objective_value(x_next)?;
    let f_z = p.objective_value(z)?;
    if f_z.is_infinite() || f_next.is_infinite() {
        return Err(Error::Precondition("descent check needs points in dom psi".into()));
    }
    let nf = n as f64;
    let s = nf * eta;
    let mu_psi = p.mu_psi();
    let x_k = &inner[0];
    let t1 = (z - x_k).norm_squared() / (2.0 * s);
    let t2 = (1.0 / eta + nf * mu_psi) * (z - x_next).norm_squared() / (2.0 * nf);
    let t3 = (x_next - x_k).norm_squared() / (2.0 * s);
    let (mut b_next, mut b_z) = (0.0, 0.0);
    for (pos, &i) in perm.iter().enumerate() {
        let c = &p.components[i];
        b_next += c.bregman(x_next, &inner[pos]);
        b_z += c.bregman(z, &inner[pos]);
    }
    let margin = t1 - t2 - t3 + (b_next - b_z) / nf - (f_next - f_z);

    let g = p.reg.subgradient_from_prox(eta, n, &inner[n], x_next)?;
    let d = z - x_next;
    let b_psi = p.reg.value(z) - p.reg.value(x_next) - g.dot(&d);
    let predicted = b_psi - 0.5 * mu_psi * d.norm_squared();
    let scale = f_next.abs() + f_z.abs() + t1 + t2 + t3 + (b_next.abs() + b_z.abs()) / nf;
    Ok(DescentCheck { margin, scale, identity_gap: margin - predicted })
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInfo {
    /// SHA-256 of the canonical instance text.
    pub digest: String,
    pub n: usize,
    pub d: usize,
    pub regularizer: String,
    pub source: Option<String>,
    pub seed: Option<u64>,
    pub generator_rng: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub k_epochs: usize,
    pub x1: Vec<f64>,
    pub strategy: String,
    pub permutation_seed: Option<u64>,
    pub permutation_rng: String,
    pub shuffle_algorithm: String,
    pub permutation_file: Option<String>,
    pub schedule: String,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub mu_big_f: f64,
    pub log_factor: f64,
    pub smooth_cap: f64,
    pub smooth_cap_with_mu_psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInfo {
    pub method: String,
    pub tolerance: f64,
    pub residual: f64,
    pub f_star: f64,
    /// `||x* - x_1||` (the schedule constant `D` may be overridden).
    pub distance: f64,
    pub x_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub problem: ProblemInfo,
    pub run: RunInfo,
    /// Everything the stepsize rule reads.
    pub constants: ScheduleParams,
    pub derived: DerivedConstants,
    pub reference: ReferenceInfo,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("manifest", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::parse("manifest", e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::parse(
                "manifest",
                format!("unsupported format_version {}", m.format_version),
            ));
        }
        Ok(m)
    }
}

fn build_manifest(
    p: &FiniteSumProblem,
    reference: &ReferenceSolution,
    cfg: &RunConfig,
) -> Manifest {
    let c = cfg.schedule.params().clone();
    Manifest {
        format_version: MANIFEST_VERSION,
        problem: ProblemInfo {
            digest: instance_digest(p),
            n: p.n(),
            d: p.dim(),
            regularizer: p.reg.descriptor_string(),
            source: None,
            seed: None,
            generator_rng: GENERATOR_RNG.to_string(),
        },
        run: RunInfo {
            k_epochs: cfg.k_epochs,
            x1: cfg.x1.iter().copied().collect(),
            strategy: cfg.strategy.descriptor_string(),
            permutation_seed: cfg.strategy.seed(),
            permutation_rng: PERMUTATION_RNG.to_string(),
            shuffle_algorithm: SHUFFLE_ALGORITHM.to_string(),
            permutation_file: None,
            schedule: cfg.schedule.rule().descriptor_string(),
            diagnostics: cfg.diagnostics,
        },
        derived: DerivedConstants {
            mu_big_f: c.mu_big_f(),
            log_factor: c.log_factor(),
            smooth_cap: c.smooth_cap(),
            smooth_cap_with_mu_psi: c.smooth_cap_with_mu_psi(),
        },
        constants: c,
        reference: ReferenceInfo {
            method: reference.method.as_str().to_string(),
            tolerance: reference.tolerance,
            residual: reference.residual,
            f_star: reference.f_star,
            distance: (&reference.x_star - &cfg.x1).norm(),
            x_star: reference.x_star.iter().copied().collect(),
        },
    }
}

// ---------------------------------------------------------------------------
// The run

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub records: Vec<EpochRecord>,
    pub manifest: Manifest,
    /// `x_{K+1}`, the output of the method.
    pub final_iterate: Vector,
    /// `(1/K) sum_k x_{k+1}`, for comparison only.
    pub average: Option<Vector>,
    /// Epochs whose descent check failed.
    pub descent_failures: Vec<usize>,
    pub distance_report: Option<DistanceReport>,
}

pub fn run(p: &FiniteSumProblem, reference: &ReferenceSolution, cfg: &RunConfig) -> Result<Trace> {
    let n = p.n();
    let k_total = cfg.k_epochs;
    if k_total < 2 {
        return Err(Error::invalid(format!(
            "the number of epochs K must satisfy K >= 2 (got {k_total})"
        )));
    }
    p.check_dim(&cfg.x1)?;
    p.check_dim(&reference.x_star)?;
    if cfg.x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x1 has non-finite entries"));
    }
    if p.reg.value(&cfg.x1).is_infinite() {
        return Err(Error::invalid(format!(
            "x1 must lie in dom psi (distance {:e})",
            p.reg.membership_residual(&cfg.x1)
        )));
    }
    let sp = cfg.schedule.params();
    if sp.k_total != k_total || sp.n != n {
        return Err(Error::invalid(format!(
            "schedule built for n = {}, K = {} but the run has n = {n}, K = {k_total}",
            sp.n, sp.k_total
        )));
    }

    let diag = cfg.diagnostics;
    let mut schedule = cfg.schedule.clone();
    let mut stream = cfg.strategy.stream(n)?;
    let x_star = &reference.x_star;
    let residual_data = if diag.record_residual || diag.check_distance_recursion {
        let ls = p
            .smooth_constants()
            .ok_or_else(|| Error::MissingData("residual R needs every L_i".into()))?;
        Some((ls, component_gradients(p, x_star)?))
    } else {
        None
    };

    let mut x = cfg.x1.clone();
    let mut sum = diag.record_average.then(|| Vector::zeros(p.dim()));
    let mut records = Vec::with_capacity(k_total);
    let mut descent_failures = Vec::new();
    for k in 1..=k_total {
        let start = diag.record_wall_time.then(Instant::now);
        if schedule.is_adaptive() {
            schedule.update_adaptive_state(k, &x, &cfg.x1)?;
        }
        let eta = schedule.eta_at(k)?;
        let perm = stream.next_permutation(k)?.to_vec();
        let out = epoch_update(p, k, &x, eta, &perm, diag.check_descent)?;
        let x_next = out.x_next;

        let descent_margin = match &out.inner {
            Some(inner) => {
                let at_opt = descent_inequality_check(p, eta, &perm, inner, &x_next, x_star)?;
                let at_prev = descent_inequality_check(p, eta, &perm, inner, &x_next, &x)?;
                if !(at_opt.passed() && at_prev.passed()) {
                    descent_failures.push(k);
                }
                Some(at_opt.margin.min(at_prev.margin))
            }
            None => None,
        };
        let record = EpochRecord {
            k,
            eta,
            gap: p.objective_value(&x_next)? - reference.f_star,
            dist_sq: (&x_next - x_star).norm_squared(),
            bregman: diag.record_bregman.then(|| p.bregman_f(&x_next, x_star)),
            residual_r: residual_data.as_ref().map(|(ls, g)| residual_r_from(ls, g, &perm)),
            displacement: (&x_next - &cfg.x1).norm(),
            descent_margin,
            wall_time_ns: start.map_or(0, |t| t.elapsed().as_nanos() as u64),
        };
        records.push(record);
        if let Some(s) = sum.as_mut() {
            *s += &x_next;
        }
        x = x_next;
    }

    let mut trace = Trace {
        records,
        manifest: build_manifest(p, reference, cfg),
        final_iterate: x,
        average: sum.map(|s| s / k_total as f64),
        descent_failures,
        distance_report: None,
    };
    if diag.check_distance_recursion {
        trace.distance_report = Some(distance_recursion_check(&trace, p)?);
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Distance recursion and trajectory bounds

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub checked: usize,
    /// Bound value per epoch.
    pub bounds: Vec<f64>,
    /// Epochs with `eta_k > 1/(2 n sqrt(L_bar L_star))`.
    pub hypothesis_violations: Vec<usize>,
    /// `(k, dist_sq, bound)`
    pub violations: Vec<(usize, f64, f64)>,
    pub worst_ratio: f64,
}

impl DistanceReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.hypothesis_violations.is_empty() && self.violations.is_empty()
    }
}

/// Checks
/// `||x_{k+1} - x*||^2 <= D^2 / prod_{s<=k} (1 + n eta_s mu_F) + sum_{l<=k} 8 n eta_l^3 R_l / prod_{s=l}^k (1 + n eta_s mu_F)`
/// with `mu_F = mu_f + 2 mu_psi`, for every recorded epoch.
pub fn distance_recursion_check(trace: &Trace, p: &FiniteSumProblem) -> Result<DistanceReport> {
    let (Some(l_bar), Some(l_star)) = (p.l_bar(), p.l_star()) else {
        return Err(Error::MissingData("distance recursion needs every L_i".into()));
    };
    let nf = p.n() as f64;
    let cap = 1.0 / (2.0 * nf * (l_bar * l_star).sqrt());
    let mu = p.mu_f + 2.0 * p.mu_psi();
    let mut bound = trace.manifest.reference.distance.powi(2);
    let mut report = DistanceReport {
        checked: 0,
        bounds: Vec::with_capacity(trace.records.len()),
        hypothesis_violations: Vec::new(),
        violations: Vec::new(),
        worst_ratio: 0.0,
    };
    for rec in &trace.records {
        let r = rec
            .residual_r
            .ok_or_else(|| Error::MissingData(format!("residual_R missing at epoch {}", rec.k)))?;
        let a = nf * rec.eta;
        bound = (bound + 8.0 * a * rec.eta * rec.eta * r) / (1.0 + a * mu);
        if rec.eta > cap * (1.0 + 1e-12) {
            report.hypothesis_violations.push(rec.k);
        }
        if rec.dist_sq > bound * (1.0 + RECURSION_TOL) {
            report.violations.push((rec.k, rec.dist_sq, bound));
        }
        if bound > 0.0 {
            report.worst_ratio = report.worst_ratio.max(rec.dist_sq / bound);
        }
        report.bounds.push(bound);
        report.checked += 1;
    }
    Ok(report)
}

/// `(2/(1-c)) ||x* - x_1|| + (c/(1-c)) r`, the displacement bound of the adaptive rule.
pub fn adaptive_trajectory_bound(c: f64, r: f64, distance: f64) -> f64 {
    2.0 / (1.0 - c) * distance + c / (1.0 - c) * r
}

// ---------------------------------------------------------------------------
// CSV

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl Trace {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(TRACE_HEADER).map_err(err)?;
        for r in &self.records {
            w.write_record([
                r.k.to_string(),
                cell(Some(r.eta)),
                cell(Some(r.gap)),
                cell(Some(r.dist_sq)),
                cell(r.bregman),
                cell(r.residual_r),
                cell(Some(r.displacement)),
                cell(r.descent_margin),
                r.wall_time_ns.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }
}

pub fn read_trace_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| Error::parse("trace", e.to_string()))?;
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::parse("trace", "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(|e| Error::parse("trace", e.to_string()))?;
        let ctx = format!("trace row {}", i + 1);
        let num = |j: usize| -> Result<Option<f64>> {
            let s = &row[j];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| Error::parse(&ctx, e.to_string()))
            }
        };
        let req = |j: usize| -> Result<f64> {
            num(j)?.ok_or_else(|| Error::parse(&ctx, format!("empty {}", TRACE_HEADER[j])))
        };
        let int = |j: usize| -> Result<u64> {
            row[j].parse::<u64>().map_err(|e| Error::parse(&ctx, e.to_string()))
        };
        out.push(EpochRecord {
            k: int(0)? as usize,
            eta: req(1)?,
            gap: req(2)?,
            dist_sq: req(3)?,
            bregman: num(4)?,
            residual_r: num(5)?,
            displacement: req(6)?,
            descent_margin: num(7)?,
            wall_time_ns: int(8)?,
        });
    }
    Ok(out)
}
