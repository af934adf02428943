//! Experiment driver behind the command-line front end: config files,
//! problem generators, atomic output directories, sweeps and the verification
//! suite.
//!
//! Every command returns a [`Result`]; the binary maps errors to exit codes
//! with [`Error::exit_code`].

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

use crate::analysis::{
    cocoercivity_scan, estimate_rate, lemma_ineq_verify, median, residual_stats_bruteforce,
    sigma_report, RateFit,
};
use crate::error::{Error, Result};
use crate::io::{instance_digest, read_file, read_instance, write_instance};
use crate::optimizer::{
    run, schedule_params, Diagnostics, Manifest, RunConfig, Trace,
};
use crate::permutation::{read_schedule, write_schedule, PermutationStrategy, MAX_ENUMERATION_N};
use crate::problem::{
    compute_reference, make_hinge, make_lad, make_lasso, make_quadratic, make_scaled_least_squares,
    FiniteSumProblem, ReferenceMethod, ReferenceSolution,
};
use crate::prox::Regularizer;
use crate::schedule::{
    adaptive_feasibility, binomial, gamma_weights, parse_schedule, ScheduleOverrides,
    ScheduleParams, StepsizeRule, StepsizeSchedule,
};
use crate::descriptor::Descriptor;
use crate::Vector;

pub const TRACE_FILE: &str = "trace.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const INSTANCE_FILE: &str = "instance.txt";
pub const PERMUTATION_FILE: &str = "permutations.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILING_INSTANCE_FILE: &str = "failing_instance.txt";

// ---------------------------------------------------------------------------
// Config

/// Starting point: a literal vector or a keyword.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum X1Config {
    Vector(Vec<f64>),
    /// `zeros`, `ones`, `xstar` or `xstar+C` (every coordinate shifted by `C`).
    Keyword(String),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub generator: Option<String>,
    pub file: Option<PathBuf>,
    pub seed: Option<u64>,
    pub regularizer: Option<String>,
    /// Lowers the declared strong-convexity constant of `f`.
    pub mu_f: Option<f64>,
    pub reference_tol: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub strategy: Option<String>,
    pub permutation_file: Option<PathBuf>,
    pub schedule: Option<String>,
    pub k: Option<usize>,
    pub k_list: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub x1: Option<X1Config>,
    pub output: Option<PathBuf>,
    pub force: Option<bool>,
    pub workers: Option<usize>,
    pub window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub bregman: Option<bool>,
    pub residual: Option<bool>,
    pub descent: Option<bool>,
    pub distance: Option<bool>,
    pub average: Option<bool>,
    pub wall_time: Option<bool>,
}

/// Raw config as read from a TOML file or assembled from flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&read_file(path)?)
    }

    /// Fields set in `flags` win.
    pub fn overlay(mut self, flags: &ExperimentConfig) -> Self {
        let (p, f) = (&mut self.problem, &flags.problem);
        if f.generator.is_some() || f.file.is_some() {
            p.generator = f.generator.clone();
            p.file = f.file.clone();
        }
        overlay!(p, f, seed, regularizer, mu_f, reference_tol);
        let (r, f) = (&mut self.run, &flags.run);
        overlay!(r, f, strategy, permutation_file, schedule, k, k_list, seeds, x1, output, force, workers, window);
        let (d, f) = (&mut self.diagnostics, &flags.diagnostics);
        overlay!(d, f, bregman, residual, descent, distance, average, wall_time);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSource {
    Generator(String),
    File(PathBuf),
}

impl ProblemSource {
    fn describe(&self) -> String {
        match self {
            ProblemSource::Generator(g) => format!("generator: {g}"),
            ProblemSource::File(f) => format!("file: {}", f.display()),
        }
    }
}

/// Validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub problem: ProblemSource,
    pub problem_seed: u64,
    pub regularizer: Option<Regularizer>,
    pub mu_f: Option<f64>,
    pub reference_tol: Option<f64>,
    pub strategy: PermutationStrategy,
    pub permutation_file: Option<PathBuf>,
    pub rule: StepsizeRule,
    pub overrides: ScheduleOverrides,
    pub k: Option<usize>,
    pub k_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub x1: X1Config,
    pub output: Option<PathBuf>,
    pub force: bool,
    pub workers: usize,
    pub window: Option<(f64, f64)>,
    pub diagnostics: Diagnostics,
}

impl ExperimentPlan {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let pc = &cfg.problem;
        let problem = match (&pc.generator, &pc.file) {
            (Some(g), None) => ProblemSource::Generator(g.clone()),
            (None, Some(f)) => {
                if !f.is_file() {
                    return Err(Error::invalid(format!("problem file {} does not exist", f.display())));
                }
                ProblemSource::File(f.clone())
            }
            (Some(_), Some(_)) => {
                return Err(Error::invalid("give either a problem generator or a problem file, not both"))
            }
            (None, None) => return Err(Error::invalid("no problem given (generator or file)")),
        };
        let rc = &cfg.run;
        let strategy_text = rc.strategy.as_deref().unwrap_or("rr");
        let parsed = PermutationStrategy::parse(strategy_text, 0)?;
        let seeds = rc.seeds.clone().unwrap_or_else(|| vec![parsed.seed().unwrap_or(0)]);
        if seeds.is_empty() {
            return Err(Error::invalid("seed list is empty"));
        }
        let mut seen = BTreeSet::new();
        for s in &seeds {
            if !seen.insert(*s) {
                return Err(Error::invalid(format!("seed {s} is repeated in the seed list")));
            }
        }
        let strategy = match &rc.permutation_file {
            Some(path) => {
                if !path.is_file() {
                    return Err(Error::invalid(format!(
                        "permutation file {} does not exist",
                        path.display()
                    )));
                }
                let perms = read_schedule(&read_file(path)?)?;
                PermutationStrategy::FixedSchedule { perms }
            }
            None => parsed.with_seed(seeds[0]),
        };
        let schedule_text = rc
            .schedule
            .as_deref()
            .ok_or_else(|| Error::invalid("no stepsize schedule given"))?;
        let (rule, overrides) = parse_schedule(schedule_text)?;
        let k_list = rc.k_list.clone().unwrap_or_default();
        let mut ks = BTreeSet::new();
        for k in &k_list {
            if !ks.insert(*k) {
                return Err(Error::invalid(format!("K = {k} is repeated in the K list")));
            }
        }
        let window = match rc.window {
            Some([lo, hi]) if lo <= hi => Some((lo, hi)),
            Some(_) => return Err(Error::invalid("slope window must satisfy lo <= hi")),
            None => None,
        };
        let dc = &cfg.diagnostics;
        let diagnostics = Diagnostics {
            record_bregman: dc.bregman.unwrap_or(false),
            record_residual: dc.residual.unwrap_or(false),
            check_descent: dc.descent.unwrap_or(false),
            check_distance_recursion: dc.distance.unwrap_or(false),
            record_average: dc.average.unwrap_or(false),
            record_wall_time: dc.wall_time.unwrap_or(false),
        };
        let workers = rc.workers.unwrap_or_else(|| {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        });
        if workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        Ok(ExperimentPlan {
            problem,
            problem_seed: pc.seed.unwrap_or(0),
            regularizer: pc.regularizer.as_deref().map(Regularizer::parse).transpose()?,
            mu_f: pc.mu_f,
            reference_tol: pc.reference_tol,
            strategy,
            permutation_file: rc.permutation_file.clone(),
            rule,
            overrides,
            k: rc.k,
            k_list,
            seeds,
            x1: rc.x1.clone().unwrap_or(X1Config::Keyword("zeros".into())),
            output: rc.output.clone(),
            force: rc.force.unwrap_or(false),
            workers,
            window,
            diagnostics,
        })
    }
}

// ---------------------------------------------------------------------------
// Problems

fn log_spread_scales(d: usize, spread: f64) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    (0..d).map(|j| 10f64.powf(-spread * j as f64 / (d - 1) as f64)).collect()
}

/// Builds a problem from a generator descriptor.
///
/// * `quadratic n= d= [mu=]`
/// * `lsq n= d= [noise=] [spread=]` (`spread` is the log10 range of column scales)
/// * `lasso n= d= [noise=] lambda=`
/// * `lad n= d= [noise=] [spread=]`
/// * `hinge n= d= [flip=]`
pub fn generate_problem(text: &str, seed: u64) -> Result<FiniteSumProblem> {
    let desc = Descriptor::parse(text)?;
    let dim = |key: &str| -> Result<usize> { Ok(desc.require_u64(key)? as usize) };
    let n = dim("n")?;
    let d = dim("d")?;
    let noise = || -> Result<f64> { Ok(desc.get_f64("noise")?.unwrap_or(1.0)) };
    let scales = || -> Result<Option<Vec<f64>>> {
        Ok(desc.get_f64("spread")?.map(|s| log_spread_scales(d, s)))
    };
    let p = match desc.name.as_str() {
        "quadratic" => make_quadratic(n, d, seed, desc.get_f64("mu")?.unwrap_or(0.0))?,
        "lsq" => {
            let s = scales()?;
            make_scaled_least_squares(n, d, seed, noise()?, s.as_deref())?
        }
        "lasso" => make_lasso(n, d, seed, noise()?, desc.require_f64("lambda")?)?,
        "lad" => {
            let s = scales()?;
            make_lad(n, d, seed, noise()?, s.as_deref())?
        }
        "hinge" => make_hinge(n, d, seed, desc.get_f64("flip")?.unwrap_or(0.1), Regularizer::Zero)?,
        other => return Err(Error::parse("generator", format!("unknown family '{other}'"))),
    };
    desc.ensure_consumed()?;
    Ok(p)
}

/// Loads or generates the problem and applies regularizer / `mu_f` overrides.
pub fn load_problem(plan: &ExperimentPlan) -> Result<FiniteSumProblem> {
    let mut p = match &plan.problem {
        ProblemSource::Generator(g) => generate_problem(g, plan.problem_seed)?,
        ProblemSource::File(f) => read_instance(&read_file(f)?)?,
    };
    if let Some(reg) = &plan.regularizer {
        p.reg = reg.clone();
    }
    if let Some(mu) = plan.mu_f {
        if !(mu >= 0.0 && mu <= p.mu_f) {
            return Err(Error::invalid(format!(
                "mu_f override must lie in [0, {}] (the generated value)",
                p.mu_f
            )));
        }
        p.mu_f = mu;
    }
    FiniteSumProblem::new(p.components, p.reg, p.mu_f)
}

/// Resolves the start point and the reference solution relative to it.
pub fn resolve_start(
    p: &FiniteSumProblem,
    x1: &X1Config,
    tol: Option<f64>,
) -> Result<(Vector, ReferenceSolution)> {
    let d = p.dim();
    let literal = |x: Vector| -> Result<(Vector, ReferenceSolution)> {
        let r = compute_reference(p, &x, tol)?;
        Ok((x, r))
    };
    match x1 {
        X1Config::Vector(v) => {
            if v.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.len() });
            }
            literal(Vector::from_column_slice(v))
        }
        X1Config::Keyword(k) => {
            let k = k.trim();
            match k {
                "zeros" => literal(Vector::zeros(d)),
                "ones" => literal(Vector::from_element(d, 1.0)),
                _ if k.starts_with("xstar") => {
                    let shift = match k["xstar".len()..].trim() {
                        "" => 0.0,
                        s => crate::descriptor::parse_f64("x1", s.trim_start_matches('+'))?,
                    };
                    let r = compute_reference(p, &Vector::zeros(d), tol)?;
                    let x1 = r.x_star.add_scalar(shift);
                    Ok((x1.clone(), r.with_start(&x1)))
                }
                other => Err(Error::parse(
                    "x1",
                    format!("expected zeros, ones, xstar[+C] or a list, got '{other}'"),
                )),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Output directories

/// Writes `files` (relative paths) into a fresh sibling temp directory, then
/// renames it onto `target`. An existing `target` is replaced only with `force`.
pub fn write_output_dir(target: &Path, force: bool, files: &[(String, Vec<u8>)]) -> Result<()> {
    if target.exists() && !force {
        return Err(Error::invalid(format!(
            "output directory {} already exists (use --force to overwrite)",
            target.display()
        )));
    }
    let name = target
        .file_name()
        .ok_or_else(|| Error::invalid(format!("bad output path {}", target.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let fill = || -> Result<()> {
        std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for (rel, bytes) in files {
            let path = tmp.join(rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        if target.exists() {
            std::fs::remove_dir_all(target).map_err(|e| Error::io(target, e))?;
        }
        std::fs::rename(&tmp, target).map_err(|e| Error::io(target, e))
    };
    let out = fill();
    if out.is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    out
}

// ---------------------------------------------------------------------------
// Single runs

fn build_config(
    plan: &ExperimentPlan,
    p: &FiniteSumProblem,
    reference: &ReferenceSolution,
    x1: &Vector,
    k: usize,
    seed: u64,
) -> Result<RunConfig> {
    let mut params = schedule_params(p, reference, k)?;
    plan.overrides.apply(&mut params);
    Ok(RunConfig {
        k_epochs: k,
        x1: x1.clone(),
        strategy: plan.strategy.with_seed(seed),
        schedule: StepsizeSchedule::new(plan.rule.clone(), params)?,
        diagnostics: plan.diagnostics,
    })
}

fn annotate(trace: &mut Trace, plan: &ExperimentPlan) {
    let m = &mut trace.manifest;
    m.problem.source = Some(plan.problem.describe());
    if matches!(plan.problem, ProblemSource::Generator(_)) {
        m.problem.seed = Some(plan.problem_seed);
    }
    if plan.permutation_file.is_some() {
        m.run.permutation_file = Some(PERMUTATION_FILE.to_string());
    }
}

fn trace_files(
    trace: &Trace,
    p: &FiniteSumProblem,
    perms: Option<&[Vec<usize>]>,
    prefix: &str,
) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = vec![
        (format!("{prefix}{TRACE_FILE}"), trace.to_csv()?.into_bytes()),
        (format!("{prefix}{MANIFEST_FILE}"), trace.manifest.to_toml()?.into_bytes()),
        (format!("{prefix}{INSTANCE_FILE}"), write_instance(p).into_bytes()),
    ];
    if let Some(perms) = perms {
        files.push((format!("{prefix}{PERMUTATION_FILE}"), write_schedule(perms).into_bytes()));
    }
    Ok(files)
}

fn fixed_perms(strategy: &PermutationStrategy) -> Option<&[Vec<usize>]> {
    match strategy {
        PermutationStrategy::FixedSchedule { perms } => Some(perms),
        _ => None,
    }
}

/// Result of [`cmd_run`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: Trace,
    pub output: Option<PathBuf>,
}

/// Single run: one `K`, one seed. Writes trace, manifest and instance when an
/// output directory is set.
pub fn cmd_run(plan: &ExperimentPlan, out: &mut dyn Write) -> Result<RunOutcome> {
    let k = match (plan.k, plan.k_list.as_slice()) {
        (Some(k), []) => k,
        (None, [k]) => *k,
        (None, []) => return Err(Error::invalid("no epoch count K given")),
        _ => return Err(Error::invalid("run takes a single K; use sweep for a K list")),
    };
    if plan.seeds.len() != 1 {
        return Err(Error::invalid("run takes a single seed; use sweep for a seed list"));
    }
    let p = load_problem(plan)?;
    let (x1, reference) = resolve_start(&p, &plan.x1, plan.reference_tol)?;
    let cfg = build_config(plan, &p, &reference, &x1, k, plan.seeds[0])?;
    let mut trace = run(&p, &reference, &cfg)?;
    annotate(&mut trace, plan);
    let last = trace.records.last().expect("K >= 2 records");
    let _ = writeln!(out, "K = {k}, final gap {:e}, final dist_sq {:e}", last.gap, last.dist_sq);
    if !trace.descent_failures.is_empty() {
        let _ = writeln!(out, "descent check failed at epochs {:?}", trace.descent_failures);
    }
    if let Some(r) = &trace.distance_report {
        let _ = writeln!(
            out,
            "distance recursion: {} ({} checked, worst ratio {:.6})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.checked,
            r.worst_ratio
        );
    }
    if let Some(dir) = &plan.output {
        write_output_dir(dir, plan.force, &trace_files(&trace, &p, fixed_perms(&plan.strategy), "")?)?;
        let _ = writeln!(out, "wrote {}", dir.display());
    }
    Ok(RunOutcome { trace, output: plan.output.clone() })
}

fn parse_reference_method(s: &str) -> Result<ReferenceMethod> {
    match s {
        "closed_form" => Ok(ReferenceMethod::ClosedForm),
        "high_accuracy_solver" => Ok(ReferenceMethod::HighAccuracySolver),
        other => Err(Error::parse("manifest", format!("unknown reference method '{other}'"))),
    }
}

/// Re-executes the run recorded in `dir` (manifest, instance and optional
/// permutation file) using only the recorded constants.
pub fn replay(dir: &Path) -> Result<(FiniteSumProblem, Trace, PermutationStrategy)> {
    let manifest = Manifest::from_toml(&read_file(&dir.join(MANIFEST_FILE))?)?;
    let p = read_instance(&read_file(&dir.join(INSTANCE_FILE))?)?;
    let digest = instance_digest(&p);
    if digest != manifest.problem.digest {
        return Err(Error::invalid(format!(
            "instance digest {digest} does not match manifest digest {}",
            manifest.problem.digest
        )));
    }
    let r = &manifest.run;
    let strategy = match &r.permutation_file {
        Some(name) => PermutationStrategy::FixedSchedule {
            perms: read_schedule(&read_file(&dir.join(name))?)?,
        },
        None => PermutationStrategy::parse(&r.strategy, r.permutation_seed.unwrap_or(0))?,
    };
    let (rule, overrides) = parse_schedule(&r.schedule)?;
    if !overrides.is_empty() {
        return Err(Error::parse("manifest", "schedule string carries overrides"));
    }
    let x1 = Vector::from_vec(r.x1.clone());
    let x_star = Vector::from_vec(manifest.reference.x_star.clone());
    let reference = ReferenceSolution {
        d: (&x_star - &x1).norm(),
        x_star,
        f_star: manifest.reference.f_star,
        method: parse_reference_method(&manifest.reference.method)?,
        tolerance: manifest.reference.tolerance,
        residual: manifest.reference.residual,
    };
    let cfg = RunConfig {
        k_epochs: r.k_epochs,
        x1,
        strategy: strategy.clone(),
        schedule: StepsizeSchedule::new(rule, manifest.constants.clone())?,
        diagnostics: r.diagnostics,
    };
    let mut trace = run(&p, &reference, &cfg)?;
    trace.manifest.problem.source = manifest.problem.source.clone();
    trace.manifest.problem.seed = manifest.problem.seed;
    trace.manifest.run.permutation_file = r.permutation_file.clone();
    Ok((p, trace, strategy))
}

/// Replays `dir` and writes the result to `output`.
pub fn cmd_replay(dir: &Path, output: &Path, force: bool, out: &mut dyn Write) -> Result<Trace> {
    let (p, trace, strategy) = replay(dir)?;
    write_output_dir(output, force, &trace_files(&trace, &p, fixed_perms(&strategy), "")?)?;
    let _ = writeln!(out, "replayed {} into {}", dir.display(), output.display());
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub median_gap: Option<f64>,
    pub cells_ok: usize,
    pub cells_failed: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub fit: Option<RateFit>,
    pub fit_error: Option<String>,
    /// `(K, seed, message)` of failed cells.
    pub failures: Vec<(usize, u64, String)>,
    pub window_passed: Option<bool>,
}

pub fn summary_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["k", "median_gap", "cells_ok", "cells_failed"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.median_gap.map(|g| format!("{g:?}")).unwrap_or_default(),
            r.cells_ok.to_string(),
            r.cells_failed.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

/// Reads `(K, median gap)` pairs from a summary CSV; empty gaps are skipped.
pub fn read_summary_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row.map_err(|e| Error::parse("summary", e.to_string()))?;
        let ctx = format!("summary row {}", i + 1);
        if row.len() < 2 {
            return Err(Error::parse(ctx, "expected k and median_gap columns"));
        }
        if row[1].is_empty() {
            continue;
        }
        let k: f64 = row[0].parse().map_err(|e| Error::parse(&ctx, format!("{e}")))?;
        let g: f64 = row[1].parse().map_err(|e| Error::parse(&ctx, format!("{e}")))?;
        out.push((k, g));
    }
    Ok(out)
}

fn report_fit(
    points: &[(f64, f64)],
    window: Option<(f64, f64)>,
    out: &mut dyn Write,
) -> (Option<RateFit>, Option<String>, Option<bool>) {
    match estimate_rate(points) {
        Ok(fit) => {
            let _ = writeln!(out, "slope {:.4} (r^2 {:.4})", fit.slope, fit.r_squared);
            let verdict = window.map(|(lo, hi)| {
                let ok = fit.slope >= lo && fit.slope <= hi;
                let _ = writeln!(
                    out,
                    "window [{lo}, {hi}]: {}",
                    if ok { "PASS" } else { "FAIL" }
                );
                ok
            });
            (Some(fit), None, verdict)
        }
        Err(e) => {
            let _ = writeln!(out, "no rate fit: {e}");
            (None, Some(e.to_string()), None)
        }
    }
}

/// Runs the `K x seed` grid, writes per-cell traces and `summary.csv`, and
/// fits the slope of `log median gap` against `log K`.
///
/// Deterministic strategies ignore the seed, so they run one cell per `K`.
pub fn cmd_sweep(plan: &ExperimentPlan, out: &mut dyn Write) -> Result<SweepOutcome> {
    let mut ks = plan.k_list.clone();
    if ks.is_empty() {
        ks.extend(plan.k);
    }
    if ks.is_empty() {
        return Err(Error::invalid("sweep needs a K list"));
    }
    ks.sort_unstable();
    let seeds: Vec<u64> = if plan.strategy.is_random() {
        plan.seeds.clone()
    } else {
        plan.seeds[..1].to_vec()
    };
    let p = load_problem(plan)?;
    let (x1, reference) = resolve_start(&p, &plan.x1, plan.reference_tol)?;
    let cells: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<Mutex<Option<Result<Trace>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = plan.workers.min(cells.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let (k, seed) = cells[i];
                let res = build_config(plan, &p, &reference, &x1, k, seed)
                    .and_then(|cfg| run(&p, &reference, &cfg))
                    .map(|mut t| {
                        annotate(&mut t, plan);
                        t
                    });
                *results[i].lock().expect("poisoned") = Some(res);
            });
        }
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut files = Vec::new();
    let mut first_abort = false;
    for &k in &ks {
        let mut gaps = Vec::new();
        let mut failed = 0;
        for (i, &(ck, seed)) in cells.iter().enumerate() {
            if ck != k {
                continue;
            }
            match results[i].lock().expect("poisoned").take().expect("cell ran") {
                Ok(trace) => {
                    gaps.push(trace.records.last().expect("K >= 2").gap);
                    if plan.output.is_some() {
                        files.extend(trace_files(
                            &trace,
                            &p,
                            fixed_perms(&plan.strategy),
                            &format!("cells/k{k}-seed{seed}/"),
                        )?);
                    }
                }
                Err(e) => {
                    failed += 1;
                    first_abort |= matches!(e, Error::NumericalAbort { .. });
                    let _ = writeln!(out, "cell K = {k}, seed = {seed} failed: {e}");
                    failures.push((k, seed, e.to_string()));
                }
            }
        }
        rows.push(SweepRow { k, median_gap: median(&gaps), cells_ok: gaps.len(), cells_failed: failed });
    }
    for r in &rows {
        let _ = writeln!(
            out,
            "K = {:>6}  median gap {}",
            r.k,
            r.median_gap.map_or("-".to_string(), |g| format!("{g:e}"))
        );
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.median_gap.map(|g| (r.k as f64, g)))
        .collect();
    let (fit, fit_error, window_passed) = report_fit(&points, plan.window, out);
    if let Some(dir) = &plan.output {
        files.push((SUMMARY_FILE.to_string(), summary_csv(&rows)?.into_bytes()));
        files.push((INSTANCE_FILE.to_string(), write_instance(&p).into_bytes()));
        write_output_dir(dir, plan.force, &files)?;
        let _ = writeln!(out, "wrote {}", dir.display());
    }
    let outcome = SweepOutcome { rows, fit, fit_error, failures, window_passed };
    if !outcome.failures.is_empty() {
        let msg = format!("{} sweep cell(s) failed", outcome.failures.len());
        return Err(if first_abort {
            Error::NumericalAbort { epoch: 0, reason: msg }
        } else {
            Error::invalid(msg)
        });
    }
    if outcome.window_passed == Some(false) {
        return Err(Error::Verification(format!(
            "slope {:.4} outside the requested window",
            outcome.fit.as_ref().map_or(f64::NAN, |f| f.slope)
        )));
    }
    Ok(outcome)
}

/// Fits the rate of a finished sweep (directory or summary CSV).
pub fn cmd_rate(path: &Path, window: Option<(f64, f64)>, out: &mut dyn Write) -> Result<RateFit> {
    let file = if path.is_dir() { path.join(SUMMARY_FILE) } else { path.to_path_buf() };
    let points = read_summary_csv(&read_file(&file)?)?;
    let (fit, err, verdict) = report_fit(&points, window, out);
    let fit = fit.ok_or_else(|| Error::invalid(err.unwrap_or_default()))?;
    if verdict == Some(false) {
        return Err(Error::Verification(format!("slope {:.4} outside the requested window", fit.slope)));
    }
    Ok(fit)
}

/// Prints a manifest and the stepsizes it determines.
pub fn cmd_show_manifest(path: &Path, out: &mut dyn Write) -> Result<Manifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let m = Manifest::from_toml(&read_file(&file)?)?;
    let _ = write!(out, "{}", m.to_toml()?);
    let (rule, _) = parse_schedule(&m.run.schedule)?;
    if rule.is_adaptive() {
        let _ = writeln!(out, "# eta_k depends on the trajectory (adaptive rule)");
    } else {
        let etas = StepsizeSchedule::new(rule, m.constants.clone())?.sequence()?;
        let _ = writeln!(
            out,
            "# eta_1 = {:?}, eta_K = {:?}",
            etas.first().copied().unwrap_or(f64::NAN),
            etas.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Verification suite

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Random instances per check.
    pub instances: usize,
    /// Largest `n` for the brute-force permutation check.
    pub max_n: usize,
    pub seed: u64,
    /// Multiplies every declared `L_i` of the cocoercivity instances
    /// (values below 1 make a negative control).
    pub scale_l: Option<f64>,
    /// Where the failing instance is written (default: current directory).
    pub output: Option<PathBuf>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { instances: 50, max_n: 6, seed: 0, scale_l: None, output: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Failure {
    problem: FiniteSumProblem,
}

fn random_smooth_instance(rng: &mut ChaCha20Rng, n: usize, with_l1: bool) -> Result<FiniteSumProblem> {
    let d = rng.random_range(1..=5usize);
    let seed: u64 = rng.random();
    let mut p = match rng.random_range(0..2u32) {
        0 => make_quadratic(n, d, seed, rng.random_range(0.0..0.5))?,
        _ => make_scaled_least_squares(n, d, seed, 1.0, None)?,
    };
    if with_l1 {
        p.reg = Regularizer::l1(rng.random_range(0.01..0.3))?;
    }
    Ok(p)
}

type CheckFn<'a> = Box<dyn Fn(&VerifyOptions) -> Result<(bool, String, Option<Failure>)> + 'a>;

fn check_residual_bounds(o: &VerifyOptions) -> Result<(bool, String, Option<Failure>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(o.seed);
    let mut worst = f64::INFINITY;
    for _ in 0..o.instances {
        let n = rng.random_range(2..=o.max_n);
        let p = random_smooth_instance(&mut rng, n, false)?;
        let r = compute_reference(&p, &Vector::zeros(p.dim()), None)?;
        let s = sigma_report(&p, &r)?;
        let stats = residual_stats_bruteforce(&p, &r.x_star)?;
        let nf = n as f64;
        let l_bar = p.l_bar().expect("smooth");
        let any = nf * nf * l_bar * s.sigma_any_sq;
        let rand = 2.0 / 3.0 * nf * l_bar * s.sigma_rand_sq;
        let slack = ((any - stats.max) / (1.0 + any)).min((rand - stats.mean) / (1.0 + rand));
        worst = worst.min(slack);
        if slack < -1e-9 {
            return Ok((false, format!("slack {slack:e}"), Some(Failure { problem: p })));
        }
    }
    Ok((true, format!("{} instances, min relative slack {worst:.3e}", o.instances), None))
}

fn check_recursion(_: &VerifyOptions) -> Result<(bool, String, Option<Failure>)> {
    let mut count = 0;
    let mut vacuous = 0;
    for a in [0.1, 1.0, 10.0] {
        for b in [0.1, 1.0, 10.0] {
            for c in [0.01, 0.1, 0.3] {
                for k in [50, 200, 500] {
                    let r = lemma_ineq_verify(a, b, c, k)?;
                    count += 1;
                    vacuous += usize::from(r.vacuous_from.is_some());
                    if !r.passed() {
                        return Ok((false, format!("a={a} b={b} c={c} K={k}: {:?}", r.violations.first()), None));
                    }
                }
            }
        }
    }
    Ok((true, format!("{count} grid points ({vacuous} with a vacuous tail)"), None))
}

fn check_cocoercivity(o: &VerifyOptions) -> Result<(bool, String, Option<Failure>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(o.seed.wrapping_add(1));
    let mut worst = f64::INFINITY;
    for _ in 0..o.instances.min(20) {
        let n = rng.random_range(2..=6usize);
        let mut p = random_smooth_instance(&mut rng, n, false)?;
        if let Some(f) = o.scale_l {
            p = p.with_scaled_smoothness(f);
        }
        let center = Vector::zeros(p.dim());
        let r = cocoercivity_scan(&p, 50, rng.random(), &center, 3.0)?;
        worst = worst.min(r.worst_margin);
        if !r.passed() {
            return Ok((
                false,
                format!("{} violations, worst margin {:e}", r.violations.len(), r.worst_margin),
                Some(Failure { problem: p }),
            ));
        }
    }
    Ok((true, format!("worst margin {worst:.3e}"), None))
}

fn check_adaptive(_: &VerifyOptions) -> Result<(bool, String, Option<Failure>)> {
    let f = adaptive_feasibility(0.5, 1.0)?;
    Ok((f.ok, format!("partial sum {:.6} vs bound {:.6}", f.partial_sum, f.analytic_bound), None))
}

fn check_gamma(_: &VerifyOptions) -> Result<(bool, String, Option<Failure>)> {
    let (n, mu) = (7usize, 0.3);
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
        let etas = StepsizeSchedule::new(StepsizeRule::StronglyPsi { m }, params)?.sequence()?;
        for (i, g) in gamma_weights(mu, n, &etas).iter().enumerate() {
            let k = (i + 1) as u64;
            let want = binomial(k + m as u64 - 1, m as u64 - 1) / (n as f64 * mu);
            worst = worst.max(((g - want) / want).abs());
        }
    }
    Ok((worst <= 1e-9, format!("max relative error {worst:.3e}"), None))
}

fn check_descent(o: &VerifyOptions) -> Result<(bool, String, Option<Failure>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(o.seed.wrapping_add(2));
    let mut worst = f64::INFINITY;
    let runs = o.instances.min(20);
    for i in 0..runs {
        let n = rng.random_range(2..=8usize);
        let p = random_smooth_instance(&mut rng, n, i % 2 == 1)?;
        let x1 = Vector::from_element(p.dim(), 1.0);
        let r = compute_reference(&p, &x1, None)?;
        let params = schedule_params(&p, &r, 50)?;
        let cfg = RunConfig {
            k_epochs: 50,
            x1,
            strategy: PermutationStrategy::RandomReshuffle { seed: rng.random() },
            schedule: StepsizeSchedule::new(StepsizeRule::SmoothConvexRandom, params)?,
            diagnostics: Diagnostics {
                check_descent: true,
                check_distance_recursion: true,
                ..Diagnostics::default()
            },
        };
        let t = run(&p, &r, &cfg)?;
        worst = worst.min(
            t.records.iter().filter_map(|r| r.descent_margin).fold(f64::INFINITY, f64::min),
        );
        let dist_ok = t.distance_report.as_ref().is_none_or(|d| d.passed());
        if !t.descent_failures.is_empty() || !dist_ok {
            return Ok((
                false,
                format!(
                    "descent failures at {:?}, distance check {}",
                    t.descent_failures,
                    if dist_ok { "ok" } else { "failed" }
                ),
                Some(Failure { problem: p }),
            ));
        }
    }
    Ok((true, format!("{runs} runs of 50 epochs, min margin {worst:.3e}"), None))
}

/// Runs the lemma-level checks and prints a pass/fail table.
///
/// The first failing instance is written to `failing_instance.txt` and the
/// call returns [`Error::Verification`].
pub fn cmd_verify(o: &VerifyOptions, out: &mut dyn Write) -> Result<Vec<CheckResult>> {
    if o.max_n > MAX_ENUMERATION_N {
        return Err(Error::invalid(format!(
            "brute force over all permutations is refused for n = {} (limit n <= {MAX_ENUMERATION_N})",
            o.max_n
        )));
    }
    if o.max_n < 2 {
        return Err(Error::invalid("max_n must be at least 2"));
    }
    if o.instances == 0 {
        return Err(Error::invalid("instances must be at least 1"));
    }
    let checks: Vec<(&'static str, CheckFn)> = vec![
        ("residual-bounds", Box::new(check_residual_bounds)),
        ("recursion-bound", Box::new(check_recursion)),
        ("cocoercivity", Box::new(check_cocoercivity)),
        ("adaptive-feasibility", Box::new(check_adaptive)),
        ("gamma-identity", Box::new(check_gamma)),
        ("descent-and-distance", Box::new(check_descent)),
    ];
    let mut results = Vec::new();
    let mut failing: Option<FiniteSumProblem> = None;
    for (name, check) in checks {
        let (passed, detail, failure) = check(o)?;
        let _ = writeln!(out, "{:<22} {}  {detail}", name, if passed { "PASS" } else { "FAIL" });
        if failing.is_none() {
            failing = failure.map(|f| f.problem);
        }
        results.push(CheckResult { name, passed, detail });
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        return Ok(results);
    }
    if let Some(p) = failing {
        let dir = o.output.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(FAILING_INSTANCE_FILE);
        std::fs::write(&path, write_instance(&p)).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(out, "failing instance written to {}", path.display());
    }
    Err(Error::Verification(format!("failed checks: {}", failed.join(", "))))
}
