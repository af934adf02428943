use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use proxshuffle::harness::{
    cmd_rate, cmd_replay, cmd_run, cmd_show_manifest, cmd_sweep, cmd_verify, ExperimentConfig,
    ExperimentPlan, VerifyOptions, X1Config,
};
use proxshuffle::{Error, Result};

/// Proximal shuffling gradient experiments.
#[derive(Parser)]
#[command(name = "proxshuffle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single run: one K, one permutation seed.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Re-execute the run recorded in this output directory.
        #[arg(long, value_name = "DIR")]
        replay: Option<PathBuf>,
    },
    /// K x seed grid with a log-log rate fit.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Invariant checks on random small instances.
    Verify {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        /// Largest n for the brute-force permutation check (at most 8).
        #[arg(long, default_value_t = 6)]
        max_n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiply every declared L_i before the cocoercivity scan.
        #[arg(long)]
        scale_l: Option<f64>,
        /// Directory receiving the failing instance.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit the rate of a finished sweep (directory or summary CSV).
    Rate {
        path: PathBuf,
        #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
        window: Option<(f64, f64)>,
    },
    /// Print a manifest and the stepsizes it determines.
    ShowManifest { path: PathBuf },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML config; flags override its values.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// e.g. "quadratic n=10 d=5 mu=0.1", "lad n=40 d=16 noise=0 spread=4".
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    problem_file: Option<PathBuf>,
    #[arg(long)]
    problem_seed: Option<u64>,
    /// e.g. "l1 lambda=0.1", "sql2 mu=0.5", "ball radius=2".
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long)]
    mu_f: Option<f64>,
    #[arg(long)]
    reference_tol: Option<f64>,
    /// rr, so, ig, "every-m m=5"; the seed comes from --seeds.
    #[arg(long)]
    strategy: Option<String>,
    /// One 1-based permutation per line, one line per epoch.
    #[arg(long)]
    permutation_file: Option<PathBuf>,
    /// e.g. "smooth-strongly-random", "lip-linear-decay eta=0.02", "constant eta=0.1".
    #[arg(long)]
    schedule: Option<String>,
    /// Number of epochs K.
    #[arg(long, short = 'k')]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    k_list: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// zeros, ones, xstar, xstar+C, or a comma-separated vector.
    #[arg(long, allow_hyphen_values = true)]
    x1: Option<String>,
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Slope window "lo,hi" for the sweep verdict.
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    window: Option<(f64, f64)>,
    #[arg(long)]
    bregman: bool,
    #[arg(long)]
    residual: bool,
    #[arg(long)]
    descent: bool,
    #[arg(long)]
    distance: bool,
    #[arg(long)]
    average: bool,
    #[arg(long)]
    wall_time: bool,
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn parse_x1(s: &str) -> X1Config {
    let parsed: std::result::Result<Vec<f64>, _> = s.split(',').map(|t| t.trim().parse()).collect();
    match parsed {
        Ok(v) => X1Config::Vector(v),
        Err(_) => X1Config::Keyword(s.to_string()),
    }
}

fn flag(set: bool) -> Option<bool> {
    set.then_some(true)
}

impl ExperimentArgs {
    fn to_plan(&self) -> Result<ExperimentPlan> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let mut f = ExperimentConfig::default();
        f.problem.generator = self.generator.clone();
        f.problem.file = self.problem_file.clone();
        f.problem.seed = self.problem_seed;
        f.problem.regularizer = self.regularizer.clone();
        f.problem.mu_f = self.mu_f;
        f.problem.reference_tol = self.reference_tol;
        f.run.strategy = self.strategy.clone();
        f.run.permutation_file = self.permutation_file.clone();
        f.run.schedule = self.schedule.clone();
        f.run.k = self.epochs;
        f.run.k_list = self.k_list.clone();
        f.run.seeds = self.seeds.clone();
        f.run.x1 = self.x1.as_deref().map(parse_x1);
        f.run.output = self.output.clone();
        f.run.force = flag(self.force);
        f.run.workers = self.workers;
        f.run.window = self.window.map(|(lo, hi)| [lo, hi]);
        f.diagnostics.bregman = flag(self.bregman);
        f.diagnostics.residual = flag(self.residual);
        f.diagnostics.descent = flag(self.descent);
        f.diagnostics.distance = flag(self.distance);
        f.diagnostics.average = flag(self.average);
        f.diagnostics.wall_time = flag(self.wall_time);
        ExperimentPlan::from_config(&base.overlay(&f))
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Run { exp, replay: Some(dir) } => {
            let output = exp
                .output
                .clone()
                .ok_or_else(|| Error::invalid("--replay needs --output"))?;
            cmd_replay(&dir, &output, exp.force, &mut out)?;
        }
        Command::Run { exp, replay: None } => {
            cmd_run(&exp.to_plan()?, &mut out)?;
        }
        Command::Sweep { exp } => {
            cmd_sweep(&exp.to_plan()?, &mut out)?;
        }
        Command::Verify { instances, max_n, seed, scale_l, output } => {
            let opts = VerifyOptions { instances, max_n, seed, scale_l, output };
            cmd_verify(&opts, &mut out)?;
        }
        Command::Rate { path, window } => {
            cmd_rate(&path, window, &mut out)?;
        }
        Command::ShowManifest { path } => {
            cmd_show_manifest(&path, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
