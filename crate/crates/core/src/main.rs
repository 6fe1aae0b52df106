use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hybridtrial::commands::{cmd_analyze, cmd_diagnose, cmd_simulate, with_thread_pool, ErrorReport, GammaSetting, RunConfig};
use hybridtrial::{Error, Result};

/// Randomization inference for hybrid controlled trials with external controls.
#[derive(Parser)]
#[command(name = "hybridtrial", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the ATE with each method, with bootstrap SE/CI and FRT p-values.
    Analyze(Flags),
    /// Run a simulation study from a scenario file.
    Simulate(Flags),
    /// Per-external conformal p-values, selections and the threshold MSE profile.
    Diagnose(Flags),
}

#[derive(Args)]
struct Flags {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV (analyze, diagnose).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Scenario JSON (simulate).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, or "auto". Falls back to HYBRIDTRIAL_THREADS.
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// FRT resamples.
    #[arg(long = "B", visible_alias = "resamples")]
    resamples: Option<usize>,
    /// Bootstrap resamples.
    #[arg(long = "L", visible_alias = "bootstrap")]
    bootstrap: Option<usize>,
    /// "adaptive" or a fixed threshold in [0,1].
    #[arg(long)]
    gamma: Option<String>,
    /// difmeans, nb, fb or csb; repeatable.
    #[arg(long = "method")]
    methods: Vec<String>,
    /// split, full, cv+ or jackknife+.
    #[arg(long)]
    conformal: Option<String>,
    /// Folds for cv+.
    #[arg(long)]
    folds: Option<usize>,
    /// Treatment probability of the Bernoulli design.
    #[arg(long)]
    prob: Option<f64>,
    /// Replications per scenario (simulate).
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long)]
    treatment_col: Option<String>,
    #[arg(long)]
    sample_col: Option<String>,
    #[arg(long)]
    id_col: Option<String>,
    /// Covariate column; repeatable. Default: all unmapped columns.
    #[arg(long = "covariate")]
    covariates: Vec<String>,
}

impl Flags {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = self.$field { c.$field = v; })* };
        }
        set!(out, seed, alpha, bootstrap, conformal, folds, replications);
        c.input = self.input.or(c.input);
        c.scenario = self.scenario.or(c.scenario);
        c.resamples = self.resamples.or(c.resamples);
        c.prob = self.prob.or(c.prob);
        if let Some(t) = self.threads {
            c.threads = if t == "auto" {
                Some(0)
            } else {
                Some(t.parse().map_err(|_| Error::InvalidParameter(format!("--threads expects a count or 'auto', got '{t}'")))?)
            };
        }
        if let Some(g) = self.gamma {
            c.gamma = GammaSetting::parse(&g)?;
        }
        if !self.methods.is_empty() {
            c.methods = self.methods;
        }
        if let Some(v) = self.outcome_col {
            c.columns.outcome = v;
        }
        if let Some(v) = self.treatment_col {
            c.columns.treatment = v;
        }
        if let Some(v) = self.sample_col {
            c.columns.sample = v;
        }
        if self.id_col.is_some() {
            c.columns.id = self.id_col;
        }
        if !self.covariates.is_empty() {
            c.columns.covariates = self.covariates;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(f) => {
            let c = f.resolve()?;
            with_thread_pool(&c, || cmd_analyze(&c)).map(drop)
        }
        Command::Simulate(f) => {
            let c = f.resolve()?;
            with_thread_pool(&c, || cmd_simulate(&c)).map(drop)
        }
        Command::Diagnose(f) => {
            let c = f.resolve()?;
            with_thread_pool(&c, || cmd_diagnose(&c)).map(drop)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::to_string(&ErrorReport::from(&e)).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", e.kind()));
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
