//! Batch commands behind the CLI: analyze a dataset, run a simulation study
//! and emit external-control diagnostics.
//!
//! Every command is a pure function of its inputs, configuration and seed.
//! Each output file records the seed: CSV files start with a `# seed=`
//! comment line and JSON files carry a `seed` field.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::{adaptive_threshold, default_grid, AdaptiveSettings, MseProfile};
use crate::conformal::{select_ecs, ConformalMethod, ConformalReport, EcRecord};
use crate::data::{load_dataset, partition, ColumnMapping, DesignSpec, IndexSets, TrialData};
use crate::error::{Error, Result};
use crate::estimators::{bootstrap_se_ci, conformal_pvalues, estimate, estimate_csb, Estimate, EstimatorKind, EstimatorSpec, GammaChoice};
use crate::frt::{run_frt, FrtConfig};
use crate::nuisance::NuisanceConfig;
use crate::seed::{derive_seed, stream_rng, DEFAULT_SEED};
use crate::simlab::{run_simulation, ScenarioConfig, SimulationRun, SimulationSettings};

pub const THREADS_ENV: &str = "HYBRIDTRIAL_THREADS";

/// Threshold of the selective-borrowing method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaSetting {
    Fixed(f64),
    Named(AdaptiveTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveTag {
    Adaptive,
}

impl GammaSetting {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(GammaSetting::Named(AdaptiveTag::Adaptive));
        }
        s.parse::<f64>()
            .ok()
            .filter(|g| (0.0..=1.0).contains(g))
            .map(GammaSetting::Fixed)
            .ok_or_else(|| Error::InvalidParameter(format!("gamma must be 'adaptive' or a number in [0,1], got '{s}'")))
    }

    fn choice(self) -> GammaChoice {
        match self {
            GammaSetting::Fixed(g) => GammaChoice::Fixed(g),
            GammaSetting::Named(_) => GammaChoice::Adaptive,
        }
    }
}

/// Fully resolved settings of one CLI run. Sources are merged as built-in
/// defaults, then a JSON config file, then explicit flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker count; `None` or 0 means one per core.
    pub threads: Option<usize>,
    /// Any of difmeans, nb, fb, csb.
    pub methods: Vec<String>,
    pub gamma: GammaSetting,
    /// split, full, cv+ or jackknife+.
    pub conformal: String,
    pub folds: usize,
    pub calibration_fraction: f64,
    pub alpha: f64,
    /// FRT resamples B; `None` picks 5000 for analyze and 1000 for simulate.
    pub resamples: Option<usize>,
    /// Bootstrap resamples L for the threshold search and standard errors.
    pub bootstrap: usize,
    /// Rerun the threshold search inside every FRT resample instead of
    /// holding the observed γ̂ fixed.
    pub recompute_threshold: bool,
    pub grid: Vec<f64>,
    /// Treatment probability of the Bernoulli design; defaults to the
    /// observed treated fraction of the randomized units.
    pub prob: Option<f64>,
    pub columns: ColumnMapping,
    pub replications: usize,
    pub nuisance: NuisanceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            scenario: None,
            out: PathBuf::from("out"),
            seed: DEFAULT_SEED,
            threads: None,
            methods: vec!["nb".into(), "fb".into(), "csb".into()],
            gamma: GammaSetting::Named(AdaptiveTag::Adaptive),
            conformal: "cv+".into(),
            folds: 10,
            calibration_fraction: 0.25,
            alpha: 0.05,
            resamples: None,
            bootstrap: 100,
            recompute_threshold: false,
            grid: default_grid(),
            prob: None,
            columns: ColumnMapping::default(),
            replications: 500,
            nuisance: NuisanceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<RunConfig> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }

    pub fn conformal_method(&self) -> Result<ConformalMethod> {
        match self.conformal.to_ascii_lowercase().as_str() {
            "split" => Ok(ConformalMethod::Split { calibration_fraction: self.calibration_fraction }),
            "full" => Ok(ConformalMethod::Full),
            "cv+" | "cvplus" => Ok(ConformalMethod::CvPlus { folds: self.folds }),
            "jackknife+" | "jackknifeplus" => Ok(ConformalMethod::JackknifePlus),
            other => Err(Error::InvalidParameter(format!("unknown conformal method '{other}'"))),
        }
    }

    pub fn estimator_specs(&self) -> Result<Vec<EstimatorSpec>> {
        let method = self.conformal_method()?;
        let adaptive = AdaptiveSettings { grid: self.grid.clone(), bootstrap: self.bootstrap };
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("no methods requested".into()));
        }
        self.methods
            .iter()
            .map(|m| {
                let kind = match m.to_ascii_lowercase().as_str() {
                    "difmeans" => EstimatorKind::DifInMeans,
                    "nb" => EstimatorKind::NoBorrow,
                    "fb" => EstimatorKind::FullBorrow,
                    "csb" => EstimatorKind::ConformalSelective(self.gamma.choice()),
                    other => return Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
                };
                let spec = EstimatorSpec { kind, conformal_method: method, adaptive: adaptive.clone() };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }

    /// Worker count: the configured value, else the environment variable,
    /// else automatic (0).
    pub fn resolved_threads(&self) -> Result<usize> {
        if let Some(t) = self.threads {
            return Ok(t);
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() && v.trim() != "auto" => {
                v.trim().parse().map_err(|_| Error::InvalidParameter(format!("{THREADS_ENV}='{v}' is not a thread count")))
            }
            _ => Ok(0),
        }
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} outside (0,1)", self.alpha)));
        }
        Ok(())
    }
}

/// Runs `f` on a dedicated pool sized by the configuration.
pub fn with_thread_pool<T: Send>(config: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.resolved_threads()?)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// CSV with a leading `# seed=` line.
fn write_csv(path: &Path, seed: u64, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# seed={seed}")?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(header)?;
    for r in rows {
        csv.write_record(r)?;
    }
    csv.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn load_input(config: &RunConfig) -> Result<(TrialData, IndexSets, DesignSpec, &'static str)> {
    let path = config.input.as_ref().ok_or_else(|| Error::InvalidParameter("--input is required".into()))?;
    let data = load_dataset(File::open(path)?, &config.columns)?;
    let sets = partition(&data)?;
    let (design, source) = match config.prob {
        Some(p) => (DesignSpec::bernoulli(p)?, "configured"),
        None => (DesignSpec::bernoulli(sets.treated.len() as f64 / sets.n_rct() as f64)?, "observed"),
    };
    Ok((data, sets, design, source))
}

/// One row of the analysis report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub est: f64,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub exact_p: Option<f64>,
    pub n_borrowed: usize,
    pub gamma_used: Option<f64>,
    pub selected_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub seed: u64,
    pub n_treated: usize,
    pub n_rct_controls: usize,
    pub n_external: usize,
    pub design_prob: f64,
    pub design_prob_source: &'static str,
    pub alpha: f64,
    pub resamples: usize,
    pub bootstrap: usize,
    pub conformal_method: ConformalMethod,
    pub estimates: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ConformalOutput {
    seed: u64,
    method: String,
    conformal_method: ConformalMethod,
    gamma: f64,
    calibration_size: usize,
    externals: Vec<EcRecord>,
}

/// Point estimate plus, for selective borrowing, the conformal report that
/// produced the selection. Draws from the same stream as `estimate`.
fn estimate_with_report(spec: &EstimatorSpec, data: &TrialData, sets: &IndexSets, design: &DesignSpec, cfg: &NuisanceConfig, seed: u64) -> Result<(Estimate, Option<ConformalReport>)> {
    let mut rng = stream_rng(seed, 0);
    let gamma = match spec.kind {
        EstimatorKind::ConformalSelective(GammaChoice::Fixed(g)) => g,
        EstimatorKind::ConformalSelective(GammaChoice::Adaptive) => {
            adaptive_threshold(data, sets, design, &spec.conformal_method, &spec.adaptive, cfg, &mut rng)?.gamma_star
        }
        _ => return Ok((estimate(spec, data, sets, design, cfg, &mut rng)?, None)),
    };
    let (est, report) = estimate_csb(data, sets, design, gamma, &spec.conformal_method, cfg, &mut rng)?;
    Ok((est, Some(report)))
}

pub fn cmd_analyze(config: &RunConfig) -> Result<AnalysisReport> {
    config.validate_common()?;
    let specs = config.estimator_specs()?;
    let (data, sets, design, source) = load_input(config)?;
    let resamples = config.resamples.unwrap_or(5000);
    fs::create_dir_all(&config.out)?;

    let mut rows = Vec::with_capacity(specs.len());
    let mut conformal: Option<ConformalOutput> = None;
    for (m, spec) in specs.iter().enumerate() {
        let method_seed = derive_seed(config.seed, 100 + m as u64);
        let (est, report) = estimate_with_report(spec, &data, &sets, &design, &config.nuisance, method_seed)?;
        let exact_p = if resamples > 0 {
            let frt_config = FrtConfig { recompute_threshold: config.recompute_threshold, ..FrtConfig::new(spec.clone(), resamples, method_seed) };
            let frt = run_frt(&data, &sets, &design, &frt_config, &config.nuisance)?;
            debug_assert_eq!(frt.observed.value, est.value);
            Some(frt.p_value)
        } else {
            None
        };
        let boot = if config.bootstrap > 0 {
            let mut rng = stream_rng(derive_seed(config.seed, 200 + m as u64), 0);
            Some(bootstrap_se_ci(&data, &sets, &design, spec, &est, config.bootstrap, &config.nuisance, &mut rng)?)
        } else {
            None
        };
        if let (Some(report), None) = (report, &conformal) {
            conformal = Some(ConformalOutput {
                seed: config.seed,
                method: spec.label(),
                conformal_method: report.method,
                gamma: report.gamma,
                calibration_size: report.calibration_size,
                externals: report.records(&data),
            });
        }
        rows.push(ReportRow {
            method: spec.label(),
            est: est.value,
            se: boot.map(|b| b.se),
            ci_lo: boot.map(|b| b.ci.0),
            ci_hi: boot.map(|b| b.ci.1),
            exact_p,
            n_borrowed: est.n_borrowed,
            gamma_used: est.gamma_used,
            selected_ids: est.selected.iter().map(|&j| data.unit_ids()[j].clone()).collect(),
        });
    }

    let report = AnalysisReport {
        seed: config.seed,
        n_treated: sets.treated.len(),
        n_rct_controls: sets.rct_controls.len(),
        n_external: sets.external.len(),
        design_prob: design.known_propensity(),
        design_prob_source: source,
        alpha: config.alpha,
        resamples,
        bootstrap: config.bootstrap,
        conformal_method: config.conformal_method()?,
        estimates: rows,
    };
    write_json(&config.out.join("report.json"), &report)?;
    let csv_rows: Vec<Vec<String>> = report
        .estimates
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.est.to_string(),
                opt(r.se),
                opt(r.ci_lo),
                opt(r.ci_hi),
                opt(r.exact_p),
                r.n_borrowed.to_string(),
                opt(r.gamma_used),
                r.selected_ids.join(";"),
            ]
        })
        .collect();
    write_csv(
        &config.out.join("report.csv"),
        config.seed,
        &["method", "est", "se", "ci_lo", "ci_hi", "exact_p", "n_borrowed", "gamma_used", "selected_ids"],
        &csv_rows,
    )?;
    if let Some(c) = conformal {
        write_json(&config.out.join("conformal_report.json"), &c)?;
    }
    Ok(report)
}

/// Scenario files hold one scenario, a list, or `{"scenarios": [...]}`.
#[derive(Deserialize)]
#[serde(untagged)]
enum ScenarioFile {
    Many { scenarios: Vec<ScenarioConfig> },
    List(Vec<ScenarioConfig>),
    One(Box<ScenarioConfig>),
}

pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioConfig>> {
    let text = fs::read_to_string(path)?;
    let scenarios = match serde_json::from_str::<ScenarioFile>(&text) {
        Ok(ScenarioFile::Many { scenarios }) | Ok(ScenarioFile::List(scenarios)) => scenarios,
        Ok(ScenarioFile::One(s)) => vec![*s],
        // Reparse as a single scenario for a precise message.
        Err(_) => vec![serde_json::from_str::<ScenarioConfig>(&text)?],
    };
    for s in &scenarios {
        s.validate()?;
    }
    Ok(scenarios)
}

pub fn cmd_simulate(config: &RunConfig) -> Result<SimulationRun> {
    config.validate_common()?;
    let path = config.scenario.as_ref().ok_or_else(|| Error::InvalidParameter("--scenario is required".into()))?;
    let scenarios = load_scenarios(path)?;
    let settings = SimulationSettings {
        replications: config.replications,
        methods: config.estimator_specs()?,
        frt_resamples: config.resamples.unwrap_or(1000),
        alpha: config.alpha,
        recompute_threshold: config.recompute_threshold,
        nuisance: config.nuisance,
    };
    let run = run_simulation(&scenarios, &settings, config.seed)?;
    fs::create_dir_all(&config.out)?;

    #[derive(Serialize)]
    struct MetricsOut<'a> {
        seed: u64,
        replications: usize,
        frt_resamples: usize,
        alpha: f64,
        scenarios: &'a [ScenarioConfig],
        metrics: &'a [crate::simlab::MethodMetrics],
    }
    write_json(
        &config.out.join("metrics.json"),
        &MetricsOut {
            seed: config.seed,
            replications: settings.replications,
            frt_resamples: settings.frt_resamples,
            alpha: settings.alpha,
            scenarios: &scenarios,
            metrics: &run.metrics,
        },
    )?;
    let metric_rows: Vec<Vec<String>> = run
        .metrics
        .iter()
        .map(|m| {
            let x = &m.metrics;
            vec![
                m.scenario.clone(),
                m.tau0.to_string(),
                m.truth.to_string(),
                m.method.clone(),
                x.bias.to_string(),
                x.sd.to_string(),
                x.mse.to_string(),
                opt(x.rejection_rate),
                opt(x.rejection_se),
                x.mean_n_borrowed.to_string(),
                opt(x.mean_frac_biased_borrowed),
                opt(x.mean_frac_unbiased_borrowed),
                x.replications.to_string(),
                m.failures.to_string(),
            ]
        })
        .collect();
    write_csv(
        &config.out.join("metrics.csv"),
        config.seed,
        &[
            "scenario",
            "tau0",
            "truth",
            "method",
            "bias",
            "sd",
            "mse",
            "rejection_rate",
            "rejection_se",
            "mean_n_borrowed",
            "mean_frac_biased_borrowed",
            "mean_frac_unbiased_borrowed",
            "replications",
            "failures",
        ],
        &metric_rows,
    )?;
    let rep_rows: Vec<Vec<String>> = run
        .records
        .iter()
        .map(|r| {
            vec![
                r.scenario.clone(),
                r.tau0.to_string(),
                r.replication.to_string(),
                r.method.clone(),
                r.estimate.to_string(),
                opt(r.p_value),
                r.n_borrowed.to_string(),
                opt(r.gamma),
                r.biased_borrowed.to_string(),
                r.unbiased_borrowed.to_string(),
            ]
        })
        .collect();
    write_csv(
        &config.out.join("replications.csv"),
        config.seed,
        &["scenario", "tau0", "replication", "method", "estimate", "p", "n_borrowed", "gamma", "biased_borrowed", "unbiased_borrowed"],
        &rep_rows,
    )?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnosis {
    pub seed: u64,
    pub conformal_method: ConformalMethod,
    pub calibration_size: usize,
    pub grid: Vec<f64>,
    pub externals: Vec<EcRecord>,
    /// Borrow flags per external (outer) and grid threshold (inner).
    pub selected: Vec<Vec<bool>>,
    pub profile: MseProfile,
    pub gamma_star: f64,
}

pub fn cmd_diagnose(config: &RunConfig) -> Result<Diagnosis> {
    config.validate_common()?;
    let (data, sets, design, _) = load_input(config)?;
    if sets.external.is_empty() {
        return Err(Error::EmptyGroup("external"));
    }
    let method = config.conformal_method()?;
    let settings = AdaptiveSettings { grid: config.grid.clone(), bootstrap: config.bootstrap };
    settings.validate()?;
    let pv = conformal_pvalues(&data, &sets, &method, &config.nuisance, &mut stream_rng(derive_seed(config.seed, 300), 0))?;
    let profile = adaptive_threshold(&data, &sets, &design, &method, &settings, &config.nuisance, &mut stream_rng(derive_seed(config.seed, 301), 0))?;
    let selected_at: Vec<Vec<usize>> = settings.grid.iter().map(|&g| select_ecs(&pv.pvalues, &sets.external, g)).collect();
    let selected: Vec<Vec<bool>> = sets.external.iter().map(|j| selected_at.iter().map(|s| s.binary_search(j).is_ok()).collect()).collect();
    let report = ConformalReport::new(method, profile.gamma_star, &sets.external, pv);
    let diagnosis = Diagnosis {
        seed: config.seed,
        conformal_method: method,
        calibration_size: report.calibration_size,
        grid: settings.grid.clone(),
        externals: report.records(&data),
        selected,
        gamma_star: profile.gamma_star,
        profile,
    };

    fs::create_dir_all(&config.out)?;
    let mut header: Vec<String> = vec!["unit_id".into(), "p_value".into(), "score".into()];
    header.extend(diagnosis.grid.iter().map(|g| format!("selected_g{g}")));
    let rows: Vec<Vec<String>> = diagnosis
        .externals
        .iter()
        .zip(&diagnosis.selected)
        .map(|(e, flags)| {
            let mut r = vec![e.unit_id.clone(), e.p_value.to_string(), e.score.to_string()];
            r.extend(flags.iter().map(|&f| u8::from(f).to_string()));
            r
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&config.out.join("ec_diagnostics.csv"), config.seed, &header_refs, &rows)?;
    let p = &diagnosis.profile;
    let profile_rows: Vec<Vec<String>> = (0..p.grid.len())
        .map(|k| vec![p.grid[k].to_string(), p.tau_hat[k].to_string(), p.var_diff[k].to_string(), p.var_gamma[k].to_string(), p.mse_hat[k].to_string()])
        .collect();
    write_csv(&config.out.join("mse_profile.csv"), config.seed, &["gamma", "tau_hat", "var_diff", "var_gamma", "mse_hat"], &profile_rows)?;
    write_json(&config.out.join("diagnose.json"), &diagnosis)?;
    Ok(diagnosis)
}

/// Machine-readable error body printed by the CLI.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
}

impl From<&Error> for ErrorReport {
    fn from(e: &Error) -> Self {
        ErrorReport { error: e.kind(), message: e.to_string() }
    }
}
