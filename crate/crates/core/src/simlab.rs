//! Simulation laboratory: the hybrid-trial data-generating process with
//! covariate shift and hidden bias in a fraction of external controls, a
//! parallel replication runner and operating-characteristic metrics.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition, DesignSpec, TrialData};
use crate::error::{Error, Result};
use crate::estimators::{estimate, Estimate, EstimatorSpec};
use crate::frt::{run_frt, FrtConfig};
use crate::linalg::{cholesky, Matrix};
use crate::nuisance::NuisanceConfig;
use crate::seed::{derive_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateLaw {
    /// Independent Unif(−2, 2) coordinates.
    UnifMinus2To2,
    /// N(0, Σ) with Σ_ij = rho^|i−j|.
    GaussianToeplitz { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    /// Y(1) = Y(0) for every unit.
    SharpNull,
    Alternative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub n1: usize,
    pub n0: usize,
    pub n_e: usize,
    pub p: usize,
    pub covariate_law: CovariateLaw,
    /// Slope of the sampling score; the intercept is solved for.
    pub eta: Vec<f64>,
    pub tau0: f64,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    /// Outcome shift −b applied to the biased externals.
    pub bias_b: f64,
    /// Fraction of externals carrying the shift.
    pub rho: f64,
    pub ec_noise_scale: f64,
    pub hypothesis: Hypothesis,
    pub seed: Option<u64>,
    /// Optional list of τ₀ values run on the same replications (power curves).
    pub tau0_sweep: Vec<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "scenario".into(),
            n1: 50,
            n0: 25,
            n_e: 50,
            p: 2,
            covariate_law: CovariateLaw::UnifMinus2To2,
            eta: vec![0.1, 0.1],
            tau0: 0.4,
            beta0: vec![1.0, 1.0],
            beta1: vec![2.0, 2.0],
            bias_b: 0.0,
            rho: 0.5,
            ec_noise_scale: 0.5,
            hypothesis: Hypothesis::Alternative,
            seed: None,
            tau0_sweep: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n1 == 0 || self.n0 == 0 || self.n_e == 0 {
            return bad("n1, n0 and n_e must be at least 1".into());
        }
        if self.p == 0 {
            return bad("p must be at least 1".into());
        }
        for (name, v) in [("eta", &self.eta), ("beta0", &self.beta0), ("beta1", &self.beta1)] {
            if v.len() != self.p {
                return bad(format!("{name} has length {} but p = {}", v.len(), self.p));
            }
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0,1]", self.rho));
        }
        if !(self.bias_b >= 0.0) || !(self.ec_noise_scale > 0.0) {
            return bad("bias_b must be ≥ 0 and ec_noise_scale > 0".into());
        }
        if let CovariateLaw::GaussianToeplitz { rho } = self.covariate_law {
            if !(rho.abs() < 1.0) {
                return bad(format!("Toeplitz correlation {rho} must lie in (−1,1)"));
            }
        }
        Ok(())
    }

    pub fn n_rct(&self) -> usize {
        self.n1 + self.n0
    }

    /// Bernoulli design with probability n1/n_R used for assignment.
    pub fn design(&self) -> DesignSpec {
        DesignSpec::BernoulliFixedProb { prob: self.n1 as f64 / self.n_rct() as f64 }
    }

    /// τ₀ values to run: the sweep if given, otherwise `tau0`.
    pub fn tau0_values(&self) -> Vec<f64> {
        if self.tau0_sweep.is_empty() {
            vec![self.tau0]
        } else {
            self.tau0_sweep.clone()
        }
    }
}

/// Ground truth attached to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioTruth {
    /// ATE in the randomized population.
    pub tau: f64,
    /// Bias flag per external control, in ascending unit order.
    pub biased: Vec<bool>,
}

struct CovariateSampler {
    law: CovariateLaw,
    p: usize,
    factor: Vec<f64>,
}

impl CovariateSampler {
    fn new(law: CovariateLaw, p: usize) -> Self {
        let mut factor = Vec::new();
        if let CovariateLaw::GaussianToeplitz { rho } = law {
            factor = (0..p * p).map(|k| rho.powi((k / p).abs_diff(k % p) as i32)).collect();
            assert!(cholesky(&mut factor, p, 0.0), "Toeplitz covariance with |rho| < 1 is positive definite");
        }
        CovariateSampler { law, p, factor }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match self.law {
            CovariateLaw::UnifMinus2To2 => out.extend((0..self.p).map(|_| rng.random_range(-2.0..2.0))),
            CovariateLaw::GaussianToeplitz { .. } => {
                let z: Vec<f64> = (0..self.p).map(|_| rng.sample(StandardNormal)).collect();
                let p = self.p;
                out.extend((0..p).map(|i| (0..=i).map(|k| self.factor[i * p + k] * z[k]).sum::<f64>()));
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sampling_prob(eta0: f64, lin: f64) -> f64 {
    1.0 / (1.0 + (eta0 + lin).exp())
}

/// Intercept η₀ with mean π equal to `target` over the given linear
/// predictors Xᵀη; mean π is decreasing in η₀.
pub fn solve_intercept(lin: &[f64], target: f64) -> f64 {
    let mean_pi = |eta0: f64| lin.iter().map(|&l| sampling_prob(eta0, l)).sum::<f64>() / lin.len() as f64;
    let (mut lo, mut hi) = (-20.0_f64, 20.0_f64);
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if mean_pi(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

const TRUTH_SEED: u64 = 0x7275_7468;
const TRUTH_DRAWS: usize = 1 << 18;

/// ATE in the randomized population, τ₀ + E[X | S=1]ᵀ(β₁ − β₀), by a large
/// fixed-seed Monte Carlo over the covariate law. Zero under the sharp null.
pub fn population_ate(config: &ScenarioConfig) -> f64 {
    if config.hypothesis == Hypothesis::SharpNull {
        return 0.0;
    }
    let sampler = CovariateSampler::new(config.covariate_law, config.p);
    let mut rng = stream_rng(TRUTH_SEED, 0);
    let mut x = Vec::with_capacity(TRUTH_DRAWS * config.p);
    for _ in 0..TRUTH_DRAWS {
        sampler.draw(&mut rng, &mut x);
    }
    let lin: Vec<f64> = x.chunks(config.p).map(|r| dot(r, &config.eta)).collect();
    let target = config.n_rct() as f64 / (config.n_rct() + config.n_e) as f64;
    let eta0 = solve_intercept(&lin, target);
    let delta: Vec<f64> = config.beta1.iter().zip(&config.beta0).map(|(a, b)| a - b).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for (row, &l) in x.chunks(config.p).zip(&lin) {
        let w = sampling_prob(eta0, l);
        num += w * dot(row, &delta);
        den += w;
    }
    config.tau0 + num / den
}

/// Draws one hybrid trial. Rows are the n_R randomized units followed by
/// the n_E externals. `truth.tau` is left at τ₀; use [`population_ate`] for
/// the estimand.
pub fn generate_scenario<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Result<(TrialData, ScenarioTruth)> {
    config.validate()?;
    let p = config.p;
    let (n_r, n_e) = (config.n_rct(), config.n_e);
    let sampler = CovariateSampler::new(config.covariate_law, p);
    let target = n_r as f64 / (n_r + n_e) as f64;

    // Pool of candidates with S ~ Bernoulli(π(X)); keep the first n_R with
    // S=1 and the first n_E with S=0, growing the pool on shortfall.
    let mut pool = 2 * (n_r + n_e);
    let (rct_x, ec_x) = loop {
        let mut x = Vec::with_capacity(pool * p);
        for _ in 0..pool {
            sampler.draw(rng, &mut x);
        }
        let lin: Vec<f64> = x.chunks(p).map(|r| dot(r, &config.eta)).collect();
        let eta0 = solve_intercept(&lin, target);
        let (mut rct, mut ec) = (Vec::with_capacity(n_r * p), Vec::with_capacity(n_e * p));
        for (row, &l) in x.chunks(p).zip(&lin) {
            if rng.random::<f64>() < sampling_prob(eta0, l) {
                if rct.len() < n_r * p {
                    rct.extend_from_slice(row);
                }
            } else if ec.len() < n_e * p {
                ec.extend_from_slice(row);
            }
        }
        if rct.len() == n_r * p && ec.len() == n_e * p {
            break (rct, ec);
        }
        pool *= 2;
    };

    let prob = config.n1 as f64 / n_r as f64;
    let assignment: Vec<u8> = loop {
        let a: Vec<u8> = (0..n_r).map(|_| u8::from(rng.random::<f64>() < prob)).collect();
        let treated = a.iter().filter(|&&v| v == 1).count();
        if treated > 0 && treated < n_r {
            break a;
        }
    };

    let mut outcome = Vec::with_capacity(n_r + n_e);
    for (i, row) in rct_x.chunks(p).enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        let y0 = dot(row, &config.beta0) + eps;
        let y1 = config.tau0 + dot(row, &config.beta1) + eps;
        let treated_outcome = config.hypothesis == Hypothesis::Alternative && assignment[i] == 1;
        outcome.push(if treated_outcome { y1 } else { y0 });
    }
    let n_biased = (config.rho * n_e as f64).floor() as usize;
    let mut biased = vec![false; n_e];
    for j in sample_indices(rng, n_e, n_biased) {
        biased[j] = true;
    }
    for (j, row) in ec_x.chunks(p).enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        let shift = if biased[j] { -config.bias_b } else { 0.0 };
        outcome.push(shift + dot(row, &config.beta0) + config.ec_noise_scale * eps);
    }

    let mut x = rct_x;
    x.extend_from_slice(&ec_x);
    let mut a = assignment;
    a.resize(n_r + n_e, 0);
    let mut s = vec![1u8; n_r];
    s.resize(n_r + n_e, 0);
    let data = TrialData::new(Matrix::new(x, n_r + n_e, p), outcome, a, s, None)?;
    Ok((data, ScenarioTruth { tau: config.tau0, biased }))
}

/// Operating characteristics of one method over replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub bias: f64,
    pub sd: f64,
    pub mse: f64,
    /// Share of replications with p ≤ α; absent when no test was run.
    pub rejection_rate: Option<f64>,
    /// Binomial standard error of the rejection rate.
    pub rejection_se: Option<f64>,
    pub mean_n_borrowed: f64,
    /// Mean share of biased externals that were borrowed.
    pub mean_frac_biased_borrowed: Option<f64>,
    /// Mean share of unbiased externals that were borrowed.
    pub mean_frac_unbiased_borrowed: Option<f64>,
    pub replications: usize,
}

/// Bias, SD and MSE against `truth` and the rejection rate at `alpha`.
/// `pvalues` may be empty when no test was run. Selection fields are left
/// empty for the caller to fill.
pub fn compute_metrics(estimates: &[f64], pvalues: &[f64], truth: f64, alpha: f64) -> Result<Metrics> {
    let r = estimates.len();
    if r < 2 {
        return Err(Error::InvalidParameter(format!("metrics need at least two replications, got {r}")));
    }
    if !pvalues.is_empty() && pvalues.len() != r {
        return Err(Error::InvalidParameter("estimate and p-value counts differ".into()));
    }
    let n = r as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n;
    let (rejection_rate, rejection_se) = if pvalues.is_empty() {
        (None, None)
    } else {
        let rate = pvalues.iter().filter(|&&p| p <= alpha).count() as f64 / n;
        (Some(rate), Some((rate * (1.0 - rate) / n).sqrt()))
    };
    Ok(Metrics {
        bias: mean - truth,
        sd,
        mse,
        rejection_rate,
        rejection_se,
        mean_n_borrowed: 0.0,
        mean_frac_biased_borrowed: None,
        mean_frac_unbiased_borrowed: None,
        replications: r,
    })
}

/// What to run on every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSettings {
    pub replications: usize,
    pub methods: Vec<EstimatorSpec>,
    /// FRT resamples per method and replication; 0 skips testing.
    pub frt_resamples: usize,
    pub alpha: f64,
    /// See [`FrtConfig::recompute_threshold`].
    pub recompute_threshold: bool,
    pub nuisance: NuisanceConfig,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        use crate::estimators::{EstimatorKind, GammaChoice};
        SimulationSettings {
            replications: 500,
            methods: vec![
                EstimatorSpec::new(EstimatorKind::NoBorrow),
                EstimatorSpec::new(EstimatorKind::FullBorrow),
                EstimatorSpec::new(EstimatorKind::ConformalSelective(GammaChoice::Adaptive)),
            ],
            frt_resamples: 1000,
            alpha: 0.05,
            recompute_threshold: false,
            nuisance: NuisanceConfig::default(),
        }
    }
}

/// One method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub scenario: String,
    pub tau0: f64,
    pub replication: usize,
    pub method: String,
    pub estimate: f64,
    pub p_value: Option<f64>,
    pub n_borrowed: usize,
    pub gamma: Option<f64>,
    pub biased_borrowed: usize,
    pub unbiased_borrowed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub scenario: String,
    pub tau0: f64,
    pub truth: f64,
    pub method: String,
    pub metrics: Metrics,
    /// Replications that failed and were left out.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationRun {
    pub seed: u64,
    pub metrics: Vec<MethodMetrics>,
    pub records: Vec<ReplicationRecord>,
}

fn run_one(config: &ScenarioConfig, settings: &SimulationSettings, rep: usize, rep_seed: u64) -> Result<Vec<ReplicationRecord>> {
    let (data, truth) = generate_scenario(config, &mut stream_rng(rep_seed, 0))?;
    let sets = partition(&data)?;
    let design = config.design();
    let mut biased_unit = vec![false; data.n()];
    for (&j, &b) in sets.external.iter().zip(&truth.biased) {
        biased_unit[j] = b;
    }
    settings
        .methods
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            let method_seed = derive_seed(rep_seed, 1 + m as u64);
            let (est, p_value): (Estimate, Option<f64>) = if settings.frt_resamples > 0 {
                let frt_config = FrtConfig { recompute_threshold: settings.recompute_threshold, ..FrtConfig::new(spec.clone(), settings.frt_resamples, method_seed) };
                let res = run_frt(&data, &sets, &design, &frt_config, &settings.nuisance)?;
                (res.observed, Some(res.p_value))
            } else {
                (estimate(spec, &data, &sets, &design, &settings.nuisance, &mut stream_rng(method_seed, 0))?, None)
            };
            let biased_borrowed = est.selected.iter().filter(|&&j| biased_unit[j]).count();
            Ok(ReplicationRecord {
                scenario: config.name.clone(),
                tau0: config.tau0,
                replication: rep,
                method: spec.label(),
                estimate: est.value,
                p_value,
                n_borrowed: est.n_borrowed,
                gamma: est.gamma_used,
                biased_borrowed,
                unbiased_borrowed: est.n_borrowed - biased_borrowed,
            })
        })
        .collect()
}

/// Runs `settings.replications` independent replications of one scenario at
/// its `tau0`, in parallel with one seed stream per replication. The run
/// fails if more than 1% of replications error.
pub fn run_replications(config: &ScenarioConfig, settings: &SimulationSettings, seed: u64) -> Result<SimulationRun> {
    config.validate()?;
    if settings.replications == 0 {
        return Err(Error::InvalidParameter("replications must be at least 1".into()));
    }
    if settings.methods.is_empty() {
        return Err(Error::InvalidParameter("no methods requested".into()));
    }
    for m in &settings.methods {
        m.validate()?;
    }
    let outcomes: Vec<Result<Vec<ReplicationRecord>>> = (0..settings.replications)
        .into_par_iter()
        .map(|r| run_one(config, settings, r, derive_seed(seed, r as u64)))
        .collect();
    let total = outcomes.len();
    let failed: Vec<&Error> = outcomes.iter().filter_map(|o| o.as_ref().err()).collect();
    if failed.len() as f64 > 0.01 * total as f64 {
        return Err(Error::ReplicationFailures { failed: failed.len(), total, first: failed[0].to_string() });
    }
    let failures = failed.len();
    let records: Vec<ReplicationRecord> = outcomes.into_iter().filter_map(|o| o.ok()).flatten().collect();

    let truth = population_ate(config);
    let n_biased = (config.rho * config.n_e as f64).floor() as usize;
    let n_unbiased = config.n_e - n_biased;
    let metrics = settings
        .methods
        .iter()
        .map(|spec| {
            let label = spec.label();
            let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == label).collect();
            let estimates: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
            let pvalues: Vec<f64> = rows.iter().filter_map(|r| r.p_value).collect();
            let mut metrics = compute_metrics(&estimates, &pvalues, truth, settings.alpha)?;
            let k = rows.len() as f64;
            metrics.mean_n_borrowed = rows.iter().map(|r| r.n_borrowed as f64).sum::<f64>() / k;
            let share = |count: fn(&ReplicationRecord) -> usize, of: usize| {
                (of > 0).then(|| rows.iter().map(|r| count(r) as f64 / of as f64).sum::<f64>() / k)
            };
            metrics.mean_frac_biased_borrowed = share(|r| r.biased_borrowed, n_biased);
            metrics.mean_frac_unbiased_borrowed = share(|r| r.unbiased_borrowed, n_unbiased);
            Ok(MethodMetrics { scenario: config.name.clone(), tau0: config.tau0, truth, method: label, metrics, failures })
        })
        .collect::<Result<_>>()?;
    Ok(SimulationRun { seed, metrics, records })
}

/// Runs every scenario over its τ₀ values. All τ₀ values of a scenario share
/// the same replication seeds.
pub fn run_simulation(scenarios: &[ScenarioConfig], settings: &SimulationSettings, seed: u64) -> Result<SimulationRun> {
    let mut out = SimulationRun { seed, metrics: Vec::new(), records: Vec::new() };
    for (k, scenario) in scenarios.iter().enumerate() {
        let scenario_seed = derive_seed(seed, k as u64);
        for tau0 in scenario.tau0_values() {
            let cfg = ScenarioConfig { tau0, ..scenario.clone() };
            let run = run_replications(&cfg, settings, scenario_seed)?;
            out.metrics.extend(run.metrics);
            out.records.extend(run.records);
        }
    }
    Ok(out)
}
