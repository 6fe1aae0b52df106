//! ATE estimators: difference in means, no borrowing (RCT-only AIPW), full
//! borrowing of external controls, and conformal selective borrowing.
//!
//! Every estimator reads treatment status from the [`IndexSets`] it is
//! given rather than from the stored assignment, so a randomization test
//! only has to rebuild the partition for each resampled assignment.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{adaptive_threshold, AdaptiveSettings};
use crate::conformal::{select_ecs, Conformal, ConformalMethod, ConformalPvalues, ConformalReport};
use crate::data::{DesignSpec, Group, IndexSets, TrialData};
use crate::error::{Error, Result};
use crate::nuisance::{estimate_variance_ratio, fit_logistic_with, fit_ols_with, LinearModel, NuisanceConfig, VarianceRatio};
use crate::seed::stream_rng;

/// How the selection threshold of the selective-borrowing estimator is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaChoice {
    Fixed(f64),
    /// Bootstrap MSE minimization over a grid.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    DifInMeans,
    NoBorrow,
    FullBorrow,
    ConformalSelective(GammaChoice),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub conformal_method: ConformalMethod,
    #[serde(default)]
    pub adaptive: AdaptiveSettings,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorSpec { kind, conformal_method: ConformalMethod::default(), adaptive: AdaptiveSettings::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let EstimatorKind::ConformalSelective(GammaChoice::Fixed(g)) = self.kind {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidParameter(format!("gamma {g} outside [0,1]")));
            }
        }
        self.adaptive.validate()
    }

    /// Short method label used in reports.
    pub fn label(&self) -> String {
        match self.kind {
            EstimatorKind::DifInMeans => "difmeans".into(),
            EstimatorKind::NoBorrow => "nb".into(),
            EstimatorKind::FullBorrow => "fb".into(),
            EstimatorKind::ConformalSelective(GammaChoice::Adaptive) => "csb(adaptive)".into(),
            EstimatorKind::ConformalSelective(GammaChoice::Fixed(g)) => format!("csb({g})"),
        }
    }
}

/// A point estimate of the ATE with optional bootstrap uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub n_borrowed: usize,
    /// Unit indices of borrowed external controls.
    pub selected: Vec<usize>,
    pub se_bootstrap: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub gamma_used: Option<f64>,
}

impl Estimate {
    fn plain(value: f64) -> Self {
        Estimate { value, n_borrowed: 0, selected: Vec::new(), se_bootstrap: None, ci: None, gamma_used: None }
    }
}

pub fn estimate_difmeans(data: &TrialData, sets: &IndexSets) -> Result<Estimate> {
    if sets.treated.is_empty() {
        return Err(Error::EmptyGroup("treated"));
    }
    if sets.rct_controls.is_empty() {
        return Err(Error::EmptyGroup("rct_controls"));
    }
    let y = data.outcome();
    let mean = |idx: &[usize]| idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    Ok(Estimate::plain(mean(&sets.treated) - mean(&sets.rct_controls)))
}

/// Borrowing weight of one unit: zero for treated RCT units and for
/// external controls that are not borrowed.
#[inline]
pub fn borrowing_weight(pi: f64, e: f64, r: f64, group: Group, borrowed: bool) -> f64 {
    let numerator = match group {
        Group::Treated => 0.0,
        Group::Control => 1.0,
        Group::External if borrowed => r,
        Group::External => 0.0,
    };
    pi * numerator / (pi * (1.0 - e) + (1.0 - pi) * r)
}

/// Vectorized [`borrowing_weight`] over units described by sample and
/// assignment indicators.
pub fn compute_fb_weights(pi_hat: &[f64], e_hat: f64, ratio: f64, sample: &[u8], assignment: &[u8], borrowed: &[bool]) -> Vec<f64> {
    (0..pi_hat.len())
        .map(|i| {
            let group = match (sample[i], assignment[i]) {
                (1, 1) => Group::Treated,
                (1, _) => Group::Control,
                _ => Group::External,
            };
            borrowing_weight(pi_hat[i], e_hat, ratio, group, borrowed[i])
        })
        .collect()
}

fn check_arms(sets: &IndexSets) -> Result<()> {
    if sets.treated.is_empty() {
        return Err(Error::EmptyGroup("treated"));
    }
    if sets.rct_controls.is_empty() {
        return Err(Error::EmptyGroup("rct_controls"));
    }
    Ok(())
}

/// Σ over ℛ of μ̂₁(X) + A/ê (Y − μ̂₁(X)) − μ̂₀(X).
fn rct_outcome_terms(data: &TrialData, sets: &IndexSets, e: f64, mu1: &LinearModel, mu0: &LinearModel) -> f64 {
    let (x, y) = (data.covariates(), data.outcome());
    let mut total = 0.0;
    for &i in &sets.rct_all {
        let xi = x.row(i);
        let m1 = mu1.predict(xi);
        total += m1 - mu0.predict(xi);
        if sets.group(i) == Group::Treated {
            total += (y[i] - m1) / e;
        }
    }
    total
}

/// RCT-only doubly robust estimator.
pub fn estimate_nb(data: &TrialData, sets: &IndexSets, design: &DesignSpec, cfg: &NuisanceConfig) -> Result<Estimate> {
    check_arms(sets)?;
    let e = design.known_propensity();
    let (x, y) = (data.covariates(), data.outcome());
    let mu1 = fit_ols_with(x, y, &sets.treated, cfg)?;
    let mu0 = fit_ols_with(x, y, &sets.rct_controls, cfg)?;
    let mut total = rct_outcome_terms(data, sets, e, &mu1, &mu0);
    for &i in &sets.rct_controls {
        total -= (y[i] - mu0.predict(x.row(i))) / (1.0 - e);
    }
    Ok(Estimate::plain(total / sets.n_rct() as f64))
}

/// Nuisance fits of a borrowing estimator, kept for diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct BorrowingFit {
    pub mu1: LinearModel,
    pub mu0: LinearModel,
    pub sampling_score: crate::nuisance::LogisticModel,
    pub variance_ratio: VarianceRatio,
    pub value: f64,
}

/// Doubly robust estimator borrowing the external controls in `borrowed`
/// (unit indices, a subset of ℰ). μ̂₀, π̂ and r̂ are all fitted on
/// ℛ ∪ borrowed. With nothing borrowed this is the no-borrowing estimator.
pub fn estimate_borrowing(data: &TrialData, sets: &IndexSets, design: &DesignSpec, borrowed: &[usize], cfg: &NuisanceConfig) -> Result<Estimate> {
    check_arms(sets)?;
    if borrowed.is_empty() {
        return estimate_nb(data, sets, design, cfg);
    }
    let fit = fit_borrowing(data, sets, design, borrowed, cfg)?;
    let mut selected = borrowed.to_vec();
    selected.sort_unstable();
    Ok(Estimate { value: fit.value, n_borrowed: selected.len(), selected, se_bootstrap: None, ci: None, gamma_used: None })
}

pub fn fit_borrowing(data: &TrialData, sets: &IndexSets, design: &DesignSpec, borrowed: &[usize], cfg: &NuisanceConfig) -> Result<BorrowingFit> {
    debug_assert!(borrowed.iter().all(|&j| sets.group(j) == Group::External));
    let e = design.known_propensity();
    let (x, y) = (data.covariates(), data.outcome());
    let mut borrowed = borrowed.to_vec();
    borrowed.sort_unstable();

    let mut control_pool = Vec::with_capacity(sets.rct_controls.len() + borrowed.len());
    control_pool.extend_from_slice(&sets.rct_controls);
    control_pool.extend_from_slice(&borrowed);
    control_pool.sort_unstable();
    let mut score_pool = Vec::with_capacity(sets.n_rct() + borrowed.len());
    score_pool.extend_from_slice(&sets.rct_all);
    score_pool.extend_from_slice(&borrowed);
    score_pool.sort_unstable();

    let mu1 = fit_ols_with(x, y, &sets.treated, cfg)?;
    let mu0 = fit_ols_with(x, y, &control_pool, cfg)?;
    let sampling_score = fit_logistic_with(x, data.sample(), &score_pool, cfg)?;
    let resid = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| y[i] - mu0.predict(x.row(i))).collect() };
    let variance_ratio = if borrowed.len() >= 2 {
        estimate_variance_ratio(&resid(&sets.rct_controls), &resid(&borrowed), cfg)?
    } else {
        // A single external residual carries no variance information.
        VarianceRatio { value: 1.0, degenerate: true }
    };
    let r = variance_ratio.value;

    let mut total = rct_outcome_terms(data, sets, e, &mu1, &mu0);
    for &i in &control_pool {
        let xi = x.row(i);
        let w = borrowing_weight(sampling_score.predict(xi), e, r, sets.group(i), true);
        total -= w * (y[i] - mu0.predict(xi));
    }
    let value = total / sets.n_rct() as f64;
    Ok(BorrowingFit { mu1, mu0, sampling_score, variance_ratio, value })
}

/// Full borrowing: every external control enters with its weight.
pub fn estimate_fb(data: &TrialData, sets: &IndexSets, design: &DesignSpec, cfg: &NuisanceConfig) -> Result<Estimate> {
    estimate_borrowing(data, sets, design, &sets.external, cfg)
}

/// Conformal p-values of the externals under `method`.
pub fn conformal_pvalues<R: Rng + ?Sized>(
    data: &TrialData,
    sets: &IndexSets,
    method: &ConformalMethod,
    cfg: &NuisanceConfig,
    rng: &mut R,
) -> Result<ConformalPvalues> {
    Conformal::with_nuisance(*cfg).pvalues(data, sets, method, rng)
}

/// Conformal selective borrowing at threshold `gamma`.
pub fn estimate_csb<R: Rng + ?Sized>(
    data: &TrialData,
    sets: &IndexSets,
    design: &DesignSpec,
    gamma: f64,
    method: &ConformalMethod,
    cfg: &NuisanceConfig,
    rng: &mut R,
) -> Result<(Estimate, ConformalReport)> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!("gamma {gamma} outside [0,1]")));
    }
    check_arms(sets)?;
    let pv = if sets.external.is_empty() {
        ConformalPvalues { pvalues: Vec::new(), scores_ec: Vec::new(), calibration_size: 0 }
    } else {
        conformal_pvalues(data, sets, method, cfg, rng)?
    };
    let report = ConformalReport::new(*method, gamma, &sets.external, pv);
    let mut est = estimate_borrowing(data, sets, design, &report.selected, cfg)?;
    est.gamma_used = Some(gamma);
    Ok((est, report))
}

/// Selective-borrowing estimates at every threshold of `grid`, sharing one
/// set of conformal p-values. Thresholds with the same selection reuse the
/// same fit (selections are nested, so equal size means equal set).
pub fn estimate_csb_grid<R: Rng + ?Sized>(
    data: &TrialData,
    sets: &IndexSets,
    design: &DesignSpec,
    grid: &[f64],
    method: &ConformalMethod,
    cfg: &NuisanceConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_arms(sets)?;
    let pvalues = if sets.external.is_empty() { Vec::new() } else { conformal_pvalues(data, sets, method, cfg, rng)?.pvalues };
    let mut cache: Vec<Option<f64>> = vec![None; sets.external.len() + 1];
    grid.iter()
        .map(|&gamma| {
            let selected = select_ecs(&pvalues, &sets.external, gamma);
            if let Some(v) = cache[selected.len()] {
                return Ok(v);
            }
            let v = estimate_borrowing(data, sets, design, &selected, cfg)?.value;
            cache[selected.len()] = Some(v);
            Ok(v)
        })
        .collect()
}

/// Evaluates any estimator. The adaptive variant runs the bootstrap
/// threshold search first, drawing from `rng`.
pub fn estimate<R: Rng + ?Sized>(
    spec: &EstimatorSpec,
    data: &TrialData,
    sets: &IndexSets,
    design: &DesignSpec,
    cfg: &NuisanceConfig,
    rng: &mut R,
) -> Result<Estimate> {
    match spec.kind {
        EstimatorKind::DifInMeans => estimate_difmeans(data, sets),
        EstimatorKind::NoBorrow => estimate_nb(data, sets, design, cfg),
        EstimatorKind::FullBorrow => estimate_fb(data, sets, design, cfg),
        EstimatorKind::ConformalSelective(GammaChoice::Fixed(gamma)) => {
            Ok(estimate_csb(data, sets, design, gamma, &spec.conformal_method, cfg, rng)?.0)
        }
        EstimatorKind::ConformalSelective(GammaChoice::Adaptive) => {
            let profile = adaptive_threshold(data, sets, design, &spec.conformal_method, &spec.adaptive, cfg, rng)?;
            Ok(estimate_csb(data, sets, design, profile.gamma_star, &spec.conformal_method, cfg, rng)?.0)
        }
    }
}

/// Bootstrap standard error and normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub se: f64,
    pub ci: (f64, f64),
    pub replicates: usize,
}

/// Stratified bootstrap of the full estimator pipeline (conformal selection
/// included). An adaptive threshold is held at `point.gamma_used`, the value
/// chosen on the original sample.
pub fn bootstrap_se_ci<R: Rng + ?Sized>(
    data: &TrialData,
    sets: &IndexSets,
    design: &DesignSpec,
    spec: &EstimatorSpec,
    point: &Estimate,
    replicates: usize,
    cfg: &NuisanceConfig,
    rng: &mut R,
) -> Result<BootstrapSummary> {
    if replicates < 50 {
        return Err(Error::InvalidParameter(format!("bootstrap needs at least 50 replicates, got {replicates}")));
    }
    let mut spec = spec.clone();
    if let EstimatorKind::ConformalSelective(GammaChoice::Adaptive) = spec.kind {
        let gamma = point.gamma_used.ok_or_else(|| Error::InvalidParameter("adaptive estimate lacks gamma_used".into()))?;
        spec.kind = EstimatorKind::ConformalSelective(GammaChoice::Fixed(gamma));
    }
    let base: u64 = rng.random();
    let values: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|l| {
            let mut r = stream_rng(base, l as u64);
            let (boot, boot_sets) = data.stratified_resample(sets, &mut r);
            estimate(&spec, &boot, &boot_sets, design, cfg, &mut r).map(|e| e.value)
        })
        .collect::<Result<_>>()?;
    let se = sample_sd(&values);
    Ok(BootstrapSummary { se, ci: (point.value - 1.96 * se, point.value + 1.96 * se), replicates })
}

pub(crate) fn sample_variance(v: &[f64]) -> f64 {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0)
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    sample_variance(v).sqrt()
}
