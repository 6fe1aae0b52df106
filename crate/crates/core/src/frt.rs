//! Fisher randomization test under the sharp null of no effect for any
//! randomized unit.
//!
//! Assignments are redrawn from the trial's design for the randomized units
//! only; external controls keep `A = 0` in every resample. The statistic is
//! recomputed from scratch on each resample (nuisance refits and conformal
//! selection included) with the observed outcomes reused as imputed
//! potential outcomes.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DesignSpec, Group, IndexSets, TrialData};
use crate::error::{Error, Result};
use crate::estimators::{estimate, Estimate, EstimatorKind, EstimatorSpec, GammaChoice};
use crate::nuisance::NuisanceConfig;
use crate::seed::{derive_seed, stream_rng};

pub const DEFAULT_RESAMPLES: usize = 5000;
pub const REDRAW_BUDGET: usize = 10;
pub const MAX_ENUMERATION_UNITS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrtConfig {
    /// Number of Monte Carlo resamples B.
    pub resamples: usize,
    /// The test statistic is |τ̂| of this estimator.
    pub statistic: EstimatorSpec,
    /// Rerun the adaptive threshold search on every resample instead of
    /// fixing the threshold chosen on the observed data.
    #[serde(default)]
    pub recompute_threshold: bool,
    pub seed: u64,
}

impl FrtConfig {
    pub fn new(statistic: EstimatorSpec, resamples: usize, seed: u64) -> Self {
        FrtConfig { resamples, statistic, recompute_threshold: false, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrtResult {
    pub observed_stat: f64,
    /// Signed estimate on the observed assignment.
    pub observed: Estimate,
    pub resample_stats: Vec<f64>,
    pub p_value: f64,
    /// Threshold chosen on each resample when it is recomputed.
    pub gamma_per_resample: Option<Vec<f64>>,
    pub resamples: usize,
    pub seed: u64,
    /// Assignments redrawn because the statistic was undefined.
    pub redraws: usize,
}

/// Bernoulli draw for every randomized unit; externals stay untreated.
pub fn resample_assignment<R: Rng + ?Sized>(design: &DesignSpec, sets: &IndexSets, rng: &mut R) -> Vec<u8> {
    let prob = design.known_propensity();
    (0..sets.n())
        .map(|i| match sets.group(i) {
            Group::External => 0,
            _ => u8::from(rng.random::<f64>() < prob),
        })
        .collect()
}

/// Monte Carlo p-value with the observed assignment counted once:
/// (#{b : T_b ≥ T_obs} + 1) / (B + 1).
pub fn monte_carlo_pvalue(observed: f64, resample_stats: &[f64]) -> f64 {
    let exceed = resample_stats.iter().filter(|&&t| t >= observed).count();
    (exceed + 1) as f64 / (resample_stats.len() + 1) as f64
}

/// Statistic held fixed across resamples: an adaptive threshold becomes the
/// observed γ̂ unless it is recomputed per resample.
fn resample_spec(config: &FrtConfig, observed: &Estimate) -> EstimatorSpec {
    let mut spec = config.statistic.clone();
    if let EstimatorKind::ConformalSelective(GammaChoice::Adaptive) = spec.kind {
        if !config.recompute_threshold {
            let gamma = observed.gamma_used.expect("adaptive estimate records its threshold");
            spec.kind = EstimatorKind::ConformalSelective(GammaChoice::Fixed(gamma));
        }
    }
    spec
}

pub fn run_frt(data: &TrialData, sets: &IndexSets, design: &DesignSpec, config: &FrtConfig, cfg: &NuisanceConfig) -> Result<FrtResult> {
    if config.resamples == 0 {
        return Err(Error::InvalidParameter("FRT needs at least one resample".into()));
    }
    config.statistic.validate()?;
    let observed = estimate(&config.statistic, data, sets, design, cfg, &mut stream_rng(config.seed, 0))?;
    let observed_stat = observed.value.abs();
    let spec = resample_spec(config, &observed);
    let base = derive_seed(config.seed, 1);

    let draws: Vec<(f64, Option<f64>, usize)> = (0..config.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(base, b as u64);
            let mut last_err = String::new();
            for attempt in 0..=REDRAW_BUDGET {
                let a = resample_assignment(design, sets, &mut rng);
                debug_assert!(sets.external.iter().all(|&j| a[j] == 0));
                let outcome = IndexSets::from_labels(data.sample(), &a).and_then(|s| estimate(&spec, data, &s, design, cfg, &mut rng));
                match outcome {
                    Ok(est) => return Ok((est.value.abs(), est.gamma_used, attempt)),
                    Err(e) => last_err = e.to_string(),
                }
            }
            Err(Error::StatisticFailed { resample: b, reason: last_err })
        })
        .collect::<Result<_>>()?;

    let resample_stats: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let recomputed = config.recompute_threshold && matches!(config.statistic.kind, EstimatorKind::ConformalSelective(GammaChoice::Adaptive));
    let gamma_per_resample = recomputed.then(|| draws.iter().map(|d| d.1.unwrap_or(f64::NAN)).collect());
    let redraws = draws.iter().map(|d| d.2).sum();
    let p_value = monte_carlo_pvalue(observed_stat, &resample_stats);
    Ok(FrtResult {
        observed_stat,
        observed,
        resample_stats,
        p_value,
        gamma_per_resample,
        resamples: config.resamples,
        seed: config.seed,
        redraws,
    })
}

/// Exact randomization distribution over every assignment of the
/// randomized units for which the statistic is defined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Enumeration {
    /// Statistic |τ̂| for each assignment in the reference set.
    pub stats: Vec<f64>,
    /// Design probability of each assignment (unnormalized).
    pub weights: Vec<f64>,
    /// Treated mask over `IndexSets::rct_all` order, per assignment.
    pub masks: Vec<u32>,
    /// Position of the observed assignment.
    pub observed_index: usize,
    /// Exact p-value of the observed assignment.
    pub p_value: f64,
    /// Assignments dropped because the statistic was undefined on them.
    pub excluded: usize,
    /// Exact p-value of every assignment, aligned with `stats`.
    pub pvalues: Vec<f64>,
}

impl Enumeration {
    /// |𝒜| after exclusions.
    pub fn size(&self) -> usize {
        self.stats.len()
    }

    /// P(p ≤ α) when the assignment is drawn from the design restricted to
    /// the reference set.
    pub fn rejection_probability(&self, alpha: f64) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let hit: f64 = self.pvalues.iter().zip(&self.weights).filter(|(&p, _)| p <= alpha).map(|(_, &w)| w).sum();
        hit / total
    }

    /// Whether all statistic values are pairwise distinct.
    pub fn distinct(&self) -> bool {
        let mut s = self.stats.clone();
        s.sort_by(f64::total_cmp);
        s.windows(2).all(|w| w[0] != w[1])
    }
}

/// Enumerates all 2^{n_R} assignments of the randomized units. The
/// statistic's own randomness (conformal folds) comes from a stream keyed by
/// the assignment, so every assignment maps to one value.
pub fn enumerate_frt(data: &TrialData, sets: &IndexSets, design: &DesignSpec, statistic: &EstimatorSpec, cfg: &NuisanceConfig, seed: u64) -> Result<Enumeration> {
    let n_r = sets.n_rct();
    if n_r > MAX_ENUMERATION_UNITS {
        return Err(Error::TooLarge { n_rct: n_r, max: MAX_ENUMERATION_UNITS });
    }
    statistic.validate()?;
    let observed = estimate(statistic, data, sets, design, cfg, &mut stream_rng(seed, 0))?;
    let fixed = FrtConfig::new(statistic.clone(), 1, seed);
    let spec = resample_spec(&fixed, &observed);
    let prob = design.known_propensity();
    let observed_mask: u32 = sets.rct_all.iter().enumerate().filter(|(_, &i)| sets.group(i) == Group::Treated).map(|(k, _)| 1u32 << k).sum();

    let base = derive_seed(seed, 2);
    let evaluated: Vec<Option<(u32, f64, f64)>> = (0..(1u32 << n_r))
        .into_par_iter()
        .map(|mask| {
            let mut a = vec![0u8; sets.n()];
            for (k, &i) in sets.rct_all.iter().enumerate() {
                a[i] = u8::from(mask >> k & 1 == 1);
            }
            let s = IndexSets::from_labels(data.sample(), &a).ok()?;
            let mut rng = stream_rng(base, u64::from(mask));
            let value = if mask == observed_mask {
                observed.value
            } else {
                estimate(&spec, data, &s, design, cfg, &mut rng).ok()?.value
            };
            let k = mask.count_ones() as i32;
            let w = prob.powi(k) * (1.0 - prob).powi(n_r as i32 - k);
            Some((mask, value.abs(), w))
        })
        .collect();
    let excluded = evaluated.iter().filter(|e| e.is_none()).count();
    let kept: Vec<(u32, f64, f64)> = evaluated.into_iter().flatten().collect();
    let masks: Vec<u32> = kept.iter().map(|k| k.0).collect();
    let stats: Vec<f64> = kept.iter().map(|k| k.1).collect();
    let weights: Vec<f64> = kept.iter().map(|k| k.2).collect();
    let observed_index = masks.iter().position(|&m| m == observed_mask).expect("observed assignment is defined");

    // Descending order; tied statistics share the cumulative weight of the
    // whole tie group.
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[b].total_cmp(&stats[a]));
    let total: f64 = weights.iter().sum();
    let mut pvalues = vec![0.0; stats.len()];
    let mut cum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && stats[order[end]] == stats[order[start]] {
            cum += weights[order[end]];
            end += 1;
        }
        for &i in &order[start..end] {
            pvalues[i] = cum / total;
        }
        start = end;
    }
    let p_value = pvalues[observed_index];
    Ok(Enumeration { stats, weights, masks, observed_index, p_value, excluded, pvalues })
}
