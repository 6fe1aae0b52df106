//! Data-adaptive selection threshold: bootstrap estimate of the MSE of the
//! selective-borrowing estimator over a grid of thresholds, using the
//! no-borrowing estimator (γ = 1) as the consistent anchor for the bias.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::ConformalMethod;
use crate::data::{DesignSpec, IndexSets, TrialData};
use crate::error::{Error, Result};
use crate::estimators::{estimate_csb_grid, sample_variance};
use crate::nuisance::NuisanceConfig;
use crate::seed::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveSettings {
    pub grid: Vec<f64>,
    /// Bootstrap resamples L.
    pub bootstrap: usize,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        AdaptiveSettings { grid: default_grid(), bootstrap: 100 }
    }
}

impl AdaptiveSettings {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || !self.grid.contains(&1.0) {
            return Err(Error::InvalidParameter("threshold grid must be nonempty and contain 1".into()));
        }
        if self.grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::InvalidParameter("threshold grid values must lie in [0,1]".into()));
        }
        if self.bootstrap < 50 {
            return Err(Error::InvalidParameter(format!("bootstrap needs at least 50 resamples, got {}", self.bootstrap)));
        }
        Ok(())
    }
}

/// {0, 0.1, ..., 1}.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|k| f64::from(k) / 10.0).collect()
}

/// Estimates on the original sample and on each bootstrap resample.
#[derive(Debug, Clone, PartialEq)]
pub struct BootGrid {
    pub grid: Vec<f64>,
    /// τ̂_γ on the original sample, one per grid point.
    pub tau_hat: Vec<f64>,
    /// `replicates[g][l]` is τ̂_γ on resample l.
    pub replicates: Vec<Vec<f64>>,
}

impl BootGrid {
    fn anchor(&self) -> usize {
        self.grid.iter().position(|&g| g == 1.0).expect("grid contains 1")
    }
}

/// Runs the estimator grid on the original sample and on `l` stratified
/// bootstrap resamples. Every resample is shared by all thresholds.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_grid<R: Rng + ?Sized>(
    data: &TrialData,
    sets: &IndexSets,
    design: &DesignSpec,
    grid: &[f64],
    l: usize,
    method: &ConformalMethod,
    cfg: &NuisanceConfig,
    rng: &mut R,
) -> Result<BootGrid> {
    let settings = AdaptiveSettings { grid: grid.to_vec(), bootstrap: l };
    settings.validate()?;
    let tau_hat = estimate_csb_grid(data, sets, design, grid, method, cfg, rng)?;
    let base: u64 = rng.random();
    let columns: Vec<Vec<f64>> = (0..l)
        .into_par_iter()
        .map(|b| {
            let mut r = stream_rng(base, b as u64);
            let (boot, boot_sets) = data.stratified_resample(sets, &mut r);
            estimate_csb_grid(&boot, &boot_sets, design, grid, method, cfg, &mut r)
        })
        .collect::<Result<_>>()?;
    let replicates = (0..grid.len()).map(|g| columns.iter().map(|c| c[g]).collect()).collect();
    Ok(BootGrid { grid: grid.to_vec(), tau_hat, replicates })
}

/// Per-threshold MSE estimates and the chosen threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseProfile {
    pub grid: Vec<f64>,
    pub tau_hat: Vec<f64>,
    /// Bootstrap variance of τ̂_γ − τ̂₁.
    pub var_diff: Vec<f64>,
    /// Bootstrap variance of τ̂_γ.
    pub var_gamma: Vec<f64>,
    /// (τ̂_γ − τ̂₁)² − var_diff + var_gamma; can be negative.
    pub mse_hat: Vec<f64>,
    pub gamma_star: f64,
    pub bootstrap: usize,
}

pub fn estimate_mse_profile(boot: &BootGrid) -> Result<MseProfile> {
    let l = boot.replicates.first().map_or(0, Vec::len);
    if l < 2 {
        return Err(Error::InvalidParameter("MSE profile needs at least two bootstrap replicates".into()));
    }
    let anchor = boot.anchor();
    let nb_boot = &boot.replicates[anchor];
    let tau1 = boot.tau_hat[anchor];
    let mut var_diff = Vec::with_capacity(boot.grid.len());
    let mut var_gamma = Vec::with_capacity(boot.grid.len());
    let mut mse_hat = Vec::with_capacity(boot.grid.len());
    for (g, reps) in boot.replicates.iter().enumerate() {
        let diff: Vec<f64> = reps.iter().zip(nb_boot).map(|(a, b)| a - b).collect();
        let vd = if g == anchor { 0.0 } else { sample_variance(&diff) };
        let vg = sample_variance(reps);
        let bias = boot.tau_hat[g] - tau1;
        var_diff.push(vd);
        var_gamma.push(vg);
        mse_hat.push(bias * bias - vd + vg);
    }
    let mut profile = MseProfile {
        grid: boot.grid.clone(),
        tau_hat: boot.tau_hat.clone(),
        var_diff,
        var_gamma,
        mse_hat,
        gamma_star: 1.0,
        bootstrap: l,
    };
    profile.gamma_star = select_threshold(&profile);
    Ok(profile)
}

/// Grid point with the smallest estimated MSE; ties go to the largest γ.
pub fn select_threshold(profile: &MseProfile) -> f64 {
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for (&g, &m) in profile.grid.iter().zip(&profile.mse_hat) {
        if m < best.0 || (m == best.0 && g > best.1) {
            best = (m, g);
        }
    }
    best.1
}

/// Bootstrap grid followed by the MSE profile.
pub fn adaptive_threshold<R: Rng + ?Sized>(
    data: &TrialData,
    sets: &IndexSets,
    design: &DesignSpec,
    method: &ConformalMethod,
    settings: &AdaptiveSettings,
    cfg: &NuisanceConfig,
    rng: &mut R,
) -> Result<MseProfile> {
    let boot = bootstrap_grid(data, sets, design, &settings.grid, settings.bootstrap, method, cfg, rng)?;
    estimate_mse_profile(&boot)
}
