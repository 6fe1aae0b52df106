//! Conformal p-values testing whether each external control is
//! exchangeable with the randomized controls, and the resulting borrow set.
//!
//! Four constructions are available: split, full, CV+ and jackknife+. All of
//! them compare nonconformity scores of randomized controls against the
//! score of an external control and count ties with `>=`, so every p-value
//! lies on the grid `k / (m + 1)`, `k = 1..=m+1`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{IndexSets, TrialData};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nuisance::{fit_ols_with, LinearModel, NuisanceConfig};

/// Which conformal construction produces the p-values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConformalMethod {
    Split { calibration_fraction: f64 },
    Full,
    CvPlus { folds: usize },
    JackknifePlus,
}

impl Default for ConformalMethod {
    fn default() -> Self {
        ConformalMethod::CvPlus { folds: 10 }
    }
}

impl ConformalMethod {
    pub fn split() -> Self {
        ConformalMethod::Split { calibration_fraction: 0.25 }
    }

    pub fn label(&self) -> String {
        match self {
            ConformalMethod::Split { calibration_fraction } => format!("split({calibration_fraction})"),
            ConformalMethod::Full => "full".into(),
            ConformalMethod::CvPlus { folds } => format!("cv+({folds})"),
            ConformalMethod::JackknifePlus => "jackknife+".into(),
        }
    }
}

/// A nonconformity score built from a model fitted on randomized controls.
pub trait NonconformityScore: Sync {
    type Model;

    fn fit(&self, covariates: &Matrix, outcome: &[f64], train: &[usize]) -> Result<Self::Model>;

    fn score(&self, model: &Self::Model, x: &[f64], y: f64) -> f64;

    /// Smallest training set `fit` accepts for covariate dimension `p`.
    fn min_training_rows(&self, p: usize) -> usize;
}

/// Absolute residual of an OLS fit.
#[derive(Debug, Clone, Copy, Default)]
pub struct AbsResidual {
    pub nuisance: NuisanceConfig,
}

impl NonconformityScore for AbsResidual {
    type Model = LinearModel;

    fn fit(&self, covariates: &Matrix, outcome: &[f64], train: &[usize]) -> Result<LinearModel> {
        fit_ols_with(covariates, outcome, train, &self.nuisance)
    }

    fn score(&self, model: &LinearModel, x: &[f64], y: f64) -> f64 {
        score_abs_residual(model, x, y)
    }

    fn min_training_rows(&self, p: usize) -> usize {
        p + 2
    }
}

/// `|y - predict(x)|`. Residuals at floating-point round-off level of the
/// operands are reported as exactly 0 so that exact fits tie.
pub fn score_abs_residual(model: &LinearModel, x: &[f64], y: f64) -> f64 {
    let fitted = model.predict(x);
    let r = (y - fitted).abs();
    if r <= 1e-10 * (1.0 + y.abs() + fitted.abs()) {
        0.0
    } else {
        r
    }
}

/// P-values over the external controls, aligned with `IndexSets::external`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalPvalues {
    pub pvalues: Vec<f64>,
    /// External-control scores (averaged over folds for CV+ and jackknife+).
    pub scores_ec: Vec<f64>,
    /// `m` in the grid `k / (m + 1)`.
    pub calibration_size: usize,
}

#[inline]
fn grid_pvalue(count: usize, m: usize) -> f64 {
    debug_assert!(count <= m);
    (count + 1) as f64 / (m + 1) as f64
}

/// Conformal p-value engine over a pluggable score.
#[derive(Debug, Clone, Copy, Default)]
pub struct Conformal<S = AbsResidual> {
    pub score: S,
}

impl Conformal<AbsResidual> {
    pub fn with_nuisance(cfg: NuisanceConfig) -> Self {
        Conformal { score: AbsResidual { nuisance: cfg } }
    }
}

impl<S: NonconformityScore> Conformal<S> {
    pub fn pvalues<R: Rng + ?Sized>(&self, data: &TrialData, sets: &IndexSets, method: &ConformalMethod, rng: &mut R) -> Result<ConformalPvalues> {
        match *method {
            ConformalMethod::Split { calibration_fraction } => self.split(data, sets, calibration_fraction, rng),
            ConformalMethod::Full => self.full(data, sets),
            ConformalMethod::CvPlus { folds } => self.cvplus(data, sets, folds, rng),
            ConformalMethod::JackknifePlus => self.jackknife_plus(data, sets),
        }
    }

    pub fn split<R: Rng + ?Sized>(&self, data: &TrialData, sets: &IndexSets, frac: f64, rng: &mut R) -> Result<ConformalPvalues> {
        if !(frac > 0.0 && frac < 1.0) {
            return Err(Error::InvalidParameter(format!("calibration fraction {frac} outside (0,1)")));
        }
        let controls = &sets.rct_controls;
        let m = controls.len();
        let min_train = self.score.min_training_rows(data.p());
        if m < 4 {
            return Err(Error::TooFewControls { needed: 4, got: m });
        }
        let n_cal = ((frac * m as f64).ceil() as usize).clamp(1, m);
        if m - n_cal < min_train {
            return Err(Error::TooFewControls { needed: n_cal + min_train, got: m });
        }
        let mut order = controls.clone();
        order.shuffle(rng);
        let calibration = &order[..n_cal];
        let mut train = order[n_cal..].to_vec();
        train.sort_unstable();

        let (x, y) = (data.covariates(), data.outcome());
        let model = self.score.fit(x, y, &train)?;
        let cal_scores: Vec<f64> = calibration.iter().map(|&i| self.score.score(&model, x.row(i), y[i])).collect();
        let mut pvalues = Vec::with_capacity(sets.external.len());
        let mut scores_ec = Vec::with_capacity(sets.external.len());
        for &j in &sets.external {
            let sj = self.score.score(&model, x.row(j), y[j]);
            let count = cal_scores.iter().filter(|&&si| si >= sj).count();
            pvalues.push(grid_pvalue(count, n_cal));
            scores_ec.push(sj);
        }
        Ok(ConformalPvalues { pvalues, scores_ec, calibration_size: n_cal })
    }

    /// Refits the model on 𝒞 ∪ {j} for each external control j.
    pub fn full(&self, data: &TrialData, sets: &IndexSets) -> Result<ConformalPvalues> {
        let controls = &sets.rct_controls;
        let m = controls.len();
        let min_train = self.score.min_training_rows(data.p());
        if m < min_train {
            return Err(Error::TooFewControls { needed: min_train, got: m });
        }
        let (x, y) = (data.covariates(), data.outcome());
        let mut pvalues = Vec::with_capacity(sets.external.len());
        let mut scores_ec = Vec::with_capacity(sets.external.len());
        let mut train = Vec::with_capacity(m + 1);
        for &j in &sets.external {
            train.clear();
            train.extend_from_slice(controls);
            let pos = train.partition_point(|&i| i < j);
            train.insert(pos, j);
            let model = self.score.fit(x, y, &train)?;
            let sj = self.score.score(&model, x.row(j), y[j]);
            let count = controls.iter().filter(|&&i| self.score.score(&model, x.row(i), y[i]) >= sj).count();
            pvalues.push(grid_pvalue(count, m));
            scores_ec.push(sj);
        }
        Ok(ConformalPvalues { pvalues, scores_ec, calibration_size: m })
    }

    /// K folds from a seeded shuffle of 𝒞, cut into contiguous blocks whose
    /// sizes differ by at most one.
    pub fn cvplus<R: Rng + ?Sized>(&self, data: &TrialData, sets: &IndexSets, folds: usize, rng: &mut R) -> Result<ConformalPvalues> {
        let controls = &sets.rct_controls;
        let m = controls.len();
        if folds < 2 || folds > m {
            return Err(Error::BadFoldCount { folds, controls: m });
        }
        let mut order = controls.clone();
        order.shuffle(rng);
        let base = m / folds;
        let extra = m % folds;
        let mut blocks = Vec::with_capacity(folds);
        let mut start = 0;
        for f in 0..folds {
            let size = base + usize::from(f < extra);
            blocks.push(order[start..start + size].to_vec());
            start += size;
        }
        self.cross_fit(data, sets, &blocks)
    }

    /// Leave-one-out models; CV+ with one control per fold.
    pub fn jackknife_plus(&self, data: &TrialData, sets: &IndexSets) -> Result<ConformalPvalues> {
        let m = sets.rct_controls.len();
        let needed = self.score.min_training_rows(data.p()) + 1;
        if m < needed {
            return Err(Error::TooFewControls { needed, got: m });
        }
        let blocks: Vec<Vec<usize>> = sets.rct_controls.iter().map(|&i| vec![i]).collect();
        self.cross_fit(data, sets, &blocks)
    }

    /// Shared CV+/jackknife+ kernel. Every fold's computation depends only on
    /// the fold's members (training rows are taken in ascending order), and
    /// counts are integers, so the p-values do not depend on fold order.
    fn cross_fit(&self, data: &TrialData, sets: &IndexSets, blocks: &[Vec<usize>]) -> Result<ConformalPvalues> {
        let controls = &sets.rct_controls;
        let m = controls.len();
        let ne = sets.external.len();
        let (x, y) = (data.covariates(), data.outcome());
        let min_train = self.score.min_training_rows(data.p());

        let mut counts = vec![0usize; ne];
        // Per-control EC scores, used for the fold-averaged diagnostic score.
        let mut ec_score_of_fold = vec![0.0; blocks.len() * ne];
        let mut fold_of = vec![usize::MAX; data.n()];
        let mut held = vec![false; data.n()];
        let mut train = Vec::with_capacity(m);
        for (f, block) in blocks.iter().enumerate() {
            for &i in block {
                held[i] = true;
                fold_of[i] = f;
            }
            train.clear();
            train.extend(controls.iter().copied().filter(|&i| !held[i]));
            for &i in block {
                held[i] = false;
            }
            if train.len() < min_train {
                return Err(Error::TooFewControls { needed: m - train.len() + min_train, got: m });
            }
            let model = self.score.fit(x, y, &train)?;
            let held_scores: Vec<f64> = block.iter().map(|&i| self.score.score(&model, x.row(i), y[i])).collect();
            for (k, &j) in sets.external.iter().enumerate() {
                let sj = self.score.score(&model, x.row(j), y[j]);
                ec_score_of_fold[f * ne + k] = sj;
                counts[k] += held_scores.iter().filter(|&&si| si >= sj).count();
            }
        }
        let pvalues = counts.iter().map(|&c| grid_pvalue(c, m)).collect();
        let scores_ec = (0..ne).map(|k| controls.iter().map(|&i| ec_score_of_fold[fold_of[i] * ne + k]).sum::<f64>() / m as f64).collect();
        Ok(ConformalPvalues { pvalues, scores_ec, calibration_size: m })
    }
}

pub fn split_conformal_pvalues<R: Rng + ?Sized>(data: &TrialData, sets: &IndexSets, frac: f64, rng: &mut R) -> Result<ConformalPvalues> {
    Conformal::<AbsResidual>::default().split(data, sets, frac, rng)
}

pub fn full_conformal_pvalues(data: &TrialData, sets: &IndexSets) -> Result<ConformalPvalues> {
    Conformal::<AbsResidual>::default().full(data, sets)
}

pub fn cvplus_pvalues<R: Rng + ?Sized>(data: &TrialData, sets: &IndexSets, folds: usize, rng: &mut R) -> Result<ConformalPvalues> {
    Conformal::<AbsResidual>::default().cvplus(data, sets, folds, rng)
}

pub fn jackknife_plus_pvalues(data: &TrialData, sets: &IndexSets) -> Result<ConformalPvalues> {
    Conformal::<AbsResidual>::default().jackknife_plus(data, sets)
}

/// External controls with p-value strictly above `gamma`; `external[k]` is
/// the unit index of `pvalues[k]`.
pub fn select_ecs(pvalues: &[f64], external: &[usize], gamma: f64) -> Vec<usize> {
    pvalues.iter().zip(external).filter(|(&p, _)| p > gamma).map(|(_, &j)| j).collect()
}

/// Conformal p-values plus the borrow decision at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformalReport {
    pub method: ConformalMethod,
    pub gamma: f64,
    /// Unit indices of the external controls, aligned with `pvalues`.
    pub external: Vec<usize>,
    pub pvalues: Vec<f64>,
    pub scores_ec: Vec<f64>,
    pub calibration_size: usize,
    pub selected: Vec<usize>,
}

impl ConformalReport {
    pub fn new(method: ConformalMethod, gamma: f64, external: &[usize], pv: ConformalPvalues) -> Self {
        let selected = select_ecs(&pv.pvalues, external, gamma);
        ConformalReport {
            method,
            gamma,
            external: external.to_vec(),
            pvalues: pv.pvalues,
            scores_ec: pv.scores_ec,
            calibration_size: pv.calibration_size,
            selected,
        }
    }

    /// Per-EC rows keyed by unit id.
    pub fn records(&self, data: &TrialData) -> Vec<EcRecord> {
        self.external
            .iter()
            .enumerate()
            .map(|(k, &j)| EcRecord {
                unit_id: data.unit_ids()[j].clone(),
                p_value: self.pvalues[k],
                score: self.scores_ec[k],
                selected: self.pvalues[k] > self.gamma,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EcRecord {
    pub unit_id: String,
    pub p_value: f64,
    pub score: f64,
    pub selected: bool,
}
