//! Nuisance models: outcome regressions, sampling score and variance ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, solve_spd_with_ridge, Matrix, PIVOT_TOL};

/// Numerical constants shared by every nuisance fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceConfig {
    /// Predicted probabilities are clipped to `[prob_clip, 1 - prob_clip]`.
    pub prob_clip: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Ridge penalty on slopes when the OLS design is rank deficient.
    pub ridge: f64,
    pub logistic_max_iter: usize,
    pub logistic_tol: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig { prob_clip: 1e-6, ratio_min: 1e-3, ratio_max: 1e3, ridge: 1e-8, logistic_max_iter: 100, logistic_tol: 1e-8 }
    }
}

/// Linear model with intercept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearModel {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub training_indices: Vec<usize>,
    pub residual_variance: f64,
    pub ridge_fallback: bool,
}

impl LinearModel {
    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut v = self.coefficients[0];
        for (b, xi) in self.coefficients[1..].iter().zip(x) {
            v += b * xi;
        }
        v
    }
}

/// Fills the upper triangle from accumulated first row and lower triangle.
fn symmetrize(a: &mut [f64], d: usize) {
    for i in 1..d {
        a[i * d] = a[i];
        for j in 1..i {
            a[j * d + i] = a[i * d + j];
        }
    }
}

/// Least squares of `outcome` on `covariates` (plus intercept) over `indices`.
pub fn fit_ols(covariates: &Matrix, outcome: &[f64], indices: &[usize]) -> Result<LinearModel> {
    fit_ols_with(covariates, outcome, indices, &NuisanceConfig::default())
}

pub fn fit_ols_with(covariates: &Matrix, outcome: &[f64], indices: &[usize], cfg: &NuisanceConfig) -> Result<LinearModel> {
    let p = covariates.cols();
    let d = p + 1;
    let m = indices.len();
    if m < p + 2 {
        return Err(Error::TooFewRows { needed: p + 2, got: m });
    }
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d];
    for &i in indices {
        let x = covariates.row(i);
        let y = outcome[i];
        xtx[0] += 1.0;
        xty[0] += y;
        for a in 0..p {
            xtx[a + 1] += x[a];
            xty[a + 1] += x[a] * y;
            for b in 0..=a {
                xtx[(a + 1) * d + b + 1] += x[a] * x[b];
            }
        }
    }
    symmetrize(&mut xtx, d);
    let (coefficients, ridge_fallback) = solve_spd_with_ridge(&xtx, &xty, d, cfg.ridge, 1..d)
        .ok_or_else(|| Error::InvalidParameter("least-squares system could not be solved".into()))?;
    let mut model = LinearModel { coefficients, training_indices: indices.to_vec(), residual_variance: 0.0, ridge_fallback };
    let rss: f64 = indices
        .iter()
        .map(|&i| {
            let r = outcome[i] - model.predict(covariates.row(i));
            r * r
        })
        .sum();
    model.residual_variance = rss / (m - p - 1) as f64;
    Ok(model)
}

/// Logistic regression fitted by IRLS.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticModel {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood at the start and after every accepted step.
    pub log_likelihood_trace: Vec<f64>,
    #[serde(skip)]
    clip: f64,
}

impl LogisticModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        let mut v = self.coefficients[0];
        for (b, xi) in self.coefficients[1..].iter().zip(x) {
            v += b * xi;
        }
        v
    }

    /// Clipped probability of label 1.
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear_predictor(x)).clamp(self.clip, 1.0 - self.clip)
    }
}

#[inline]
fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(eta)) without overflow.
#[inline]
fn log1pexp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn log_likelihood(covariates: &Matrix, labels: &[u8], indices: &[usize], beta: &[f64]) -> f64 {
    indices
        .iter()
        .map(|&i| {
            let x = covariates.row(i);
            let mut eta = beta[0];
            for (b, xi) in beta[1..].iter().zip(x) {
                eta += b * xi;
            }
            f64::from(labels[i]) * eta - log1pexp(eta)
        })
        .sum()
}

const SATURATION_ETA: f64 = 30.0;

pub fn fit_logistic(covariates: &Matrix, labels: &[u8], indices: &[usize]) -> Result<LogisticModel> {
    fit_logistic_with(covariates, labels, indices, &NuisanceConfig::default())
}

/// Newton-Raphson (IRLS) with step halving, so the log-likelihood never
/// decreases, switching to plain Newton steps once the Newton decrement is
/// below round-off. The trace covers the line-search phase. Separated data
/// runs to the iteration cap and reports `converged = false`; predictions
/// are clipped either way.
pub fn fit_logistic_with(covariates: &Matrix, labels: &[u8], indices: &[usize], cfg: &NuisanceConfig) -> Result<LogisticModel> {
    let p = covariates.cols();
    let d = p + 1;
    let ones = indices.iter().filter(|&&i| labels[i] == 1).count();
    if ones == 0 || ones == indices.len() {
        return Err(Error::OneClass);
    }
    let mut beta = vec![0.0; d];
    let mut ll = log_likelihood(covariates, labels, indices, &beta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut polishing = false;
    let mut iterations = 0;
    let mut hess = vec![0.0; d * d];
    let mut grad = vec![0.0; d];
    while iterations < cfg.logistic_max_iter {
        iterations += 1;
        hess.iter_mut().for_each(|v| *v = 0.0);
        grad.iter_mut().for_each(|v| *v = 0.0);
        for &i in indices {
            let x = covariates.row(i);
            let mut eta = beta[0];
            for (b, xi) in beta[1..].iter().zip(x) {
                eta += b * xi;
            }
            let mu = sigmoid(eta);
            let w = mu * (1.0 - mu);
            let r = f64::from(labels[i]) - mu;
            grad[0] += r;
            hess[0] += w;
            for a in 0..p {
                grad[a + 1] += r * x[a];
                hess[a + 1] += w * x[a];
                for b in 0..=a {
                    hess[(a + 1) * d + b + 1] += w * x[a] * x[b];
                }
            }
        }
        symmetrize(&mut hess, d);
        let mut l = hess.clone();
        let mut step = grad.clone();
        if cholesky(&mut l, d, PIVOT_TOL) {
            cholesky_solve(&l, d, &mut step);
        } else {
            match solve_spd_with_ridge(&hess, &grad, d, 1e-8, 0..d) {
                Some((s, _)) => step = s,
                None => break,
            }
        }
        // Close to the optimum the likelihood is flat to round-off and a line
        // search would reject accurate steps; plain Newton converges
        // quadratically there.
        let decrement: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
        if polishing || decrement < 1e-10 {
            polishing = true;
            for k in 0..d {
                beta[k] += step[k];
            }
            if step.iter().all(|s| s.abs() < cfg.logistic_tol) {
                converged = true;
                break;
            }
            continue;
        }
        let mut scale = 1.0;
        let mut accepted = false;
        let mut candidate = vec![0.0; d];
        for _ in 0..40 {
            for k in 0..d {
                candidate[k] = beta[k] + scale * step[k];
            }
            let ll_new = log_likelihood(covariates, labels, indices, &candidate);
            if ll_new >= ll {
                ll = ll_new;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        std::mem::swap(&mut beta, &mut candidate);
        debug_assert!(trace.last().is_none_or(|&prev| ll >= prev));
        trace.push(ll);
    }
    // Fitted probabilities numerically 0 or 1 signal (quasi-)separation: the
    // likelihood has no finite maximizer even if the steps became tiny.
    let saturated = indices.iter().any(|&i| {
        let x = covariates.row(i);
        let eta = beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        eta.abs() > SATURATION_ETA
    });
    Ok(LogisticModel { coefficients: beta, converged: converged && !saturated, iterations, log_likelihood_trace: trace, clip: cfg.prob_clip })
}

/// Constant ratio of randomized-control to external-control residual variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceRatio {
    pub value: f64,
    /// Set when a variance was exactly zero and the value hit a clip bound,
    /// or when too few externals were available.
    pub degenerate: bool,
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0)
}

pub fn estimate_variance_ratio(resid_rct_controls: &[f64], resid_externals: &[f64], cfg: &NuisanceConfig) -> Result<VarianceRatio> {
    for v in [resid_rct_controls, resid_externals] {
        if v.len() < 2 {
            return Err(Error::TooFewRows { needed: 2, got: v.len() });
        }
    }
    let num = sample_variance(resid_rct_controls);
    let den = sample_variance(resid_externals);
    let (raw, degenerate) = match (num == 0.0, den == 0.0) {
        (true, true) => (1.0, true),
        (false, true) => (cfg.ratio_max, true),
        (true, false) => (cfg.ratio_min, true),
        (false, false) => (num / den, false),
    };
    Ok(VarianceRatio { value: raw.clamp(cfg.ratio_min, cfg.ratio_max), degenerate })
}
