//! Brute-force reference implementations on nalgebra.

use hybridtrial::{IndexSets, TrialData};
use nalgebra::{DMatrix, DVector};

pub fn design_row(d: &TrialData, i: usize) -> Vec<f64> {
    let mut r = vec![1.0];
    r.extend_from_slice(d.covariates().row(i));
    r
}

pub fn design_matrix(d: &TrialData, idx: &[usize]) -> DMatrix<f64> {
    let cols = d.p() + 1;
    DMatrix::from_fn(idx.len(), cols, |r, c| design_row(d, idx[r])[c])
}

/// Least squares by SVD.
pub fn ols(d: &TrialData, idx: &[usize]) -> DVector<f64> {
    let x = design_matrix(d, idx);
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| d.outcome()[i]));
    x.svd(true, true).solve(&y, 1e-14).unwrap()
}

pub fn predict(beta: &DVector<f64>, d: &TrialData, i: usize) -> f64 {
    design_row(d, i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum()
}

/// Plain Newton iterations for the logistic MLE; `None` if it does not
/// settle (separated data).
pub fn logistic(d: &TrialData, idx: &[usize]) -> Option<DVector<f64>> {
    let x = design_matrix(d, idx);
    let s = DVector::from_iterator(idx.len(), idx.iter().map(|&i| f64::from(d.sample()[i])));
    let mut beta = DVector::zeros(d.p() + 1);
    for _ in 0..200 {
        let eta = &x * &beta;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.map(|m| m * (1.0 - m));
        let grad = x.transpose() * (&s - &mu);
        let mut h = DMatrix::zeros(d.p() + 1, d.p() + 1);
        for r in 0..idx.len() {
            let row = x.row(r);
            h += row.transpose() * row * w[r];
        }
        let step = h.cholesky()?.solve(&grad);
        beta += &step;
        if step.amax() < 1e-13 {
            return (eta.amax() < 30.0).then_some(beta);
        }
    }
    None
}

pub fn sample_var(v: &[f64]) -> f64 {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)
}

pub fn brute_nb(d: &TrialData, sets: &IndexSets, e: f64) -> f64 {
    let b1 = ols(d, &sets.treated);
    let b0 = ols(d, &sets.rct_controls);
    let mut total = 0.0;
    for &i in &sets.rct_all {
        let (a, y) = (f64::from(d.assignment()[i]), d.outcome()[i]);
        let (m1, m0) = (predict(&b1, d, i), predict(&b0, d, i));
        total += m1 + a / e * (y - m1) - m0 - (1.0 - a) / (1.0 - e) * (y - m0);
    }
    total / sets.n_rct() as f64
}

/// One sum over every unit of the hybrid sample.
pub fn brute_borrow(d: &TrialData, sets: &IndexSets, e: f64, borrowed: &[usize]) -> Option<f64> {
    let in_b = |i: usize| borrowed.contains(&i);
    let pool0: Vec<usize> = (0..d.n()).filter(|&i| (d.sample()[i] == 1 && d.assignment()[i] == 0) || in_b(i)).collect();
    let pool_s: Vec<usize> = (0..d.n()).filter(|&i| d.sample()[i] == 1 || in_b(i)).collect();
    let b1 = ols(d, &sets.treated);
    let b0 = ols(d, &pool0);
    let g = logistic(d, &pool_s)?;
    let rc: Vec<f64> = sets.rct_controls.iter().map(|&i| d.outcome()[i] - predict(&b0, d, i)).collect();
    let re: Vec<f64> = borrowed.iter().map(|&i| d.outcome()[i] - predict(&b0, d, i)).collect();
    let r = if borrowed.len() >= 2 { (sample_var(&rc) / sample_var(&re)).clamp(1e-3, 1e3) } else { 1.0 };
    let mut total = 0.0;
    for i in 0..d.n() {
        let (s, a, y) = (f64::from(d.sample()[i]), f64::from(d.assignment()[i]), d.outcome()[i]);
        let (m1, m0) = (predict(&b1, d, i), predict(&b0, d, i));
        let pi = (1.0 / (1.0 + (-predict(&g, d, i)).exp())).clamp(1e-6, 1.0 - 1e-6);
        let keep = if s == 1.0 || in_b(i) { 1.0 } else { 0.0 };
        let w = pi * (s * (1.0 - a) + (1.0 - s) * r) / (pi * (1.0 - e) + (1.0 - pi) * r);
        total += s * (m1 + a / e * (y - m1) - m0) - keep * w * (y - m0);
    }
    Some(total / sets.n_rct() as f64)
}

/// Brute-force jackknife+ p-value of external `j`.
pub fn jackknife_plus(d: &TrialData, sets: &IndexSets, j: usize) -> f64 {
    let m = sets.rct_controls.len();
    let mut count = 0;
    for &i in &sets.rct_controls {
        let loo: Vec<usize> = sets.rct_controls.iter().copied().filter(|&c| c != i).collect();
        let b = ols(d, &loo);
        count += usize::from(score(d, &b, i) >= score(d, &b, j));
    }
    (count + 1) as f64 / (m + 1) as f64
}

/// Brute-force full-conformal p-value of external `j`.
pub fn full_conformal(d: &TrialData, sets: &IndexSets, j: usize) -> f64 {
    let m = sets.rct_controls.len();
    let mut train = sets.rct_controls.clone();
    train.push(j);
    let b = ols(d, &train);
    let count = sets.rct_controls.iter().filter(|&&i| score(d, &b, i) >= score(d, &b, j)).count();
    (count + 1) as f64 / (m + 1) as f64
}

pub fn score(d: &TrialData, b: &DVector<f64>, i: usize) -> f64 {
    (d.outcome()[i] - predict(b, d, i)).abs()
}
