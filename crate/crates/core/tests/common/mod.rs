#![allow(dead_code)]

pub mod oracle;

use hybridtrial::linalg::Matrix;
use hybridtrial::TrialData;
use rand::Rng;
use rand_distr::StandardNormal;

/// Rows ordered treated, randomized controls, externals. Externals get a
/// random outcome shift on roughly a third of units.
pub fn dataset<R: Rng + ?Sized>(rng: &mut R, n1: usize, n0: usize, ne: usize, p: usize) -> TrialData {
    let n = n1 + n0 + ne;
    let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let eps: f64 = rng.sample(StandardNormal);
        let lin: f64 = x[i * p..(i + 1) * p].iter().enumerate().map(|(k, v)| (k as f64 + 1.0) * v).sum();
        let shift = if i >= n1 + n0 && rng.random::<f64>() < 0.33 { -2.0 } else { 0.0 };
        let effect = if i < n1 { 0.7 + 0.5 * x[i * p] } else { 0.0 };
        y.push(lin + effect + shift + eps);
    }
    let a = (0..n).map(|i| u8::from(i < n1)).collect();
    let s = (0..n).map(|i| u8::from(i < n1 + n0)).collect();
    TrialData::new(Matrix::new(x, n, p), y, a, s, None).unwrap()
}
