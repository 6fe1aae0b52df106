//! Randomization inference for hybrid controlled trials that augment a
//! randomized trial with external controls.
//!
//! The crate provides no-borrowing, full-borrowing and conformal selective
//! borrowing estimators of the average treatment effect, conformal
//! p-values for external controls, a data-adaptive selection threshold,
//! Fisher randomization tests and a simulation harness.

pub mod adaptive;
pub mod commands;
pub mod conformal;
pub mod data;
pub mod error;
pub mod estimators;
pub mod frt;
pub mod linalg;
pub mod nuisance;
pub mod seed;
pub mod simlab;

pub use adaptive::{adaptive_threshold, AdaptiveSettings, MseProfile};
pub use conformal::{ConformalMethod, ConformalPvalues, ConformalReport};
pub use data::{load_dataset, partition, ColumnMapping, DesignSpec, Group, IndexSets, TrialData};
pub use error::{Error, Result};
pub use estimators::{estimate, Estimate, EstimatorKind, EstimatorSpec, GammaChoice};
pub use frt::{enumerate_frt, run_frt, FrtConfig, FrtResult};
pub use nuisance::NuisanceConfig;

#[cfg(test)]
pub(crate) mod testutil {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::data::TrialData;
    use crate::linalg::Matrix;

    /// Rows ordered treated, randomized controls, externals. Linear outcome
    /// with unit-variance noise.
    pub fn random_dataset<R: Rng + ?Sized>(rng: &mut R, n1: usize, n0: usize, ne: usize, p: usize) -> TrialData {
        let n = n1 + n0 + ne;
        let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let lin: f64 = x[i * p..(i + 1) * p].iter().sum();
            y.push(lin + if i < n1 { 0.5 } else { 0.0 } + eps);
        }
        let a = (0..n).map(|i| u8::from(i < n1)).collect();
        let s = (0..n).map(|i| u8::from(i < n1 + n0)).collect();
        TrialData::new(Matrix::new(x, n, p), y, a, s, None).unwrap()
    }
}
