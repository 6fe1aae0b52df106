//! Small dense symmetric solves for normal equations.
//!
//! Design matrices here have a handful of columns, so everything works on
//! flat row-major `d × d` buffers without a linear-algebra dependency.

/// Row-major `n × p` matrix of covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer has wrong length");
        Matrix { data, rows, cols }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix::new(data, rows.len(), cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix made of the given rows, in order (repeats allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(data, idx.len(), self.cols)
    }
}

/// In-place Cholesky factorization of a symmetric `d × d` matrix.
///
/// Fails when a pivot drops below `rel_tol` times the largest diagonal
/// entry, which is how rank deficiency is detected.
pub fn cholesky(a: &mut [f64], d: usize, rel_tol: f64) -> bool {
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(0.0_f64, f64::max);
    let floor = rel_tol * scale.max(f64::MIN_POSITIVE);
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if !(diag > floor) {
            return false;
        }
        let l_jj = diag.sqrt();
        a[j * d + j] = l_jj;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l_jj;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`]; `b` is overwritten.
pub fn cholesky_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in (i + 1)..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

pub const PIVOT_TOL: f64 = 1e-10;

/// Solves the symmetric system `a x = b`, adding `ridge` to the diagonal
/// entries listed in `penalized` if the plain system is rank deficient.
/// Returns the solution and whether the ridge path was taken.
pub fn solve_spd_with_ridge(a: &[f64], b: &[f64], d: usize, ridge: f64, penalized: std::ops::Range<usize>) -> Option<(Vec<f64>, bool)> {
    let mut l = a.to_vec();
    if cholesky(&mut l, d, PIVOT_TOL) {
        let mut x = b.to_vec();
        cholesky_solve(&l, d, &mut x);
        return Some((x, false));
    }
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(0.0_f64, f64::max);
    // Absolute penalty first; a scale-relative one only if the absolute one
    // vanishes against large-magnitude columns.
    for lambda in [ridge, ridge * (1.0 + scale)] {
        let mut l = a.to_vec();
        for i in penalized.clone() {
            l[i * d + i] += lambda;
        }
        if cholesky(&mut l, d, 0.0) {
            let mut x = b.to_vec();
            cholesky_solve(&l, d, &mut x);
            if x.iter().all(|v| v.is_finite()) {
                return Some((x, true));
            }
        }
    }
    None
}
