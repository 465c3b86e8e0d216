//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Cholesky factor with one jitter retry of `1e-12 * trace / m` on the diagonal.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c);
    }
    let dim = m.nrows();
    if dim == 0 {
        return None;
    }
    let jitter = 1e-12 * m.trace().abs() / dim as f64;
    let mut j = m.clone();
    for k in 0..dim {
        j[(k, k)] += jitter;
    }
    Cholesky::new(j)
}

/// `log det` from a lower Cholesky factor (sum of log pivots).
pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|k| l[(k, k)].ln()).sum::<f64>()
}

pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let c = cholesky_jittered(m).ok_or_else(|| Error::NotSpd("log-determinant".into()))?;
    Ok(log_det_from_factor(&c.l()))
}

/// Solves `L x = b` for lower-triangular `L`, writing into `out`.
pub fn forward_solve(l: &DMatrix<f64>, b: &[f64], out: &mut [f64]) {
    let n = b.len();
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[(i, k)] * out[k];
        }
        out[i] = acc / l[(i, i)];
    }
}

pub fn eigenvalues_sym(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_max_eigen(m: &DMatrix<f64>) -> (f64, f64) {
    let ev = eigenvalues_sym(m);
    (ev[0], ev[ev.len() - 1])
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

pub fn smallest_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    if a.nrows() < a.ncols() {
        // rank-deficient by shape
        return 0.0;
    }
    sv.min()
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.iter().fold(0.0_f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_solve_matches_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 3.0, 0.5, 0.4, 0.5, 2.0]);
        let c = Cholesky::new(m).unwrap();
        let l = c.l();
        let b = [1.0, -2.0, 0.5];
        let mut out = [0.0; 3];
        forward_solve(&l, &b, &mut out);
        let expect = l.solve_lower_triangular(&nalgebra::DVector::from_row_slice(&b)).unwrap();
        for k in 0..3 {
            assert!((out[k] - expect[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn jitter_does_not_mask_singular_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_jittered(&m).is_none());
    }

    #[test]
    fn smallest_singular_value_of_duplicated_column_is_zero() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, -1.0, -1.0]);
        assert!(smallest_singular_value(&a) < 1e-12);
    }
}
