use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default relative singular-value cutoff for pseudo-inverses.
pub const DEFAULT_RCOND: f64 = 1e-10;

/// SVD pseudo-inverse. Singular values below `rcond * s_max` count as zero.
pub fn pinv(m: &DMatrix<f64>, rcond: f64) -> Result<(DMatrix<f64>, usize)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("pseudo-inverse of a non-finite matrix"));
    }
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok((DMatrix::zeros(c, r), 0));
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rcond * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(c, r);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            rank += 1;
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    Ok((out, rank))
}

/// Log-determinant of a symmetric positive-definite matrix.
pub fn spd_logdet(m: &DMatrix<f64>) -> Option<f64> {
    let ch = m.clone().cholesky()?;
    Some(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

pub fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn scaled_orthogonal_columns() {
        let c = 2.5;
        let m = DMatrix::from_row_slice(2, 3, &[c, 0.0, 0.0, 0.0, 0.0, c]);
        let (p, rank) = pinv(&m, DEFAULT_RCOND).unwrap();
        assert_eq!(rank, 2);
        assert!((p - m.transpose() / (c * c)).norm() < 1e-14);
    }

    #[test]
    fn random_wide_matrix_is_right_invertible() {
        let mut rng = crate::rng::stream_rng(11, 0);
        let m = DMatrix::from_fn(4, 9, |_, _| rng.random::<f64>() - 0.5);
        let (p, rank) = pinv(&m, DEFAULT_RCOND).unwrap();
        assert_eq!(rank, 4);
        assert!((&m * &p - DMatrix::identity(4, 4)).norm() < 1e-10);
        assert!((&m * &p * &m - &m).norm() < 1e-10);
    }

    #[test]
    fn rank_deficient() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let (p, rank) = pinv(&m, DEFAULT_RCOND).unwrap();
        assert_eq!(rank, 1);
        assert!((&m * &p * &m - &m).norm() < 1e-12);
    }

    #[test]
    fn logdet() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        assert!((spd_logdet(&m).unwrap() - 11f64.ln()).abs() < 1e-14);
        assert!(spd_logdet(&DMatrix::from_row_slice(1, 1, &[-1.0])).is_none());
    }
}
