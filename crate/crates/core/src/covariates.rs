use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense row-major `n × p` covariate matrix, one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl Covariates {
    pub fn new(nrows: usize, ncols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != nrows * ncols {
            return Err(Error::InvalidArgument(format!(
                "covariate buffer of length {} does not match {nrows}x{ncols}",
                data.len()
            )));
        }
        Ok(Covariates { nrows, ncols, data })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Covariates {
            nrows,
            ncols,
            data: vec![0.0; nrows * ncols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has {} columns, expected {ncols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Covariates {
            nrows: rows.len(),
            ncols,
            data,
        })
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.ncols.max(1)).take(self.nrows)
    }

    /// Linear predictors `Z_i' beta` for every row.
    pub fn linear_predictor(&self, beta: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.rows()
                .map(|r| r.iter().zip(beta).map(|(z, b)| z * b).sum::<f64>()),
        );
    }

    /// Rows picked by index, with repetition allowed.
    pub fn select_rows(&self, idx: &[usize]) -> Covariates {
        let mut data = Vec::with_capacity(idx.len() * self.ncols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Covariates {
            nrows: idx.len(),
            ncols: self.ncols,
            data,
        }
    }

    /// Sample covariance with the `n - 1` divisor.
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        let p = self.ncols;
        let n = self.nrows as f64;
        let mut mean = vec![0.0; p];
        for r in self.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::zeros(p, p);
        for r in self.rows() {
            for a in 0..p {
                let da = r[a] - mean[a];
                for b in a..p {
                    cov[(a, b)] += da * (r[b] - mean[b]);
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                let v = cov[(a, b)] / (n - 1.0);
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        cov
    }
}

/// Lower-triangular `L` with `L Lᵀ = cov` for a symmetric positive
/// semi-definite matrix. Pivots below `1e-12` of the largest diagonal entry
/// give zero columns, so singular and all-zero matrices factor exactly.
pub fn psd_cholesky(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::InvalidCovariance(format!(
            "{}x{} matrix is not square",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCovariance("non-finite entry".into()));
    }
    let p = cov.nrows();
    for a in 0..p {
        for b in 0..a {
            let (x, y) = (cov[(a, b)], cov[(b, a)]);
            if (x - y).abs() > 1e-10 * (1.0 + x.abs().max(y.abs())) {
                return Err(Error::InvalidCovariance("matrix is not symmetric".into()));
            }
        }
    }
    let scale = (0..p).map(|i| cov[(i, i)].abs()).fold(0.0, f64::max);
    let tol = 1e-9 * scale;
    let not_psd = || Error::InvalidCovariance("not positive semi-definite".into());
    let mut l = DMatrix::zeros(p, p);
    for j in 0..p {
        let d = cov[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d < -tol {
            return Err(not_psd());
        }
        if d <= tol {
            for i in j + 1..p {
                let r = cov[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
                if r.abs() > 1e-6 * scale.max(f64::MIN_POSITIVE) {
                    return Err(not_psd());
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..p {
            let r = cov[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = r / djj;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Covariates::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Covariates::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let z = Covariates::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(z.row(1), &[3.0, 4.0]);
        let mut lp = Vec::new();
        z.linear_predictor(&[1.0, -1.0], &mut lp);
        assert_eq!(lp, vec![-1.0, -1.0]);
        assert_eq!(z.select_rows(&[1, 1, 0]).row(1), &[3.0, 4.0]);
    }

    #[test]
    fn covariance_of_small_matrix() {
        let z = Covariates::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.0], vec![5.0, 5.0]]).unwrap();
        let c = z.sample_covariance();
        assert!((c[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((c[(0, 1)] - 3.0).abs() < 1e-12);
        assert!((c[(1, 1)] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_handles_zero_and_rejects_indefinite() {
        let z = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(psd_cholesky(&z).unwrap(), z);
        let tiny = DMatrix::<f64>::identity(2, 2) * 1e-12;
        let l = psd_cholesky(&tiny).unwrap();
        assert!((l[(1, 1)] - 1e-6).abs() < 1e-18);
        let rank1 = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_cholesky(&rank1).unwrap();
        assert!((&l * l.transpose() - &rank1).abs().max() < 1e-15);
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 0.7, 0.2, 0.7, 3.0, -0.4, 0.2, -0.4, 2.0]);
        let l = psd_cholesky(&a).unwrap();
        assert!((&l * l.transpose() - &a).abs().max() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(psd_cholesky(&bad), Err(Error::InvalidCovariance(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(psd_cholesky(&asym).is_err());
    }
}
