use super::matrix::Matrix;
use super::special::LN_2PI;
use crate::error::{Error, Result};

/// Diagonal jitter tried once when a factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-8;

/// Lower-triangular `L` with strictly positive diagonal, `A = L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
}

impl CholeskyFactor {
    /// Wraps an existing lower factor. Entries above the diagonal are ignored.
    pub fn from_lower(lower: Matrix) -> Result<Self> {
        if lower.rows() != lower.cols() {
            return Err(Error::arg("Cholesky factor must be square"));
        }
        for i in 0..lower.rows() {
            let d = lower[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: i, value: d });
            }
        }
        let mut l = lower;
        let n = l.rows();
        for i in 0..n {
            for j in i + 1..n {
                l[(i, j)] = 0.0;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `L Lᵀ`.
    pub fn covariance(&self) -> Matrix {
        let n = self.dim();
        let mut c = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j {
                    s += self.lower[(i, k)] * self.lower[(j, k)];
                }
                c[(i, j)] = s;
                c[(j, i)] = s;
            }
        }
        c
    }

    /// log det(L Lᵀ).
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.lower[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L v = r` in place.
    pub fn solve_lower_in_place(&self, r: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let row = self.lower.row(i);
            let mut s = r[i];
            for k in 0..i {
                s -= row[k] * r[k];
            }
            r[i] = s / row[i];
        }
    }

    /// Solves `Lᵀ v = r` in place.
    pub fn solve_upper_in_place(&self, r: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = r[i];
            for k in i + 1..n {
                s -= self.lower[(k, i)] * r[k];
            }
            r[i] = s / self.lower[(i, i)];
        }
    }

    /// `A⁻¹ r`.
    pub fn solve(&self, r: &[f64]) -> Vec<f64> {
        let mut v = r.to_vec();
        self.solve_lower_in_place(&mut v);
        self.solve_upper_in_place(&mut v);
        v
    }

    /// `A⁻¹`, used by adjoint rules.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }

    /// `L u`, the map from white noise to a draw with covariance `A`.
    pub fn mul_lower(&self, u: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|i| (0..=i).map(|k| self.lower[(i, k)] * u[k]).sum())
            .collect()
    }
}

fn factorize(a: &Matrix, jitter: f64) -> std::result::Result<Matrix, (usize, f64)> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err((j, d));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Cholesky factorization of a symmetric matrix. Only the lower triangle is
/// read. On failure a jitter of [`CHOLESKY_JITTER`] is added to the diagonal
/// once before reporting the failing pivot.
pub fn cholesky(a: &Matrix) -> Result<CholeskyFactor> {
    if a.rows() != a.cols() {
        return Err(Error::arg(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let lower = match factorize(a, 0.0) {
        Ok(l) => l,
        Err(_) => factorize(a, CHOLESKY_JITTER)
            .map_err(|(pivot, value)| Error::NotPositiveDefinite { pivot, value })?,
    };
    Ok(CholeskyFactor { lower })
}

/// Multivariate normal log-density through the Cholesky factor of the
/// covariance.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], cov: &CholeskyFactor) -> Result<f64> {
    let d = cov.dim();
    if x.len() != d || mean.len() != d {
        return Err(Error::arg(format!(
            "gaussian_logpdf dimension mismatch: x {}, mean {}, cov {d}",
            x.len(),
            mean.len()
        )));
    }
    let mut r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    cov.solve_lower_in_place(&mut r);
    let maha: f64 = r.iter().map(|v| v * v).sum();
    Ok(-0.5 * maha - 0.5 * cov.log_det() - 0.5 * d as f64 * LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factor_is_identity() {
        let l = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(l.lower(), &Matrix::identity(3));
    }

    #[test]
    fn hand_computed_two_by_two() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        let expect = [2.0, 0.0, 1.0, 2f64.sqrt()];
        for (got, want) in l.lower().as_slice().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14);
        }
        let rec = l.covariance();
        assert!(rec.sub(&a).frobenius_norm() / a.frobenius_norm() < 1e-10);
    }

    #[test]
    fn indefinite_reports_pivot() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        match cholesky(&a) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected decomposition error, got {other:?}"),
        }
    }

    #[test]
    fn jitter_rescues_singular_psd() {
        // rank one, PSD: exact factorization hits a zero pivot
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let l = cholesky(&a).unwrap();
        assert!(l.lower()[(1, 1)] > 0.0);
    }

    #[test]
    fn standard_normal_logpdf_values() {
        let id = cholesky(&Matrix::identity(3)).unwrap();
        let v = gaussian_logpdf(&[0.0; 3], &[0.0; 3], &id).unwrap();
        assert!((v + 1.5 * LN_2PI).abs() < 1e-14);
        let one = cholesky(&Matrix::identity(1)).unwrap();
        let v = gaussian_logpdf(&[1.0], &[0.0], &one).unwrap();
        assert!((v - (-0.5 - 0.5 * LN_2PI)).abs() < 1e-14);
        assert!(gaussian_logpdf(&[1.0, 2.0], &[0.0], &one).is_err());
    }
}
