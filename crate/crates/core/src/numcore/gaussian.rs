//! Differentiable Gaussian primitives: batched log-density and the two
//! covariance constructions used by the error models.
//!
//! Covariances travel through the tape flattened row-major, one `d×d`
//! matrix per row (`r × d²`). A single-row covariance broadcasts over the
//! batch.

use super::linalg::{cholesky, CholeskyFactor};
use super::matrix::Matrix;
use super::special::LN_2PI;
use super::tape::{CustomOp, Tape, Var};
use crate::error::{Error, Result};

/// Number of strictly-lower-triangular entries of a `d×d` matrix.
pub fn n_strict_lower(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

/// `(i, j)` pairs of the strictly lower triangle in packed order.
pub fn strict_lower_indices(d: usize) -> Vec<(usize, usize)> {
    (1..d).flat_map(|i| (0..i).map(move |j| (i, j))).collect()
}

/// Infers `d` from a flattened `d²` width.
fn dim_from_flat(cols: usize) -> usize {
    let d = (cols as f64).sqrt().round() as usize;
    assert_eq!(d * d, cols, "covariance width {cols} is not a square");
    d
}

struct GaussLogPdf {
    dim: usize,
    /// Σ⁻¹(x − μ) per row.
    alpha: Matrix,
    /// Σ⁻¹ per covariance row, present when the covariance needs a gradient.
    sigma_inv: Option<Vec<Matrix>>,
}

impl CustomOp for GaussLogPdf {
    fn name(&self) -> &'static str {
        "gaussian_logpdf"
    }

    fn backward(
        &self,
        inputs: &[&Matrix],
        _output: &Matrix,
        grad: &Matrix,
        needs: &[bool],
    ) -> Vec<Option<Matrix>> {
        let d = self.dim;
        let rows = self.alpha.rows();
        let g = grad.as_slice();
        let mut out = vec![None, None, None];
        if needs[0] || needs[1] {
            let mut gx = self.alpha.clone();
            for i in 0..rows {
                gx.row_mut(i).iter_mut().for_each(|v| *v *= -g[i]);
            }
            if needs[1] {
                out[1] = Some(gx.scale(-1.0));
            }
            if needs[0] {
                out[0] = Some(gx);
            }
        }
        if needs[2] {
            let sinv = self.sigma_inv.as_ref().expect("cached inverse");
            let cov_rows = inputs[2].rows();
            let mut gc = Matrix::zeros(cov_rows, d * d);
            for i in 0..rows {
                let a = self.alpha.row(i);
                let si = &sinv[if cov_rows == 1 { 0 } else { i }];
                let dst = gc.row_mut(if cov_rows == 1 { 0 } else { i });
                for p in 0..d {
                    for q in 0..d {
                        dst[p * d + q] += 0.5 * g[i] * (a[p] * a[q] - si[(p, q)]);
                    }
                }
            }
            out[2] = Some(gc);
        }
        out
    }
}

/// Row-wise `log N(x; mean, Σ)`, `r×1`.
///
/// `x` and `mean` are `r×d`; `cov` is `r×d²` or `1×d²`. Each covariance is
/// factorized with [`cholesky`] (including its one-shot jitter), so a
/// non-positive-definite covariance is an error rather than a NaN.
pub fn gaussian_logpdf_rows(tape: &Tape, x: Var, mean: Var, cov: Var) -> Result<Var> {
    tape.custom(&[x, mean, cov], |v, needs_grad| {
        let (xv, mv, cv) = (v[0], v[1], v[2]);
        let d = xv.cols();
        if mv.shape() != xv.shape() {
            return Err(Error::arg(format!(
                "gaussian_logpdf_rows: x {:?} vs mean {:?}",
                xv.shape(),
                mv.shape()
            )));
        }
        if cv.cols() != d * d || (cv.rows() != 1 && cv.rows() != xv.rows()) {
            return Err(Error::arg(format!(
                "gaussian_logpdf_rows: covariance {:?} incompatible with {:?}",
                cv.shape(),
                xv.shape()
            )));
        }
        let factor_row = |i: usize| -> Result<CholeskyFactor> {
            cholesky(&Matrix::from_vec(d, d, cv.row(i).to_vec()))
        };
        let shared = if cv.rows() == 1 {
            Some(factor_row(0)?)
        } else {
            None
        };
        let mut alpha = Matrix::zeros(xv.rows(), d);
        let mut out = Matrix::zeros(xv.rows(), 1);
        let mut inv = if needs_grad { Some(Vec::new()) } else { None };
        if let (Some(inv), Some(f)) = (inv.as_mut(), shared.as_ref()) {
            inv.push(f.inverse());
        }
        let mut r = vec![0.0; d];
        for i in 0..xv.rows() {
            let owned;
            let f = match &shared {
                Some(f) => f,
                None => {
                    owned = factor_row(i)?;
                    &owned
                }
            };
            for ((ri, a), b) in r.iter_mut().zip(xv.row(i)).zip(mv.row(i)) {
                *ri = a - b;
            }
            f.solve_lower_in_place(&mut r);
            let maha: f64 = r.iter().map(|v| v * v).sum();
            out[(i, 0)] = -0.5 * maha - 0.5 * f.log_det() - 0.5 * d as f64 * LN_2PI;
            if needs_grad {
                f.solve_upper_in_place(&mut r);
                alpha.row_mut(i).copy_from_slice(&r);
                if shared.is_none() {
                    if let Some(inv) = inv.as_mut() {
                        inv.push(f.inverse());
                    }
                }
            }
        }
        Ok((
            out,
            Box::new(GaussLogPdf {
                dim: d,
                alpha,
                sigma_inv: inv,
            }) as Box<dyn CustomOp>,
        ))
    })
}

struct DiagPlusLowRank {
    dim: usize,
}

impl CustomOp for DiagPlusLowRank {
    fn name(&self) -> &'static str {
        "diag_plus_lowrank"
    }

    fn backward(
        &self,
        inputs: &[&Matrix],
        _output: &Matrix,
        grad: &Matrix,
        needs: &[bool],
    ) -> Vec<Option<Matrix>> {
        let d = self.dim;
        let lam = strict_lower_matrix(inputs[1].as_slice(), d);
        let mut gdiag = None;
        let mut goff = None;
        if needs[0] {
            let mut gd = Matrix::zeros(grad.rows(), d);
            for i in 0..grad.rows() {
                for k in 0..d {
                    gd[(i, k)] = grad[(i, k * d + k)];
                }
            }
            gdiag = Some(gd);
        }
        if needs[1] {
            // dΛ = Σ_rows (G + Gᵀ) Λ, strictly lower part.
            let mut gsum = Matrix::zeros(d, d);
            for i in 0..grad.rows() {
                let gr = grad.row(i);
                for p in 0..d {
                    for q in 0..d {
                        gsum[(p, q)] += gr[p * d + q] + gr[q * d + p];
                    }
                }
            }
            let gl = gsum.matmul(&lam);
            let packed: Vec<f64> = strict_lower_indices(d)
                .into_iter()
                .map(|(p, q)| gl[(p, q)])
                .collect();
            goff = Some(Matrix::row_vector(&packed));
        }
        vec![gdiag, goff]
    }
}

fn strict_lower_matrix(packed: &[f64], d: usize) -> Matrix {
    let mut l = Matrix::zeros(d, d);
    for ((p, q), v) in strict_lower_indices(d).into_iter().zip(packed) {
        l[(p, q)] = *v;
    }
    l
}

/// `Diag(diag) + Λ Λᵀ` with `Λ` strictly lower triangular, packed in `off`
/// (`1 × d(d−1)/2`, shared across rows). `diag` is `r×d`; output `r×d²`.
pub fn cov_diag_plus_lowrank(tape: &Tape, diag: Var, off: Var) -> Var {
    tape.custom(&[diag, off], |v, _| {
        let (dv, ov) = (v[0], v[1]);
        let d = dv.cols();
        assert_eq!(ov.shape(), (1, n_strict_lower(d)), "packed Λ shape");
        let lam = strict_lower_matrix(ov.as_slice(), d);
        let llt = lam.matmul(&lam.transpose());
        let mut out = Matrix::zeros(dv.rows(), d * d);
        for i in 0..dv.rows() {
            let row = out.row_mut(i);
            row.copy_from_slice(llt.as_slice());
            for k in 0..d {
                row[k * d + k] += dv[(i, k)];
            }
        }
        Ok((out, Box::new(DiagPlusLowRank { dim: d }) as Box<dyn CustomOp>))
    })
    .expect("infallible covariance assembly")
}

struct CholeskyGram {
    dim: usize,
}

impl CustomOp for CholeskyGram {
    fn name(&self) -> &'static str {
        "cholesky_gram"
    }

    fn backward(
        &self,
        inputs: &[&Matrix],
        _output: &Matrix,
        grad: &Matrix,
        needs: &[bool],
    ) -> Vec<Option<Matrix>> {
        let d = self.dim;
        let l = assemble_lower(inputs[0].as_slice(), inputs[1].as_slice(), d);
        let g = grad.row(0);
        let mut gs = Matrix::zeros(d, d);
        for p in 0..d {
            for q in 0..d {
                gs[(p, q)] = g[p * d + q] + g[q * d + p];
            }
        }
        let gl = gs.matmul(&l);
        let gdiag = needs[0].then(|| {
            let v: Vec<f64> = (0..d).map(|k| gl[(k, k)]).collect();
            Matrix::row_vector(&v)
        });
        let goff = needs[1].then(|| {
            let v: Vec<f64> = strict_lower_indices(d)
                .into_iter()
                .map(|(p, q)| gl[(p, q)])
                .collect();
            Matrix::row_vector(&v)
        });
        vec![gdiag, goff]
    }
}

fn assemble_lower(diag: &[f64], off: &[f64], d: usize) -> Matrix {
    let mut l = strict_lower_matrix(off, d);
    for k in 0..d {
        l[(k, k)] = diag[k];
    }
    l
}

/// `L Lᵀ` for `L` with diagonal `diag` (`1×d`) and strictly lower part
/// `off` (`1 × d(d−1)/2`). Output `1×d²`.
pub fn cov_from_cholesky(tape: &Tape, diag: Var, off: Var) -> Var {
    tape.custom(&[diag, off], |v, _| {
        let d = v[0].cols();
        assert_eq!(v[0].rows(), 1, "global factor has one row");
        assert_eq!(v[1].shape(), (1, n_strict_lower(d)), "packed off-diagonal shape");
        let l = assemble_lower(v[0].as_slice(), v[1].as_slice(), d);
        let s = l.matmul(&l.transpose());
        Ok((
            Matrix::from_vec(1, d * d, s.into_vec()),
            Box::new(CholeskyGram { dim: d }) as Box<dyn CustomOp>,
        ))
    })
    .expect("infallible covariance assembly")
}

/// Unflattens row `i` of an `r×d²` covariance batch.
pub fn cov_row(flat: &Matrix, i: usize) -> Matrix {
    let d = dim_from_flat(flat.cols());
    Matrix::from_vec(d, d, flat.row(i).to_vec())
}
