use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences with step `1e-5 · (1 + |xᵢ|)`.
///
/// `f` receives a fresh tape and the point as a `1×n` trainable leaf and
/// must return a node whose entries sum to the function value. Returns the
/// largest per-coordinate error `|g − fd| / max(1, |g|, |fd|)`.
pub fn grad_check<F>(f: F, point: &[f64]) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let eval = |p: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(p));
        let y = f(&tape, x)?;
        let v: f64 = tape.value(y).as_slice().iter().sum();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::numeric(format!("grad_check: function value {v} at {p:?}")))
        }
    };

    let tape = Tape::new();
    let x = tape.param(Matrix::row_vector(point));
    let y = f(&tape, x)?;
    let grads = tape.backward(y);
    let analytic = grads.get_or_zeros(x, 1, point.len());

    let mut worst: f64 = 0.0;
    let mut p = point.to_vec();
    for i in 0..point.len() {
        let h = 1e-5 * (1.0 + point[i].abs());
        p[i] = point[i] + h;
        let up = eval(&p)?;
        p[i] = point[i] - h;
        let down = eval(&p)?;
        p[i] = point[i];
        let fd = (up - down) / (2.0 * h);
        let g = analytic.as_slice()[i];
        if !g.is_finite() {
            return Err(Error::numeric(format!("grad_check: analytic gradient {g} at index {i}")));
        }
        let err = (g - fd).abs() / 1f64.max(g.abs()).max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
