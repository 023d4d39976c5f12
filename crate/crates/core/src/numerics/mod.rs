//! Dense `f64` tensors with a reverse-mode tape, plus the selection and
//! gradient-checking helpers the rest of the crate relies on.

mod kernels;
mod ops;
mod tape;
mod tensor;

pub use tape::{GradSink, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Indices of the `k` largest scores, largest first. Ties go to the lower
/// index.
pub fn topk_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!("k = {k} outside [1, {}]", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences of step `h`, returning
/// `max_i |a_i − c_i| / (|a_i| + |c_i| + 1e-12)`.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        let y = tape.value(out);
        if y.len() != 1 {
            return Err(Error::Argument(format!("f must be scalar, got shape {:?}", y.shape())));
        }
        let y = y.item();
        if !y.is_finite() {
            return Err(Error::Numeric(format!("f evaluated to {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numeric("f is not finite at x".into()));
    }
    let analytic = tape.backward(out)?.get_or_zeros(xv);

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - central).abs() / (a.abs() + central.abs() + 1e-12));
    }
    Ok(worst)
}
