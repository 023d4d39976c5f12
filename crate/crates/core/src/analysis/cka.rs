//! Linear centered kernel alignment.

use crate::error::{dim_err, Error, Result};
use crate::numerics::Tensor;

/// Columns minus their means.
fn center_columns(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.last_dim());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Tensor::new(vec![n, d], out).expect("same shape")
}

fn gram(x: &Tensor) -> Tensor {
    x.matmul(&x.transpose().expect("rank 2")).expect("inner dims agree")
}

fn frob_dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Linear CKA between two representations of the same `n` samples,
/// `x: [n × d1]`, `y: [n × d2]`. Centering the features is the same as
/// double-centering the Gram matrices.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
        return dim_err("cka", x.shape(), y.shape());
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::Argument(format!("cka needs at least 2 samples, got {n}")));
    }
    let kx = gram(&center_columns(x));
    let ly = gram(&center_columns(y));
    let kk = frob_dot(&kx, &kx);
    let ll = frob_dot(&ly, &ly);
    let degenerate = |c: f64, raw: &Tensor| {
        // ‖K_c‖_F against ‖X‖², so rounding residue of a constant input
        // also counts as degenerate.
        let scale = raw.data().iter().map(|v| v * v).sum::<f64>();
        !(c.sqrt() > 1e-12 * scale)
    };
    if degenerate(kk, x) || degenerate(ll, y) {
        return Err(Error::Numeric("cka input has zero variance".into()));
    }
    let v = frob_dot(&kx, &ly) / (kk.sqrt() * ll.sqrt());
    if !v.is_finite() {
        return Err(Error::Numeric(format!("cka evaluated to {v}")));
    }
    Ok(v)
}
