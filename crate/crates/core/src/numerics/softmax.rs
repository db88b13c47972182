use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max-subtracted softmax of one row, written into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if n == 0 {
        return Err(Error::shape("softmax_lastdim", "empty last axis"));
    }
    let mut out = vec![0.0; x.len()];
    for (r, o) in x.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        softmax_row(r, o);
    }
    Tensor::from_op("softmax_lastdim", x.shape().to_vec(), out)
}

/// Gradient wrt the logits given the softmax output `y`.
pub fn softmax_lastdim_backward(y: &Tensor, grad_y: &Tensor) -> Result<Tensor> {
    if y.shape() != grad_y.shape() {
        return Err(Error::shape("softmax_lastdim_backward", "upstream shape"));
    }
    let n = y.last_dim();
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), o) in y
        .data()
        .chunks_exact(n)
        .zip(grad_y.data().chunks_exact(n))
        .zip(out.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..n {
            o[i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor::from_op("softmax_lastdim_backward", y.shape().to_vec(), out)
}
