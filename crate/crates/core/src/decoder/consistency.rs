//! Forward-backward consistency of the relative positions of two views.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::numerics::sample::{sample_hwc, sample_hwc_backward, Tap};
use crate::params::Ctx;
use crate::tensor::Tensor;

fn dims(r: &Tensor) -> Result<(usize, usize)> {
    if r.rank() != 4 || r.dim(0) != 2 || r.dim(3) != 2 {
        return Err(Error::shape("consistency", format!("expected [2,h,w,2], got {:?}", r.shape())));
    }
    Ok((r.dim(1), r.dim(2)))
}

/// Per-view signed residual `R_v(p) + R_{1-v}(p + R_v(p))`, with the other
/// view sampled bilinearly (replicate border).
pub fn consistency_forward(r: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(r)?;
    let n = h * w;
    let mut out = vec![0.0; 2 * n * 2];
    let mut s = [0.0; 2];
    for v in 0..2 {
        let other = &r.data()[(1 - v) * n * 2..(2 - v) * n * 2];
        for p in 0..n {
            let gp = v * n + p;
            let (rx, ry) = (r.data()[gp * 2], r.data()[gp * 2 + 1]);
            sample_hwc(other, h, w, 2, (p % w) as f64 + rx, (p / w) as f64 + ry, &mut s);
            out[gp * 2] = rx + s[0];
            out[gp * 2 + 1] = ry + s[1];
        }
    }
    Tensor::from_op("consistency", vec![2, h, w, 2], out)
}

pub fn consistency_backward(r: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(r)?;
    grad.check_shape("consistency_backward", r.shape())?;
    let n = h * w;
    let mut dr = vec![0.0; r.len()];
    for v in 0..2 {
        let (lo, hi) = ((1 - v) * n * 2, (2 - v) * n * 2);
        let mut d_other = vec![0.0; n * 2];
        for p in 0..n {
            let gp = v * n + p;
            let (rx, ry) = (r.data()[gp * 2], r.data()[gp * 2 + 1]);
            let g = &grad.data()[gp * 2..gp * 2 + 2];
            let tap = Tap::new((p % w) as f64 + rx, (p / w) as f64 + ry, h, w);
            let (gx, gy) = sample_hwc_backward(&r.data()[lo..hi], w, 2, &tap, g, &mut d_other);
            dr[gp * 2] += g[0] + gx;
            dr[gp * 2 + 1] += g[1] + gy;
        }
        for (d, o) in dr[lo..hi].iter_mut().zip(&d_other) {
            *d += o;
        }
    }
    Tensor::from_op("consistency_backward", r.shape().to_vec(), dr)
}

pub fn consistency_node(ctx: &mut Ctx, r: Var) -> Result<Var> {
    let value = consistency_forward(ctx.g.value(r))?;
    Ok(ctx.g.push(
        "consistency",
        &[r],
        value,
        Box::new(|c| Ok(vec![Some(consistency_backward(c.inputs[0], c.grad)?)])),
    ))
}

/// `[2, h, w, 1]` mask: 1 where the L1 norm of the residual is at most `a`.
pub fn noc_mask(resid: &Tensor, a: f64) -> Result<Tensor> {
    let mut shape = resid.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    let data = resid
        .data()
        .chunks(2)
        .map(|r| if r[0].abs() + r[1].abs() <= a { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_op("noc_mask", shape, data)
}

/// Consistency check of two `[h, w, 2]` fields. Returns the masks of both
/// views and their L1 residual maps (`[h, w]`).
pub fn consistency_check(r0: &Tensor, r1: &Tensor, a: f64) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    if r0.shape() != r1.shape() || r0.rank() != 3 || r0.dim(2) != 2 {
        return Err(Error::shape("consistency_check", format!("{:?} vs {:?}", r0.shape(), r1.shape())));
    }
    let (h, w) = (r0.dim(0), r0.dim(1));
    let mut both = r0.data().to_vec();
    both.extend_from_slice(r1.data());
    let resid = consistency_forward(&Tensor::from_op("consistency_check", vec![2, h, w, 2], both)?)?;
    let l1: Vec<f64> = resid.data().chunks(2).map(|r| r[0].abs() + r[1].abs()).collect();
    let mask = |v: usize| -> Result<Tensor> {
        let d = l1[v * h * w..(v + 1) * h * w].iter().map(|&e| if e <= a { 1.0 } else { 0.0 }).collect();
        Tensor::from_op("consistency_check", vec![h, w], d)
    };
    let res = |v: usize| Tensor::from_op("consistency_check", vec![h, w], l1[v * h * w..(v + 1) * h * w].to_vec());
    Ok((mask(0)?, mask(1)?, res(0)?, res(1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{finite_diff_grad, max_rel_error_scaled};
    use crate::random::random_tensor;
    use crate::tensor::{with_precision, Precision};

    fn field(h: usize, w: usize, v: (f64, f64)) -> Tensor {
        Tensor::from_fn([h, w, 2], |i| if i % 2 == 0 { v.0 } else { v.1 }).unwrap()
    }

    #[test]
    fn consistent_stereo_pair() {
        let (m0, m1, e0, e1) = consistency_check(&field(4, 9, (-3.0, 0.0)), &field(4, 9, (3.0, 0.0)), 1.0).unwrap();
        assert!(e0.data().iter().chain(e1.data()).all(|&e| e == 0.0));
        assert!(m0.data().iter().chain(m1.data()).all(|&m| m == 1.0));
    }

    #[test]
    fn inconsistent_pair() {
        let (m0, _, e0, _) = consistency_check(&field(4, 9, (-3.0, 0.0)), &field(4, 9, (0.0, 0.0)), 1.0).unwrap();
        assert!(e0.data().iter().all(|&e| e == 3.0));
        assert!(m0.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        with_precision(Precision::F64, || {
            let r = random_tensor(&[2, 4, 5, 2], 1).map(|v| v * 1.7).unwrap();
            let g = random_tensor(&[2, 4, 5, 2], 2);
            let d = consistency_backward(&r, &g).unwrap();
            let fd = finite_diff_grad(
                |t| Ok(consistency_forward(t)?.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()),
                &r,
                1e-6,
            )
            .unwrap();
            assert!(max_rel_error_scaled(&d, &fd) < 1e-6);
        });
    }
}
