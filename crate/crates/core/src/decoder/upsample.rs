//! Convex upsampling of relative positions and UpConv for features.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::numerics::softmax::softmax_row;
use crate::numerics::Activation;
use crate::params::{Ctx, Init};
use crate::tensor::Tensor;

use super::encoder::dense;

/// Neighbor `t` of the 3x3 tap set, as `(dy, dx)`.
#[inline]
fn tap(t: usize) -> (i64, i64) {
    (t as i64 / 3 - 1, t as i64 % 3 - 1)
}

fn check(r: &Tensor, logits: &Tensor, f: usize) -> Result<(usize, usize, usize, usize)> {
    if r.rank() != 4 || logits.rank() != 4 || r.shape()[..3] != logits.shape()[..3] {
        return Err(Error::shape("convex_upsample", format!("{:?} vs {:?}", r.shape(), logits.shape())));
    }
    if logits.dim(3) != 9 * f * f {
        return Err(Error::shape("convex_upsample", format!("need {} logits, got {}", 9 * f * f, logits.dim(3))));
    }
    Ok((r.dim(0), r.dim(1), r.dim(2), r.dim(3)))
}

/// Index of coarse neighbor `t` of `(y, x)` with replicate padding.
#[inline]
fn neighbor(y: usize, x: usize, t: usize, h: usize, w: usize) -> usize {
    let (dy, dx) = tap(t);
    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
    yy * w + xx
}

/// Each fine pixel `(y*f + i, x*f + j)` is `f` times a softmax-weighted
/// combination of the 3x3 coarse neighborhood of `(y, x)`. Logit channel
/// `t*f*f + i*f + j` weights neighbor `t`.
pub fn convex_upsample_forward(r: &Tensor, logits: &Tensor, f: usize) -> Result<Tensor> {
    let (b, h, w, c) = check(r, logits, f)?;
    let (oh, ow) = (h * f, w * f);
    let lc = 9 * f * f;
    let mut out = vec![0.0; b * oh * ow * c];
    let (mut lg, mut wt) = ([0.0; 9], [0.0; 9]);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let p = (bi * h + y) * w + x;
                let l = &logits.data()[p * lc..(p + 1) * lc];
                for i in 0..f {
                    for j in 0..f {
                        for t in 0..9 {
                            lg[t] = l[t * f * f + i * f + j];
                        }
                        softmax_row(&lg, &mut wt);
                        let o = ((bi * oh + y * f + i) * ow + x * f + j) * c;
                        for t in 0..9 {
                            let n = bi * h * w + neighbor(y, x, t, h, w);
                            for ch in 0..c {
                                out[o + ch] += f as f64 * wt[t] * r.data()[n * c + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op("convex_upsample", vec![b, oh, ow, c], out)
}

pub fn convex_upsample_backward(r: &Tensor, logits: &Tensor, f: usize, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, h, w, c) = check(r, logits, f)?;
    let (oh, ow) = (h * f, w * f);
    grad.check_shape("convex_upsample_backward", &[b, oh, ow, c])?;
    let lc = 9 * f * f;
    let mut dr = vec![0.0; r.len()];
    let mut dl = vec![0.0; logits.len()];
    let (mut lg, mut wt, mut dw) = ([0.0; 9], [0.0; 9], [0.0; 9]);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let p = (bi * h + y) * w + x;
                for i in 0..f {
                    for j in 0..f {
                        for t in 0..9 {
                            lg[t] = logits.data()[p * lc + t * f * f + i * f + j];
                        }
                        softmax_row(&lg, &mut wt);
                        let o = ((bi * oh + y * f + i) * ow + x * f + j) * c;
                        let g = &grad.data()[o..o + c];
                        for t in 0..9 {
                            let n = bi * h * w + neighbor(y, x, t, h, w);
                            let rv = &r.data()[n * c..(n + 1) * c];
                            dw[t] = f as f64 * g.iter().zip(rv).map(|(a, b)| a * b).sum::<f64>();
                            for ch in 0..c {
                                dr[n * c + ch] += f as f64 * wt[t] * g[ch];
                            }
                        }
                        let dot: f64 = (0..9).map(|t| wt[t] * dw[t]).sum();
                        for t in 0..9 {
                            dl[p * lc + t * f * f + i * f + j] = wt[t] * (dw[t] - dot);
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_op("convex_upsample_backward", r.shape().to_vec(), dr)?,
        Tensor::from_op("convex_upsample_backward", logits.shape().to_vec(), dl)?,
    ))
}

pub fn convex_upsample_node(ctx: &mut Ctx, r: Var, logits: Var, f: usize) -> Result<Var> {
    let value = convex_upsample_forward(ctx.g.value(r), ctx.g.value(logits), f)?;
    Ok(ctx.g.push(
        "convex_upsample",
        &[r, logits],
        value,
        Box::new(move |c| {
            let (dr, dl) = convex_upsample_backward(c.inputs[0], c.inputs[1], f, c.grad)?;
            Ok(vec![Some(dr), Some(dl)])
        }),
    ))
}

/// Mask head `Linear -> GELU -> Linear` predicting `9*f*f` logits from
/// features of width `c`.
pub fn init_mask_head(init: &mut Init, prefix: &str, c: usize, f: usize) {
    let hid = 2 * c;
    init.linear(&format!("{prefix}.m1"), c, hid);
    init.zeros(&format!("{prefix}.m1_b"), &[hid]);
    init.linear(&format!("{prefix}.m2"), hid, 9 * f * f);
    init.zeros(&format!("{prefix}.m2_b"), &[9 * f * f]);
}

pub fn mask_head(ctx: &mut Ctx, prefix: &str, feat: Var) -> Result<Var> {
    let h = dense(ctx, &format!("{prefix}.m1"), feat, true)?;
    let h = ctx.g.activation(h, Activation::Gelu)?;
    dense(ctx, &format!("{prefix}.m2"), h, true)
}

/// UpConv: nearest x2 upsampling, concatenation with the skip features, and
/// a 1x1 projection to the skip width.
pub fn init_upconv(init: &mut Init, prefix: &str, c_coarse: usize, c_fine: usize) {
    init.linear(&format!("{prefix}.up"), c_coarse + c_fine, c_fine);
    init.zeros(&format!("{prefix}.up_b"), &[c_fine]);
}

pub fn upconv(ctx: &mut Ctx, prefix: &str, coarse: Var, skip: Var) -> Result<Var> {
    let up = ctx.g.upsample_nearest(coarse, 2)?;
    let cat = ctx.g.concat_last(&[up, skip])?;
    dense(ctx, &format!("{prefix}.up"), cat, true)
}
