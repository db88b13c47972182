//! Supervision of the decoder outputs against reference-view ground truth.
//!
//! Every term is measured in full-resolution pixels: a prediction at a scale
//! with factor `f` is multiplied by `f` and compared with the ground truth
//! averaged over `f x f` blocks of valid pixels.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::Ctx;
use crate::tensor::Tensor;

/// Reference-view ground truth: `r` is `[H, W, 2]`, `valid` is `[H, W]`
/// with entries in {0, 1}.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub r: Tensor,
    pub valid: Tensor,
}

impl GroundTruth {
    pub fn dense(r: Tensor) -> Result<GroundTruth> {
        if r.rank() != 3 || r.dim(2) != 2 {
            return Err(Error::shape("ground_truth", format!("expected [h,w,2], got {:?}", r.shape())));
        }
        let valid = Tensor::ones([r.dim(0), r.dim(1)]);
        Ok(GroundTruth { r, valid })
    }

    pub fn new(r: Tensor, valid: Tensor) -> Result<GroundTruth> {
        let g = GroundTruth::dense(r)?;
        valid.check_shape("ground_truth", &[g.r.dim(0), g.r.dim(1)])?;
        Ok(GroundTruth { valid, ..g })
    }

    pub fn height(&self) -> usize {
        self.r.dim(0)
    }

    pub fn width(&self) -> usize {
        self.r.dim(1)
    }

    /// Block average over valid pixels, still in full-resolution units.
    /// A block is valid when any of its pixels is.
    pub fn downsample(&self, f: usize) -> Result<GroundTruth> {
        let (hh, ww) = (self.height(), self.width());
        if f == 0 || hh % f != 0 || ww % f != 0 {
            return Err(Error::shape("ground_truth", format!("{hh}x{ww} not divisible by {f}")));
        }
        let (h, w) = (hh / f, ww / f);
        let mut r = vec![0.0; h * w * 2];
        let mut valid = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for yy in y * f..(y + 1) * f {
                    for xx in x * f..(x + 1) * f {
                        let i = yy * ww + xx;
                        if self.valid.data()[i] > 0.0 {
                            sx += self.r.data()[i * 2];
                            sy += self.r.data()[i * 2 + 1];
                            n += 1.0;
                        }
                    }
                }
                if n > 0.0 {
                    let o = y * w + x;
                    r[o * 2] = sx / n;
                    r[o * 2 + 1] = sy / n;
                    valid[o] = 1.0;
                }
            }
        }
        Ok(GroundTruth {
            r: Tensor::new(vec![h, w, 2], r)?,
            valid: Tensor::new(vec![h, w], valid)?,
        })
    }
}

/// `sum_p weight_p * |unit * pred_0(p) - target(p)|_1 / norm` over the
/// reference view of a `[2, h, w, 2]` prediction. A zero `norm` gives 0.
pub fn weighted_l1_node(
    ctx: &mut Ctx,
    pred: Var,
    target: Option<&Tensor>,
    weight: &[f64],
    unit: f64,
    norm: f64,
) -> Result<Var> {
    let shape = ctx.g.shape(pred).to_vec();
    if shape.len() != 4 || shape[0] != 2 || shape[3] != 2 || weight.len() != shape[1] * shape[2] {
        return Err(Error::shape("weighted_l1", format!("pred {shape:?}, {} weights", weight.len())));
    }
    let n = weight.len();
    if let Some(t) = target {
        t.check_shape("weighted_l1", &[shape[1], shape[2], 2])?;
    }
    let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    let p = ctx.g.value(pred).data();
    let mut total = 0.0;
    let mut coef = vec![0.0; 2 * n * 2];
    for i in 0..n * 2 {
        let wt = weight[i / 2];
        if wt == 0.0 {
            continue;
        }
        let e = unit * p[i] - target.map_or(0.0, |t| t.data()[i]);
        total += wt * e.abs();
        coef[i] = wt * inv * unit * if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
    }
    let coef = Tensor::new(shape, coef)?;
    let value = Tensor::from_op("weighted_l1", vec![], vec![total * inv])?;
    Ok(ctx.g.push(
        "weighted_l1",
        &[pred],
        value,
        Box::new(move |c| {
            let g = c.grad.item();
            Ok(vec![Some(coef.map(|v| v * g)?)])
        }),
    ))
}

/// Two-bin encoding of a disparity over `w` bins, or `None` when a bin with
/// positive weight is outside `[0, limit)`.
pub fn two_bin(d: f64, limit: usize) -> Option<[(usize, f64); 2]> {
    if !(d >= 0.0) {
        return None;
    }
    let lo = d.floor() as usize;
    let frac = d - lo as f64;
    let in_range = |i: usize, wt: f64| wt == 0.0 || i < limit;
    if !in_range(lo, 1.0 - frac) || !in_range(lo + 1, frac) {
        return None;
    }
    Some([(lo, 1.0 - frac), (lo + 1, frac)])
}

/// Cross entropy between the reference-view disparity log probabilities
/// (channels `2..` of the stereo initializer output) and the two-bin
/// encoding of `gt` at the same scale. Pixels whose target falls on a shift
/// that leaves the image are skipped.
pub fn stereo_ce_node(ctx: &mut Ctx, init_out: Var, gt: &GroundTruth, f: usize) -> Result<Var> {
    let shape = ctx.g.shape(init_out).to_vec();
    let (h, w) = (shape[1], shape[2]);
    if shape.len() != 4 || shape[3] != 2 + w || gt.height() != h || gt.width() != w {
        return Err(Error::shape("stereo_ce", format!("{shape:?} vs gt {:?}", gt.r.shape())));
    }
    let oc = 2 + w;
    let logp = ctx.g.value(init_out).data();
    let mut picks = Vec::new();
    for p in 0..h * w {
        if gt.valid.data()[p] == 0.0 {
            continue;
        }
        let d = -gt.r.data()[p * 2] / f as f64;
        if let Some(bins) = two_bin(d, p % w + 1) {
            picks.push((p, bins));
        }
    }
    let n = picks.len();
    let mut total = 0.0;
    let mut coef = vec![0.0; 2 * h * w * oc];
    for (p, bins) in &picks {
        for &(i, t) in bins {
            if t > 0.0 {
                total -= t * logp[p * oc + 2 + i];
                coef[p * oc + 2 + i] = -t / n as f64;
            }
        }
    }
    let value = Tensor::from_op("stereo_ce", vec![], vec![if n > 0 { total / n as f64 } else { 0.0 }])?;
    let coef = Tensor::new(shape, coef)?;
    Ok(ctx.g.push(
        "stereo_ce",
        &[init_out],
        value,
        Box::new(move |c| {
            let g = c.grad.item();
            Ok(vec![Some(coef.map(|v| v * g)?)])
        }),
    ))
}

/// Loss values of one evaluation, in the order the layers run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub init: f64,
    pub self_terms: Vec<f64>,
    pub cross_terms: Vec<f64>,
    /// Consistency part of each cross term, before the `epsilon` factor.
    pub consistency: Vec<f64>,
    pub self_weights: Vec<f64>,
    pub cross_weights: Vec<f64>,
}

impl LossReport {
    pub fn l_self(&self) -> f64 {
        self.self_terms.iter().zip(&self.self_weights).map(|(a, b)| a * b).sum()
    }

    pub fn l_cross(&self) -> f64 {
        self.cross_terms.iter().zip(&self.cross_weights).map(|(a, b)| a * b).sum()
    }
}

/// Discount weights `gamma^(n - l)` for `l = 1..=n`.
pub fn discounts(gamma: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|l| gamma.powi((n - l) as i32)).collect()
}
