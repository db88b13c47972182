//! BilinearSoftmax: attention weights for a continuous sampling center.
//!
//! The expanded window holds `(w+1)^2` similarities in row-major order. The
//! four corner-anchored `w x w` sub-windows are nw (rows/cols `[0, w)`), ne
//! (cols shifted by one), sw (rows shifted by one) and se (both shifted). Each
//! sub-window gets its own max-subtracted softmax; the results are blended with
//! the bilinear weights of the fractional offset and summed back into the
//! expanded layout.
//!
//! A sub-window whose entries all carry the masking sentinel is inactive; its
//! bilinear weight is redistributed proportionally over the active ones so the
//! output still sums to one.

use crate::error::{Error, Result};
use crate::numerics::softmax::softmax_row;
use crate::tensor::{Precision, Tensor};

/// Sub-window order used throughout: nw, ne, sw, se.
pub const CORNERS: usize = 4;

/// `(row, col)` shift of each sub-window inside the expanded window.
#[inline]
pub const fn corner_shift(t: usize) -> (usize, usize) {
    (t / 2, t % 2)
}

/// Integer base `floor(p)` plus the fractional part of a continuous center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FractionalOffset {
    pub base: (i64, i64),
    pub frac: (f64, f64),
}

impl FractionalOffset {
    pub fn from_center(x: f64, y: f64) -> FractionalOffset {
        let (bx, by) = (x.floor(), y.floor());
        FractionalOffset {
            base: (bx as i64, by as i64),
            frac: (x - bx, y - by),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.base.0 as f64 + self.frac.0, self.base.1 as f64 + self.frac.1)
    }
}

/// `(b_nw, b_ne, b_sw, b_se)` for a fractional offset in `[0,1)^2`.
#[inline]
pub fn bilinear_weights(fx: f64, fy: f64) -> [f64; 4] {
    [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
}

#[inline]
fn bilinear_weight_partials(fx: f64, fy: f64) -> ([f64; 4], [f64; 4]) {
    (
        [-(1.0 - fy), 1.0 - fy, -fy, fy],
        [-(1.0 - fx), -fx, 1.0 - fx, fx],
    )
}

/// Bilinear weights after dropping inactive sub-windows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blend {
    pub weights: [f64; 4],
    pub active: [bool; 4],
    /// Sum of the raw weights of the active sub-windows; zero means the
    /// uniform fallback was used.
    mass: f64,
}

impl Blend {
    pub fn new(fx: f64, fy: f64, active: [bool; 4]) -> Blend {
        let raw = bilinear_weights(fx, fy);
        let mut active = active;
        if !active.iter().any(|&a| a) {
            active = [true; 4];
        }
        let mass: f64 = (0..4).filter(|&t| active[t]).map(|t| raw[t]).sum();
        let mut weights = [0.0; 4];
        if mass > 0.0 {
            for t in 0..4 {
                if active[t] {
                    weights[t] = raw[t] / mass;
                }
            }
        } else {
            let n = active.iter().filter(|&&a| a).count() as f64;
            for t in 0..4 {
                if active[t] {
                    weights[t] = 1.0 / n;
                }
            }
        }
        Blend {
            weights,
            active,
            mass,
        }
    }

    /// Chains `dL/d(blend weight)` through renormalization and the bilinear
    /// weight partials to `(dL/dfx, dL/dfy)`.
    pub fn frac_grad(&self, fx: f64, fy: f64, grad_weights: &[f64; 4]) -> (f64, f64) {
        if self.mass <= 0.0 {
            return (0.0, 0.0);
        }
        let mean: f64 = (0..4).map(|t| self.weights[t] * grad_weights[t]).sum();
        let (px, py) = bilinear_weight_partials(fx, fy);
        let (mut gx, mut gy) = (0.0, 0.0);
        for t in 0..4 {
            if self.active[t] {
                let g_raw = (grad_weights[t] - mean) / self.mass;
                gx += g_raw * px[t];
                gy += g_raw * py[t];
            }
        }
        (gx, gy)
    }
}

/// Per-sub-window softmax statistics: running max and partition sum.
pub type SubStats = [(f64, f64); 4];

/// Fused forward: computes each sub-window's max and partition sum, then
/// writes every expanded-window weight in one pass. No per-sub-window weight
/// arrays are materialized.
pub fn forward_into(sim: &[f64], w: usize, blend: &Blend, out: &mut [f64]) -> SubStats {
    let e = w + 1;
    debug_assert_eq!(sim.len(), e * e);
    let mut stats = [(0.0, 1.0); 4];
    for t in 0..CORNERS {
        if !blend.active[t] {
            continue;
        }
        let (dr, dc) = corner_shift(t);
        let mut m = f64::NEG_INFINITY;
        for r in 0..w {
            let row = &sim[(r + dr) * e + dc..(r + dr) * e + dc + w];
            for &v in row {
                m = m.max(v);
            }
        }
        let mut z = 0.0;
        for r in 0..w {
            let row = &sim[(r + dr) * e + dc..(r + dr) * e + dc + w];
            for &v in row {
                z += (v - m).exp();
            }
        }
        stats[t] = (m, z);
    }
    for r in 0..e {
        for c in 0..e {
            let v = sim[r * e + c];
            let mut acc = 0.0;
            for t in 0..CORNERS {
                if !blend.active[t] {
                    continue;
                }
                let (dr, dc) = corner_shift(t);
                if r >= dr && r - dr < w && c >= dc && c - dc < w {
                    let (m, z) = stats[t];
                    acc += blend.weights[t] / z * (v - m).exp();
                }
            }
            out[r * e + c] = acc;
        }
    }
    stats
}

/// Fused backward. Accumulates `dL/dsim` into `grad_sim` and returns
/// `dL/d(blend weight)` per sub-window.
pub fn backward_into(
    sim: &[f64],
    w: usize,
    blend: &Blend,
    stats: &SubStats,
    upstream: &[f64],
    grad_sim: &mut [f64],
) -> [f64; 4] {
    let e = w + 1;
    let mut g_blend = [0.0; 4];
    for t in 0..CORNERS {
        if !blend.active[t] {
            continue;
        }
        let (dr, dc) = corner_shift(t);
        let (m, z) = stats[t];
        let mut dot = 0.0;
        for r in 0..w {
            for c in 0..w {
                let j = (r + dr) * e + c + dc;
                dot += upstream[j] * (sim[j] - m).exp() / z;
            }
        }
        g_blend[t] = dot;
        let b = blend.weights[t];
        if b == 0.0 {
            continue;
        }
        for r in 0..w {
            for c in 0..w {
                let j = (r + dr) * e + c + dc;
                let a = (sim[j] - m).exp() / z;
                grad_sim[j] += b * a * (upstream[j] - dot);
            }
        }
    }
    g_blend
}

/// Sub-window activity derived from the masking sentinel: a sub-window is
/// inactive when every one of its entries is at or below `f32::MIN`.
pub fn active_from_sentinel(sim: &[f64], w: usize) -> [bool; 4] {
    let e = w + 1;
    let floor = Precision::F32.neg_sentinel();
    let mut active = [false; 4];
    for (t, a) in active.iter_mut().enumerate() {
        let (dr, dc) = corner_shift(t);
        *a = (0..w).any(|r| (0..w).any(|c| sim[(r + dr) * e + c + dc] > floor));
    }
    active
}

#[derive(Clone, Debug)]
pub struct BsmCache {
    blend: Blend,
    stats: SubStats,
}

/// Attention weights over the expanded window of one query.
#[derive(Clone, Debug)]
pub struct WindowAttn {
    pub weights: Vec<f64>,
    pub frac: (f64, f64),
    pub w: usize,
    cache: Option<BsmCache>,
}

impl WindowAttn {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn check(sim: &[f64], w: usize, frac: (f64, f64)) -> Result<()> {
    if w % 2 == 0 {
        return Err(Error::invalid("bilinear_softmax", format!("window size {w} is not odd")));
    }
    if sim.len() != (w + 1) * (w + 1) {
        return Err(Error::shape(
            "bilinear_softmax",
            format!("{} similarities for window {w}", sim.len()),
        ));
    }
    if !(0.0..1.0).contains(&frac.0) || !(0.0..1.0).contains(&frac.1) {
        return Err(Error::invalid("bilinear_softmax", format!("frac {frac:?} outside [0,1)")));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "bilinear_softmax",
            index: sim.iter().position(|v| !v.is_finite()).unwrap_or(0),
        });
    }
    Ok(())
}

pub fn bilinear_softmax_forward(sim: &[f64], frac: (f64, f64), w: usize) -> Result<WindowAttn> {
    check(sim, w, frac)?;
    let blend = Blend::new(frac.0, frac.1, active_from_sentinel(sim, w));
    let mut weights = vec![0.0; sim.len()];
    let stats = forward_into(sim, w, &blend, &mut weights);
    Ok(WindowAttn {
        weights,
        frac,
        w,
        cache: Some(BsmCache { blend, stats }),
    })
}

/// Returns `(dL/dsim, (dL/dfx, dL/dfy))`.
pub fn bilinear_softmax_backward(
    sim: &[f64],
    attn: &WindowAttn,
    upstream: &[f64],
) -> Result<(Tensor, (f64, f64))> {
    let cache = attn.cache.as_ref().ok_or(Error::MissingCache {
        op: "bilinear_softmax",
    })?;
    if upstream.len() != sim.len() || sim.len() != attn.weights.len() {
        return Err(Error::shape("bilinear_softmax_backward", "upstream length"));
    }
    let mut grad_sim = vec![0.0; sim.len()];
    let g_blend = backward_into(sim, attn.w, &cache.blend, &cache.stats, upstream, &mut grad_sim);
    let dfrac = cache.blend.frac_grad(attn.frac.0, attn.frac.1, &g_blend);
    Ok((
        Tensor::from_op("bilinear_softmax_backward", vec![sim.len()], grad_sim)?,
        dfrac,
    ))
}

/// Literal unfused composition: scatter into four `w^2` arrays, four softmax
/// calls, scale by the (renormalized) bilinear weights, gather back.
pub fn bilinear_softmax_reference(sim: &[f64], frac: (f64, f64), w: usize) -> Result<WindowAttn> {
    check(sim, w, frac)?;
    let e = w + 1;
    let floor = Precision::F32.neg_sentinel();
    let mut subs: Vec<Vec<f64>> = Vec::with_capacity(4);
    for t in 0..4 {
        let (dr, dc) = corner_shift(t);
        let mut s = Vec::with_capacity(w * w);
        for r in 0..w {
            for c in 0..w {
                s.push(sim[(r + dr) * e + c + dc]);
            }
        }
        subs.push(s);
    }
    let mut active: Vec<bool> = subs.iter().map(|s| s.iter().any(|&v| v > floor)).collect();
    if !active.iter().any(|&a| a) {
        active = vec![true; 4];
    }
    let raw = bilinear_weights(frac.0, frac.1);
    let mass: f64 = (0..4).filter(|&t| active[t]).map(|t| raw[t]).sum();
    let n_active = active.iter().filter(|&&a| a).count() as f64;
    let mut weights = vec![0.0; e * e];
    for t in 0..4 {
        if !active[t] {
            continue;
        }
        let b = if mass > 0.0 { raw[t] / mass } else { 1.0 / n_active };
        let soft = crate::numerics::softmax_lastdim(&Tensor::new([w * w], subs[t].clone())?)?;
        let (dr, dc) = corner_shift(t);
        for r in 0..w {
            for c in 0..w {
                weights[(r + dr) * e + c + dc] += b * soft.data()[r * w + c];
            }
        }
    }
    Ok(WindowAttn {
        weights,
        frac,
        w,
        cache: None,
    })
}

/// Plain softmax over the nw sub-window laid out in the expanded window.
pub fn nw_window_softmax(sim: &[f64], w: usize) -> Vec<f64> {
    let e = w + 1;
    let sub: Vec<f64> = (0..w)
        .flat_map(|r| sim[r * e..r * e + w].iter().copied())
        .collect();
    let mut soft = vec![0.0; w * w];
    softmax_row(&sub, &mut soft);
    let mut out = vec![0.0; e * e];
    for r in 0..w {
        out[r * e..r * e + w].copy_from_slice(&soft[r * w..(r + 1) * w]);
    }
    out
}
