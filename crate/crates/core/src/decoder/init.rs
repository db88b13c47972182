//! Initial relative positions at 1/32 scale from a full correlation.
//!
//! Both views read one correlation `C = a[0] b[1]^T`: view 0 queries with
//! `a[0]` against the keys `b[1]`, view 1 queries with `b[1]` against
//! `a[0]` (the transpose). Each query smooths its probabilities with a box
//! of size `k`, picks the argmax (first on ties), and takes the expectation
//! of the position inside the `k` window around it.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::numerics::softmax::softmax_row;
use crate::params::Ctx;
use crate::tensor::{Precision, Tensor};

/// Index of the first maximum of `values`.
fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn dims(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if a.rank() != 4 || a.dim(0) != 2 || a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}, expected [2,h,w,c]", a.shape(), b.shape())));
    }
    Ok((a.dim(1), a.dim(2), a.dim(3)))
}

/// Query and key tensors of view `v`.
fn roles<'t>(a: &'t Tensor, b: &'t Tensor, v: usize) -> (&'t Tensor, &'t Tensor) {
    if v == 0 {
        (a, b)
    } else {
        (b, a)
    }
}

/// Shift direction of view `v`: the reference view searches to the left.
#[inline]
fn direction(v: usize) -> i64 {
    if v == 0 {
        -1
    } else {
        1
    }
}

/// One stereo query: probabilities over disparities plus the regression.
struct StereoQuery {
    prob: Vec<f64>,
    valid: usize,
    lo: usize,
    hi: usize,
    mass: f64,
    disp: f64,
}

fn stereo_query(a: &[f64], brow: &[f64], x: usize, v: usize, c: usize, k: usize, sims: &mut [f64]) -> StereoQuery {
    let w = brow.len() / c;
    let dir = direction(v);
    let scale = 1.0 / (c as f64).sqrt();
    let sentinel = Precision::current().neg_sentinel();
    let valid = if v == 0 { x + 1 } else { w - x };
    for (d, s) in sims.iter_mut().enumerate() {
        *s = if d < valid {
            let xt = (x as i64 + dir * d as i64) as usize;
            scale * a.iter().zip(&brow[xt * c..(xt + 1) * c]).map(|(p, q)| p * q).sum::<f64>()
        } else {
            sentinel
        };
    }
    let mut prob = vec![0.0; w];
    softmax_row(sims, &mut prob);
    let half = k / 2;
    let smooth: Vec<f64> = (0..w)
        .map(|d| prob[d.saturating_sub(half)..(d + half + 1).min(w)].iter().sum())
        .collect();
    let center = first_argmax(&smooth[..valid]);
    let (lo, hi) = (center.saturating_sub(half), (center + half + 1).min(valid));
    let mass: f64 = prob[lo..hi].iter().sum();
    let disp = (lo..hi).map(|d| prob[d] * d as f64).sum::<f64>() / mass;
    StereoQuery {
        prob,
        valid,
        lo,
        hi,
        mass,
        disp,
    }
}

/// Stereo forward. Output `[2, h, w, 2 + w]`: the relative position
/// (`-d` for view 0, `+d` for view 1, zero y) followed by the log
/// probabilities of the shifted volume (sentinel where the shift leaves the
/// image).
pub fn stereo_init_forward(a: &Tensor, b: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = dims(a, b, "stereo_init")?;
    let oc = 2 + w;
    let sentinel = Precision::current().neg_sentinel();
    let mut out = vec![0.0; 2 * h * w * oc];
    let mut sims = vec![0.0; w];
    for v in 0..2 {
        let (qs, ks) = roles(a, b, v);
        for y in 0..h {
            let brow = &ks.data()[(((1 - v) * h + y) * w) * c..(((1 - v) * h + y) * w + w) * c];
            for x in 0..w {
                let p = (v * h + y) * w + x;
                let q = stereo_query(&qs.data()[p * c..(p + 1) * c], brow, x, v, c, k, &mut sims);
                let o = &mut out[p * oc..(p + 1) * oc];
                o[0] = direction(v) as f64 * q.disp;
                o[1] = 0.0;
                let m = sims[..q.valid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lz = sims[..q.valid].iter().map(|s| (s - m).exp()).sum::<f64>().ln();
                for d in 0..w {
                    o[2 + d] = if d < q.valid { sims[d] - m - lz } else { sentinel };
                }
            }
        }
    }
    Tensor::from_op("stereo_init", vec![2, h, w, oc], out)
}

pub fn stereo_init_backward(a: &Tensor, b: &Tensor, k: usize, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = dims(a, b, "stereo_init_backward")?;
    let oc = 2 + w;
    grad.check_shape("stereo_init_backward", &[2, h, w, oc])?;
    let scale = 1.0 / (c as f64).sqrt();
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let mut sims = vec![0.0; w];
    let mut ds = vec![0.0; w];
    for v in 0..2 {
        let dir = direction(v);
        let (qs, ks) = roles(a, b, v);
        let (dq, dk) = if v == 0 { (&mut da, &mut db) } else { (&mut db, &mut da) };
        for y in 0..h {
            let row0 = ((1 - v) * h + y) * w;
            let brow = &ks.data()[row0 * c..(row0 + w) * c];
            for x in 0..w {
                let p = (v * h + y) * w + x;
                let g = &grad.data()[p * oc..(p + 1) * oc];
                let q = stereo_query(&qs.data()[p * c..(p + 1) * c], brow, x, v, c, k, &mut sims);
                let gd = dir as f64 * g[0];
                let mut dp = vec![0.0; q.valid];
                for (d, slot) in dp.iter_mut().enumerate().take(q.hi).skip(q.lo) {
                    *slot = gd * (d as f64 - q.disp) / q.mass;
                }
                let dot: f64 = (0..q.valid).map(|d| q.prob[d] * dp[d]).sum();
                let gsum: f64 = g[2..2 + q.valid].iter().sum();
                for d in 0..q.valid {
                    ds[d] = q.prob[d] * (dp[d] - dot) + g[2 + d] - q.prob[d] * gsum;
                }
                let ap = &qs.data()[p * c..(p + 1) * c];
                for d in 0..q.valid {
                    let s = ds[d] * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let xt = (x as i64 + dir * d as i64) as usize;
                    let bt = (row0 + xt) * c;
                    for ch in 0..c {
                        dq[p * c + ch] += s * brow[xt * c + ch];
                        dk[bt + ch] += s * ap[ch];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_op("stereo_init_backward", a.shape().to_vec(), da)?,
        Tensor::from_op("stereo_init_backward", b.shape().to_vec(), db)?,
    ))
}

struct FlowQuery {
    prob: Vec<f64>,
    window: (usize, usize, usize, usize),
    mass: f64,
    mean: (f64, f64),
}

fn flow_query(a: &[f64], keys: &[f64], h: usize, w: usize, c: usize, k: usize, sims: &mut [f64]) -> FlowQuery {
    let scale = 1.0 / (c as f64).sqrt();
    for (j, s) in sims.iter_mut().enumerate() {
        *s = scale * a.iter().zip(&keys[j * c..(j + 1) * c]).map(|(p, q)| p * q).sum::<f64>();
    }
    let mut prob = vec![0.0; h * w];
    softmax_row(sims, &mut prob);
    let half = k / 2;
    let span = |v: usize, n: usize| (v.saturating_sub(half), (v + half + 1).min(n));
    let mut smooth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = span(y, h);
            let (x0, x1) = span(x, w);
            smooth[y * w + x] = (y0..y1).map(|yy| prob[yy * w + x0..yy * w + x1].iter().sum::<f64>()).sum();
        }
    }
    let best = first_argmax(&smooth);
    let (y0, y1) = span(best / w, h);
    let (x0, x1) = span(best % w, w);
    let (mut mass, mut ex, mut ey) = (0.0, 0.0, 0.0);
    for yy in y0..y1 {
        for xx in x0..x1 {
            let pr = prob[yy * w + xx];
            mass += pr;
            ex += pr * xx as f64;
            ey += pr * yy as f64;
        }
    }
    FlowQuery {
        prob,
        window: (x0, x1, y0, y1),
        mass,
        mean: (ex / mass, ey / mass),
    }
}

/// Flow forward. Output `[2, h, w, 2]`: expected target position minus the
/// query position.
pub fn flow_init_forward(a: &Tensor, b: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = dims(a, b, "flow_init")?;
    let n = h * w;
    let mut out = vec![0.0; 2 * n * 2];
    let mut sims = vec![0.0; n];
    for v in 0..2 {
        let (qs, ks) = roles(a, b, v);
        let keys = &ks.data()[(1 - v) * n * c..(2 - v) * n * c];
        for p in 0..n {
            let gp = v * n + p;
            let q = flow_query(&qs.data()[gp * c..(gp + 1) * c], keys, h, w, c, k, &mut sims);
            out[gp * 2] = q.mean.0 - (p % w) as f64;
            out[gp * 2 + 1] = q.mean.1 - (p / w) as f64;
        }
    }
    Tensor::from_op("flow_init", vec![2, h, w, 2], out)
}

pub fn flow_init_backward(a: &Tensor, b: &Tensor, k: usize, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = dims(a, b, "flow_init_backward")?;
    let n = h * w;
    grad.check_shape("flow_init_backward", &[2, h, w, 2])?;
    let scale = 1.0 / (c as f64).sqrt();
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let mut sims = vec![0.0; n];
    let mut dp = vec![0.0; n];
    for v in 0..2 {
        let kb = (1 - v) * n * c;
        let (qs, ks) = roles(a, b, v);
        let (dq, dk) = if v == 0 { (&mut da, &mut db) } else { (&mut db, &mut da) };
        for p in 0..n {
            let gp = v * n + p;
            let (gx, gy) = (grad.data()[gp * 2], grad.data()[gp * 2 + 1]);
            if gx == 0.0 && gy == 0.0 {
                continue;
            }
            let q = flow_query(&qs.data()[gp * c..(gp + 1) * c], &ks.data()[kb..kb + n * c], h, w, c, k, &mut sims);
            dp.fill(0.0);
            let (x0, x1, y0, y1) = q.window;
            for yy in y0..y1 {
                for xx in x0..x1 {
                    dp[yy * w + xx] = (gx * (xx as f64 - q.mean.0) + gy * (yy as f64 - q.mean.1)) / q.mass;
                }
            }
            let dot: f64 = q.prob.iter().zip(&dp).map(|(p, d)| p * d).sum();
            for j in 0..n {
                let s = q.prob[j] * (dp[j] - dot) * scale;
                if s == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    dq[gp * c + ch] += s * ks.data()[kb + j * c + ch];
                    dk[kb + j * c + ch] += s * qs.data()[gp * c + ch];
                }
            }
        }
    }
    Ok((
        Tensor::from_op("flow_init_backward", a.shape().to_vec(), da)?,
        Tensor::from_op("flow_init_backward", b.shape().to_vec(), db)?,
    ))
}

pub fn stereo_init_node(ctx: &mut Ctx, a: Var, b: Var, k: usize) -> Result<Var> {
    let value = stereo_init_forward(ctx.g.value(a), ctx.g.value(b), k)?;
    Ok(ctx.g.push(
        "stereo_init",
        &[a, b],
        value,
        Box::new(move |c| {
            let (da, db) = stereo_init_backward(c.inputs[0], c.inputs[1], k, c.grad)?;
            Ok(vec![Some(da), Some(db)])
        }),
    ))
}

pub fn flow_init_node(ctx: &mut Ctx, a: Var, b: Var, k: usize) -> Result<Var> {
    let value = flow_init_forward(ctx.g.value(a), ctx.g.value(b), k)?;
    Ok(ctx.g.push(
        "flow_init",
        &[a, b],
        value,
        Box::new(move |c| {
            let (da, db) = flow_init_backward(c.inputs[0], c.inputs[1], k, c.grad)?;
            Ok(vec![Some(da), Some(db)])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{finite_diff_grad, max_rel_error_scaled};
    use crate::random::random_tensor;
    use crate::tensor::with_precision;

    /// Two views where view 1 equals view 0 moved by `(dx, dy)` pixels
    /// circularly: `f1(x, y) = f0(x - dx, y - dy)`. Features are random
    /// sign vectors, so every feature has the same norm and the exact match
    /// maximizes the dot product.
    fn shifted_pair(h: usize, w: usize, c: usize, dx: i64, dy: i64, gain: f64) -> (Tensor, Tensor) {
        let f0 = random_tensor(&[h, w, c], 7).map(|v| v.signum() * gain).unwrap();
        let mut data = f0.data().to_vec();
        for y in 0..h {
            for x in 0..w {
                let sx = (x as i64 - dx).rem_euclid(w as i64) as usize;
                let sy = (y as i64 - dy).rem_euclid(h as i64) as usize;
                for ch in 0..c {
                    data.push(f0.data()[(sy * w + sx) * c + ch]);
                }
            }
        }
        let both = Tensor::new([2, h, w, c], data).unwrap();
        (both.clone(), both)
    }

    #[test]
    fn stereo_shift_is_recovered() {
        with_precision(Precision::F64, || {
            // View 1 is view 0 moved left by 3: f1(x) = f0(x + 3).
            let (a, b) = shifted_pair(4, 16, 16, -3, 0, 3.0);
            let out = stereo_init_forward(&a, &b, 5).unwrap();
            let oc = 2 + 16;
            for y in 0..4 {
                for x in 3..16 {
                    let r = out.data()[(y * 16 + x) * oc];
                    assert!((r + 3.0).abs() < 0.1, "view 0 ({x},{y}): {r}");
                    assert_eq!(out.data()[(y * 16 + x) * oc + 1], 0.0);
                }
                for x in 0..13 {
                    let r = out.data()[((4 + y) * 16 + x) * oc];
                    assert!((r - 3.0).abs() < 0.1, "view 1 ({x},{y}): {r}");
                }
            }
            assert_eq!(out.shape(), &[2, 4, 16, 18]);
        });
    }

    #[test]
    fn identical_views_give_zero_disparity() {
        with_precision(Precision::F64, || {
            let (a, b) = shifted_pair(3, 10, 16, 0, 0, 3.0);
            let out = stereo_init_forward(&a, &b, 5).unwrap();
            for r in out.data().chunks(12) {
                assert!(r[0].abs() < 0.1);
            }
        });
    }

    #[test]
    fn target_view_reads_the_transposed_correlation() {
        with_precision(Precision::F64, || {
            let (h, w, c) = (2, 6, 3);
            let a = random_tensor(&[2, h, w, c], 5);
            let b = random_tensor(&[2, h, w, c], 6);
            let out = stereo_init_forward(&a, &b, 3).unwrap();
            let dot = |t: &Tensor, v: usize, y: usize, x: usize, u: &Tensor, vu: usize, xu: usize| -> f64 {
                let (i, j) = (((v * h + y) * w + x) * c, ((vu * h + y) * w + xu) * c);
                (0..c).map(|ch| t.data()[i + ch] * u.data()[j + ch]).sum::<f64>() / (c as f64).sqrt()
            };
            let (y, x) = (1, 2);
            let o = &out.data()[((h + y) * w + x) * (2 + w)..];
            // View 1 at x matches view 0 at x + d: differences of the log
            // probabilities equal differences of C[x + d, x].
            let c0 = dot(&b, 1, y, x, &a, 0, x);
            for d in 1..w - x {
                let cd = dot(&b, 1, y, x, &a, 0, x + d);
                assert!(((o[2 + d] - o[2]) - (cd - c0)).abs() < 1e-12);
            }
            let r = &out.data()[(y * w + x + 1) * (2 + w)..];
            let c1 = dot(&a, 0, y, x + 1, &b, 1, x + 1);
            let cd = dot(&a, 0, y, x + 1, &b, 1, x);
            assert!(((r[3] - r[2]) - (cd - c1)).abs() < 1e-12);
        });
    }

    #[test]
    fn flow_shift_is_recovered() {
        with_precision(Precision::F64, || {
            let (a, b) = shifted_pair(8, 10, 16, 2, 0, 3.0);
            let out = flow_init_forward(&a, &b, 5).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let p = y * 10 + x;
                    assert!((out.data()[p * 2] - 2.0).abs() < 0.1, "({x},{y}) {}", out.data()[p * 2]);
                    assert!(out.data()[p * 2 + 1].abs() < 0.1);
                }
            }
        });
    }

    #[test]
    fn uniform_features_stay_in_window() {
        with_precision(Precision::F64, || {
            let a = Tensor::full([2, 4, 6, 3], 0.5);
            let out = flow_init_forward(&a, &a, 5).unwrap();
            // All probabilities are equal; the first smoothed maximum is the
            // first cell whose clipped 5x5 box is largest, (2, 1).
            for (p, r) in out.data().chunks(2).enumerate().take(24) {
                let (x, y) = ((p % 6) as f64, (p / 6) as f64);
                assert!((r[0] - (2.0 - x)).abs() < 1e-12);
                assert!((r[1] - (1.5 - y)).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn gradients_match_finite_differences() {
        with_precision(Precision::F64, || {
            let a = random_tensor(&[2, 3, 7, 4], 1);
            let b = random_tensor(&[2, 3, 7, 4], 2);
            let gs = random_tensor(&[2, 3, 7, 9], 3);
            let (da, db) = stereo_init_backward(&a, &b, 5, &gs).unwrap();
            let loss = |a: &Tensor, b: &Tensor| -> Result<f64> {
                let o = stereo_init_forward(a, b, 5)?;
                // Log probabilities of invalid shifts are the sentinel; they
                // do not depend on the inputs.
                let floor = Precision::F64.neg_sentinel();
                Ok(o.data().iter().zip(gs.data()).filter(|(v, _)| **v > floor).map(|(v, g)| v * g).sum())
            };
            let mut gs_valid = gs.clone();
            let o = stereo_init_forward(&a, &b, 5).unwrap();
            for (g, v) in gs_valid.data_mut().iter_mut().zip(o.data()) {
                if *v <= Precision::F64.neg_sentinel() {
                    *g = 0.0;
                }
            }
            let (da2, db2) = stereo_init_backward(&a, &b, 5, &gs_valid).unwrap();
            assert_eq!(da, da2);
            assert_eq!(db, db2);
            let fa = finite_diff_grad(|t| loss(t, &b), &a, 1e-5).unwrap();
            let fb = finite_diff_grad(|t| loss(&a, t), &b, 1e-5).unwrap();
            assert!(max_rel_error_scaled(&da, &fa) < 1e-5);
            assert!(max_rel_error_scaled(&db, &fb) < 1e-5, "{}", max_rel_error_scaled(&db, &fb));

            let gf = random_tensor(&[2, 3, 7, 2], 4);
            let (da, db) = flow_init_backward(&a, &b, 3, &gf).unwrap();
            let loss = |a: &Tensor, b: &Tensor| -> Result<f64> {
                let o = flow_init_forward(a, b, 3)?;
                Ok(o.data().iter().zip(gf.data()).map(|(v, g)| v * g).sum())
            };
            let fa = finite_diff_grad(|t| loss(t, &b), &a, 1e-5).unwrap();
            let fb = finite_diff_grad(|t| loss(&a, t), &b, 1e-5).unwrap();
            assert!(max_rel_error_scaled(&da, &fa) < 1e-5);
            assert!(max_rel_error_scaled(&db, &fb) < 1e-5, "{}", max_rel_error_scaled(&db, &fb));
        });
    }
}
