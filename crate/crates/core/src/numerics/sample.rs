//! Bilinear sampling with replicate-border clamping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Corner indices and weights of a clamped bilinear tap.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// Whether the coordinate was inside the image along each axis; the
    /// coordinate gradient is zero along a clamped axis.
    pub inside_x: bool,
    pub inside_y: bool,
}

impl Tap {
    pub fn new(x: f64, y: f64, h: usize, w: usize) -> Tap {
        let (x0, x1, fx, inside_x) = axis(x, w);
        let (y0, y1, fy, inside_y) = axis(y, h);
        Tap {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            inside_x,
            inside_y,
        }
    }
}

#[inline]
fn axis(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&v);
    let c = v.clamp(0.0, max);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64, inside)
}

/// Samples an `[h, w, c]` channel-last field at `(x, y)` into `out`.
#[inline]
pub fn sample_hwc(field: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64, out: &mut [f64]) -> Tap {
    let t = Tap::new(x, y, h, w);
    let (a, b, cc, d) = (
        (t.y0 * w + t.x0) * c,
        (t.y0 * w + t.x1) * c,
        (t.y1 * w + t.x0) * c,
        (t.y1 * w + t.x1) * c,
    );
    let (wa, wb, wc, wd) = (
        (1.0 - t.fx) * (1.0 - t.fy),
        t.fx * (1.0 - t.fy),
        (1.0 - t.fx) * t.fy,
        t.fx * t.fy,
    );
    for k in 0..c {
        out[k] = wa * field[a + k] + wb * field[b + k] + wc * field[cc + k] + wd * field[d + k];
    }
    t
}

/// Accumulates gradients of one sample: into `grad_field` and returns the
/// `(d/dx, d/dy)` coordinate gradient.
#[inline]
pub fn sample_hwc_backward(
    field: &[f64],
    w: usize,
    c: usize,
    t: &Tap,
    grad_out: &[f64],
    grad_field: &mut [f64],
) -> (f64, f64) {
    let (a, b, cc, d) = (
        (t.y0 * w + t.x0) * c,
        (t.y0 * w + t.x1) * c,
        (t.y1 * w + t.x0) * c,
        (t.y1 * w + t.x1) * c,
    );
    let (wa, wb, wc, wd) = (
        (1.0 - t.fx) * (1.0 - t.fy),
        t.fx * (1.0 - t.fy),
        (1.0 - t.fx) * t.fy,
        t.fx * t.fy,
    );
    let (mut gx, mut gy) = (0.0, 0.0);
    for k in 0..c {
        let g = grad_out[k];
        grad_field[a + k] += wa * g;
        grad_field[b + k] += wb * g;
        grad_field[cc + k] += wc * g;
        grad_field[d + k] += wd * g;
        let (va, vb, vc, vd) = (field[a + k], field[b + k], field[cc + k], field[d + k]);
        gx += g * ((vb - va) * (1.0 - t.fy) + (vd - vc) * t.fy);
        gy += g * ((vc - va) * (1.0 - t.fx) + (vd - vb) * t.fx);
    }
    (
        if t.inside_x && t.x1 != t.x0 { gx } else { 0.0 },
        if t.inside_y && t.y1 != t.y0 { gy } else { 0.0 },
    )
}

/// Samples a `[c, h, w]` field at `coords[..., 2]` holding `(x, y)` pixel
/// positions. Returns `[..., c]`.
pub fn bilinear_sample(field: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (hwc, h, w, c) = check(field, coords)?;
    let n = coords.len() / 2;
    let mut out = vec![0.0; n * c];
    for (p, o) in coords.data().chunks_exact(2).zip(out.chunks_exact_mut(c)) {
        sample_hwc(hwc.data(), h, w, c, p[0], p[1], o);
    }
    let mut shape = coords.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    Tensor::from_op("bilinear_sample", shape, out)
}

pub struct SampleGrads {
    pub field: Tensor,
    pub coords: Tensor,
}

pub fn bilinear_sample_backward(field: &Tensor, coords: &Tensor, grad_y: &Tensor) -> Result<SampleGrads> {
    let (hwc, h, w, c) = check(field, coords)?;
    let n = coords.len() / 2;
    if grad_y.len() != n * c {
        return Err(Error::shape("bilinear_sample_backward", "upstream shape"));
    }
    let mut gfield = vec![0.0; h * w * c];
    let mut gcoords = vec![0.0; n * 2];
    for (i, p) in coords.data().chunks_exact(2).enumerate() {
        let t = Tap::new(p[0], p[1], h, w);
        let (gx, gy) = sample_hwc_backward(
            hwc.data(),
            w,
            c,
            &t,
            &grad_y.data()[i * c..(i + 1) * c],
            &mut gfield,
        );
        gcoords[2 * i] = gx;
        gcoords[2 * i + 1] = gy;
    }
    let gfield = Tensor::from_op("bilinear_sample_backward", vec![h, w, c], gfield)?.hwc_to_chw()?;
    Ok(SampleGrads {
        field: gfield,
        coords: Tensor::from_op("bilinear_sample_backward", coords.shape().to_vec(), gcoords)?,
    })
}

fn check(field: &Tensor, coords: &Tensor) -> Result<(Tensor, usize, usize, usize)> {
    if field.rank() != 3 || field.dim(1) == 0 || field.dim(2) == 0 {
        return Err(Error::shape("bilinear_sample", format!("field {:?}", field.shape())));
    }
    if coords.last_dim() != 2 || coords.rank() == 0 {
        return Err(Error::shape("bilinear_sample", format!("coords {:?}", coords.shape())));
    }
    let (c, h, w) = (field.dim(0), field.dim(1), field.dim(2));
    Ok((field.chw_to_hwc()?, h, w, c))
}
