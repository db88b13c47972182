//! 2-D cross-correlation over `[c, h, w]` tensors with zero padding.
//!
//! Summation order for every output element is fixed: bias first, then input
//! channels of the group ascending, kernel rows ascending, kernel columns
//! ascending. Out-of-image taps are skipped.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams::new(1, 0, 1)
    }
}

struct Geometry {
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn geometry(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Geometry> {
    if x.rank() != 3 || k.rank() != 4 {
        return Err(Error::shape("conv2d", format!("x {:?}, kernel {:?}", x.shape(), k.shape())));
    }
    if p.stride == 0 || p.groups == 0 {
        return Err(Error::invalid("conv2d", "stride and groups must be positive"));
    }
    let (cin, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, cin_g, kh, kw) = (k.dim(0), k.dim(1), k.dim(2), k.dim(3));
    if cin % p.groups != 0 || cout % p.groups != 0 || cin / p.groups != cin_g {
        return Err(Error::shape(
            "conv2d",
            format!("channels {cin}->{cout} incompatible with groups {} and kernel {:?}", p.groups, k.shape()),
        ));
    }
    if h + 2 * p.padding < kh || w + 2 * p.padding < kw {
        return Err(Error::shape("conv2d", "kernel larger than padded input"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
        }
    }
    Ok(Geometry {
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / p.groups,
        kh,
        kw,
        oh: (h + 2 * p.padding - kh) / p.stride + 1,
        ow: (w + 2 * p.padding - kw) / p.stride + 1,
    })
}

/// Output-position range `[lo, hi)` whose tap `k` lands inside `0..n`.
#[inline]
fn valid_range(k: usize, n: usize, out: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o * stride + k - pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n + pad > k {
        ((n + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
    let g = geometry(x, k, bias, p)?;
    let xd = x.data();
    let kd = k.data();
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.cout * plane];
    for co in 0..g.cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            o.fill(b.data()[co]);
        }
        let group = co / g.cout_g;
        for cl in 0..g.cin_g {
            let ci = group * g.cin_g + cl;
            let xin = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.h, g.oh, p.stride, p.padding);
                for kx in 0..g.kw {
                    let kv = kd[((co * g.cin_g + cl) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = valid_range(kx, g.w, g.ow, p.stride, p.padding);
                    for oy in oy0..oy1 {
                        let iy = oy * p.stride + ky - p.padding;
                        let xrow = &xin[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        for ox in ox0..ox1 {
                            orow[ox] += kv * xrow[ox * p.stride + kx - p.padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op("conv2d", vec![g.cout, g.oh, g.ow], out)
}

pub struct ConvGrads {
    pub x: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(x: &Tensor, k: &Tensor, p: ConvParams, grad_y: &Tensor) -> Result<ConvGrads> {
    let g = geometry(x, k, None, p)?;
    grad_y.check_shape("conv2d_backward", &[g.cout, g.oh, g.ow])?;
    let xd = x.data();
    let kd = k.data();
    let gd = grad_y.data();
    let plane = g.oh * g.ow;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; g.cout];
    for co in 0..g.cout {
        let go = &gd[co * plane..(co + 1) * plane];
        gb[co] = go.iter().sum();
        let group = co / g.cout_g;
        for cl in 0..g.cin_g {
            let ci = group * g.cin_g + cl;
            let base = ci * g.h * g.w;
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.h, g.oh, p.stride, p.padding);
                for kx in 0..g.kw {
                    let kidx = ((co * g.cin_g + cl) * g.kh + ky) * g.kw + kx;
                    let kv = kd[kidx];
                    let (ox0, ox1) = valid_range(kx, g.w, g.ow, p.stride, p.padding);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * p.stride + ky - p.padding;
                        for ox in ox0..ox1 {
                            let ix = ox * p.stride + kx - p.padding;
                            let gv = go[oy * g.ow + ox];
                            acc += gv * xd[base + iy * g.w + ix];
                            gx[base + iy * g.w + ix] += gv * kv;
                        }
                    }
                    gk[kidx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        x: Tensor::from_op("conv2d_backward", x.shape().to_vec(), gx)?,
        kernel: Tensor::from_op("conv2d_backward", k.shape().to_vec(), gk)?,
        bias: Tensor::from_op("conv2d_backward", vec![g.cout], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{finite_diff_grad, max_rel_error};
    use crate::random::random_tensor;
    use crate::tensor::{with_precision, Precision};

    /// Direct nested-loop oracle with the documented summation order.
    fn naive(x: &Tensor, k: &Tensor, b: Option<&Tensor>, p: ConvParams) -> Vec<f64> {
        let (cin, h, w) = (x.dim(0), x.dim(1), x.dim(2));
        let (cout, cin_g, kh, kw) = (k.dim(0), k.dim(1), k.dim(2), k.dim(3));
        let cout_g = cout / p.groups;
        let oh = (h + 2 * p.padding - kh) / p.stride + 1;
        let ow = (w + 2 * p.padding - kw) / p.stride + 1;
        assert_eq!(cin / p.groups, cin_g);
        let mut out = Vec::new();
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for cl in 0..cin_g {
                        let ci = (co / cout_g) * cin_g + cl;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += k.data()[((co * cin_g + cl) * kh + ky) * kw + kx]
                                    * x.data()[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = random_tensor(&[1, 4, 5], 1);
        let k = Tensor::ones([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, None, ConvParams::default()).unwrap(), x);
    }

    #[test]
    fn box_filter_preserves_constant_interior() {
        with_precision(Precision::F64, || {
            let x = Tensor::full([1, 5, 5], 2.5);
            let k = Tensor::full([1, 1, 3, 3], 1.0 / 9.0);
            let y = conv2d(&x, &k, None, ConvParams::new(1, 1, 1)).unwrap();
            for yy in 1..4 {
                for xx in 1..4 {
                    assert!((y.data()[yy * 5 + xx] - 2.5).abs() < 1e-12);
                }
            }
        });
    }

    #[test]
    fn matches_nested_loop_oracle_bitwise() {
        with_precision(Precision::F64, || {
            for (cin, cout, groups, stride, pad, ks) in [
                (2, 3, 1, 1, 1, 3),
                (4, 4, 4, 1, 1, 3),
                (3, 2, 1, 2, 1, 3),
                (3, 4, 1, 4, 3, 7),
                (2, 2, 2, 2, 0, 2),
            ] {
                let x = random_tensor(&[cin, 5, 7], 7);
                let k = random_tensor(&[cout, cin / groups, ks, ks], 8);
                let b = random_tensor(&[cout], 9);
                let p = ConvParams::new(stride, pad, groups);
                let y = conv2d(&x, &k, Some(&b), p).unwrap();
                assert_eq!(y.data(), &naive(&x, &k, Some(&b), p)[..]);
            }
        });
    }

    #[test]
    fn backward_matches_finite_differences() {
        with_precision(Precision::F64, || {
            for p in [ConvParams::new(1, 1, 1), ConvParams::new(2, 1, 1), ConvParams::new(1, 1, 3)] {
                let x = random_tensor(&[3, 5, 6], 31);
                let k = random_tensor(&[3, 3 / p.groups, 3, 3], 32);
                let b = random_tensor(&[3], 33);
                let y = conv2d(&x, &k, Some(&b), p).unwrap();
                let w = random_tensor(y.shape(), 34);
                let loss = |y: &Tensor| y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
                let g = conv2d_backward(&x, &k, p, &w).unwrap();
                let fx = finite_diff_grad(|x| Ok(loss(&conv2d(x, &k, Some(&b), p)?)), &x, 1e-5).unwrap();
                let fk = finite_diff_grad(|k| Ok(loss(&conv2d(&x, k, Some(&b), p)?)), &k, 1e-5).unwrap();
                let fb = finite_diff_grad(|b| Ok(loss(&conv2d(&x, &k, Some(b), p)?)), &b, 1e-5).unwrap();
                assert!(max_rel_error(&g.x, &fx) < 1e-6);
                assert!(max_rel_error(&g.kernel, &fk) < 1e-6);
                assert!(max_rel_error(&g.bias, &fb) < 1e-6);
            }
        });
    }

    #[test]
    fn rejects_bad_groups() {
        let x = Tensor::zeros([3, 4, 4]);
        let k = Tensor::zeros([2, 3, 3, 3]);
        assert!(conv2d(&x, &k, None, ConvParams::new(1, 1, 2)).is_err());
    }
}
