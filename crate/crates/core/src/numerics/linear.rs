use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y = x W (+ b)` over the last axis of `x`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (cin, cout) = check(x, w, b)?;
    let rows = x.rows();
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; rows * cout];
    for (r, yrow) in out.chunks_exact_mut(cout).enumerate() {
        if let Some(b) = b {
            yrow.copy_from_slice(b.data());
        }
        let xrow = &xd[r * cin..(r + 1) * cin];
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[i * cout..(i + 1) * cout];
            for (y, &wv) in yrow.iter_mut().zip(wrow) {
                *y += xv * wv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::from_op("linear", shape, out)
}

pub struct LinearGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, grad_y: &Tensor) -> Result<LinearGrads> {
    let (cin, cout) = check(x, w, None)?;
    let rows = x.rows();
    if grad_y.rows() != rows || grad_y.last_dim() != cout {
        return Err(Error::shape("linear_backward", "upstream gradient shape"));
    }
    let xd = x.data();
    let wd = w.data();
    let gd = grad_y.data();
    let mut gx = vec![0.0; rows * cin];
    let mut gw = vec![0.0; cin * cout];
    let mut gb = vec![0.0; cout];
    for r in 0..rows {
        let grow = &gd[r * cout..(r + 1) * cout];
        let xrow = &xd[r * cin..(r + 1) * cin];
        for (o, g) in gb.iter_mut().zip(grow) {
            *o += g;
        }
        for i in 0..cin {
            let wrow = &wd[i * cout..(i + 1) * cout];
            let gwrow = &mut gw[i * cout..(i + 1) * cout];
            let xv = xrow[i];
            let mut acc = 0.0;
            for o in 0..cout {
                acc += grow[o] * wrow[o];
                gwrow[o] += xv * grow[o];
            }
            gx[r * cin + i] = acc;
        }
    }
    Ok(LinearGrads {
        x: Tensor::from_op("linear_backward", x.shape().to_vec(), gx)?,
        w: Tensor::from_op("linear_backward", w.shape().to_vec(), gw)?,
        b: Tensor::from_op("linear_backward", vec![cout], gb)?,
    })
}

fn check(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<(usize, usize)> {
    if w.rank() != 2 || x.rank() == 0 {
        return Err(Error::shape("linear", format!("x {:?}, W {:?}", x.shape(), w.shape())));
    }
    let (cin, cout) = (w.dim(0), w.dim(1));
    if x.last_dim() != cin {
        return Err(Error::shape(
            "linear",
            format!("x inner extent {} vs W rows {}", x.last_dim(), cin),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape("linear", format!("bias {:?} vs {}", b.shape(), cout)));
        }
    }
    Ok((cin, cout))
}
