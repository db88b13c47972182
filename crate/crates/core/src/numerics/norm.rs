use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Normalizes each last-axis row to zero mean and unit (population) variance,
/// then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = check(x, gain, bias)?;
    let (g, b) = (gain.data(), bias.data());
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let (mean, inv_std) = moments(xr);
        for i in 0..c {
            yr[i] = (xr[i] - mean) * inv_std * g[i] + b[i];
        }
    }
    Tensor::from_op("layer_norm", x.shape().to_vec(), out)
}

pub struct LayerNormGrads {
    pub x: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

pub fn layer_norm_backward(x: &Tensor, gain: &Tensor, grad_y: &Tensor) -> Result<LayerNormGrads> {
    let c = x.last_dim();
    if gain.shape() != [c] || grad_y.shape() != x.shape() {
        return Err(Error::shape("layer_norm_backward", "gain or upstream shape"));
    }
    let g = gain.data();
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for ((xr, dy), dx) in x
        .data()
        .chunks_exact(c)
        .zip(grad_y.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        let (mean, inv_std) = moments(xr);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..c {
            xhat[i] = (xr[i] - mean) * inv_std;
            dxhat[i] = dy[i] * g[i];
            gg[i] += dy[i] * xhat[i];
            gb[i] += dy[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xhat[i];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        for i in 0..c {
            dx[i] = inv_std * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    Ok(LayerNormGrads {
        x: Tensor::from_op("layer_norm_backward", x.shape().to_vec(), gx)?,
        gain: Tensor::from_op("layer_norm_backward", vec![c], gg)?,
        bias: Tensor::from_op("layer_norm_backward", vec![c], gb)?,
    })
}

fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn check(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<usize> {
    let c = x.last_dim();
    if c == 0 || x.rank() == 0 {
        return Err(Error::shape("layer_norm", "empty last axis"));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("gain {:?} / bias {:?} vs channels {}", gain.shape(), bias.shape(), c),
        ));
    }
    Ok(c)
}
