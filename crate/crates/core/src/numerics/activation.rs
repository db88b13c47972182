use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// tanh approximation
    Gelu,
    Silu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Activation::Silu => x * sigmoid(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    Tensor::from_op(
        "activation",
        x.shape().to_vec(),
        x.data().iter().map(|&v| kind.apply(v)).collect(),
    )
}

pub fn activation_backward(x: &Tensor, kind: Activation, grad_y: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_y.shape() {
        return Err(Error::shape("activation_backward", "upstream shape"));
    }
    Tensor::from_op(
        "activation_backward",
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(grad_y.data())
            .map(|(&v, &g)| g * kind.derivative(v))
            .collect(),
    )
}
