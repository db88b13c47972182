//! Recording of a forward pass and its reverse traversal.
//!
//! Every node stores its value and, when it depends on a trainable leaf, a
//! hand-written backward closure. [`Graph::backward`] walks nodes in reverse
//! creation order and sums gradients at fan-in points in that fixed order.

use crate::error::{Error, Result};
use crate::numerics::{self, Activation, ConvParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs to a backward closure.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
}

/// Returns one optional gradient per parent, in parent order.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Result<Vec<Option<Tensor>>> + Send + Sync>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that only evaluates; [`Graph::backward`] fails on it.
    pub fn inference() -> Graph {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf("constant", value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let rg = self.record;
        self.leaf("param", value, rg)
    }

    fn leaf(&mut self, op: &'static str, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a node computed outside the graph. `backward` is only kept when a
    /// parent requires a gradient.
    pub fn push(&mut self, op: &'static str, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.record {
            return Err(Error::MissingCache { op: "graph" });
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", "loss must hold a single value"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &g,
            };
            let parent_grads = bw(&ctx).map_err(|e| match e {
                Error::NonFinite { index, .. } => Error::NonFinite { op: node.op, index },
                other => other,
            })?;
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if pg.shape() != self.nodes[p.0].value.shape() {
                    return Err(Error::shape(
                        node.op,
                        format!("gradient {:?} for parent {:?}", pg.shape(), self.nodes[p.0].value.shape()),
                    ));
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    // ---- elementwise and structural ops -------------------------------------

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = numerics::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        Ok(self.push(
            "linear",
            &parents,
            value,
            Box::new(move |ctx| {
                let g = numerics::linear_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad)?;
                let mut out = vec![Some(g.x), Some(g.w)];
                if has_bias {
                    out.push(Some(g.b));
                }
                Ok(out)
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_op("add", va.shape().to_vec(), data)?;
        Ok(self.push(
            "add",
            &[a, b],
            value,
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_op("mul", va.shape().to_vec(), data)?;
        Ok(self.push(
            "mul",
            &[a, b],
            value,
            Box::new(|ctx| {
                let g = ctx.grad.data();
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = g.iter().zip(b.data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(a.data()).map(|(g, x)| g * x).collect();
                Ok(vec![
                    Some(Tensor::from_op("mul_backward", a.shape().to_vec(), ga)?),
                    Some(Tensor::from_op("mul_backward", b.shape().to_vec(), gb)?),
                ])
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * s)?;
        Ok(self.push(
            "scale",
            &[a],
            value,
            Box::new(move |ctx| Ok(vec![Some(ctx.grad.map(|v| v * s)?)])),
        ))
    }

    /// Multiplies the last axis by a per-channel vector `s` (broadcast over
    /// rows). Both operands are differentiable.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let c = vx.last_dim();
        if vs.shape() != [c] {
            return Err(Error::shape("mul_channels", format!("{:?} vs {c}", vs.shape())));
        }
        let sd = vs.data();
        let data = vx.data().iter().enumerate().map(|(i, v)| v * sd[i % c]).collect();
        let value = Tensor::from_op("mul_channels", vx.shape().to_vec(), data)?;
        Ok(self.push(
            "mul_channels",
            &[x, s],
            value,
            Box::new(move |ctx| {
                let (x, s) = (ctx.inputs[0], ctx.inputs[1]);
                let g = ctx.grad.data();
                let sd = s.data();
                let gx = g.iter().enumerate().map(|(i, g)| g * sd[i % c]).collect();
                let mut gs = vec![0.0; c];
                for (i, (g, v)) in g.iter().zip(x.data()).enumerate() {
                    gs[i % c] += g * v;
                }
                Ok(vec![
                    Some(Tensor::from_op("mul_channels_backward", x.shape().to_vec(), gx)?),
                    Some(Tensor::from_op("mul_channels_backward", vec![c], gs)?),
                ])
            }),
        ))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", format!("{:?} vs {:?}", s, first)));
            }
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_op("concat_last", shape, data)?;
        let lead = lead.to_vec();
        Ok(self.push(
            "concat_last",
            parts,
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut out = Vec::with_capacity(widths.len());
                let mut off = 0;
                for &wd in &widths {
                    let mut d = vec![0.0; rows * wd];
                    for r in 0..rows {
                        d[r * wd..(r + 1) * wd].copy_from_slice(&g[r * total + off..r * total + off + wd]);
                    }
                    let mut shape = lead.clone();
                    shape.push(wd);
                    out.push(Some(Tensor::from_op("concat_last_backward", shape, d)?));
                    off += wd;
                }
                Ok(out)
            }),
        ))
    }

    /// Channels `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        if start + len > c {
            return Err(Error::shape("slice_last", format!("[{start}, {}) of {c}", start + len)));
        }
        let rows = vx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::from_op("slice_last", shape, data)?;
        let in_shape = vx.shape().to_vec();
        Ok(self.push(
            "slice_last",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut d = vec![0.0; rows * c];
                let g = ctx.grad.data();
                for r in 0..rows {
                    d[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                Ok(vec![Some(Tensor::from_op("slice_last_backward", in_shape.clone(), d)?)])
            }),
        ))
    }

    /// Element `index` of the leading axis, keeping the remaining axes.
    pub fn select_batch(&mut self, x: Var, index: usize) -> Result<Var> {
        let vx = self.value(x);
        let b = vx.dim(0);
        if index >= b {
            return Err(Error::shape("select_batch", format!("{index} of {b}")));
        }
        let n = vx.len() / b;
        let value = Tensor::from_op(
            "select_batch",
            vx.shape()[1..].to_vec(),
            vx.data()[index * n..(index + 1) * n].to_vec(),
        )?;
        let in_shape = vx.shape().to_vec();
        Ok(self.push(
            "select_batch",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut d = vec![0.0; n * b];
                d[index * n..(index + 1) * n].copy_from_slice(ctx.grad.data());
                Ok(vec![Some(Tensor::from_op("select_batch_backward", in_shape.clone(), d)?)])
            }),
        ))
    }

    /// Exchanges the two entries of a leading axis of extent 2 (view swap).
    pub fn swap_views(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() == 0 || vx.dim(0) != 2 {
            return Err(Error::shape("swap_views", format!("{:?}", vx.shape())));
        }
        let value = Tensor::from_op("swap_views", vx.shape().to_vec(), swap_halves(vx.data()))?;
        Ok(self.push(
            "swap_views",
            &[x],
            value,
            Box::new(|ctx| {
                Ok(vec![Some(Tensor::from_op(
                    "swap_views_backward",
                    ctx.grad.shape().to_vec(),
                    swap_halves(ctx.grad.data()),
                )?)])
            }),
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let value = numerics::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.push(
            "layer_norm",
            &[x, gain, bias],
            value,
            Box::new(|ctx| {
                let g = numerics::layer_norm_backward(ctx.inputs[0], ctx.inputs[1], ctx.grad)?;
                Ok(vec![Some(g.x), Some(g.gain), Some(g.bias)])
            }),
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = numerics::activation(self.value(x), kind)?;
        Ok(self.push(
            "activation",
            &[x],
            value,
            Box::new(move |ctx| {
                Ok(vec![Some(numerics::activation_backward(ctx.inputs[0], kind, ctx.grad)?)])
            }),
        ))
    }

    /// 2-D convolution over `[b, h, w, c]` tensors. Each batch entry is run
    /// through [`numerics::conv2d`] on its `[c, h, w]` permutation.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, p: ConvParams) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(Error::shape("conv2d", format!("expected [b,h,w,c], got {:?}", vx.shape())));
        }
        let b = vx.dim(0);
        let mut outs = Vec::with_capacity(b);
        for i in 0..b {
            let chw = batch_entry(vx, i)?.hwc_to_chw()?;
            let y = numerics::conv2d(&chw, self.value(kernel), bias.map(|b| self.value(b)), p)?;
            outs.push(y.chw_to_hwc()?);
        }
        let value = stack(&outs)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.push(
            "conv2d",
            &parents,
            value,
            Box::new(move |ctx| {
                let (x, k) = (ctx.inputs[0], ctx.inputs[1]);
                let mut gx = Vec::with_capacity(b);
                let mut gk = Tensor::zeros(k.shape().to_vec());
                let mut gb = Tensor::zeros([k.dim(0)]);
                for i in 0..b {
                    let chw = batch_entry(x, i)?.hwc_to_chw()?;
                    let gy = batch_entry(ctx.grad, i)?.hwc_to_chw()?;
                    let g = numerics::conv2d_backward(&chw, k, p, &gy)?;
                    gx.push(g.x.chw_to_hwc()?);
                    gk.add_assign(&g.kernel);
                    gb.add_assign(&g.bias);
                }
                let mut out = vec![Some(stack(&gx)?), Some(gk)];
                if has_bias {
                    out.push(Some(gb));
                }
                Ok(out)
            }),
        ))
    }

    /// Nearest-neighbour upsampling of `[b, h, w, c]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(Error::shape("upsample_nearest", format!("{:?}", vx.shape())));
        }
        let (b, h, w, c) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    let src = ((bi * h + y / factor) * w + x / factor) * c;
                    let dst = ((bi * oh + y) * ow + x) * c;
                    data[dst..dst + c].copy_from_slice(&vx.data()[src..src + c]);
                }
            }
        }
        let value = Tensor::from_op("upsample_nearest", vec![b, oh, ow, c], data)?;
        Ok(self.push(
            "upsample_nearest",
            &[x],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut d = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for y in 0..oh {
                        for x in 0..ow {
                            let src = ((bi * oh + y) * ow + x) * c;
                            let dst = ((bi * h + y / factor) * w + x / factor) * c;
                            for k in 0..c {
                                d[dst + k] += g[src + k];
                            }
                        }
                    }
                }
                Ok(vec![Some(Tensor::from_op("upsample_nearest_backward", vec![b, h, w, c], d)?)])
            }),
        ))
    }

    /// `sum_i weights[i] * terms[i]` over single-element terms.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[f64]) -> Result<Var> {
        if terms.len() != weights.len() {
            return Err(Error::shape("weighted_sum", "terms vs weights"));
        }
        let mut total = 0.0;
        for (&t, &w) in terms.iter().zip(weights) {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::shape("weighted_sum", format!("term {:?}", v.shape())));
            }
            total += w * v.item();
        }
        let weights = weights.to_vec();
        let value = Tensor::from_op("weighted_sum", vec![], vec![total])?;
        Ok(self.push(
            "weighted_sum",
            terms,
            value,
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                ctx.inputs
                    .iter()
                    .zip(&weights)
                    .map(|(t, w)| Ok(Some(Tensor::from_op("weighted_sum_backward", t.shape().to_vec(), vec![g * w])?)))
                    .collect()
            }),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::from_op("sum", vec![], vec![v.sum()])?;
        let shape = v.shape().to_vec();
        Ok(self.push(
            "sum",
            &[x],
            value,
            Box::new(move |ctx| Ok(vec![Some(Tensor::full(shape.clone(), ctx.grad.item()))])),
        ))
    }

    /// `sum(x * weights)` for a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != weights.shape() {
            return Err(Error::shape("dot_const", format!("{:?} vs {:?}", v.shape(), weights.shape())));
        }
        let total = v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let value = Tensor::from_op("dot_const", vec![], vec![total])?;
        let w = weights.clone();
        Ok(self.push(
            "dot_const",
            &[x],
            value,
            Box::new(move |ctx| Ok(vec![Some(w.map(|v| v * ctx.grad.item())?)])),
        ))
    }
}

fn swap_halves(d: &[f64]) -> Vec<f64> {
    let n = d.len() / 2;
    let mut out = Vec::with_capacity(d.len());
    out.extend_from_slice(&d[n..]);
    out.extend_from_slice(&d[..n]);
    out
}

/// Entry `i` of the leading axis as its own tensor.
pub(crate) fn batch_entry(t: &Tensor, i: usize) -> Result<Tensor> {
    let n = t.len() / t.dim(0);
    Tensor::from_op("batch_entry", t.shape()[1..].to_vec(), t.data()[i * n..(i + 1) * n].to_vec())
}

/// Stacks equally shaped tensors along a new leading axis.
pub(crate) fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let shape = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        if p.shape() != shape.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", p.shape(), shape)));
        }
        data.extend_from_slice(p.data());
    }
    let mut full = vec![parts.len()];
    full.extend(shape);
    Tensor::from_op("stack", full, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{finite_diff_grad, max_rel_error};
    use crate::random::random_tensor;
    use crate::tensor::{with_precision, Precision};

    #[test]
    fn fan_in_sums_branch_gradients() {
        with_precision(Precision::F64, || {
            let mut g = Graph::new();
            let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
            let a = g.scale(x, 3.0).unwrap();
            let b = g.mul(x, x).unwrap();
            let s = g.add(a, b).unwrap();
            let l = g.sum(s).unwrap();
            let grads = g.backward(l).unwrap();
            // d/dx (3x + x^2) = 3 + 2x
            assert_eq!(grads.get(x).unwrap().data(), &[5.0, 7.0]);
        });
    }

    #[test]
    fn linear_sum_gradient_is_transpose_product() {
        with_precision(Precision::F64, || {
            let mut g = Graph::new();
            let xv = random_tensor(&[4, 3], 1);
            let x = g.constant(xv.clone());
            let w = g.param(random_tensor(&[3, 2], 2));
            let y = g.linear(x, w, None).unwrap();
            let l = g.sum(y).unwrap();
            let grads = g.backward(l).unwrap();
            let gw = grads.get(w).unwrap();
            for i in 0..3 {
                let col: f64 = (0..4).map(|r| xv.data()[r * 3 + i]).sum();
                assert!((gw.data()[i * 2] - col).abs() < 1e-12);
            }
            assert!(grads.get(x).is_none());
        });
    }

    #[test]
    fn inference_graph_cannot_backward() {
        let mut g = Graph::inference();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.scale(x, 2.0).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        with_precision(Precision::F64, || {
            let xv = random_tensor(&[2, 3, 2, 4], 5);
            let kv = random_tensor(&[4, 1, 3, 3], 6);
            let sv = random_tensor(&[4], 7);
            let wv = random_tensor(&[2, 6, 4, 6], 8);
            let build = |g: &mut Graph, x: Var, k: Var, s: Var| -> Result<Var> {
                let c = g.conv2d(x, k, None, ConvParams::new(1, 1, 4))?;
                let m = g.mul_channels(c, s)?;
                let sw = g.swap_views(m)?;
                let a = g.slice_last(sw, 1, 2)?;
                let b = g.slice_last(m, 0, 4)?;
                let cat = g.concat_last(&[a, b])?;
                let up = g.upsample_nearest(cat, 2)?;
                g.dot_const(up, &wv)
            };
            let eval = |x: &Tensor, k: &Tensor, s: &Tensor| -> Result<f64> {
                let mut g = Graph::new();
                let (x, k, s) = (g.param(x.clone()), g.param(k.clone()), g.param(s.clone()));
                let l = build(&mut g, x, k, s)?;
                Ok(g.value(l).item())
            };
            let mut g = Graph::new();
            let (x, k, s) = (g.param(xv.clone()), g.param(kv.clone()), g.param(sv.clone()));
            let l = build(&mut g, x, k, s).unwrap();
            let grads = g.backward(l).unwrap();
            let fx = finite_diff_grad(|t| eval(t, &kv, &sv), &xv, 1e-5).unwrap();
            let fk = finite_diff_grad(|t| eval(&xv, t, &sv), &kv, 1e-5).unwrap();
            let fs = finite_diff_grad(|t| eval(&xv, &kv, t), &sv, 1e-5).unwrap();
            assert!(max_rel_error(grads.get(x).unwrap(), &fx) < 1e-6);
            assert!(max_rel_error(grads.get(k).unwrap(), &fk) < 1e-6);
            assert!(max_rel_error(grads.get(s).unwrap(), &fs) < 1e-6);
        });
    }
}
