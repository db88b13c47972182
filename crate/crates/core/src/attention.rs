//! MatchAttention: window attention whose center is the query position plus
//! a learned, continuous relative position.
//!
//! Feature maps are `[b, h, w, c]` with channels last. The fused core reads
//! `Q`, `K`, `V` and the relative positions `R` and writes, per query, the
//! aggregated values of every head followed by every head's expanded-window
//! weights (head-major).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsm::{self, Blend, FractionalOffset, CORNERS};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::numerics::{Activation, ConvParams};
use crate::params::{Ctx, Init};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Dot,
    NegL1,
}

/// `-gamma * |q - k|_1` or `gamma * <q, k>`.
pub fn similarity_value(q: &[f64], k: &[f64], kind: Similarity, gamma: f64) -> f64 {
    match kind {
        Similarity::Dot => gamma * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>(),
        Similarity::NegL1 => -gamma * q.iter().zip(k).map(|(a, b)| (a - b).abs()).sum::<f64>(),
    }
}

/// Accumulates `g * d sim / dq` into `dq` and `g * d sim / dk` into `dk`.
#[inline]
fn similarity_backward(q: &[f64], k: &[f64], kind: Similarity, gamma: f64, g: f64, dq: &mut [f64], dk: &mut [f64]) {
    let s = gamma * g;
    match kind {
        Similarity::Dot => {
            for c in 0..q.len() {
                dq[c] += s * k[c];
                dk[c] += s * q[c];
            }
        }
        Similarity::NegL1 => {
            for c in 0..q.len() {
                let d = q[c] - k[c];
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dq[c] -= s * sign;
                dk[c] += s * sign;
            }
        }
    }
}

/// Similarities of `q` against each row of `kwin` (`[n, c]`).
pub fn similarity(q: &Tensor, kwin: &Tensor, kind: Similarity, gamma: f64) -> Result<Tensor> {
    let c = q.len();
    if kwin.rank() != 2 || kwin.dim(1) != c {
        return Err(Error::shape("similarity", format!("q {:?} vs keys {:?}", q.shape(), kwin.shape())));
    }
    let data = kwin
        .data()
        .chunks(c)
        .map(|k| similarity_value(q.data(), k, kind, gamma))
        .collect();
    Tensor::from_op("similarity", vec![kwin.dim(0)], data)
}

/// Where the expanded window of one query lands in the image.
#[derive(Clone, Debug)]
pub struct WindowPlacement {
    pub offset: FractionalOffset,
    /// Flat pixel index (`y * width + x`) of every entry after clamping.
    pub index: Vec<usize>,
    /// Entries whose true position lies outside the image.
    pub clamped: Vec<bool>,
    /// Sub-windows with at least one in-image entry.
    pub active: [bool; 4],
}

impl WindowPlacement {
    pub fn new(cx: f64, cy: f64, height: usize, width: usize, w: usize) -> WindowPlacement {
        let mut p = WindowPlacement {
            offset: FractionalOffset::from_center(0.0, 0.0),
            index: vec![0; (w + 1) * (w + 1)],
            clamped: vec![false; (w + 1) * (w + 1)],
            active: [false; 4],
        };
        p.place(cx, cy, height, width, w);
        p
    }

    fn place(&mut self, cx: f64, cy: f64, height: usize, width: usize, w: usize) {
        let e = w + 1;
        let half = (w / 2) as i64;
        self.offset = FractionalOffset::from_center(cx, cy);
        let (bx, by) = self.offset.base;
        let (x0, y0) = (bx - half, by - half);
        let inside = |v: i64, n: usize| v >= 0 && v < n as i64;
        for r in 0..e {
            let y = y0 + r as i64;
            let yc = y.clamp(0, height as i64 - 1) as usize;
            for c in 0..e {
                let x = x0 + c as i64;
                let xc = x.clamp(0, width as i64 - 1) as usize;
                self.index[r * e + c] = yc * width + xc;
                self.clamped[r * e + c] = !(inside(x, width) && inside(y, height));
            }
        }
        for t in 0..CORNERS {
            let (dr, dc) = bsm::corner_shift(t);
            let (sx, sy) = (x0 + dc as i64, y0 + dr as i64);
            let xs = sx + w as i64 - 1 >= 0 && sx < width as i64;
            let ys = sy + w as i64 - 1 >= 0 && sy < height as i64;
            self.active[t] = xs && ys;
        }
    }
}

/// Gathers the expanded window of `keys` (`[h, w, c]`) around a continuous
/// center. Returns the rows, the clamped-entry mask and the fractional offset.
pub fn gather_window(keys: &Tensor, center: (f64, f64), w: usize) -> Result<(Tensor, Vec<bool>, (f64, f64))> {
    if keys.rank() != 3 {
        return Err(Error::shape("gather_window", format!("expected [h,w,c], got {:?}", keys.shape())));
    }
    if w % 2 == 0 {
        return Err(Error::invalid("gather_window", format!("window {w} must be odd")));
    }
    let (h, wd, c) = (keys.dim(0), keys.dim(1), keys.dim(2));
    let place = WindowPlacement::new(center.0, center.1, h, wd, w);
    let mut data = Vec::with_capacity(place.index.len() * c);
    for &i in &place.index {
        data.extend_from_slice(&keys.data()[i * c..(i + 1) * c]);
    }
    let rows = Tensor::from_op("gather_window", vec![place.index.len(), c], data)?;
    Ok((rows, place.clamped, place.offset.frac))
}

/// Shape parameters of the fused core.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoreSpec {
    pub window: usize,
    pub heads: usize,
    pub ck: usize,
    pub cv: usize,
    pub similarity: Similarity,
    /// One relative position per head (self) or one shared by all (cross).
    pub per_head_r: bool,
}

impl CoreSpec {
    pub fn gamma(&self) -> f64 {
        1.0 / (self.ck as f64).sqrt()
    }

    pub fn expanded(&self) -> usize {
        (self.window + 1) * (self.window + 1)
    }

    pub fn r_channels(&self) -> usize {
        if self.per_head_r {
            2 * self.heads
        } else {
            2
        }
    }

    pub fn out_channels(&self) -> usize {
        self.heads * (self.cv + self.expanded())
    }

    fn check(&self, q: &Tensor, k: &Tensor, v: &Tensor, r: &Tensor) -> Result<(usize, usize, usize)> {
        if self.window % 2 == 0 || self.heads == 0 || self.ck == 0 || self.cv == 0 {
            return Err(Error::invalid("match_attention", format!("{self:?}")));
        }
        if q.rank() != 4 {
            return Err(Error::shape("match_attention", format!("q must be [b,h,w,c], got {:?}", q.shape())));
        }
        let (b, h, w) = (q.dim(0), q.dim(1), q.dim(2));
        let want = |t: &Tensor, c: usize, name: &str| -> Result<()> {
            if t.shape() != [b, h, w, c] {
                return Err(Error::shape("match_attention", format!("{name} {:?}, expected {:?}", t.shape(), [b, h, w, c])));
            }
            Ok(())
        };
        want(q, self.heads * self.ck, "q")?;
        want(k, self.heads * self.ck, "k")?;
        want(v, self.heads * self.cv, "v")?;
        want(r, self.r_channels(), "r")?;
        Ok((b, h, w))
    }
}

/// Per-query scratch buffers.
struct Scratch {
    place: WindowPlacement,
    sim: Vec<f64>,
    alpha: Vec<f64>,
    upstream: Vec<f64>,
    grad_sim: Vec<f64>,
}

impl Scratch {
    fn new(w: usize) -> Scratch {
        let n = (w + 1) * (w + 1);
        Scratch {
            place: WindowPlacement::new(0.0, 0.0, 1, 1, w),
            sim: vec![0.0; n],
            alpha: vec![0.0; n],
            upstream: vec![0.0; n],
            grad_sim: vec![0.0; n],
        }
    }
}

struct Views<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    r: &'a [f64],
}

/// Locates the window of query `p` in head `head` and fills similarities.
/// Returns the blend and the softmax statistics; `s.alpha` holds the weights.
#[inline]
fn query_forward(spec: &CoreSpec, dims: (usize, usize), x: &Views, p: usize, head: usize, s: &mut Scratch) -> (Blend, bsm::SubStats) {
    let (h, w) = dims;
    let (ck, rc) = (spec.ck, spec.r_channels());
    let hk = spec.heads * ck;
    let ri = if spec.per_head_r { 2 * head } else { 0 };
    let (px, py) = ((p % w) as f64, (p / w) as f64);
    let (rx, ry) = (x.r[p * rc + ri], x.r[p * rc + ri + 1]);
    s.place.place(px + rx, py + ry, h, w, spec.window);
    let q = &x.q[p * hk + head * ck..p * hk + (head + 1) * ck];
    for (j, &idx) in s.place.index.iter().enumerate() {
        let k = &x.k[idx * hk + head * ck..idx * hk + (head + 1) * ck];
        s.sim[j] = similarity_value(q, k, spec.similarity, spec.gamma());
    }
    let (fx, fy) = s.place.offset.frac;
    let blend = Blend::new(fx, fy, s.place.active);
    let stats = bsm::forward_into(&s.sim, spec.window, &blend, &mut s.alpha);
    (blend, stats)
}

/// Fused forward over one view. `out` is `[h*w, out_channels]`.
fn forward_view(spec: &CoreSpec, dims: (usize, usize), x: &Views, out: &mut [f64]) -> Result<()> {
    let oc = spec.out_channels();
    let (cv, n) = (spec.cv, spec.expanded());
    let hv = spec.heads * cv;
    out.par_chunks_mut(oc * dims.1).enumerate().try_for_each_init(
        || Scratch::new(spec.window),
        |s, (row, chunk)| {
            for (col, o) in chunk.chunks_mut(oc).enumerate() {
                let p = row * dims.1 + col;
                for head in 0..spec.heads {
                    query_forward(spec, dims, x, p, head, s);
                    let m = &mut o[head * cv..(head + 1) * cv];
                    m.fill(0.0);
                    for (j, &idx) in s.place.index.iter().enumerate() {
                        let a = s.alpha[j];
                        if a == 0.0 {
                            continue;
                        }
                        let vj = &x.v[idx * hv + head * cv..idx * hv + (head + 1) * cv];
                        for c in 0..cv {
                            m[c] += a * vj[c];
                        }
                    }
                    if let Some(i) = m.iter().position(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            op: "match_attention",
                            index: p * oc + head * cv + i,
                        });
                    }
                    o[hv + head * n..hv + (head + 1) * n].copy_from_slice(&s.alpha);
                }
            }
            Ok(())
        },
    )
}

/// Forward of the fused core on `[b, h, w, c]` inputs. For cross attention
/// the caller passes keys and values already taken from the other view.
pub fn core_forward(spec: &CoreSpec, q: &Tensor, k: &Tensor, v: &Tensor, r: &Tensor) -> Result<Tensor> {
    let (b, h, w) = spec.check(q, k, v, r)?;
    let oc = spec.out_channels();
    let mut out = vec![0.0; b * h * w * oc];
    for (bi, o) in out.chunks_mut(h * w * oc).enumerate() {
        let views = batch_views(spec, (h, w), bi, q, k, v, r);
        forward_view(spec, (h, w), &views, o)?;
    }
    Tensor::from_op("match_attention", vec![b, h, w, oc], out)
}

fn batch_views<'a>(spec: &CoreSpec, dims: (usize, usize), bi: usize, q: &'a Tensor, k: &'a Tensor, v: &'a Tensor, r: &'a Tensor) -> Views<'a> {
    let n = dims.0 * dims.1;
    let (hk, hv, rc) = (spec.heads * spec.ck, spec.heads * spec.cv, spec.r_channels());
    Views {
        q: &q.data()[bi * n * hk..(bi + 1) * n * hk],
        k: &k.data()[bi * n * hk..(bi + 1) * n * hk],
        v: &v.data()[bi * n * hv..(bi + 1) * n * hv],
        r: &r.data()[bi * n * rc..(bi + 1) * n * rc],
    }
}

pub struct CoreGrads {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub r: Tensor,
}

/// Gradients of one (view, head) pair, each dense over that head's channels.
struct HeadGrads {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    r: Vec<f64>,
}

fn backward_head(spec: &CoreSpec, dims: (usize, usize), x: &Views, grad: &[f64], head: usize) -> HeadGrads {
    let n = dims.0 * dims.1;
    let (ck, cv, ne) = (spec.ck, spec.cv, spec.expanded());
    let (hk, hv, oc) = (spec.heads * ck, spec.heads * cv, spec.out_channels());
    let gamma = spec.gamma();
    let mut out = HeadGrads {
        q: vec![0.0; n * ck],
        k: vec![0.0; n * ck],
        v: vec![0.0; n * cv],
        r: vec![0.0; n * 2],
    };
    let mut s = Scratch::new(spec.window);
    for p in 0..n {
        let gm = &grad[p * oc + head * cv..p * oc + (head + 1) * cv];
        let ga = &grad[p * oc + hv + head * ne..p * oc + hv + (head + 1) * ne];
        if gm.iter().all(|&g| g == 0.0) && ga.iter().all(|&g| g == 0.0) {
            continue;
        }
        let (blend, stats) = query_forward(spec, dims, x, p, head, &mut s);
        for (j, &idx) in s.place.index.iter().enumerate() {
            let vj = &x.v[idx * hv + head * cv..idx * hv + (head + 1) * cv];
            s.upstream[j] = ga[j] + gm.iter().zip(vj).map(|(g, v)| g * v).sum::<f64>();
            let a = s.alpha[j];
            if a != 0.0 {
                let dv = &mut out.v[idx * cv..(idx + 1) * cv];
                for c in 0..cv {
                    dv[c] += a * gm[c];
                }
            }
        }
        s.grad_sim.fill(0.0);
        let g_blend = bsm::backward_into(&s.sim, spec.window, &blend, &stats, &s.upstream, &mut s.grad_sim);
        let (fx, fy) = s.place.offset.frac;
        let (dfx, dfy) = blend.frac_grad(fx, fy, &g_blend);
        out.r[2 * p] += dfx;
        out.r[2 * p + 1] += dfy;
        let q = &x.q[p * hk + head * ck..p * hk + (head + 1) * ck];
        for (j, &idx) in s.place.index.iter().enumerate() {
            let g = s.grad_sim[j];
            if g == 0.0 {
                continue;
            }
            let k = &x.k[idx * hk + head * ck..idx * hk + (head + 1) * ck];
            similarity_backward(
                q,
                k,
                spec.similarity,
                gamma,
                g,
                &mut out.q[p * ck..(p + 1) * ck],
                &mut out.k[idx * ck..(idx + 1) * ck],
            );
        }
    }
    out
}

/// Backward of [`core_forward`]. Work is split over (view, head) pairs; each
/// pair owns disjoint gradient channels, so results do not depend on
/// scheduling.
pub fn core_backward(spec: &CoreSpec, q: &Tensor, k: &Tensor, v: &Tensor, r: &Tensor, grad: &Tensor) -> Result<CoreGrads> {
    let (b, h, w) = spec.check(q, k, v, r)?;
    let n = h * w;
    let oc = spec.out_channels();
    grad.check_shape("match_attention_backward", &[b, h, w, oc])?;
    let tasks: Vec<(usize, usize)> = (0..b).flat_map(|bi| (0..spec.heads).map(move |hd| (bi, hd))).collect();
    let parts: Vec<HeadGrads> = tasks
        .par_iter()
        .map(|&(bi, head)| {
            let views = batch_views(spec, (h, w), bi, q, k, v, r);
            backward_head(spec, (h, w), &views, &grad.data()[bi * n * oc..(bi + 1) * n * oc], head)
        })
        .collect();
    let (ck, cv, rc) = (spec.ck, spec.cv, spec.r_channels());
    let (hk, hv) = (spec.heads * ck, spec.heads * cv);
    let mut dq = vec![0.0; b * n * hk];
    let mut dk = vec![0.0; b * n * hk];
    let mut dv = vec![0.0; b * n * hv];
    let mut dr = vec![0.0; b * n * rc];
    for (&(bi, head), part) in tasks.iter().zip(&parts) {
        for p in 0..n {
            let gp = bi * n + p;
            dq[gp * hk + head * ck..gp * hk + (head + 1) * ck].copy_from_slice(&part.q[p * ck..(p + 1) * ck]);
            dk[gp * hk + head * ck..gp * hk + (head + 1) * ck].copy_from_slice(&part.k[p * ck..(p + 1) * ck]);
            dv[gp * hv + head * cv..gp * hv + (head + 1) * cv].copy_from_slice(&part.v[p * cv..(p + 1) * cv]);
            let ri = if spec.per_head_r { 2 * head } else { 0 };
            dr[gp * rc + ri] += part.r[2 * p];
            dr[gp * rc + ri + 1] += part.r[2 * p + 1];
        }
    }
    let op = "match_attention_backward";
    Ok(CoreGrads {
        q: Tensor::from_op(op, q.shape().to_vec(), dq)?,
        k: Tensor::from_op(op, k.shape().to_vec(), dk)?,
        v: Tensor::from_op(op, v.shape().to_vec(), dv)?,
        r: Tensor::from_op(op, r.shape().to_vec(), dr)?,
    })
}

/// Records the fused core as a graph node. The output holds the aggregated
/// values (`heads * cv` channels) followed by the weights (`heads * (w+1)^2`).
pub fn core_node(ctx: &mut Ctx, spec: CoreSpec, q: Var, k: Var, v: Var, r: Var) -> Result<Var> {
    let value = core_forward(&spec, ctx.g.value(q), ctx.g.value(k), ctx.g.value(v), ctx.g.value(r))?;
    Ok(ctx.g.push(
        "match_attention",
        &[q, k, v, r],
        value,
        Box::new(move |c| {
            let g = core_backward(&spec, c.inputs[0], c.inputs[1], c.inputs[2], c.inputs[3], c.grad)?;
            Ok(vec![Some(g.q), Some(g.k), Some(g.v), Some(g.r)])
        }),
    ))
}

/// Dense all-pairs attention of one view (`[n, c]` inputs), the quadratic
/// baseline.
pub fn global_attention(q: &Tensor, k: &Tensor, v: &Tensor, gamma: f64) -> Result<Tensor> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0) {
        return Err(Error::shape("global_attention", format!("{:?} {:?} {:?}", q.shape(), k.shape(), v.shape())));
    }
    let (n, m, c, cv) = (q.dim(0), k.dim(0), q.dim(1), v.dim(1));
    let mut out = vec![0.0; n * cv];
    out.par_chunks_mut(cv).enumerate().for_each_init(
        || (vec![0.0; m], vec![0.0; m]),
        |(sims, probs), (i, o)| {
            let qi = &q.data()[i * c..(i + 1) * c];
            for j in 0..m {
                sims[j] = similarity_value(qi, &k.data()[j * c..(j + 1) * c], Similarity::Dot, gamma);
            }
            crate::numerics::softmax::softmax_row(sims, probs);
            for j in 0..m {
                let a = probs[j];
                for (oc, vv) in o.iter_mut().zip(&v.data()[j * cv..(j + 1) * cv]) {
                    *oc += a * vv;
                }
            }
        },
    );
    Tensor::from_op("global_attention", vec![n, cv], out)
}

/// Hyperparameters of one MatchAttention layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnConfig {
    pub window: usize,
    pub heads: usize,
    pub ck: usize,
    pub cv: usize,
    pub similarity: Similarity,
    pub inject_weights: bool,
    pub gated: bool,
    pub cross: bool,
}

impl AttnConfig {
    pub fn core(&self) -> CoreSpec {
        CoreSpec {
            window: self.window,
            heads: self.heads,
            ck: self.ck,
            cv: self.cv,
            similarity: self.similarity,
            per_head_r: !self.cross,
        }
    }

    /// Width of the projection input.
    pub fn proj_in(&self) -> usize {
        let m = self.heads * self.cv;
        if self.inject_weights {
            m + self.heads * (self.window + 1) * (self.window + 1)
        } else {
            m
        }
    }
}

/// Registers `prefix.{wq,wk,wv,wp[,wg]}` for a layer with `cin` input and
/// `cout` output channels.
pub fn init_attention(init: &mut Init, prefix: &str, cfg: &AttnConfig, cin: usize, cout: usize) {
    let (hk, hv) = (cfg.heads * cfg.ck, cfg.heads * cfg.cv);
    init.linear(&format!("{prefix}.wq"), cin, hk);
    init.linear(&format!("{prefix}.wk"), cin, hk);
    init.linear(&format!("{prefix}.wv"), cin, hv);
    init.linear(&format!("{prefix}.wp"), cfg.proj_in(), cout);
    if cfg.gated {
        init.linear(&format!("{prefix}.wg"), cin, hv);
    }
}

/// `F || beta*R || extra...` along channels. `beta` (2 values) is tiled over
/// every coordinate pair of `r`.
pub fn concat_rpos(ctx: &mut Ctx, f: Var, r: Var, beta: Var, extra: &[Var]) -> Result<Var> {
    let pairs = ctx.g.value(r).last_dim() / 2;
    let tiled = if pairs == 1 {
        beta
    } else {
        ctx.g.concat_last(&vec![beta; pairs])?
    };
    let rb = ctx.g.mul_channels(r, tiled)?;
    let mut parts = vec![f, rb];
    parts.extend_from_slice(extra);
    ctx.g.concat_last(&parts)
}

pub struct AttnOutput {
    /// Projection output, `cout` channels.
    pub out: Var,
    /// Expanded-window weights of every head, `[b, h, w, heads*(w+1)^2]`.
    pub alpha: Var,
}

/// One MatchAttention layer on `x_hat` (`[2, h, w, cin]`, the two views
/// stacked). Cross layers take keys and values from the other view.
pub fn match_attention(ctx: &mut Ctx, prefix: &str, cfg: &AttnConfig, x_hat: Var, r: Var) -> Result<AttnOutput> {
    let spec = cfg.core();
    let wq = ctx.p(&format!("{prefix}.wq"))?;
    let wk = ctx.p(&format!("{prefix}.wk"))?;
    let wv = ctx.p(&format!("{prefix}.wv"))?;
    let wp = ctx.p(&format!("{prefix}.wp"))?;
    let q = ctx.g.linear(x_hat, wq, None)?;
    let mut k = ctx.g.linear(x_hat, wk, None)?;
    let mut v = ctx.g.linear(x_hat, wv, None)?;
    if cfg.cross {
        k = ctx.g.swap_views(k)?;
        v = ctx.g.swap_views(v)?;
    }
    let core = core_node(ctx, spec, q, k, v, r)?;
    let hv = cfg.heads * cfg.cv;
    let na = cfg.heads * spec.expanded();
    let mut m = ctx.g.slice_last(core, 0, hv)?;
    let alpha = ctx.g.slice_last(core, hv, na)?;
    if cfg.gated {
        let wg = ctx.p(&format!("{prefix}.wg"))?;
        let gl = ctx.g.linear(x_hat, wg, None)?;
        let gate = ctx.g.activation(gl, Activation::Silu)?;
        m = ctx.g.mul(gate, m)?;
    }
    let proj_in = if cfg.inject_weights { ctx.g.concat_last(&[m, alpha])? } else { m };
    let out = ctx.g.linear(proj_in, wp, None)?;
    Ok(AttnOutput { out, alpha })
}

/// Registers `prefix.{wa,wb,dw,wo}` for a ConvGLU block of width `c`.
pub fn init_convglu(init: &mut Init, prefix: &str, c: usize, ratio: usize) {
    let hid = c * ratio;
    init.linear(&format!("{prefix}.wa"), c, hid);
    init.linear(&format!("{prefix}.wb"), c, hid);
    init.conv(&format!("{prefix}.dw"), hid, 1, 3);
    init.linear(&format!("{prefix}.wo"), hid, c);
}

/// `W_out((W_a x) * SiLU(DW3x3(W_b x)))`.
pub fn convglu(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let wa = ctx.p(&format!("{prefix}.wa"))?;
    let wb = ctx.p(&format!("{prefix}.wb"))?;
    let dw = ctx.p(&format!("{prefix}.dw"))?;
    let wo = ctx.p(&format!("{prefix}.wo"))?;
    let hid = ctx.g.value(wa).dim(1);
    let a = ctx.g.linear(x, wa, None)?;
    let b = ctx.g.linear(x, wb, None)?;
    let d = ctx.g.conv2d(b, dw, None, ConvParams::new(1, 1, hid))?;
    let s = ctx.g.activation(d, Activation::Silu)?;
    let gated = ctx.g.mul(a, s)?;
    ctx.g.linear(gated, wo, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::{finite_diff_grad, max_rel_error, max_rel_error_scaled};
    use crate::params::ParamStore;
    use crate::random::{random_tensor, seeded};
    use crate::tensor::{with_precision, Precision};

    fn spec(window: usize, heads: usize, similarity: Similarity, per_head_r: bool) -> CoreSpec {
        CoreSpec {
            window,
            heads,
            ck: 3,
            cv: 2,
            similarity,
            per_head_r,
        }
    }

    #[test]
    fn integer_center_gathers_exact_block() {
        let keys = Tensor::from_fn([10, 10, 1], |i| i as f64).unwrap();
        let (rows, clamped, frac) = gather_window(&keys, (5.0, 5.0), 3).unwrap();
        assert_eq!(frac, (0.0, 0.0));
        assert!(clamped.iter().all(|&c| !c));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(rows.data()[r * 4 + c], ((4 + r) * 10 + 4 + c) as f64);
            }
        }
    }

    #[test]
    fn far_outside_center_replicates_corner() {
        let keys = random_tensor(&[6, 7, 2], 3);
        let (rows, clamped, _) = gather_window(&keys, (-10.0, -10.0), 3).unwrap();
        assert!(clamped.iter().all(|&c| c));
        for r in rows.data().chunks(2) {
            assert_eq!(r, &keys.data()[..2]);
        }
    }

    #[test]
    fn gather_matches_direct_indexing() {
        let keys = random_tensor(&[7, 9, 3], 4);
        let mut rng = seeded(5);
        use rand::Rng;
        for _ in 0..200 {
            let (cx, cy) = (rng.gen_range(-4.0..12.0), rng.gen_range(-4.0..10.0));
            let (rows, clamped, frac) = gather_window(&keys, (cx, cy), 3).unwrap();
            let (bx, by) = (f64::floor(cx) as i64, f64::floor(cy) as i64);
            assert!((frac.0 - (cx - bx as f64)).abs() < 1e-15);
            for r in 0..4i64 {
                for c in 0..4i64 {
                    let (x, y) = (bx - 1 + c, by - 1 + r);
                    let (xc, yc) = (x.clamp(0, 8) as usize, y.clamp(0, 6) as usize);
                    let j = (r * 4 + c) as usize;
                    assert_eq!(&rows.data()[j * 3..j * 3 + 3], &keys.data()[(yc * 9 + xc) * 3..(yc * 9 + xc) * 3 + 3]);
                    assert_eq!(clamped[j], x != xc as i64 || y != yc as i64);
                }
            }
        }
    }

    #[test]
    fn similarity_examples() {
        let q = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let s = similarity(&q, &q.clone().reshape([1, 3]).unwrap(), Similarity::NegL1, 0.7).unwrap();
        assert_eq!(s.data(), &[0.0]);
        let e1 = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        let s = similarity(&e1, &e1.clone().reshape([1, 2]).unwrap(), Similarity::Dot, 1.0).unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn neg_l1_gradient_matches_finite_differences() {
        with_precision(Precision::F64, || {
            let q = random_tensor(&[4], 1);
            let mut k = random_tensor(&[5, 4], 2);
            k.data_mut()[0..4].copy_from_slice(q.data());
            let wts = random_tensor(&[5], 3);
            let gamma = 0.5;
            let mut dq = vec![0.0; 4];
            let mut scratch = vec![0.0; 4];
            for j in 0..5 {
                similarity_backward(q.data(), &k.data()[j * 4..j * 4 + 4], Similarity::NegL1, gamma, wts.data()[j], &mut dq, &mut scratch);
            }
            // Skip the exact-tie row in the numeric reference: the kink
            // makes the two-sided difference meaningless there.
            let fd = finite_diff_grad(
                |t| {
                    let s = similarity(t, &k, Similarity::NegL1, gamma)?;
                    Ok(s.data().iter().zip(wts.data()).skip(1).map(|(a, b)| a * b).sum())
                },
                &q,
                1e-6,
            )
            .unwrap();
            assert!(max_rel_error(&Tensor::new([4], dq).unwrap(), &fd) < 1e-6);
        });
    }

    fn random_inputs(spec: &CoreSpec, b: usize, h: usize, w: usize, rscale: f64, seed: u64) -> [Tensor; 4] {
        let q = random_tensor(&[b, h, w, spec.heads * spec.ck], seed);
        let k = random_tensor(&[b, h, w, spec.heads * spec.ck], seed + 1);
        let v = random_tensor(&[b, h, w, spec.heads * spec.cv], seed + 2);
        let r = random_tensor(&[b, h, w, spec.r_channels()], seed + 3).map(|x| x * rscale).unwrap();
        [q, k, v, r]
    }

    #[test]
    fn constant_values_aggregate_exactly() {
        with_precision(Precision::F64, || {
            let s = spec(3, 2, Similarity::NegL1, true);
            let [q, k, _, r] = random_inputs(&s, 2, 5, 6, 4.0, 10);
            let v = Tensor::from_fn([2, 5, 6, 4], |i| [0.25, -1.5][i % 2]).unwrap();
            let out = core_forward(&s, &q, &k, &v, &r).unwrap();
            for o in out.data().chunks(s.out_channels()) {
                for head in 0..2 {
                    assert!((o[head * 2] - 0.25).abs() < 1e-14);
                    assert!((o[head * 2 + 1] + 1.5).abs() < 1e-14);
                    let total: f64 = o[4 + head * 16..4 + (head + 1) * 16].iter().sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
        });
    }

    #[test]
    fn matches_global_attention_on_interior_queries() {
        with_precision(Precision::F64, || {
            // With w=5 the 6x6 expanded window at a zero offset covers the
            // whole image for the query at (2,2), and the nw sub-window is
            // 5x5. Build keys on a 5x5 image so the window is the image.
            let s = CoreSpec {
                window: 5,
                heads: 1,
                ck: 4,
                cv: 3,
                similarity: Similarity::Dot,
                per_head_r: false,
            };
            let (h, w) = (5, 5);
            let q = random_tensor(&[1, h, w, 4], 1);
            let k = random_tensor(&[1, h, w, 4], 2);
            let v = random_tensor(&[1, h, w, 3], 3);
            let r = Tensor::zeros([1, h, w, 2]);
            let out = core_forward(&s, &q, &k, &v, &r).unwrap();
            let g = global_attention(
                &q.clone().reshape([h * w, 4]).unwrap(),
                &k.clone().reshape([h * w, 4]).unwrap(),
                &v.clone().reshape([h * w, 3]).unwrap(),
                s.gamma(),
            )
            .unwrap();
            let p = 2 * w + 2;
            for c in 0..3 {
                assert!((out.data()[p * s.out_channels() + c] - g.data()[p * 3 + c]).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn aggregation_is_convex() {
        with_precision(Precision::F64, || {
            for kind in [Similarity::Dot, Similarity::NegL1] {
                let s = spec(3, 1, kind, false);
                let [q, k, v, r] = random_inputs(&s, 1, 6, 6, 3.0, 20);
                let out = core_forward(&s, &q, &k, &v, &r).unwrap();
                let oc = s.out_channels();
                for p in 0..36 {
                    let (x, y) = ((p % 6) as f64, (p / 6) as f64);
                    let place = WindowPlacement::new(x + r.data()[p * 2], y + r.data()[p * 2 + 1], 6, 6, 3);
                    for c in 0..2 {
                        let vals: Vec<f64> = place.index.iter().map(|&i| v.data()[i * 2 + c]).collect();
                        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let m = out.data()[p * oc + c];
                        assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
                    }
                }
            }
        });
    }

    #[test]
    fn exact_key_match_wins_under_neg_l1() {
        with_precision(Precision::F64, || {
            let s = CoreSpec {
                window: 3,
                heads: 1,
                ck: 4,
                cv: 1,
                similarity: Similarity::NegL1,
                per_head_r: false,
            };
            let mut k = random_tensor(&[1, 8, 8, 4], 2).map(|x| x * 3.0).unwrap();
            let q = Tensor::from_fn([1, 8, 8, 4], |i| 10.0 + i as f64 % 4.0).unwrap();
            // Target for query (3,3) with R=(1,0): center (4,3); put an exact
            // match at (5,4), inside the nw sub-window.
            let target = 4 * 8 + 5;
            let qp = 3 * 8 + 3;
            let qv = q.data()[qp * 4..qp * 4 + 4].to_vec();
            k.data_mut()[target * 4..target * 4 + 4].copy_from_slice(&qv);
            let v = Tensor::zeros([1, 8, 8, 1]);
            let r = Tensor::from_fn([1, 8, 8, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 }).unwrap();
            let out = core_forward(&s, &q, &k, &v, &r).unwrap();
            let alpha = &out.data()[qp * s.out_channels() + 1..(qp + 1) * s.out_channels()];
            let best = (0..16).max_by(|&a, &b| alpha[a].total_cmp(&alpha[b])).unwrap();
            // Expanded window starts at (3,2): entry (row 2, col 2).
            assert_eq!(best, 2 * 4 + 2);
        });
    }

    #[test]
    fn shift_of_similarities_keeps_weights() {
        with_precision(Precision::F64, || {
            let sim = random_tensor(&[16], 1);
            let a = bsm::bilinear_softmax_forward(sim.data(), (0.3, 0.6), 3).unwrap();
            let shifted: Vec<f64> = sim.data().iter().map(|v| v + 7.25).collect();
            let b = bsm::bilinear_softmax_forward(&shifted, (0.3, 0.6), 3).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-15);
            }
        });
    }

    #[test]
    fn core_gradients_match_finite_differences() {
        with_precision(Precision::F64, || {
            for (kind, per_head) in [(Similarity::NegL1, true), (Similarity::Dot, false)] {
                let s = spec(3, 2, kind, per_head);
                let inputs = random_inputs(&s, 2, 5, 6, 2.5, 40);
                let wts = random_tensor(&[2, 5, 6, s.out_channels()], 50);
                let loss = |x: &[Tensor; 4]| -> Result<f64> {
                    let o = core_forward(&s, &x[0], &x[1], &x[2], &x[3])?;
                    Ok(o.data().iter().zip(wts.data()).map(|(a, b)| a * b).sum())
                };
                let g = core_backward(&s, &inputs[0], &inputs[1], &inputs[2], &inputs[3], &wts).unwrap();
                let analytic = [g.q, g.k, g.v, g.r];
                for i in 0..4 {
                    let fd = finite_diff_grad(
                        |t| {
                            let mut x = inputs.clone();
                            x[i] = t.clone();
                            loss(&x)
                        },
                        &inputs[i],
                        1e-5,
                    )
                    .unwrap();
                    let err = max_rel_error_scaled(&analytic[i], &fd);
                    assert!(err < 1e-5, "{kind:?} input {i}: {err}");
                }
            }
        });
    }

    #[test]
    fn layer_and_convglu_gradients_match_finite_differences() {
        with_precision(Precision::F64, || {
            let cfg = AttnConfig {
                window: 3,
                heads: 2,
                ck: 3,
                cv: 3,
                similarity: Similarity::NegL1,
                inject_weights: true,
                gated: true,
                cross: true,
            };
            let mut store = ParamStore::new();
            let mut init = Init { store: &mut store, rng: seeded(9) };
            init_attention(&mut init, "a", &cfg, 6 + 2, 6 + 2);
            init_convglu(&mut init, "f", 8, 2);
            init.full("a.beta", &[2], 0.1);
            let f = random_tensor(&[2, 4, 5, 6], 60);
            let r = random_tensor(&[2, 4, 5, 2], 61).map(|x| x * 3.0).unwrap();
            let wts = random_tensor(&[2, 4, 5, 8], 62);
            let run = |store: &ParamStore, f: &Tensor, r: &Tensor, record: bool| -> Result<(f64, Option<(Vec<Tensor>, ParamStore)>)> {
                let mut ctx = Ctx::new(store, record);
                let fv = ctx.g.param(f.clone());
                let rv = ctx.g.param(r.clone());
                let beta = ctx.p("a.beta")?;
                let xh = concat_rpos(&mut ctx, fv, rv, beta, &[])?;
                let o = match_attention(&mut ctx, "a", &cfg, xh, rv)?;
                let y = convglu(&mut ctx, "f", o.out)?;
                let l = ctx.g.dot_const(y, &wts)?;
                let value = ctx.g.value(l).item();
                if !record {
                    return Ok((value, None));
                }
                let grads = ctx.g.backward(l)?;
                let mut out = store.clone();
                out.zero_grad();
                ctx.accumulate(&grads, &mut out);
                Ok((value, Some((vec![grads.get(fv).unwrap().clone(), grads.get(rv).unwrap().clone()], out))))
            };
            let (_, Some((inputs, grads))) = run(&store, &f, &r, true).unwrap() else { panic!() };
            let fd_f = finite_diff_grad(|t| Ok(run(&store, t, &r, false)?.0), &f, 1e-6).unwrap();
            let fd_r = finite_diff_grad(|t| Ok(run(&store, &f, t, false)?.0), &r, 1e-6).unwrap();
            assert!(max_rel_error_scaled(&inputs[0], &fd_f) < 1e-5);
            assert!(max_rel_error_scaled(&inputs[1], &fd_r) < 1e-5);
            for (name, p) in store.iter() {
                let fd = finite_diff_grad(
                    |t| {
                        let mut s = store.clone();
                        s.set_value(name, t.clone())?;
                        Ok(run(&s, &f, &r, false)?.0)
                    },
                    &p.value,
                    1e-6,
                )
                .unwrap();
                let err = max_rel_error_scaled(&grads.param(name).unwrap().grad, &fd);
                assert!(err < 1e-5, "{name}: {err}");
            }
        });
    }

    #[test]
    fn convglu_zero_input_gives_zero() {
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng: seeded(1) };
        init_convglu(&mut init, "f", 4, 2);
        let mut ctx = Ctx::new(&store, false);
        let x = ctx.g.constant(Tensor::zeros([2, 3, 3, 4]));
        let y = convglu(&mut ctx, "f", x).unwrap();
        assert!(ctx.g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_size_does_not_change_parameter_shapes() {
        let mut store = ParamStore::new();
        let base = AttnConfig {
            window: 3,
            heads: 2,
            ck: 2,
            cv: 2,
            similarity: Similarity::NegL1,
            inject_weights: false,
            gated: false,
            cross: false,
        };
        let mut init = Init { store: &mut store, rng: seeded(2) };
        init_attention(&mut init, "s", &base, 6, 6 + 2);
        let f = random_tensor(&[2, 6, 6, 6], 3);
        let r = random_tensor(&[2, 6, 6, 4], 4);
        for window in [3, 5] {
            let cfg = AttnConfig { window, ..base };
            let mut ctx = Ctx::new(&store, false);
            let fv = ctx.g.constant(f.clone());
            let rv = ctx.g.constant(r.clone());
            let o = match_attention(&mut ctx, "s", &cfg, fv, rv).unwrap();
            assert_eq!(ctx.g.shape(o.out), &[2, 6, 6, 8]);
        }
    }
}
