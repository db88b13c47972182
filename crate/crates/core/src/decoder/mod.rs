//! Hierarchical two-view decoder for stereo and optical flow.
//!
//! Levels run coarse to fine (`k = 0` is 1/32 scale). Every level repeats
//! self attention, cross attention and ConvGLU, then convex-upsamples the
//! relative positions to the next level.

pub mod config;
pub mod consistency;
pub mod encoder;
pub mod init;
pub mod loss;
pub mod upsample;

pub use config::{DecoderConfig, Task};
pub use consistency::{consistency_backward, consistency_check, consistency_forward, consistency_node, noc_mask};
pub use loss::{discounts, GroundTruth, LossReport};

use crate::attention::{concat_rpos, convglu, init_attention, init_convglu, match_attention, AttnConfig};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, Init, ParamStore};
use crate::random::seeded;
use crate::tensor::Tensor;

use encoder::{encoder_forward, init_encoder, layer_norm};
use loss::{stereo_ce_node, weighted_l1_node};
use upsample::{convex_upsample_node, init_mask_head, init_upconv, mask_head, upconv};

fn self_config(cfg: &DecoderConfig, k: usize) -> AttnConfig {
    let c = cfg.level_channels(k);
    AttnConfig {
        window: cfg.windows[k],
        heads: cfg.heads,
        ck: c / cfg.heads,
        cv: c / cfg.heads,
        similarity: cfg.similarity,
        inject_weights: false,
        gated: false,
        cross: false,
    }
}

fn cross_config(cfg: &DecoderConfig, k: usize) -> AttnConfig {
    AttnConfig {
        inject_weights: cfg.inject_weights,
        gated: cfg.gated,
        cross: true,
        ..self_config(cfg, k)
    }
}

/// Upsampling factor applied after level `k`.
fn up_factor(k: usize) -> usize {
    if k < 3 {
        2
    } else {
        4
    }
}

/// Fresh decoder weights.
pub fn init_decoder(cfg: &DecoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng: seeded(seed) };
    init_encoder(&mut init, cfg);
    let c0 = cfg.level_channels(0);
    init.layer_norm("init.ln", c0);
    init.linear("init.wa", c0, c0);
    init.linear("init.wb", c0, c0);
    let h = cfg.heads;
    for k in 0..4 {
        let c = cfg.level_channels(k);
        if k > 0 {
            init_upconv(&mut init, &format!("dec.l{k}"), cfg.level_channels(k - 1), c);
        }
        for j in 0..cfg.depths[k] {
            let p = format!("dec.l{k}.b{j}");
            let sc = self_config(cfg, k);
            init.layer_norm(&format!("{p}.ln_s"), c);
            init_attention(&mut init, &format!("{p}.self"), &sc, c + 2 + 2 * h + cfg.mask_embedding as usize, c + 2 + 2 * h);
            init.full(&format!("{p}.self.beta"), &[2], cfg.beta_init);
            let cc = cross_config(cfg, k);
            init.layer_norm(&format!("{p}.ln_c"), c);
            init_attention(&mut init, &format!("{p}.cross"), &cc, c + 2, c + 2);
            init.full(&format!("{p}.cross.beta"), &[2], cfg.beta_init);
            init.layer_norm(&format!("{p}.ln_f"), c);
            init_convglu(&mut init, &format!("{p}.glu"), c, cfg.glu_ratio);
        }
        init_mask_head(&mut init, &format!("dec.l{k}.mask"), c, up_factor(k));
    }
    Ok(store)
}

/// Output of one cross layer kept for the loss.
pub struct CrossStep {
    pub factor: usize,
    pub r: Var,
    pub resid: Var,
    /// `[2, h, w, 1]` non-occlusion mask from this layer's residual.
    pub mask: Tensor,
}

/// Everything the loss and the inspection tools need from one forward.
pub struct DecoderTrace {
    /// Raw initializer output (relative positions, plus log probabilities
    /// for stereo).
    pub init: Var,
    pub init_r: Var,
    /// Relative positions after every self layer and every upsample, with
    /// the scale factor they live at.
    pub self_r: Vec<(usize, Var)>,
    pub cross: Vec<CrossStep>,
    /// Expanded-window weights of every attention layer.
    pub alphas: Vec<Var>,
    /// Full-resolution relative positions `[2, H, W, 2]`.
    pub r: Var,
    /// Full-resolution per-head self relative positions `[2, H, W, 2h]`.
    pub sr: Var,
    /// Full-resolution non-occlusion masks `[2, H, W, 1]`.
    pub noc: Tensor,
}

/// Stacks two `[H, W, 3]` images into the `[2, H, W, 3]` decoder input.
pub fn stack_views(i0: &Tensor, i1: &Tensor) -> Result<Tensor> {
    if i0.shape() != i1.shape() || i0.rank() != 3 || i0.dim(2) != 3 {
        return Err(Error::shape("stack_views", format!("{:?} vs {:?}", i0.shape(), i1.shape())));
    }
    let mut shape = vec![2];
    shape.extend_from_slice(i0.shape());
    let mut data = i0.data().to_vec();
    data.extend_from_slice(i1.data());
    Tensor::new(shape, data)
}

fn residual(ctx: &mut Ctx, x: Var, out: Var, start: usize, len: usize) -> Result<Var> {
    let d = ctx.g.slice_last(out, start, len)?;
    ctx.g.add(x, d)
}

/// Runs the decoder on `images` (`[2, H, W, 3]`, values in [0, 1]).
pub fn decoder_forward(ctx: &mut Ctx, cfg: &DecoderConfig, images: &Tensor) -> Result<DecoderTrace> {
    let centered = images.map(|v| 2.0 * v - 1.0)?;
    let img = ctx.g.constant(centered);
    let feats = encoder_forward(ctx, cfg, img)?;
    let h = cfg.heads;

    let x = layer_norm(ctx, "init.ln", feats[3])?;
    let wa = ctx.p("init.wa")?;
    let wb = ctx.p("init.wb")?;
    let a = ctx.g.linear(x, wa, None)?;
    let b = ctx.g.linear(x, wb, None)?;
    let init_out = match cfg.task {
        Task::Stereo => init::stereo_init_node(ctx, a, b, cfg.k_init)?,
        Task::Flow => init::flow_init_node(ctx, a, b, cfg.k_init)?,
    };
    let mut r = ctx.g.slice_last(init_out, 0, 2)?;
    let init_r = r;
    let s = ctx.g.shape(r).to_vec();
    let mut sr = ctx.g.constant(Tensor::zeros([2, s[1], s[2], 2 * h]));
    let mut mask = Tensor::ones([2, s[1], s[2], 1]);
    let mut f = feats[3];

    let mut self_r = Vec::with_capacity(cfg.num_self());
    let mut cross = Vec::with_capacity(cfg.num_cross());
    let mut alphas = Vec::new();
    for k in 0..4 {
        let c = cfg.level_channels(k);
        let factor = cfg.level_factor(k);
        if k > 0 {
            f = upconv(ctx, &format!("dec.l{k}"), f, feats[3 - k])?;
        }
        let (sc, cc) = (self_config(cfg, k), cross_config(cfg, k));
        for j in 0..cfg.depths[k] {
            let p = format!("dec.l{k}.b{j}");

            let n = layer_norm(ctx, &format!("{p}.ln_s"), f)?;
            let rs = ctx.g.concat_last(&[r, sr])?;
            let beta = ctx.p(&format!("{p}.self.beta"))?;
            let extra = if cfg.mask_embedding { vec![ctx.g.constant(mask.clone())] } else { vec![] };
            let xh = concat_rpos(ctx, n, rs, beta, &extra)?;
            let o = match_attention(ctx, &format!("{p}.self"), &sc, xh, sr)?;
            alphas.push(o.alpha);
            f = residual(ctx, f, o.out, 0, c)?;
            r = residual(ctx, r, o.out, c, 2)?;
            sr = residual(ctx, sr, o.out, c + 2, 2 * h)?;
            self_r.push((factor, r));

            let n = layer_norm(ctx, &format!("{p}.ln_c"), f)?;
            let beta = ctx.p(&format!("{p}.cross.beta"))?;
            let xh = concat_rpos(ctx, n, r, beta, &[])?;
            let o = match_attention(ctx, &format!("{p}.cross"), &cc, xh, r)?;
            alphas.push(o.alpha);
            f = residual(ctx, f, o.out, 0, c)?;
            r = residual(ctx, r, o.out, c, 2)?;
            let resid = consistency_node(ctx, r)?;
            mask = noc_mask(ctx.g.value(resid), cfg.consistency_a)?;
            cross.push(CrossStep { factor, r, resid, mask: mask.clone() });

            let n = layer_norm(ctx, &format!("{p}.ln_f"), f)?;
            let g = convglu(ctx, &format!("{p}.glu"), n)?;
            f = ctx.g.add(f, g)?;
        }
        let uf = up_factor(k);
        let logits = mask_head(ctx, &format!("dec.l{k}.mask"), f)?;
        let rs = ctx.g.concat_last(&[r, sr])?;
        let up = convex_upsample_node(ctx, rs, logits, uf)?;
        r = ctx.g.slice_last(up, 0, 2)?;
        sr = ctx.g.slice_last(up, 2, 2 * h)?;
        self_r.push((factor / uf, r));
        mask = noc_mask(&consistency_forward(ctx.g.value(r))?, cfg.consistency_a)?;
    }
    Ok(DecoderTrace {
        init: init_out,
        init_r,
        self_r,
        cross,
        alphas,
        r,
        sr,
        noc: mask,
    })
}

/// Total loss of one forward against reference-view ground truth at full
/// resolution.
pub fn loss_total(ctx: &mut Ctx, cfg: &DecoderConfig, trace: &DecoderTrace, gt: &GroundTruth) -> Result<(Var, LossReport)> {
    let full = ctx.g.shape(trace.r).to_vec();
    if gt.height() != full[1] || gt.width() != full[2] {
        return Err(Error::shape("loss_total", format!("gt {:?} vs prediction {full:?}", gt.r.shape())));
    }
    let mut cache: Vec<(usize, GroundTruth)> = Vec::new();
    let mut at = |f: usize| -> Result<GroundTruth> {
        if let Some((_, g)) = cache.iter().find(|(k, _)| *k == f) {
            return Ok(g.clone());
        }
        let g = gt.downsample(f)?;
        cache.push((f, g.clone()));
        Ok(g)
    };
    let count = |w: &[f64]| w.iter().sum::<f64>();

    let g32 = at(32)?;
    let init = match cfg.task {
        Task::Stereo => stereo_ce_node(ctx, trace.init, &g32, 32)?,
        Task::Flow => {
            let n = count(g32.valid.data());
            weighted_l1_node(ctx, trace.init_r, Some(&g32.r), g32.valid.data(), 32.0, n)?
        }
    };
    let mut report = LossReport { init: ctx.g.value(init).item(), ..Default::default() };
    let mut terms = vec![init];
    let mut weights = vec![1.0];

    report.self_weights = discounts(cfg.gamma_loss, trace.self_r.len());
    for (&(f, r), &wt) in trace.self_r.iter().zip(&report.self_weights) {
        let g = at(f)?;
        let n = count(g.valid.data());
        let t = weighted_l1_node(ctx, r, Some(&g.r), g.valid.data(), f as f64, n)?;
        report.self_terms.push(ctx.g.value(t).item());
        terms.push(t);
        weights.push(wt);
    }

    report.cross_weights = discounts(cfg.gamma_loss, trace.cross.len());
    for (step, &wt) in trace.cross.iter().zip(&report.cross_weights) {
        let g = at(step.factor)?;
        let m0 = &step.mask.data()[..g.valid.len()];
        let keep: Vec<f64> = g.valid.data().iter().zip(m0).map(|(v, m)| v * m).collect();
        let n = count(&keep);
        let l1 = weighted_l1_node(ctx, step.r, Some(&g.r), &keep, step.factor as f64, n)?;
        let rc = weighted_l1_node(ctx, step.resid, None, m0, step.factor as f64, m0.len() as f64)?;
        let t = ctx.g.weighted_sum(&[l1, rc], &[1.0, cfg.epsilon])?;
        report.consistency.push(ctx.g.value(rc).item());
        report.cross_terms.push(ctx.g.value(t).item());
        terms.push(t);
        weights.push(wt);
    }
    let total = ctx.g.weighted_sum(&terms, &weights)?;
    report.total = ctx.g.value(total).item();
    Ok((total, report))
}

/// Reference-view disparity `-R_0.x` as `[H, W]`.
pub fn disparity(r: &Tensor) -> Result<Tensor> {
    let ref_view = reference_view(r)?;
    let (h, w) = (ref_view.dim(0), ref_view.dim(1));
    Tensor::new(vec![h, w], ref_view.data().chunks(2).map(|p| -p[0]).collect())
}

/// View 0 of a `[2, h, w, c]` tensor.
pub fn reference_view(r: &Tensor) -> Result<Tensor> {
    if r.rank() != 4 || r.dim(0) != 2 {
        return Err(Error::shape("reference_view", format!("expected [2,h,w,c], got {:?}", r.shape())));
    }
    crate::graph::batch_entry(r, 0)
}

#[cfg(test)]
mod tests;
