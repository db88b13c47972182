//! Closed-form FLOPs and memory counts.
//!
//! "Tensor" FLOPs are the multiply-adds of parameterized layers and dense
//! correlations (two FLOPs each); the three attention terms are the
//! non-parameter work of each MatchAttention layer.

use serde::Serialize;

use crate::decoder::{DecoderConfig, Task};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub qk_flops: u64,
    pub bsm_flops: u64,
    pub agg_flops: u64,
    pub tensor_flops: u64,
    /// Attention weights held by the layers, `H W h (w+1)^2` per layer.
    pub attn_memory: u64,
}

impl FlopsBreakdown {
    pub fn attention_flops(&self) -> u64 {
        self.qk_flops + self.bsm_flops + self.agg_flops
    }

    pub fn total(&self) -> u64 {
        self.attention_flops() + self.tensor_flops
    }

    fn add(&mut self, o: &FlopsBreakdown) {
        self.qk_flops += o.qk_flops;
        self.bsm_flops += o.bsm_flops;
        self.agg_flops += o.agg_flops;
        self.tensor_flops += o.tensor_flops;
        self.attn_memory += o.attn_memory;
    }
}

/// Non-parameter FLOPs of one MatchAttention layer over `h x w` tokens.
pub fn attention_flops(h: u64, w: u64, heads: u64, ck: u64, cv: u64, win: u64) -> FlopsBreakdown {
    let tokens = h * w * heads;
    let e = (win + 1) * (win + 1);
    FlopsBreakdown {
        qk_flops: tokens * ck * e * 2,
        bsm_flops: tokens * (20 + e * 2 + win * win * 4 * 3),
        agg_flops: tokens * cv * e * 2,
        tensor_flops: 0,
        attn_memory: tokens * e,
    }
}

/// One layer with its projections: a cross layer with gate and weight
/// injection whose input and output are `heads * ck` features plus the two
/// relative-position channels.
pub fn flops_count(h: u64, w: u64, heads: u64, ck: u64, cv: u64, win: u64) -> FlopsBreakdown {
    let mut b = attention_flops(h, w, heads, ck, cv, win);
    let c = heads * ck + 2;
    let macs = c * heads * (2 * ck + 2 * cv) + (heads * cv + heads * (win + 1) * (win + 1)) * c;
    b.tensor_flops = 2 * h * w * macs;
    b
}

/// Whole-model count for a `[2, height, width, 3]` input (both views).
pub fn decoder_flops(cfg: &DecoderConfig, height: u64, width: u64) -> FlopsBreakdown {
    let mut total = FlopsBreakdown::default();
    let mut macs = 0u64;
    let px = |f: u64| (height / f) * (width / f);
    let ch = |i: usize| cfg.channels[i] as u64;

    for i in 0..4 {
        let c = ch(i);
        let n = px(4 << i);
        macs += if i == 0 { n * 3 * 49 * c } else { n * ch(i - 1) * 9 * c };
        let hid = c * cfg.mlp_ratio as u64;
        macs += cfg.encoder_depths[i] as u64 * n * (9 * c + c * c + 2 * c * hid);
    }

    let c0 = ch(3);
    let (h32, w32) = (height / 32, width / 32);
    macs += 2 * h32 * w32 * c0 * c0;
    macs += match cfg.task {
        Task::Stereo => h32 * w32 * w32 * c0,
        Task::Flow => (h32 * w32) * (h32 * w32) * c0,
    };

    let heads = cfg.heads as u64;
    for k in 0..4 {
        let c = cfg.level_channels(k) as u64;
        let n = px(cfg.level_factor(k) as u64);
        let win = cfg.windows[k] as u64;
        let e = (win + 1) * (win + 1);
        if k > 0 {
            macs += n * (cfg.level_channels(k - 1) as u64 + c) * c;
        }
        let ck = c / heads;
        let self_in = c + 2 + 2 * heads + cfg.mask_embedding as u64;
        let cross_in = c + 2;
        let hid = c * cfg.glu_ratio as u64;
        let per_block = 3 * self_in * c
            + c * (c + 2 + 2 * heads)
            + (3 + cfg.gated as u64) * cross_in * c
            + (c + if cfg.inject_weights { heads * e } else { 0 }) * cross_in
            + 2 * c * hid
            + 9 * hid
            + hid * c;
        macs += cfg.depths[k] as u64 * n * per_block;
        let attn = attention_flops(height / cfg.level_factor(k) as u64, width / cfg.level_factor(k) as u64, heads, ck, ck, win);
        for _ in 0..2 * cfg.depths[k] {
            total.add(&attn);
        }
        let f = if k < 3 { 2 } else { 4 };
        macs += n * (c * 2 * c + 2 * c * 9 * f * f);
    }
    // Both views run through every layer.
    total.qk_flops *= 2;
    total.bsm_flops *= 2;
    total.agg_flops *= 2;
    total.attn_memory *= 2;
    total.tensor_flops = 2 * 2 * macs;
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_formulas() {
        assert_eq!(attention_flops(8, 8, 4, 32, 32, 3).qk_flops, 262_144);
        let b = attention_flops(1, 1, 1, 1, 1, 3);
        assert_eq!((b.qk_flops, b.agg_flops, b.bsm_flops), (32, 32, 160));
        assert_eq!(attention_flops(64, 64, 4, 8, 8, 3).attn_memory, 262_144);
    }

    #[test]
    fn tiny_preset_attention_matches_published_profile() {
        let t = DecoderConfig::preset("T", Task::Stereo).unwrap();
        let b = decoder_flops(&t, 1536, 1536);
        let g = b.attention_flops() as f64 / 1e9;
        assert!((g - 16.5).abs() < 0.5, "{g}");
    }
}
