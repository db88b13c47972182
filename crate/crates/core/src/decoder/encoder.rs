//! Convolutional feature pyramid at 1/4, 1/8, 1/16 and 1/32 scale.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::numerics::{Activation, ConvParams};
use crate::params::{Ctx, Init};

use super::config::DecoderConfig;

pub fn init_encoder(init: &mut Init, cfg: &DecoderConfig) {
    for (i, &c) in cfg.channels.iter().enumerate() {
        let p = format!("enc.s{i}");
        if i == 0 {
            init.conv(&format!("{p}.down"), c, 3, 7);
        } else {
            init.layer_norm(&format!("{p}.pre"), cfg.channels[i - 1]);
            init.conv(&format!("{p}.down"), c, cfg.channels[i - 1], 3);
        }
        init.zeros(&format!("{p}.down_b"), &[c]);
        for j in 0..cfg.encoder_depths[i] {
            let b = format!("{p}.b{j}");
            let hid = c * cfg.mlp_ratio;
            init.layer_norm(&format!("{b}.ln1"), c);
            init.conv(&format!("{b}.dw"), c, 1, 3);
            init.zeros(&format!("{b}.dw_b"), &[c]);
            init.linear(&format!("{b}.pw"), c, c);
            init.zeros(&format!("{b}.pw_b"), &[c]);
            init.layer_norm(&format!("{b}.ln2"), c);
            init.linear(&format!("{b}.fc1"), c, hid);
            init.zeros(&format!("{b}.fc1_b"), &[hid]);
            init.linear(&format!("{b}.fc2"), hid, c);
            init.zeros(&format!("{b}.fc2_b"), &[c]);
        }
    }
}

pub(crate) fn layer_norm(ctx: &mut Ctx, name: &str, x: Var) -> Result<Var> {
    let g = ctx.p(&format!("{name}.g"))?;
    let b = ctx.p(&format!("{name}.b"))?;
    ctx.g.layer_norm(x, g, b)
}

pub(crate) fn dense(ctx: &mut Ctx, name: &str, x: Var, bias: bool) -> Result<Var> {
    let w = ctx.p(name)?;
    let b = if bias { Some(ctx.p(&format!("{name}_b"))?) } else { None };
    ctx.g.linear(x, w, b)
}

/// Features of both views, finest first. `images` is `[2, H, W, 3]` with
/// `H` and `W` divisible by 32.
pub fn encoder_forward(ctx: &mut Ctx, cfg: &DecoderConfig, images: Var) -> Result<[Var; 4]> {
    let s = ctx.g.shape(images).to_vec();
    if s.len() != 4 || s[3] != 3 || s[1] % 32 != 0 || s[2] % 32 != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::invalid("encoder", format!("images {s:?} must be [b, 32m, 32n, 3]")));
    }
    let mut x = images;
    let mut out = Vec::with_capacity(4);
    for (i, &c) in cfg.channels.iter().enumerate() {
        let p = format!("enc.s{i}");
        let k = ctx.p(&format!("{p}.down"))?;
        let b = ctx.p(&format!("{p}.down_b"))?;
        x = if i == 0 {
            ctx.g.conv2d(x, k, Some(b), ConvParams::new(4, 3, 1))?
        } else {
            let n = layer_norm(ctx, &format!("{p}.pre"), x)?;
            ctx.g.conv2d(n, k, Some(b), ConvParams::new(2, 1, 1))?
        };
        for j in 0..cfg.encoder_depths[i] {
            let bn = format!("{p}.b{j}");
            let n = layer_norm(ctx, &format!("{bn}.ln1"), x)?;
            let dk = ctx.p(&format!("{bn}.dw"))?;
            let db = ctx.p(&format!("{bn}.dw_b"))?;
            let d = ctx.g.conv2d(n, dk, Some(db), ConvParams::new(1, 1, c))?;
            let pw = dense(ctx, &format!("{bn}.pw"), d, true)?;
            x = ctx.g.add(x, pw)?;
            let n = layer_norm(ctx, &format!("{bn}.ln2"), x)?;
            let h = dense(ctx, &format!("{bn}.fc1"), n, true)?;
            let h = ctx.g.activation(h, Activation::Gelu)?;
            let h = dense(ctx, &format!("{bn}.fc2"), h, true)?;
            x = ctx.g.add(x, h)?;
        }
        out.push(x);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::config::Task;
    use crate::params::ParamStore;
    use crate::random::{random_tensor, seeded};
    use crate::tensor::Tensor;

    fn store(cfg: &DecoderConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_encoder(&mut Init { store: &mut s, rng: seeded(3) }, cfg);
        s
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = DecoderConfig::desk(Task::Stereo);
        let s = store(&cfg);
        let mut ctx = Ctx::new(&s, false);
        let img = ctx.g.constant(random_tensor(&[2, 64, 64, 3], 1));
        let f = encoder_forward(&mut ctx, &cfg, img).unwrap();
        let dims: Vec<Vec<usize>> = f.iter().map(|&v| ctx.g.shape(v).to_vec()).collect();
        assert_eq!(dims, vec![vec![2, 16, 16, 16], vec![2, 8, 8, 24], vec![2, 4, 4, 32], vec![2, 2, 2, 48]]);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cfg = DecoderConfig::desk(Task::Stereo);
        let s = store(&cfg);
        let mut ctx = Ctx::new(&s, false);
        let img = ctx.g.constant(Tensor::zeros([2, 32, 32, 3]));
        let f = encoder_forward(&mut ctx, &cfg, img).unwrap();
        for v in f {
            assert!(ctx.g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rejects_indivisible_extents() {
        let cfg = DecoderConfig::desk(Task::Stereo);
        let s = store(&cfg);
        let mut ctx = Ctx::new(&s, false);
        let img = ctx.g.constant(Tensor::zeros([2, 48, 32, 3]));
        assert!(encoder_forward(&mut ctx, &cfg, img).is_err());
    }
}
