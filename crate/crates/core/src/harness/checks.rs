//! Self-contained verification routines shared by `selftest`, `gradcheck`
//! and the acceptance run. Each returns a [`Check`] with a one-line summary.

use std::fmt;

use rand::Rng;

use crate::attention::{
    concat_rpos, core_forward, gather_window, global_attention, init_attention, match_attention, AttnConfig, CoreSpec,
    Similarity,
};
use crate::bsm::{bilinear_softmax_backward, bilinear_softmax_forward, bilinear_softmax_reference, nw_window_softmax};
use crate::decoder::{
    consistency_check, decoder_forward, init_decoder, loss::weighted_l1_node, loss_total, DecoderConfig, GroundTruth,
    Task,
};
use crate::error::Result;
use crate::harness::flops::attention_flops;
use crate::harness::io::{decode_flo, decode_pfm, encode_flo, encode_pfm};
use crate::harness::metrics::compute_metrics;
use crate::harness::scene::{gen_scene, SceneKind, SceneParams};
use crate::numerics::fd::{finite_diff_grad, rel_errors_scaled, GradCheck};
use crate::params::{Ctx, Init, ParamStore};
use crate::random::{random_tensor, seeded, uniform_tensor};
use crate::tensor::{with_precision, Precision, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Gradient tolerance: relative error below `tol` on at least `fraction` of
/// the entries and below `worst` everywhere.
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_WORST: f64 = 1e-3;
pub const GRAD_FRACTION: f64 = 0.99;
pub const GRAD_STEP: f64 = 1e-5;

pub fn grad_verdict(name: &str, g: &GradCheck) -> Check {
    let frac = g.fraction_within();
    Check::new(
        name,
        g.entries > 0 && frac >= GRAD_FRACTION && g.worst < GRAD_WORST,
        format!("{} entries, {:.4} within {GRAD_TOL:e}, worst {:.2e}", g.entries, frac, g.worst),
    )
}

fn random_frac(rng: &mut impl Rng) -> (f64, f64) {
    (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
}

/// Fused BilinearSoftmax against the unfused reference.
pub fn bsm_oracle(instances: usize, seed: u64) -> Result<Check> {
    with_precision(Precision::F64, || {
        let mut rng = seeded(seed);
        let mut worst = 0.0f64;
        for w in [1usize, 3, 5] {
            for _ in 0..instances {
                let sim = uniform_tensor(&[(w + 1) * (w + 1)], -4.0, 4.0, &mut rng).into_data();
                let frac = random_frac(&mut rng);
                let a = bilinear_softmax_forward(&sim, frac, w)?;
                let b = bilinear_softmax_reference(&sim, frac, w)?;
                for (x, y) in a.weights.iter().zip(&b.weights) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        Ok(Check::new(
            "bilinear softmax fused vs reference",
            worst < 1e-12,
            format!("{instances} instances per w in {{1,3,5}}, max abs diff {worst:.2e}"),
        ))
    })
}

/// Zero fractional offset reduces to a plain softmax over the nw
/// sub-window, and zero offsets with dot similarity reduce MatchAttention
/// to dense attention over the window.
pub fn reductions(seed: u64) -> Result<Check> {
    with_precision(Precision::F64, || {
        let mut rng = seeded(seed);
        let mut soft = 0.0f64;
        for w in [1usize, 3, 5] {
            for _ in 0..100 {
                let sim = uniform_tensor(&[(w + 1) * (w + 1)], -4.0, 4.0, &mut rng).into_data();
                let a = bilinear_softmax_forward(&sim, (0.0, 0.0), w)?;
                for (x, y) in a.weights.iter().zip(nw_window_softmax(&sim, w)) {
                    soft = soft.max((x - y).abs());
                }
            }
        }

        let (side, win, c) = (6, 5, 4);
        let spec = CoreSpec {
            window: win,
            heads: 1,
            ck: c,
            cv: 3,
            similarity: Similarity::Dot,
            per_head_r: false,
        };
        let q = random_tensor(&[1, side, side, c], seed + 1);
        let k = random_tensor(&[1, side, side, c], seed + 2);
        let v = random_tensor(&[1, side, side, 3], seed + 3);
        let out = core_forward(&spec, &q, &k, &v, &Tensor::zeros([1, side, side, 2]))?;
        let (kk, vv) = (k.clone().reshape([side, side, c])?, v.clone().reshape([side, side, 3])?);
        let mut dense = 0.0f64;
        let half = win / 2;
        for y in half..side - half {
            for x in half..side - half {
                // The dense oracle sees exactly the w x w tokens around the
                // query.
                let (kw, _, _) = gather_window(&kk, (x as f64, y as f64), win)?;
                let (vw, _, _) = gather_window(&vv, (x as f64, y as f64), win)?;
                let pick = |t: &Tensor, ch: usize| -> Result<Tensor> {
                    let e = win + 1;
                    let mut d = Vec::new();
                    for r in 0..win {
                        for cc in 0..win {
                            d.extend_from_slice(&t.data()[(r * e + cc) * ch..(r * e + cc + 1) * ch]);
                        }
                    }
                    Tensor::new(vec![win * win, ch], d)
                };
                let p = y * side + x;
                let qp = Tensor::new(vec![1, c], q.data()[p * c..(p + 1) * c].to_vec())?;
                let g = global_attention(&qp, &pick(&kw, c)?, &pick(&vw, 3)?, spec.gamma())?;
                for ch in 0..3 {
                    dense = dense.max((out.data()[p * spec.out_channels() + ch] - g.data()[ch]).abs());
                }
            }
        }
        Ok(Check::new(
            "reductions to plain and dense softmax",
            soft <= 1e-15 && dense < 1e-10,
            format!("zero-offset max diff {soft:.2e}; 6x6 w=5 interior vs dense {dense:.2e}"),
        ))
    })
}

fn random_images(h: usize, w: usize, seed: u64) -> Tensor {
    uniform_tensor(&[2, h, w, 3], 0.0, 1.0, &mut seeded(seed))
}

/// Every query of every attention layer of a randomly initialized decoder
/// has weights summing to one.
pub fn decoder_normalization(task: Task, h: usize, w: usize, seed: u64) -> Result<Check> {
    with_precision(Precision::F64, || {
        let cfg = DecoderConfig::desk(task);
        let store = init_decoder(&cfg, seed)?;
        let mut ctx = Ctx::new(&store, false);
        let t = decoder_forward(&mut ctx, &cfg, &random_images(h, w, seed + 1))?;
        let (mut worst, mut negative, mut queries) = (0.0f64, 0usize, 0usize);
        for &a in &t.alphas {
            let v = ctx.g.value(a);
            for q in v.data().chunks(v.last_dim() / cfg.heads) {
                queries += 1;
                worst = worst.max((q.iter().sum::<f64>() - 1.0).abs());
                negative += q.iter().filter(|&&x| x < 0.0).count();
            }
        }
        Ok(Check::new(
            format!("attention normalization ({task:?})"),
            worst <= 1e-6 && negative == 0 && queries > 0,
            format!("{} layers, {queries} query-heads, max |sum-1| {worst:.2e}, negatives {negative}", t.alphas.len()),
        ))
    })
}

/// BilinearSoftmax gradients with respect to similarities and the
/// fractional offset.
pub fn grad_bsm(seed: u64) -> Result<Check> {
    with_precision(Precision::F64, || {
        let mut rng = seeded(seed);
        let mut total = GradCheck::default();
        for w in [1usize, 3, 5] {
            for _ in 0..5 {
                let n = (w + 1) * (w + 1);
                let sim = uniform_tensor(&[n], -3.0, 3.0, &mut rng);
                let up = uniform_tensor(&[n], -1.0, 1.0, &mut rng).into_data();
                let frac = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
                let obj = |s: &[f64], f: (f64, f64)| -> Result<f64> {
                    let a = bilinear_softmax_forward(s, f, w)?;
                    Ok(a.weights.iter().zip(&up).map(|(a, b)| a * b).sum())
                };
                let a = bilinear_softmax_forward(sim.data(), frac, w)?;
                let (gs, gf) = bilinear_softmax_backward(sim.data(), &a, &up)?;
                let fs = finite_diff_grad(|t| obj(t.data(), frac), &sim, GRAD_STEP)?;
                total.merge(&GradCheck::new(&rel_errors_scaled(&gs, &fs), GRAD_TOL));
                let ft = Tensor::new([2], vec![frac.0, frac.1])?;
                let ff = finite_diff_grad(|t| obj(sim.data(), (t.data()[0], t.data()[1])), &ft, GRAD_STEP)?;
                let ag = Tensor::new([2], vec![gf.0, gf.1])?;
                total.merge(&GradCheck::new(&rel_errors_scaled(&ag, &ff), GRAD_TOL));
            }
        }
        Ok(grad_verdict("gradient: bilinear softmax wrt sim and frac", &total))
    })
}

/// A gated cross MatchAttention layer with weight injection: every weight,
/// the input features, the relative positions and beta.
pub fn grad_layer(seed: u64) -> Result<Check> {
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
        let mut init = Init {
            store: &mut store,
            rng: seeded(seed),
        };
        init_attention(&mut init, "a", &cfg, 8, 8);
        init.full("a.beta", &[2], 0.3);
        let f = random_tensor(&[2, 4, 5, 6], seed + 1);
        let r = random_tensor(&[2, 4, 5, 2], seed + 2).map(|x| x * 3.0)?;
        let wts = random_tensor(&[2, 4, 5, 8], seed + 3);
        let run = |store: &ParamStore, f: &Tensor, r: &Tensor, record: bool| -> Result<(f64, Vec<Tensor>, ParamStore)> {
            let mut ctx = Ctx::new(store, record);
            let fv = ctx.g.param(f.clone());
            let rv = ctx.g.param(r.clone());
            let beta = ctx.p("a.beta")?;
            let xh = concat_rpos(&mut ctx, fv, rv, beta, &[])?;
            let o = match_attention(&mut ctx, "a", &cfg, xh, rv)?;
            let l = ctx.g.dot_const(o.out, &wts)?;
            let value = ctx.g.value(l).item();
            let mut acc = store.clone();
            if !record {
                return Ok((value, vec![], acc));
            }
            let grads = ctx.g.backward(l)?;
            acc.zero_grad();
            ctx.accumulate(&grads, &mut acc);
            let inputs = [fv, rv].iter().map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(ctx.g.shape(v).to_vec()))).collect();
            Ok((value, inputs, acc))
        };
        let (_, inputs, grads) = run(&store, &f, &r, true)?;
        let mut total = GradCheck::default();
        let fd_f = finite_diff_grad(|t| Ok(run(&store, t, &r, false)?.0), &f, GRAD_STEP)?;
        let fd_r = finite_diff_grad(|t| Ok(run(&store, &f, t, false)?.0), &r, GRAD_STEP)?;
        total.merge(&GradCheck::new(&rel_errors_scaled(&inputs[0], &fd_f), GRAD_TOL));
        total.merge(&GradCheck::new(&rel_errors_scaled(&inputs[1], &fd_r), GRAD_TOL));
        for (name, p) in store.iter() {
            let fd = finite_diff_grad(
                |t| {
                    let mut s = store.clone();
                    s.set_value(name, t.clone())?;
                    Ok(run(&s, &f, &r, false)?.0)
                },
                &p.value,
                GRAD_STEP,
            )?;
            let analytic = &grads.param(name).expect("same names").grad;
            total.merge(&GradCheck::new(&rel_errors_scaled(analytic, &fd), GRAD_TOL));
        }
        Ok(grad_verdict("gradient: MatchAttention layer wrt weights, F, R, beta", &total))
    })
}

/// The small decoder used by the end-to-end gradient check.
pub fn gradcheck_decoder(task: Task) -> DecoderConfig {
    DecoderConfig {
        depths: [1, 1, 0, 0],
        ..DecoderConfig::desk(task)
    }
}

/// End-to-end decoder loss against the first encoder convolution on a
/// 32x64 input. Every `stride`-th kernel entry and every bias entry is
/// perturbed.
pub fn grad_decoder(seed: u64, stride: usize) -> Result<Check> {
    with_precision(Precision::F64, || {
        let cfg = gradcheck_decoder(Task::Stereo);
        let store = init_decoder(&cfg, seed)?;
        let (h, w) = (32, 64);
        let img = random_images(h, w, seed + 1);
        let scene_r = Tensor::from_fn([h, w, 2], |i| if i % 2 == 0 { -3.5 + 0.01 * (i / 2 % w) as f64 } else { 0.0 })?;
        let gt = GroundTruth::dense(scene_r)?;
        let loss_of = |s: &ParamStore, record: bool| -> Result<(f64, ParamStore)> {
            let mut ctx = Ctx::new(s, record);
            let t = decoder_forward(&mut ctx, &cfg, &img)?;
            let (l, _) = loss_total(&mut ctx, &cfg, &t, &gt)?;
            let v = ctx.g.value(l).item();
            let mut acc = s.clone();
            if record {
                let grads = ctx.g.backward(l)?;
                acc.zero_grad();
                ctx.accumulate(&grads, &mut acc);
            }
            Ok((v, acc))
        };
        let (_, acc) = loss_of(&store, true)?;
        let mut total = GradCheck::default();
        for (name, step) in [("enc.s0.down", stride.max(1)), ("enc.s0.down_b", 1)] {
            let base = store.value(name).expect("encoder stem").clone();
            let idx: Vec<usize> = (0..base.len()).step_by(step).collect();
            let mut numeric = Vec::with_capacity(idx.len());
            for &i in &idx {
                let at = |d: f64| -> Result<f64> {
                    let mut s = store.clone();
                    let mut v = base.clone();
                    v.data_mut()[i] += d;
                    s.set_value(name, v)?;
                    Ok(loss_of(&s, false)?.0)
                };
                numeric.push((at(GRAD_STEP)? - at(-GRAD_STEP)?) / (2.0 * GRAD_STEP));
            }
            let analytic: Vec<f64> = idx.iter().map(|&i| acc.param(name).unwrap().grad.data()[i]).collect();
            let a = Tensor::new(vec![idx.len()], analytic)?;
            let n = Tensor::new(vec![idx.len()], numeric)?;
            total.merge(&GradCheck::new(&rel_errors_scaled(&a, &n), GRAD_TOL));
        }
        Ok(grad_verdict("gradient: decoder loss wrt first encoder layer", &total))
    })
}

/// Hand-evaluated single-layer counts:
/// `(H, W, h, c_k, c_v, w) -> (qk, bsm, agg, memory)`.
pub const FLOPS_FIXTURES: [((u64, u64, u64, u64, u64, u64), (u64, u64, u64, u64)); 5] = [
    ((8, 8, 4, 32, 32, 3), (262_144, 40_960, 262_144, 4_096)),
    ((1, 1, 1, 1, 1, 3), (32, 160, 32, 16)),
    ((64, 64, 4, 8, 8, 3), (4_194_304, 2_621_440, 4_194_304, 262_144)),
    ((16, 32, 2, 16, 8, 5), (1_179_648, 401_408, 589_824, 36_864)),
    ((48, 48, 4, 40, 40, 5), (26_542_080, 3_612_672, 26_542_080, 331_776)),
];

pub fn flops_formulas() -> Check {
    let mut bad = Vec::new();
    for (i, &((h, w, heads, ck, cv, win), want)) in FLOPS_FIXTURES.iter().enumerate() {
        let b = attention_flops(h, w, heads, ck, cv, win);
        if (b.qk_flops, b.bsm_flops, b.agg_flops, b.attn_memory) != want {
            bad.push(i);
        }
    }
    Check::new(
        "FLOPs formulas",
        bad.is_empty(),
        format!("{} fixed configurations, mismatches {bad:?}", FLOPS_FIXTURES.len()),
    )
}

/// PFM and `.flo` write-then-read on random fields of F32-representable
/// values.
pub fn io_round_trips(fields: usize, seed: u64) -> Result<Check> {
    let mut rng = seeded(seed);
    let mut failures = 0;
    for i in 0..fields {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let mut values = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1e3f32..1e3) as f64).collect() };
        let pfm = if i % 2 == 0 {
            Tensor::new(vec![h, w], values(h * w))?
        } else {
            Tensor::new(vec![h, w, 3], values(h * w * 3))?
        };
        let flo = Tensor::new(vec![h, w, 2], values(h * w * 2))?;
        let same = |a: &Tensor, b: &Tensor| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same(&pfm, &decode_pfm(&encode_pfm(&pfm)?)?) || !same(&flo, &decode_flo(&encode_flo(&flo)?)?) {
            failures += 1;
        }
    }
    Ok(Check::new(
        "PFM and .flo round trips",
        failures == 0,
        format!("{fields} random fields each, {failures} not bitwise identical"),
    ))
}

/// Generated ground truth passes the consistency check with zero residual
/// on its non-occluded pixels.
pub fn scene_consistency(seed: u64) -> Result<Check> {
    with_precision(Precision::F64, || {
        let mut worst = 0.0f64;
        for kind in [SceneKind::ConstantShift, SceneKind::TwoLayer, SceneKind::SmoothWarp] {
            let s = gen_scene(kind, 48, 96, &SceneParams::default(), seed)?;
            let (_, _, res0, res1) = consistency_check(&s.r0, &s.r1, 1.0)?;
            for (res, noc) in [(&res0, &s.noc0), (&res1, &s.noc1)] {
                for (r, m) in res.data().iter().zip(noc.data()) {
                    if *m > 0.0 {
                        worst = worst.max(*r);
                    }
                }
            }
        }
        Ok(Check::new(
            "scene ground truth consistency",
            worst < 1e-9,
            format!("three kinds, max non-occluded residual {worst:.2e}"),
        ))
    })
}

/// `compute_metrics` against a direct per-pixel recount.
pub fn metrics_double_entry(seed: u64) -> Result<Check> {
    with_precision(Precision::F64, || metrics_double_entry_f64(seed))
}

fn metrics_double_entry_f64(seed: u64) -> Result<Check> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let gt = uniform_tensor(&[h, w, 2], -40.0, 40.0, &mut rng);
        let noise = uniform_tensor(&[h, w, 2], -5.0, 5.0, &mut rng);
        let pred = Tensor::new(vec![h, w, 2], gt.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())?;
        let noc = Tensor::new(vec![h, w], (0..h * w).map(|i| if i == 0 || rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect())?;
        let rep = compute_metrics(&pred, &gt, None, Some(&noc))?;
        let m = rep.noc.expect("noc region");
        let (mut n, mut epe, mut bad1, mut d1) = (0.0, 0.0, 0.0, 0.0);
        for p in 0..h * w {
            if noc.data()[p] == 0.0 {
                continue;
            }
            let e = noise.data()[2 * p].hypot(noise.data()[2 * p + 1]);
            let g = gt.data()[2 * p].hypot(gt.data()[2 * p + 1]);
            n += 1.0;
            epe += e;
            bad1 += (e > 1.0) as u8 as f64;
            d1 += (e > 3.0 && e > 0.05 * g) as u8 as f64;
        }
        for (a, b) in [(m.epe, epe / n), (m.bad[1], bad1 / n), (m.d1, d1 / n)] {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Check::new(
        "metrics double entry",
        worst < 1e-9,
        format!("20 random pairs, max diff {worst:.2e}"),
    ))
}

/// For each cross layer, zeroing ground truth on the full-resolution pixels
/// whose block that layer marks occluded leaves the gradient of its masked
/// L1 term unchanged, bit for bit.
pub fn cross_l1_isolation(store: &ParamStore, cfg: &DecoderConfig, images: &Tensor, gt: &GroundTruth) -> Result<Check> {
    let mut ctx = Ctx::new(store, true);
    let t = decoder_forward(&mut ctx, cfg, images)?;
    let (hh, ww) = (gt.height(), gt.width());
    let (mut zeroed, mut changed) = (0usize, 0usize);
    for step in &t.cross {
        let f = step.factor;
        let grad_of = |ctx: &mut Ctx, gt: &GroundTruth| -> Result<Vec<u64>> {
            let g = gt.downsample(f)?;
            let m0 = &step.mask.data()[..g.valid.len()];
            let keep: Vec<f64> = g.valid.data().iter().zip(m0).map(|(v, m)| v * m).collect();
            let n = keep.iter().sum::<f64>().max(1.0);
            let l1 = weighted_l1_node(ctx, step.r, Some(&g.r), &keep, f as f64, n)?;
            let grads = ctx.g.backward(l1)?;
            Ok(ctx
                .bound()
                .flat_map(|(_, &v)| grads.get(v).map(|t| t.data().iter().map(|x| x.to_bits()).collect()).unwrap_or_else(Vec::new))
                .collect())
        };
        let w = ww / f;
        let mut r = gt.r.clone();
        for (p, &m) in step.mask.data()[..(hh / f) * w].iter().enumerate() {
            if m == 0.0 {
                zeroed += 1;
                for yy in (p / w) * f..(p / w + 1) * f {
                    for xx in (p % w) * f..(p % w + 1) * f {
                        r.data_mut()[(yy * ww + xx) * 2] = 0.0;
                        r.data_mut()[(yy * ww + xx) * 2 + 1] = 0.0;
                    }
                }
            }
        }
        let perturbed = GroundTruth::new(r, gt.valid.clone())?;
        if grad_of(&mut ctx, gt)? != grad_of(&mut ctx, &perturbed)? {
            changed += 1;
        }
    }
    Ok(Check::new(
        "occluded ground truth is isolated from cross L1",
        changed == 0 && zeroed > 0,
        format!("{} cross layers, {zeroed} occluded blocks zeroed, {changed} layers with changed gradients", t.cross.len()),
    ))
}
