use super::*;
use crate::numerics::fd::rel_errors_scaled;
use crate::random::{seeded, uniform_tensor};
use crate::tensor::{with_precision, Precision};

fn images(h: usize, w: usize, seed: u64) -> Tensor {
    uniform_tensor(&[2, h, w, 3], 0.0, 1.0, &mut seeded(seed))
}

fn small(task: Task) -> DecoderConfig {
    DecoderConfig {
        depths: [1, 1, 0, 0],
        ..DecoderConfig::desk(task)
    }
}

fn run(store: &ParamStore, cfg: &DecoderConfig, img: &Tensor, gt: &GroundTruth) -> Result<(f64, ParamStore)> {
    let mut ctx = Ctx::new(store, true);
    let trace = decoder_forward(&mut ctx, cfg, img)?;
    let (loss, _) = loss_total(&mut ctx, cfg, &trace, gt)?;
    let grads = ctx.g.backward(loss)?;
    let mut acc = store.clone();
    acc.zero_grad();
    ctx.accumulate(&grads, &mut acc);
    Ok((ctx.g.value(loss).item(), acc))
}

fn gt_const(h: usize, w: usize, v: (f64, f64)) -> GroundTruth {
    GroundTruth::dense(Tensor::from_fn([h, w, 2], |i| if i % 2 == 0 { v.0 } else { v.1 }).unwrap()).unwrap()
}

#[test]
fn layer_counts() {
    let cfg = DecoderConfig::desk(Task::Stereo);
    let store = init_decoder(&cfg, 1).unwrap();
    let mut ctx = Ctx::new(&store, false);
    let t = decoder_forward(&mut ctx, &cfg, &images(64, 64, 2)).unwrap();
    assert_eq!(t.cross.len(), cfg.num_cross());
    assert_eq!(t.self_r.len(), cfg.num_self());
    assert_eq!(t.alphas.len(), 2 * cfg.num_cross());
    assert_eq!(ctx.g.shape(t.r), &[2, 64, 64, 2]);
    assert_eq!(ctx.g.shape(t.sr), &[2, 64, 64, 2 * cfg.heads]);
    assert_eq!(t.self_r.last().unwrap().0, 1);
}

#[test]
fn stereo_init_signs() {
    let cfg = DecoderConfig::desk(Task::Stereo);
    let store = init_decoder(&cfg, 3).unwrap();
    let mut ctx = Ctx::new(&store, false);
    let t = decoder_forward(&mut ctx, &cfg, &images(64, 128, 4)).unwrap();
    let r = ctx.g.value(t.init_r);
    let half = r.len() / 2;
    assert!(r.data()[..half].chunks(2).all(|p| p[0] <= 0.0 && p[1] == 0.0));
    assert!(r.data()[half..].chunks(2).all(|p| p[0] >= 0.0 && p[1] == 0.0));
}

#[test]
fn attention_weights_are_normalized() {
    let cfg = DecoderConfig::desk(Task::Flow);
    let store = init_decoder(&cfg, 5).unwrap();
    let mut ctx = Ctx::new(&store, false);
    let t = decoder_forward(&mut ctx, &cfg, &images(64, 64, 6)).unwrap();
    for (i, &a) in t.alphas.iter().enumerate() {
        let v = ctx.g.value(a);
        let per = v.last_dim() / cfg.heads;
        for q in v.data().chunks(per) {
            let s: f64 = q.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "layer {i}: {s}");
            assert!(q.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn flow_swaps_with_views_when_correlation_projections_are_tied() {
    let cfg = DecoderConfig::desk(Task::Flow);
    let mut store = init_decoder(&cfg, 7).unwrap();
    let wa = store.value("init.wa").unwrap().clone();
    store.set_value("init.wb", wa).unwrap();
    let img = images(64, 64, 8);
    let n = img.len() / 2;
    let mut sw = img.data()[n..].to_vec();
    sw.extend_from_slice(&img.data()[..n]);
    let swapped = Tensor::new(img.shape().to_vec(), sw).unwrap();
    let mut a = Ctx::new(&store, false);
    let ta = decoder_forward(&mut a, &cfg, &img).unwrap();
    let mut b = Ctx::new(&store, false);
    let tb = decoder_forward(&mut b, &cfg, &swapped).unwrap();
    let (ra, rb) = (a.g.value(ta.r).data(), b.g.value(tb.r).data());
    let m = ra.len() / 2;
    assert_eq!(&ra[..m], &rb[m..]);
    assert_eq!(&ra[m..], &rb[..m]);
}

#[test]
fn loss_terms_follow_discounts() {
    with_precision(Precision::F64, loss_terms_follow_discounts_f64);
}

fn loss_terms_follow_discounts_f64() {
    let cfg = DecoderConfig::desk(Task::Stereo);
    let store = init_decoder(&cfg, 9).unwrap();
    let mut ctx = Ctx::new(&store, true);
    let t = decoder_forward(&mut ctx, &cfg, &images(64, 64, 10)).unwrap();
    let (loss, rep) = loss_total(&mut ctx, &cfg, &t, &gt_const(64, 64, (-4.0, 0.0))).unwrap();
    assert_eq!(rep.self_terms.len(), cfg.num_self());
    assert_eq!(rep.cross_terms.len(), cfg.num_cross());
    assert!(rep.self_weights.windows(2).all(|w| w[0] < w[1]));
    let total = rep.init + rep.l_self() + rep.l_cross();
    assert!((total - ctx.g.value(loss).item()).abs() < 1e-9 * total.abs().max(1.0));
    assert!((rep.total - ctx.g.value(loss).item()).abs() == 0.0);
}

#[test]
fn cross_term_with_unit_error() {
    with_precision(Precision::F64, cross_term_with_unit_error_f64);
}

fn cross_term_with_unit_error_f64() {
    let s = ParamStore::new();
    let mut ctx = Ctx::new(&s, true);
    let (h, w, f) = (2, 3, 4);
    let gt = gt_const(h * f, w * f, (-8.0, 0.0));
    let pred = Tensor::from_fn([2, h, w, 2], |i| match (i / (h * w * 2), i % 2) {
        (0, 0) => -1.75,
        (1, 0) => 2.0,
        _ => 0.0,
    })
    .unwrap();
    let r = ctx.g.param(pred);
    let resid = consistency_node(&mut ctx, r).unwrap();
    let mask = noc_mask(ctx.g.value(resid), 1.0).unwrap();
    let trace = DecoderTrace {
        init: r,
        init_r: r,
        self_r: vec![],
        cross: vec![CrossStep { factor: f, r, resid, mask }],
        alphas: vec![],
        r,
        sr: r,
        noc: Tensor::zeros([1]),
    };
    let g = gt.downsample(f).unwrap();
    let keep: Vec<f64> = g.valid.data().to_vec();
    let l1 = weighted_l1_node(&mut ctx, trace.cross[0].r, Some(&g.r), &keep, f as f64, keep.len() as f64).unwrap();
    assert_eq!(ctx.g.value(l1).item(), 1.0);
    let res = ctx.g.value(resid).data()[0].abs() * f as f64;
    assert_eq!(res, 1.0);
    let m0 = &trace.cross[0].mask.data()[..h * w];
    assert!(m0.iter().all(|&m| m == 1.0));
    let rc = weighted_l1_node(&mut ctx, resid, None, m0, f as f64, m0.len() as f64).unwrap();
    let t = ctx.g.weighted_sum(&[l1, rc], &[1.0, 0.01]).unwrap();
    assert!((ctx.g.value(t).item() - (1.0 + 0.01 * res)).abs() < 1e-12);
}

#[test]
fn perfect_prediction_has_zero_l1() {
    let s = ParamStore::new();
    let mut ctx = Ctx::new(&s, true);
    let gt = gt_const(8, 8, (-4.0, 0.0));
    let pred = Tensor::from_fn([2, 2, 2, 2], |i| match (i / 8, i % 2) {
        (0, 0) => -1.0,
        (1, 0) => 1.0,
        _ => 0.0,
    })
    .unwrap();
    let r = ctx.g.param(pred);
    let g = gt.downsample(4).unwrap();
    let l1 = weighted_l1_node(&mut ctx, r, Some(&g.r), g.valid.data(), 4.0, 4.0).unwrap();
    let resid = consistency_node(&mut ctx, r).unwrap();
    assert_eq!(ctx.g.value(l1).item(), 0.0);
    assert!(ctx.g.value(resid).data().iter().all(|&v| v == 0.0));
}

#[test]
fn occluded_gt_does_not_reach_cross_l1() {
    with_precision(Precision::F64, || {
        let cfg = small(Task::Stereo);
        let store = init_decoder(&cfg, 11).unwrap();
        let img = images(32, 64, 12);
        let gt = gt_const(32, 64, (-3.0, 0.0));
        let mut ctx = Ctx::new(&store, true);
        let t = decoder_forward(&mut ctx, &cfg, &img).unwrap();
        let mut zeros = 0;
        for step in &t.cross {
            let grad_of = |ctx: &mut Ctx, gt: &GroundTruth| -> Vec<f64> {
                let g = gt.downsample(step.factor).unwrap();
                let m0 = &step.mask.data()[..g.valid.len()];
                let keep: Vec<f64> = g.valid.data().iter().zip(m0).map(|(v, m)| v * m).collect();
                let n = keep.iter().sum();
                let l1 = weighted_l1_node(ctx, step.r, Some(&g.r), &keep, step.factor as f64, n).unwrap();
                let grads = ctx.g.backward(l1).unwrap();
                ctx.bound().flat_map(|(_, &v)| grads.get(v).map(|t| t.data().to_vec()).unwrap_or_default()).collect()
            };
            let f = step.factor;
            let w = 64 / f;
            let mut r = gt.r.clone();
            for (p, &m) in step.mask.data()[..(32 / f) * w].iter().enumerate() {
                if m == 0.0 {
                    zeros += 1;
                    for yy in (p / w) * f..(p / w + 1) * f {
                        for xx in (p % w) * f..(p % w + 1) * f {
                            r.data_mut()[(yy * 64 + xx) * 2] = 0.0;
                        }
                    }
                }
            }
            let base = grad_of(&mut ctx, &gt);
            assert_eq!(base, grad_of(&mut ctx, &GroundTruth::dense(r).unwrap()));
        }
        assert!(zeros > 0);
    });
}

#[test]
fn end_to_end_gradient_reaches_encoder() {
    with_precision(Precision::F64, || {
        let cfg = small(Task::Stereo);
        let store = init_decoder(&cfg, 13).unwrap();
        let img = images(32, 64, 14);
        let gt = gt_const(32, 64, (-3.5, 0.0));
        let (_, acc) = run(&store, &cfg, &img, &gt).unwrap();
        let name = "enc.s0.down";
        let analytic = acc.param(name).unwrap().grad.clone();
        assert!(analytic.data().iter().any(|&g| g != 0.0));
        let base = store.value(name).unwrap().clone();
        let idx: Vec<usize> = (0..base.len()).step_by(37).collect();
        let eval = |delta: f64, i: usize| -> f64 {
            let mut s = store.clone();
            let mut v = base.clone();
            v.data_mut()[i] += delta;
            s.set_value(name, v).unwrap();
            let mut ctx = Ctx::new(&s, false);
            let t = decoder_forward(&mut ctx, &cfg, &img).unwrap();
            let (l, _) = loss_total(&mut ctx, &cfg, &t, &gt).unwrap();
            ctx.g.value(l).item()
        };
        let h = 1e-5;
        let numeric: Vec<f64> = idx.iter().map(|&i| (eval(h, i) - eval(-h, i)) / (2.0 * h)).collect();
        let picked: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
        let a = Tensor::new(vec![picked.len()], picked).unwrap();
        let n = Tensor::new(vec![numeric.len()], numeric).unwrap();
        let errs = rel_errors_scaled(&a, &n);
        let ok = errs.iter().filter(|&&e| e < 1e-4).count();
        assert!(ok * 100 >= errs.len() * 99, "{errs:?}");
        assert!(errs.iter().all(|&e| e < 1e-3), "{errs:?}");
    });
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = DecoderConfig::desk(Task::Stereo);
    let store = init_decoder(&cfg, 15).unwrap();
    let img = images(64, 64, 16);
    let gt = gt_const(64, 64, (-2.5, 0.0));
    let (_, acc) = run(&store, &cfg, &img, &gt).unwrap();
    for (name, p) in acc.iter() {
        assert!(p.grad.data().iter().any(|&g| g != 0.0), "{name} has no gradient");
    }
}
