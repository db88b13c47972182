//! AdamW, the one-cycle schedule, and the toy overfitting loop.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::decoder::{
    decoder_forward, init_decoder, loss_total, reference_view, stack_views, DecoderConfig, GroundTruth, LossReport,
};
use crate::error::{Error, Result};
use crate::harness::metrics::{compute_metrics, MetricReport};
use crate::harness::scene::SyntheticScene;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Evaluate the endpoint error every this many steps (0 = final only).
    pub eval_every: usize,
    /// Fraction of the steps spent warming up.
    pub warmup: f64,
    /// The schedule starts and ends at `lr / final_div`.
    pub final_div: f64,
    /// Stop after an evaluation whose non-occluded EPE is below this.
    pub target_epe: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            batch: 1,
            seed: 0,
            eval_every: 100,
            warmup: 0.05,
            final_div: 25.0,
            target_epe: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup) || !(self.final_div >= 1.0) {
            return Err(Error::Config("warmup must be in [0, 1) and final_div at least 1".into()));
        }
        Ok(())
    }
}

/// One-cycle learning rate at zero-based `step`: linear warmup from
/// `lr / final_div` to `lr`, then cosine decay back to `lr / final_div`.
pub fn one_cycle_lr(cfg: &TrainConfig, step: usize) -> f64 {
    let lo = cfg.lr / cfg.final_div;
    let warm = (cfg.warmup * cfg.steps as f64).round() as usize;
    if step < warm {
        return lo + (cfg.lr - lo) * step as f64 / warm as f64;
    }
    let rest = cfg.steps.saturating_sub(warm).max(1);
    let t = ((step - warm) as f64 / rest as f64).min(1.0);
    lo + (cfg.lr - lo) * 0.5 * (1.0 + (PI * t).cos())
}

/// One AdamW update of every parameter with learning rate `lr`. Weight
/// decay is decoupled: `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let prec = Precision::current();
    for (_, p) in store.iter_mut() {
        let n = p.value.len();
        for i in 0..n {
            let g = p.grad.data()[i];
            let m = b1 * p.m.data()[i] + (1.0 - b1) * g;
            let v = b2 * p.v.data()[i] + (1.0 - b2) * g * g;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let w = p.value.data()[i];
            let update = (m / c1) / ((v / c2).sqrt() + cfg.eps);
            p.value.data_mut()[i] = prec.round(w * (1.0 - lr * cfg.weight_decay) - lr * update);
        }
    }
}

/// One training example: both views stacked and reference-view ground
/// truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub images: Tensor,
    pub gt: GroundTruth,
    pub noc: Tensor,
}

impl Sample {
    pub fn from_scene(s: &SyntheticScene) -> Result<Sample> {
        Ok(Sample {
            images: stack_views(&s.i0, &s.i1)?,
            gt: GroundTruth::dense(s.r0.clone())?,
            noc: s.noc0.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub l_init: f64,
    pub l_self: f64,
    pub l_cross: f64,
    pub epe: Option<f64>,
}

pub const TRACE_HEADER: &str = "step,loss,l_init,l_self,l_cross,epe";

impl TraceRow {
    pub fn csv(&self) -> String {
        let epe = self.epe.map(|e| format!("{e}")).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.step, self.loss, self.l_init, self.l_self, self.l_cross, epe)
    }
}

pub fn write_trace(rows: &[TraceRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Loss and gradients of one sample, added into `store`'s gradient buffers
/// scaled by `scale`.
pub fn accumulate_sample(store: &mut ParamStore, dcfg: &DecoderConfig, s: &Sample, scale: f64) -> Result<LossReport> {
    let snapshot = store.clone();
    let mut ctx = Ctx::new(&snapshot, true);
    let trace = decoder_forward(&mut ctx, dcfg, &s.images)?;
    let (loss, report) = loss_total(&mut ctx, dcfg, &trace, &s.gt)?;
    let scaled = ctx.g.scale(loss, scale)?;
    let grads = ctx.g.backward(scaled)?;
    ctx.accumulate(&grads, store);
    Ok(report)
}

/// Full-resolution prediction of the reference view, `[H, W, 2]`.
pub fn predict(store: &ParamStore, dcfg: &DecoderConfig, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut ctx = Ctx::new(store, false);
    let trace = decoder_forward(&mut ctx, dcfg, images)?;
    Ok((ctx.g.value(trace.r).clone(), ctx.g.value(trace.sr).clone()))
}

pub fn evaluate(store: &ParamStore, dcfg: &DecoderConfig, s: &Sample) -> Result<MetricReport> {
    let (r, _) = predict(store, dcfg, &s.images)?;
    compute_metrics(&reference_view(&r)?, &s.gt.r, Some(&s.gt.valid), Some(&s.noc))
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub trace: Vec<TraceRow>,
}

/// Overfits `data`. `on_row` sees each trace row as it is produced.
pub fn train_toy(
    data: &[Sample],
    cfg: &TrainConfig,
    dcfg: &DecoderConfig,
    start: Option<ParamStore>,
    mut on_row: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("train_toy", "empty dataset"));
    }
    let mut store = match start {
        Some(s) => s,
        None => init_decoder(dcfg, cfg.seed)?,
    };
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        store.zero_grad();
        let mut rows = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let s = &data[(step * cfg.batch + i) % data.len()];
            rows.push(accumulate_sample(&mut store, dcfg, s, 1.0 / cfg.batch as f64)?);
        }
        let mean = |f: &dyn Fn(&LossReport) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        let loss = mean(&|r| r.total);
        if !loss.is_finite() || loss > 1e6 {
            return Err(Error::Diverged { step, loss });
        }
        adamw_step(&mut store, cfg, one_cycle_lr(cfg, step));
        let last = step + 1 == cfg.steps;
        let epe = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            evaluate(&store, dcfg, &data[0])?.noc.map(|m| m.epe)
        } else {
            None
        };
        let row = TraceRow {
            step,
            loss,
            l_init: mean(&|r| r.init),
            l_self: mean(&|r| r.l_self()),
            l_cross: mean(&|r| r.l_cross()),
            epe,
        };
        on_row(&row);
        trace.push(row);
        if let (Some(t), Some(e)) = (cfg.target_epe, epe) {
            if e < t {
                break;
            }
        }
    }
    Ok(TrainOutcome { store, trace })
}
