//! Stereo and flow error metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BAD_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RegionMetrics {
    pub count: usize,
    /// Mean endpoint error.
    pub epe: f64,
    /// Fraction of pixels with endpoint error above each of
    /// [`BAD_THRESHOLDS`].
    pub bad: [f64; 4],
    /// Fraction with error above 3 px and above 5% of the ground truth
    /// magnitude.
    pub d1: f64,
    /// Mean absolute error of the x component (disparity error for stereo).
    pub avg_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub all: RegionMetrics,
    pub noc: Option<RegionMetrics>,
}

pub const METRICS_HEADER: &str = "region,count,epe,bad_0.5,bad_1,bad_2,bad_3,d1,avg_err";

impl RegionMetrics {
    fn csv(&self, region: &str) -> String {
        format!(
            "{region},{},{},{},{},{},{},{},{}",
            self.count, self.epe, self.bad[0], self.bad[1], self.bad[2], self.bad[3], self.d1, self.avg_err
        )
    }
}

impl MetricReport {
    /// Header plus one row per region.
    pub fn csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n{}\n", self.all.csv("all"));
        if let Some(n) = &self.noc {
            s.push_str(&n.csv("noc"));
            s.push('\n');
        }
        s
    }
}

fn region(pred: &[f64], gt: &[f64], keep: impl Fn(usize) -> bool, n: usize) -> Option<RegionMetrics> {
    let mut m = RegionMetrics::default();
    for p in 0..n {
        if !keep(p) {
            continue;
        }
        let (dx, dy) = (pred[p * 2] - gt[p * 2], pred[p * 2 + 1] - gt[p * 2 + 1]);
        let e = (dx * dx + dy * dy).sqrt();
        let mag = (gt[p * 2] * gt[p * 2] + gt[p * 2 + 1] * gt[p * 2 + 1]).sqrt();
        m.count += 1;
        m.epe += e;
        m.avg_err += dx.abs();
        for (b, &t) in m.bad.iter_mut().zip(&BAD_THRESHOLDS) {
            if e > t {
                *b += 1.0;
            }
        }
        if e > 3.0 && e > 0.05 * mag {
            m.d1 += 1.0;
        }
    }
    if m.count == 0 {
        return None;
    }
    let c = m.count as f64;
    m.epe /= c;
    m.avg_err /= c;
    m.d1 /= c;
    for b in &mut m.bad {
        *b /= c;
    }
    Some(m)
}

/// Metrics of `pred` against `gt` (both `[H, W, 2]`) over pixels where
/// `valid` is set, and additionally over `valid` and `noc`.
pub fn compute_metrics(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>, noc: Option<&Tensor>) -> Result<MetricReport> {
    if pred.shape() != gt.shape() || pred.rank() != 3 || pred.dim(2) != 2 {
        return Err(Error::shape("compute_metrics", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let n = pred.dim(0) * pred.dim(1);
    for m in [valid, noc].into_iter().flatten() {
        m.check_shape("compute_metrics", &[pred.dim(0), pred.dim(1)])?;
    }
    let is_valid = |p: usize| valid.map_or(true, |v| v.data()[p] > 0.0);
    let all = region(pred.data(), gt.data(), is_valid, n)
        .ok_or_else(|| Error::invalid("compute_metrics", "no valid ground truth pixels"))?;
    let noc = match noc {
        Some(m) => Some(
            region(pred.data(), gt.data(), |p| is_valid(p) && m.data()[p] > 0.0, n)
                .ok_or_else(|| Error::invalid("compute_metrics", "no non-occluded pixels"))?,
        ),
        None => None,
    };
    Ok(MetricReport { all, noc })
}

/// Lifts a `[H, W]` disparity map to the `[H, W, 2]` relative position
/// `(-d, 0)` of the reference view.
pub fn disparity_to_field(d: &Tensor) -> Result<Tensor> {
    if d.rank() != 2 {
        return Err(Error::shape("disparity_to_field", format!("{:?}", d.shape())));
    }
    let data = d.data().iter().flat_map(|&v| [-v, 0.0]).collect();
    Tensor::new(vec![d.dim(0), d.dim(1), 2], data)
}
