//! Latency benchmarks: MatchAttention against dense global attention and
//! against sampling every window key and value bilinearly.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{core_forward, global_attention, similarity_value, CoreSpec, Similarity};
use crate::error::{Error, Result};
use crate::numerics::softmax::softmax_row;
use crate::random::{seeded, uniform_tensor};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "variant,tokens,channels,window,runs,median_ms";
pub const MEMORY_HEADER: &str = "variant,tokens,est_bytes,threads";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Match,
    Global,
    Direct,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Match => "match",
            Variant::Global => "global",
            Variant::Direct => "direct",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Square token extents; `64` means a 64x64 map.
    pub sides: Vec<usize>,
    pub global_sides: Vec<usize>,
    pub channels: usize,
    pub window: usize,
    pub runs: usize,
    /// Worker threads; 1 unless set explicitly.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sides: vec![64, 128, 256, 512],
            global_sides: vec![32, 64, 128],
            channels: 16,
            window: 3,
            runs: 5,
            threads: 1,
            seed: 0,
        }
    }
}

/// Largest side the quadratic baseline is run at.
pub const GLOBAL_CAP: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub tokens: usize,
    pub channels: usize,
    pub window: usize,
    pub runs: usize,
    pub median_ms: f64,
    pub est_bytes: u64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4}",
            self.variant.name(),
            self.tokens,
            self.channels,
            self.window,
            self.runs,
            self.median_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub threads: usize,
}

impl BenchReport {
    pub fn series(&self, v: Variant) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| (r.tokens as f64, r.median_ms))
            .collect()
    }

    /// Least-squares slope of log latency against log token count.
    pub fn slope(&self, v: Variant) -> Option<f64> {
        loglog_slope(&self.series(v))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn write_memory_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut s = format!("{MEMORY_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.variant.name(), r.tokens, r.est_bytes, self.threads));
        }
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.max(1e-9).ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Estimated working-set bytes of one forward at 8 bytes per value.
pub fn estimate_bytes(v: Variant, tokens: usize, c: usize, window: usize) -> u64 {
    let (n, c) = (tokens as u64, c as u64);
    let e = ((window + 1) * (window + 1)) as u64;
    let inputs = n * (3 * c + 2);
    let values = match v {
        Variant::Match => inputs + n * (c + e),
        Variant::Global => inputs + n * n + n * c,
        Variant::Direct => inputs + n * (window * window) as u64 * 2 + n * c,
    };
    values * 8
}

/// Window attention that bilinearly samples each of the `w x w` keys and
/// values at its continuous position, then applies a plain softmax.
pub fn direct_sampling_attention(spec: &CoreSpec, q: &Tensor, k: &Tensor, v: &Tensor, r: &Tensor) -> Result<Tensor> {
    if spec.heads != 1 || spec.per_head_r || q.rank() != 4 || q.dim(0) != 1 {
        return Err(Error::invalid("direct_sampling_attention", "expects one view, one head, shared offsets"));
    }
    let (h, w) = (q.dim(1), q.dim(2));
    let (c, cv, win) = (spec.ck, spec.cv, spec.window);
    let (qd, kd, vd, rd) = (q.data(), k.data(), v.data(), r.data());
    let half = (win / 2) as f64;
    let n = win * win;
    let mut out = vec![0.0; h * w * cv];
    out.par_chunks_mut(cv * w).enumerate().for_each_init(
        || (vec![0.0; n], vec![0.0; n], vec![0.0; n * c], vec![0.0; n * cv]),
        |(sim, alpha, ks, vs), (y, row)| {
            for (x, o) in row.chunks_mut(cv).enumerate() {
                let p = y * w + x;
                let (cx, cy) = (x as f64 + rd[2 * p], y as f64 + rd[2 * p + 1]);
                for j in 0..n {
                    let sx = cx - half + (j % win) as f64;
                    let sy = cy - half + (j / win) as f64;
                    sample(kd, c, h, w, sx, sy, &mut ks[j * c..(j + 1) * c]);
                    sample(vd, cv, h, w, sx, sy, &mut vs[j * cv..(j + 1) * cv]);
                    sim[j] = similarity_value(&qd[p * c..(p + 1) * c], &ks[j * c..(j + 1) * c], spec.similarity, spec.gamma());
                }
                softmax_row(sim, alpha);
                o.fill(0.0);
                for j in 0..n {
                    for (oc, vv) in o.iter_mut().zip(&vs[j * cv..(j + 1) * cv]) {
                        *oc += alpha[j] * vv;
                    }
                }
            }
        },
    );
    Tensor::from_op("direct_sampling_attention", vec![1, h, w, cv], out)
}

fn sample(src: &[f64], c: usize, h: usize, w: usize, x: f64, y: f64, out: &mut [f64]) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let clamp = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
    let (xa, xb) = (clamp(x0, w), clamp(x0 + 1.0, w));
    let (ya, yb) = (clamp(y0, h), clamp(y0 + 1.0, h));
    let taps = [
        (ya * w + xa, (1.0 - fx) * (1.0 - fy)),
        (ya * w + xb, fx * (1.0 - fy)),
        (yb * w + xa, (1.0 - fx) * fy),
        (yb * w + xb, fx * fy),
    ];
    out.fill(0.0);
    for (i, wt) in taps {
        for (o, s) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
            *o += wt * s;
        }
    }
}

/// Similarity and aggregation stages alone, softmax excluded, with
/// similarities standing in for weights. MatchAttention reads the `(w+1)^2`
/// expanded window directly; direct sampling interpolates each of the `w^2`
/// keys and values from four neighbours. Returns median milliseconds
/// `(match, direct)` at one square side.
pub fn stage_times(cfg: &BenchConfig, side: usize) -> Result<(f64, f64)> {
    let x = inputs(side, cfg.channels, cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let c = cfg.channels;
    let (qd, kd, vd, rd) = (x.q.data(), x.k.data(), x.v.data(), x.r.data());
    let (h, w, win) = (side, side, cfg.window);
    let half = (win / 2) as f64;
    let mut out = vec![0.0; h * w * c];
    let mut run = |direct: bool| -> f64 {
        let mut times = Vec::with_capacity(cfg.runs);
        for _ in 0..cfg.runs {
            let t0 = Instant::now();
            pool.install(|| {
                out.par_chunks_mut(c * w).enumerate().for_each_init(
                    || (vec![0.0; c], vec![0.0; c]),
                    |(ks, vs), (y, row)| {
                        for (xx, o) in row.chunks_mut(c).enumerate() {
                            let p = y * w + xx;
                            let q = &qd[p * c..(p + 1) * c];
                            let (cx, cy) = (xx as f64 + rd[2 * p], y as f64 + rd[2 * p + 1]);
                            o.fill(0.0);
                            if direct {
                                for j in 0..win * win {
                                    let sx = cx - half + (j % win) as f64;
                                    let sy = cy - half + (j / win) as f64;
                                    sample(kd, c, h, w, sx, sy, ks);
                                    sample(vd, c, h, w, sx, sy, vs);
                                    let s: f64 = q.iter().zip(ks.iter()).map(|(a, b)| a * b).sum();
                                    for (oc, v) in o.iter_mut().zip(vs.iter()) {
                                        *oc += s * v;
                                    }
                                }
                            } else {
                                let (bx, by) = ((cx - half).floor() as i64, (cy - half).floor() as i64);
                                for r in 0..=win as i64 {
                                    let yy = (by + r).clamp(0, h as i64 - 1) as usize;
                                    for cc in 0..=win as i64 {
                                        let idx = yy * w + (bx + cc).clamp(0, w as i64 - 1) as usize;
                                        let k = &kd[idx * c..(idx + 1) * c];
                                        let s: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                                        for (oc, v) in o.iter_mut().zip(&vd[idx * c..(idx + 1) * c]) {
                                            *oc += s * v;
                                        }
                                    }
                                }
                            }
                        }
                    },
                )
            });
            times.push(t0.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(&out);
        }
        median(times)
    };
    let m = run(false);
    let d = run(true);
    Ok((m, d))
}

struct Inputs {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    r: Tensor,
}

fn inputs(side: usize, c: usize, seed: u64) -> Inputs {
    let mut rng = seeded(seed);
    let shape = [1, side, side, c];
    Inputs {
        q: uniform_tensor(&shape, -1.0, 1.0, &mut rng),
        k: uniform_tensor(&shape, -1.0, 1.0, &mut rng),
        v: uniform_tensor(&shape, -1.0, 1.0, &mut rng),
        r: uniform_tensor(&[1, side, side, 2], -3.0, 3.0, &mut rng),
    }
}

fn spec(cfg: &BenchConfig) -> CoreSpec {
    CoreSpec {
        window: cfg.window,
        heads: 1,
        ck: cfg.channels,
        cv: cfg.channels,
        similarity: Similarity::Dot,
        per_head_r: false,
    }
}

fn time_variant(v: Variant, cfg: &BenchConfig, x: &Inputs) -> Result<f64> {
    let sp = spec(cfg);
    let n = x.q.dim(1) * x.q.dim(2);
    let flat = |t: &Tensor| t.clone().reshape(vec![n, t.last_dim()]);
    let (qf, kf, vf) = if v == Variant::Global {
        (flat(&x.q)?, flat(&x.k)?, flat(&x.v)?)
    } else {
        (Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0))
    };
    let mut times = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let t0 = Instant::now();
        let out = match v {
            Variant::Match => core_forward(&sp, &x.q, &x.k, &x.v, &x.r)?,
            Variant::Global => global_attention(&qf, &kf, &vf, sp.gamma())?,
            Variant::Direct => direct_sampling_attention(&sp, &x.q, &x.k, &x.v, &x.r)?,
        };
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(median(times))
}

/// Runs the requested variants. MatchAttention and direct sampling use
/// `cfg.sides`; global attention uses `cfg.global_sides` up to
/// [`GLOBAL_CAP`].
pub fn run_bench(cfg: &BenchConfig, variants: &[Variant]) -> Result<BenchReport> {
    if cfg.runs == 0 || cfg.channels == 0 || cfg.window % 2 == 0 || cfg.threads == 0 {
        return Err(Error::Config(format!("bad benchmark config {cfg:?}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = Vec::new();
    for &v in variants {
        let sides: Vec<usize> = match v {
            Variant::Global => cfg.global_sides.iter().copied().filter(|&s| s <= GLOBAL_CAP).collect(),
            _ => cfg.sides.clone(),
        };
        for side in sides {
            let x = inputs(side, cfg.channels, cfg.seed);
            let ms = pool.install(|| time_variant(v, cfg, &x))?;
            let tokens = side * side;
            rows.push(BenchRow {
                variant: v,
                tokens,
                channels: cfg.channels,
                window: cfg.window,
                runs: cfg.runs,
                median_ms: ms,
                est_bytes: estimate_bytes(v, tokens, cfg.channels, cfg.window),
            });
        }
    }
    Ok(BenchReport { rows, threads: cfg.threads })
}
