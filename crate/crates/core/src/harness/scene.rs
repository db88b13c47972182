//! Synthetic two-view scenes with analytic correspondence and occlusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    ConstantShift,
    TwoLayer,
    SmoothWarp,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<SceneKind> {
        match s {
            "constant_shift" => Ok(SceneKind::ConstantShift),
            "two_layer" => Ok(SceneKind::TwoLayer),
            "smooth_warp" => Ok(SceneKind::SmoothWarp),
            other => Err(Error::Config(format!("unknown scene kind {other:?}"))),
        }
    }
}

/// Scene parameters. Fields unused by a kind are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    /// Disparity of the background (constant_shift, two_layer).
    pub shift: f64,
    /// Disparity of the foreground rectangle (two_layer).
    pub fg_shift: f64,
    /// Foreground rectangle `[x0, y0, x1, y1)` as fractions of the extent.
    pub fg_rect: [f64; 4],
    /// Affine flow `A (p - c) + t` (smooth_warp): `[a11, a12, a21, a22]`.
    pub affine: [f64; 4],
    pub translation: [f64; 2],
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            shift: 4.0,
            fg_shift: 12.0,
            fg_rect: [0.4, 0.25, 0.75, 0.75],
            affine: [0.02, -0.03, 0.03, 0.02],
            translation: [2.5, -1.5],
        }
    }
}

/// Both views with ground truth for both. Relative positions are `[H, W, 2]`
/// and masks `[H, W]` (1 = visible in the other view).
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub kind: SceneKind,
    pub seed: u64,
    pub i0: Tensor,
    pub i1: Tensor,
    pub r0: Tensor,
    pub r1: Tensor,
    pub noc0: Tensor,
    pub noc1: Tensor,
}

/// Smooth color texture defined on the whole plane: a sum of bilinear value
/// noise octaves on lattices covering a margin around the image.
struct Texture {
    octaves: Vec<Octave>,
}

struct Octave {
    cell: f64,
    origin: f64,
    gw: usize,
    gh: usize,
    weight: f64,
    values: Vec<[f64; 3]>,
}

impl Texture {
    fn new(h: usize, w: usize, margin: f64, seed: u64) -> Texture {
        let mut rng = seeded(seed);
        let mut octaves = Vec::new();
        for (cell, weight) in [(2.0, 0.25), (4.0, 0.3), (8.0, 0.25), (16.0, 0.2)] {
            let span_w = w as f64 + 2.0 * margin;
            let span_h = h as f64 + 2.0 * margin;
            let gw = (span_w / cell).ceil() as usize + 2;
            let gh = (span_h / cell).ceil() as usize + 2;
            let values = (0..gw * gh).map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]).collect();
            octaves.push(Octave {
                cell,
                origin: -margin,
                gw,
                gh,
                weight,
                values,
            });
        }
        Texture { octaves }
    }

    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for o in &self.octaves {
            let gx = ((x - o.origin) / o.cell).clamp(0.0, (o.gw - 1) as f64);
            let gy = ((y - o.origin) / o.cell).clamp(0.0, (o.gh - 1) as f64);
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(o.gw - 1), (y0 + 1).min(o.gh - 1));
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            // Smoothstep keeps the texture free of lattice-aligned creases.
            let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
            for c in 0..3 {
                let v = |xx: usize, yy: usize| o.values[yy * o.gw + xx][c];
                let top = v(x0, y0) * (1.0 - sx) + v(x1, y0) * sx;
                let bot = v(x0, y1) * (1.0 - sx) + v(x1, y1) * sx;
                out[c] += o.weight * (top * (1.0 - sy) + bot * sy);
            }
        }
        out
    }
}

fn render(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&f(x, y));
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

fn field(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            let (a, b) = f(x, y);
            data.push(a);
            data.push(b);
        }
    }
    Tensor::new(vec![h, w, 2], data)
}

fn mask(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Tensor> {
    let data = (0..h * w).map(|i| if f(i % w, i / w) { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![h, w], data)
}

pub fn gen_scene(kind: SceneKind, h: usize, w: usize, params: &SceneParams, seed: u64) -> Result<SyntheticScene> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("gen_scene", "empty extent"));
    }
    match kind {
        SceneKind::ConstantShift => constant_shift(h, w, params.shift, seed),
        SceneKind::TwoLayer => two_layer(h, w, params, seed),
        SceneKind::SmoothWarp => smooth_warp(h, w, params, seed),
    }
}

fn check_shift(d: f64, w: usize) -> Result<()> {
    if !(d >= 0.0) || d.fract() != 0.0 {
        return Err(Error::invalid("gen_scene", format!("shift {d} must be a nonnegative integer")));
    }
    if d >= w as f64 {
        return Err(Error::invalid("gen_scene", format!("shift {d} exceeds width {w}")));
    }
    Ok(())
}

/// Reference pixel `x` matches target pixel `x - d`.
fn constant_shift(h: usize, w: usize, d: f64, seed: u64) -> Result<SyntheticScene> {
    check_shift(d, w)?;
    let tex = Texture::new(h, w, d + 8.0, seed);
    let wf = w as f64;
    Ok(SyntheticScene {
        kind: SceneKind::ConstantShift,
        seed,
        i0: render(h, w, |x, y| tex.eval(x as f64, y as f64))?,
        i1: render(h, w, |x, y| tex.eval(x as f64 + d, y as f64))?,
        r0: field(h, w, |_, _| (-d, 0.0))?,
        r1: field(h, w, |_, _| (d, 0.0))?,
        noc0: mask(h, w, |x, _| x as f64 - d >= 0.0)?,
        noc1: mask(h, w, |x, _| x as f64 + d < wf)?,
    })
}

/// Background at disparity `shift`, a nearer foreground rectangle at
/// `fg_shift` with its own texture.
fn two_layer(h: usize, w: usize, p: &SceneParams, seed: u64) -> Result<SyntheticScene> {
    check_shift(p.shift, w)?;
    check_shift(p.fg_shift, w)?;
    let (db, df) = (p.shift as i64, p.fg_shift as i64);
    let bg = Texture::new(h, w, p.fg_shift + 8.0, seed);
    let fg = Texture::new(h, w, p.fg_shift + 8.0, seed ^ 0x9e37_79b9_7f4a_7c15);
    let [fx0, fy0, fx1, fy1] = p.fg_rect;
    let (rx0, rx1) = ((fx0 * w as f64).round() as i64, (fx1 * w as f64).round() as i64);
    let (ry0, ry1) = ((fy0 * h as f64).round() as usize, (fy1 * h as f64).round() as usize);
    let in_rows = |y: usize| y >= ry0 && y < ry1;
    // Foreground in the reference view covers columns [rx0, rx1); in the
    // target view it is moved left by `df`.
    let fg0 = |x: i64, y: usize| in_rows(y) && x >= rx0 && x < rx1;
    let fg1 = |x: i64, y: usize| in_rows(y) && x >= rx0 - df && x < rx1 - df;
    let inside = |x: i64| x >= 0 && x < w as i64;
    Ok(SyntheticScene {
        kind: SceneKind::TwoLayer,
        seed,
        i0: render(h, w, |x, y| {
            let t = if fg0(x as i64, y) { &fg } else { &bg };
            t.eval(x as f64, y as f64)
        })?,
        i1: render(h, w, |x, y| {
            if fg1(x as i64, y) {
                fg.eval((x as i64 + df) as f64, y as f64)
            } else {
                bg.eval((x as i64 + db) as f64, y as f64)
            }
        })?,
        r0: field(h, w, |x, y| (if fg0(x as i64, y) { -p.fg_shift } else { -p.shift }, 0.0))?,
        r1: field(h, w, |x, y| (if fg1(x as i64, y) { p.fg_shift } else { p.shift }, 0.0))?,
        noc0: mask(h, w, |x, y| {
            let x = x as i64;
            if fg0(x, y) {
                inside(x - df)
            } else {
                inside(x - db) && !fg1(x - db, y)
            }
        })?,
        noc1: mask(h, w, |x, y| {
            let x = x as i64;
            if fg1(x, y) {
                inside(x + df)
            } else {
                inside(x + db) && !fg0(x + db, y)
            }
        })?,
    })
}

/// Affine flow `u(p) = A (p - c) + t` around the image center `c`. The
/// target view is rendered by inverting the map.
fn smooth_warp(h: usize, w: usize, p: &SceneParams, seed: u64) -> Result<SyntheticScene> {
    let [a11, a12, a21, a22] = p.affine;
    let (m11, m12, m21, m22) = (1.0 + a11, a12, a21, 1.0 + a22);
    let det = m11 * m22 - m12 * m21;
    if det.abs() < 1e-6 {
        return Err(Error::invalid("gen_scene", "affine map is singular"));
    }
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let [tx, ty] = p.translation;
    let flow = move |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        (a11 * dx + a12 * dy + tx, a21 * dx + a22 * dy + ty)
    };
    // q = c + M (p - c) + t  =>  p = c + M^-1 (q - c - t)
    let inverse = move |qx: f64, qy: f64| {
        let (dx, dy) = (qx - cx - tx, qy - cy - ty);
        (cx + (m22 * dx - m12 * dy) / det, cy + (-m21 * dx + m11 * dy) / det)
    };
    let margin = 8.0 + tx.abs().max(ty.abs()) + (a11.abs() + a12.abs() + a21.abs() + a22.abs()) * (h + w) as f64;
    let tex = Texture::new(h, w, margin, seed);
    let within = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64;
    Ok(SyntheticScene {
        kind: SceneKind::SmoothWarp,
        seed,
        i0: render(h, w, |x, y| tex.eval(x as f64, y as f64))?,
        i1: render(h, w, |x, y| {
            let (px, py) = inverse(x as f64, y as f64);
            tex.eval(px, py)
        })?,
        r0: field(h, w, |x, y| flow(x as f64, y as f64))?,
        r1: field(h, w, |x, y| {
            let (px, py) = inverse(x as f64, y as f64);
            (px - x as f64, py - y as f64)
        })?,
        noc0: mask(h, w, |x, y| {
            let (u, v) = flow(x as f64, y as f64);
            within(x as f64 + u, y as f64 + v)
        })?,
        noc1: mask(h, w, |x, y| {
            let (px, py) = inverse(x as f64, y as f64);
            within(px, py)
        })?,
    })
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.i0.dim(0)
    }

    pub fn width(&self) -> usize {
        self.i0.dim(1)
    }
}
