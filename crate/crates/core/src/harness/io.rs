//! PFM, Middlebury `.flo`, and binary PPM/PGM files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FLO_MAGIC: &[u8; 4] = b"PIEH";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits `count` whitespace-separated header tokens off the front of a
/// netpbm-style file; a single whitespace byte ends the header.
fn header_tokens<'a>(bytes: &'a [u8], count: usize, format: &'static str) -> Result<(Vec<&'a str>, &'a [u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(format, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::format(format, "non-ASCII header"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(Error::format(format, "missing payload"));
    }
    Ok((tokens, &bytes[i + 1..]))
}

fn parse_dim(tok: &str, format: &'static str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(format, format!("bad extent {tok:?}"))),
    }
}

/// Parses PFM bytes. `Pf` gives `[H, W]`, `PF` gives `[H, W, 3]`.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor> {
    let (tok, payload) = header_tokens(bytes, 4, "PFM")?;
    let channels = match tok[0] {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format("PFM", format!("bad magic {other:?}"))),
    };
    let (w, h) = (parse_dim(tok[1], "PFM")?, parse_dim(tok[2], "PFM")?);
    let scale: f64 = tok[3].parse().map_err(|_| Error::format("PFM", format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format("PFM", "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let row = w * channels;
    if payload.len() < h * row * 4 {
        return Err(Error::format("PFM", format!("payload has {} bytes, need {}", payload.len(), h * row * 4)));
    }
    let mut data = vec![0.0; h * row];
    for (i, b) in payload[..h * row * 4].chunks_exact(4).enumerate() {
        let b = [b[0], b[1], b[2], b[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        // Rows are stored bottom to top.
        let (r, c) = (i / row, i % row);
        data[(h - 1 - r) * row + c] = v as f64;
    }
    let shape = if channels == 1 { vec![h, w] } else { vec![h, w, 3] };
    Tensor::new(shape, data)
}

/// Little-endian PFM bytes of a `[H, W]` or `[H, W, 3]` tensor.
pub fn encode_pfm(t: &Tensor) -> Result<Vec<u8>> {
    let (magic, channels) = match t.shape() {
        [_, _] => ("Pf", 1),
        [_, _, 3] => ("PF", 3),
        s => return Err(Error::shape("encode_pfm", format!("expected [h,w] or [h,w,3], got {s:?}"))),
    };
    let (h, w) = (t.dim(0), t.dim(1));
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    let row = w * channels;
    for r in (0..h).rev() {
        for &v in &t.data()[r * row..(r + 1) * row] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses `.flo` bytes into `[H, W, 2]`.
pub fn decode_flo(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(Error::format("flo", "bad magic"));
    }
    let i32_at = |o: usize| i32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let (w, h) = (i32_at(4), i32_at(8));
    if w <= 0 || h <= 0 {
        return Err(Error::format("flo", format!("bad extent {w}x{h}")));
    }
    let n = w as usize * h as usize * 2;
    let payload = &bytes[12..];
    if payload.len() < n * 4 {
        return Err(Error::format("flo", format!("payload has {} bytes, need {}", payload.len(), n * 4)));
    }
    let data = payload[..n * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(vec![h as usize, w as usize, 2], data)
}

pub fn encode_flo(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() != 3 || t.dim(2) != 2 {
        return Err(Error::shape("encode_flo", format!("expected [h,w,2], got {:?}", t.shape())));
    }
    let mut out = FLO_MAGIC.to_vec();
    out.extend_from_slice(&(t.dim(1) as i32).to_le_bytes());
    out.extend_from_slice(&(t.dim(0) as i32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses binary PPM (`P6`, `[H, W, 3]`) or PGM (`P5`, `[H, W]`) with
/// maxval 255; values are scaled to [0, 1].
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let (tok, payload) = header_tokens(bytes, 4, "PNM")?;
    let channels = match tok[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format("PNM", format!("unsupported magic {other:?}"))),
    };
    let (w, h) = (parse_dim(tok[1], "PNM")?, parse_dim(tok[2], "PNM")?);
    if tok[3] != "255" {
        return Err(Error::format("PNM", format!("maxval {} is not 255", tok[3])));
    }
    let n = h * w * channels;
    if payload.len() < n {
        return Err(Error::format("PNM", format!("payload has {} bytes, need {n}", payload.len())));
    }
    let data = payload[..n].iter().map(|&b| b as f64 / 255.0).collect();
    let shape = if channels == 1 { vec![h, w] } else { vec![h, w, 3] };
    Tensor::new(shape, data)
}

/// Binary PGM or PPM bytes; values in [0, 1] are quantized to 8 bits.
pub fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let magic = match t.shape() {
        [_, _] => "P5",
        [_, _, 3] => "P6",
        s => return Err(Error::shape("encode_pnm", format!("expected [h,w] or [h,w,3], got {s:?}"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", t.dim(1), t.dim(0)).into_bytes();
    out.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    decode_pfm(&read_file(path)?)
}

pub fn write_pfm(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_pfm(t)?)
}

pub fn read_flo(path: &Path) -> Result<Tensor> {
    decode_flo(&read_file(path)?)
}

pub fn write_flo(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_flo(t)?)
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    decode_pnm(&read_file(path)?)
}

pub fn write_pnm(path: &Path, t: &Tensor) -> Result<()> {
    write_file(path, &encode_pnm(t)?)
}
