//! Weight checkpoints: a TOML manifest followed by one MTN1 blob per
//! parameter.
//!
//! Layout: magic `MTCK`, u32 LE version, u32 LE manifest length, the UTF-8
//! manifest, then the tensors in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_mtn1, write_mtn1};

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: u64,
    pub decoder: DecoderConfig,
    pub tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn write_checkpoint(mut out: impl Write, store: &ParamStore, decoder: &DecoderConfig) -> Result<()> {
    let manifest = Manifest {
        step: store.step,
        decoder: decoder.clone(),
        tensors: store
            .iter()
            .map(|(n, p)| Entry {
                name: n.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format("checkpoint", e.to_string()))?;
    let io = |e: std::io::Error| Error::format("checkpoint", e.to_string());
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(text.len() as u32).to_le_bytes()).map_err(io)?;
    out.write_all(text.as_bytes()).map_err(io)?;
    for (_, p) in store.iter() {
        write_mtn1(&mut out, &p.value).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<(ParamStore, DecoderConfig)> {
    let bad = |d: String| Error::format("checkpoint", d);
    let mut head = [0u8; 12];
    input.read_exact(&mut head).map_err(|e| bad(format!("truncated header: {e}")))?;
    if &head[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let mut text = vec![0u8; len];
    input.read_exact(&mut text).map_err(|e| bad(format!("truncated manifest: {e}")))?;
    let text = String::from_utf8(text).map_err(|e| bad(e.to_string()))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let t = read_mtn1(&mut input)?;
        if t.shape() != e.shape.as_slice() {
            return Err(bad(format!("{}: manifest {:?}, blob {:?}", e.name, e.shape, t.shape())));
        }
        store.insert(e.name.clone(), t);
    }
    store.step = manifest.step;
    Ok((store, manifest.decoder))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, decoder: &DecoderConfig) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, store, decoder)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, DecoderConfig)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
