//! Checkpoint container: one file holds the model configuration, every named
//! parameter array, and (for resumable training) optimizer moments and the
//! data-RNG position.
//!
//! Layout, all integers little-endian:
//!   magic [8] | format version u32 | header length u64 | header JSON |
//!   array count u64 | repeated { name length u64, name UTF-8, ndim u64,
//!   dims u64..., values f64... }
//!
//! Arrays appear in sorted name order: parameters first, then optimizer
//! first moments under `opt.m.`, second moments under `opt.v.`. Saving the
//! same state twice produces byte-identical files.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrackModel};
use crate::nn::OptState;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TRKMODL1";
pub const CHECKPOINT_VERSION: u32 = 1;

const OPT_M_PREFIX: &str = "opt.m.";
const OPT_V_PREFIX: &str = "opt.v.";

/// Enough to rebuild a ChaCha stream mid-sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngSnapshot {
    seed: Vec<u8>,
    stream: u64,
    word_pos_hi: u64,
    word_pos_lo: u64,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha12Rng) -> Self {
        let pos = rng.get_word_pos();
        RngSnapshot {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> Result<ChaCha12Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::checkpoint("RNG seed is not 32 bytes"))?;
        let mut rng = ChaCha12Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

/// Training-resume extras saved alongside the parameters.
pub struct TrainState<'a> {
    pub opt: &'a OptState,
    pub rng: &'a ChaCha12Rng,
    pub step: u64,
}

/// Training-resume extras recovered from a checkpoint.
#[derive(Debug)]
pub struct TrainSnapshot {
    pub opt: OptState,
    pub rng: ChaCha12Rng,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    train: Option<TrainHeader>,
}

#[derive(Serialize, Deserialize)]
struct TrainHeader {
    step: u64,
    opt_t: u64,
    rng: RngSnapshot,
}

fn write_array(out: &mut impl Write, name: &str, arr: &ArrayD<f64>) -> Result<()> {
    out.write_all(&(name.len() as u64).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(arr.ndim() as u64).to_le_bytes())?;
    for &d in arr.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in arr.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &TrackModel,
    train: Option<TrainState<'_>>,
) -> Result<()> {
    let header = Header {
        config: model.cfg.clone(),
        train: train.as_ref().map(|t| TrainHeader {
            step: t.step,
            opt_t: t.opt.t,
            rng: RngSnapshot::capture(t.rng),
        }),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::checkpoint(format!("header serialization: {e}")))?;

    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;

    let opt_arrays = train.as_ref().map_or(0, |t| t.opt.m.len() + t.opt.v.len());
    out.write_all(&((model.store.len() + opt_arrays) as u64).to_le_bytes())?;
    for (name, arr) in model.store.iter() {
        write_array(&mut out, name, arr)?;
    }
    if let Some(t) = &train {
        for (name, arr) in &t.opt.m {
            write_array(&mut out, &format!("{OPT_M_PREFIX}{name}"), arr)?;
        }
        for (name, arr) in &t.opt.v {
            write_array(&mut out, &format!("{OPT_V_PREFIX}{name}"), arr)?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact_ctx(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::checkpoint(format!("truncated checkpoint while reading {what}: {e}")))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_ctx(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_array(r: &mut impl Read) -> Result<(String, ArrayD<f64>)> {
    let name_len = read_u64(r, "array name length")? as usize;
    if name_len == 0 || name_len > 4096 {
        return Err(Error::checkpoint(format!("implausible name length {name_len}")));
    }
    let mut name_buf = vec![0u8; name_len];
    read_exact_ctx(r, &mut name_buf, "array name")?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::checkpoint("array name is not UTF-8"))?;
    let ndim = read_u64(r, "array rank")? as usize;
    if ndim > 8 {
        return Err(Error::checkpoint(format!("implausible rank {ndim} for `{name}`")));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let d = read_u64(r, "array dimension")? as usize;
        numel = numel
            .checked_mul(d)
            .filter(|&n| n <= (1 << 30))
            .ok_or_else(|| Error::checkpoint(format!("implausible size for `{name}`")))?;
        dims.push(d);
    }
    let mut data = Vec::with_capacity(numel);
    let mut b = [0u8; 8];
    for _ in 0..numel {
        read_exact_ctx(r, &mut b, "array values")?;
        data.push(f64::from_le_bytes(b));
    }
    let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
        .map_err(|e| Error::checkpoint(format!("bad shape for `{name}`: {e}")))?;
    Ok((name, arr))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrackModel, Option<TrainSnapshot>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_ctx(&mut r, &mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint("not a checkpoint file (bad magic)"));
    }
    let mut ver = [0u8; 4];
    read_exact_ctx(&mut r, &mut ver, "version")?;
    let version = u32::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = read_u64(&mut r, "header length")? as usize;
    if header_len > (1 << 20) {
        return Err(Error::checkpoint("implausible header length"));
    }
    let mut header_buf = vec![0u8; header_len];
    read_exact_ctx(&mut r, &mut header_buf, "header")?;
    let header: Header = serde_json::from_slice(&header_buf)
        .map_err(|e| Error::checkpoint(format!("header parse: {e}")))?;
    header.config.validate()?;

    let count = read_u64(&mut r, "array count")? as usize;
    let mut params = BTreeMap::new();
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    for _ in 0..count {
        let (name, arr) = read_array(&mut r)?;
        if let Some(p) = name.strip_prefix(OPT_M_PREFIX) {
            opt_m.insert(p.to_string(), arr);
        } else if let Some(p) = name.strip_prefix(OPT_V_PREFIX) {
            opt_v.insert(p.to_string(), arr);
        } else if params.insert(name.clone(), arr).is_some() {
            return Err(Error::checkpoint(format!("duplicate array `{name}`")));
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::checkpoint("trailing bytes after declared arrays"));
    }

    let mut seed = ChaCha12Rng::seed_from_u64(0);
    let mut model = TrackModel::init(header.config, &mut seed)?;
    let expected: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).collect();
    for name in &expected {
        let arr = params
            .remove(name)
            .ok_or_else(|| Error::checkpoint(format!("missing parameter `{name}`")))?;
        model.store.load(name, arr)?;
    }
    if let Some(name) = params.keys().next() {
        return Err(Error::checkpoint(format!(
            "checkpoint carries unknown parameter `{name}`"
        )));
    }

    let train = match header.train {
        None => None,
        Some(t) => Some(TrainSnapshot {
            opt: OptState {
                m: opt_m,
                v: opt_v,
                t: t.opt_t,
            },
            rng: t.rng.restore()?,
            step: t.step,
        }),
    };
    Ok((model, train))
}

/// Loads a checkpoint and rejects it unless its configuration matches
/// `expected`, naming the differing fields.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(TrackModel, Option<TrainSnapshot>)> {
    let (model, train) = load_checkpoint(path)?;
    if &model.cfg != expected {
        let stored = serde_json::to_value(&model.cfg).unwrap_or_default();
        let wanted = serde_json::to_value(expected).unwrap_or_default();
        let mut diffs = Vec::new();
        diff_values("", &stored, &wanted, &mut diffs);
        return Err(Error::checkpoint(format!(
            "checkpoint configuration differs from the requested one: {}",
            diffs.join(", ")
        )));
    }
    Ok((model, train))
}

fn diff_values(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            for (k, va) in ma {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match mb.get(k) {
                    Some(vb) => diff_values(&path, va, vb, out),
                    None => out.push(format!("{path}: {va} vs <absent>")),
                }
            }
        }
        _ if a != b => out.push(format!("{prefix}: {a} vs {b}")),
        _ => {}
    }
}
