//! Self-describing checkpoint container.
//!
//! ```text
//! "OSTEOCKPT1"  u32 count
//! count × { u32 name_len, name, u32 rank, rank × u32 dim, u8 dtype, payload }
//! 32-byte SHA-256 of the architecture config
//! ```
//!
//! All integers and payloads are little-endian. The first entry is always
//! `meta.config` (the run config as UTF-8 TOML), so every later tensor can be
//! checked against the shapes the architecture implies as soon as its
//! header is read.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{model_hash, RunConfig};
use super::optim::SgdState;
use crate::backbone::NetworkConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 10] = b"OSTEOCKPT1";

const TAG_U8: u8 = 2;
const TAG_U64: u8 = 3;
const MAX_RANK: usize = 8;
const MAX_NAME: usize = 4096;

const CONFIG: &str = "meta.config";
const EPOCH: &str = "meta.epoch";
const RNG_SEED: &str = "meta.rng_seed";
const RNG_POS: &str = "meta.rng_pos";
const BEST_ACC: &str = "meta.best_accuracy";
const BEST_EPOCH: &str = "meta.best_epoch";

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => DType::F32.tag(),
            Payload::F64(_) => DType::F64.tag(),
            Payload::U8(_) => TAG_U8,
            Payload::U64(_) => TAG_U64,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| x.write_le(out)),
            Payload::F64(v) => v.iter().for_each(|x| x.write_le(out)),
            Payload::U8(v) => out.extend_from_slice(v),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

fn tag_size(tag: u8) -> Option<usize> {
    match tag {
        0 => Some(DType::F32.size()),
        1 => Some(DType::F64.size()),
        TAG_U8 => Some(1),
        TAG_U64 => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    shape: Vec<usize>,
    payload: Payload,
}

/// Training state sufficient to resume bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub momentum: SgdState<f32>,
    /// Completed epochs.
    pub epoch: u64,
    /// Generator state at the end of `epoch`.
    pub rng: ChaCha8Rng,
    /// Best validation accuracy so far, negative before any evaluation.
    pub best_accuracy: f64,
    pub best_epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Fail on a config-hash mismatch instead of warning.
    pub strict_hash: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { strict_hash: true }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Fails with a hash mismatch unless `model` is the architecture this
    /// checkpoint was trained with.
    pub fn ensure_compatible(&self, model: &NetworkConfig) -> Result<()> {
        let expected = model_hash(model)?;
        let found = self.config.model_hash()?;
        if expected != found {
            return Err(CheckpointError::HashMismatch {
                expected: hex(&expected),
                found: hex(&found),
            }
            .into());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>, payload: Payload| {
            entries.insert(name, Entry { shape, payload });
        };
        put(EPOCH.into(), vec![1], Payload::U64(vec![self.epoch]));
        put(RNG_SEED.into(), vec![32], Payload::U8(self.rng.get_seed().to_vec()));
        let pos = self.rng.get_word_pos();
        put(
            RNG_POS.into(),
            vec![3],
            Payload::U64(vec![self.rng.get_stream(), pos as u64, (pos >> 64) as u64]),
        );
        put(BEST_ACC.into(), vec![1], Payload::F64(vec![self.best_accuracy]));
        put(BEST_EPOCH.into(), vec![1], Payload::U64(vec![self.best_epoch]));
        for (name, p) in self.params.iter() {
            put(format!("param.{name}"), p.value.shape().to_vec(), Payload::F32(p.value.data().to_vec()));
        }
        for (name, buf) in &self.momentum {
            put(format!("momentum.{name}"), buf.shape().to_vec(), Payload::F32(buf.data().to_vec()));
        }

        let config = self.config.to_toml()?.into_bytes();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(entries.len() as u32 + 1).to_le_bytes());
        let mut write_entry = |name: &str, e: &Entry| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(e.payload.tag());
            e.payload.write(&mut out);
        };
        write_entry(
            CONFIG,
            &Entry {
                shape: vec![config.len()],
                payload: Payload::U8(config),
            },
        );
        for (name, e) in &entries {
            write_entry(name, e);
        }
        out.extend_from_slice(&self.config.model_hash()?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<Self> {
        decode(bytes, opts)
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, opts: LoadOptions) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, opts)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated { what: what() }),
        }
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> std::result::Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// What a tensor name is allowed to look like once the config is known.
struct Expected {
    shapes: HashMap<String, (Vec<usize>, u8)>,
}

impl Expected {
    fn new(config: &RunConfig) -> Result<Self> {
        let mut shapes = HashMap::new();
        for spec in config.model.param_specs()? {
            shapes.insert(format!("param.{}", spec.name), (spec.shape.clone(), 0));
            if spec.kind == ParamKind::Trainable {
                shapes.insert(format!("momentum.{}", spec.name), (spec.shape.clone(), 0));
            }
        }
        shapes.insert(EPOCH.into(), (vec![1], TAG_U64));
        shapes.insert(RNG_SEED.into(), (vec![32], TAG_U8));
        shapes.insert(RNG_POS.into(), (vec![3], TAG_U64));
        shapes.insert(BEST_ACC.into(), (vec![1], 1));
        shapes.insert(BEST_EPOCH.into(), (vec![1], TAG_U64));
        Ok(Self { shapes })
    }
}

fn bad(tensor: &str, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::BadTensor {
        tensor: tensor.to_owned(),
        msg: msg.into(),
    }
}

fn decode(bytes: &[u8], opts: LoadOptions) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), || "magic".into()).map_err(|_| CheckpointError::BadMagic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let count = r.u32(|| "tensor count".into())?;

    let mut expected: Option<Expected> = None;
    let mut config: Option<RunConfig> = None;
    let mut entries: HashMap<String, Entry> = HashMap::new();
    for idx in 0..count {
        let name_len = r.u32(|| format!("name length of tensor #{idx}"))?;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(bad(&format!("#{idx}"), format!("implausible name length {name_len}")).into());
        }
        let name_bytes = r.take(name_len, || format!("name of tensor #{idx}"))?;
        let name = String::from_utf8_lossy(name_bytes).into_owned();
        if idx == 0 && name != CONFIG {
            return Err(CheckpointError::Missing(CONFIG.into()).into());
        }
        if entries.contains_key(&name) {
            return Err(bad(&name, "duplicate tensor").into());
        }
        let rank = r.u32(|| format!("rank of `{name}`"))?;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(&name, format!("implausible rank {rank}")).into());
        }
        let mut shape = Vec::with_capacity(rank);
        for d in 0..rank {
            shape.push(r.u32(|| format!("dim {d} of `{name}`"))?);
        }
        let tag = r.take(1, || format!("dtype of `{name}`"))?[0];
        let size = tag_size(tag).ok_or_else(|| CheckpointError::UnknownDtype {
            tensor: name.clone(),
            tag,
        })?;
        if let Some(exp) = &expected {
            let Some((want_shape, want_tag)) = exp.shapes.get(&name) else {
                return Err(bad(&name, "not part of this architecture").into());
            };
            if &shape != want_shape {
                return Err(bad(&name, format!("dims {shape:?}, architecture expects {want_shape:?}")).into());
            }
            if tag != *want_tag {
                return Err(bad(&name, format!("dtype tag {tag}, expected {want_tag}")).into());
            }
        } else if tag != TAG_U8 || rank != 1 {
            return Err(bad(&name, "config entry must be a byte vector").into());
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(&name, format!("invalid dims {shape:?}")))?;
        let len = numel
            .checked_mul(size)
            .filter(|&l| l <= r.remaining())
            .ok_or_else(|| CheckpointError::Truncated {
                what: format!("payload of `{name}` ({numel} elements)"),
            })?;
        let raw = r.take(len, || format!("payload of `{name}`"))?;
        let payload = match tag {
            0 => Payload::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
            1 => Payload::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            TAG_U8 => Payload::U8(raw.to_vec()),
            _ => Payload::U64(
                raw.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        };
        if idx == 0 {
            let Payload::U8(text) = &payload else { unreachable!("checked tag") };
            let text = std::str::from_utf8(text).map_err(|e| bad(CONFIG, e.to_string()))?;
            let cfg = RunConfig::from_toml(text).map_err(|e| bad(CONFIG, e.to_string()))?;
            expected = Some(Expected::new(&cfg).map_err(|e| bad(CONFIG, e.to_string()))?);
            config = Some(cfg);
            continue;
        }
        entries.insert(name, Entry { shape, payload });
    }
    let config = config.ok_or_else(|| CheckpointError::Missing(CONFIG.into()))?;

    let stored = r.take(32, || "config hash".into())?;
    if r.remaining() > 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()).into());
    }
    let want = config.model_hash()?;
    if stored != want {
        let err = CheckpointError::HashMismatch {
            expected: hex(&want),
            found: hex(stored),
        };
        if opts.strict_hash {
            return Err(err.into());
        }
        log::warn!("{err}; continuing");
    }

    let mut take = |name: &str| entries.remove(name).ok_or_else(|| CheckpointError::Missing(name.into()));
    let scalar_u64 = |e: Entry| match e.payload {
        Payload::U64(v) => v,
        _ => unreachable!("dtype checked against the expected table"),
    };
    let epoch = scalar_u64(take(EPOCH)?)[0];
    let best_epoch = scalar_u64(take(BEST_EPOCH)?)[0];
    let pos = scalar_u64(take(RNG_POS)?);
    let best_accuracy = match take(BEST_ACC)?.payload {
        Payload::F64(v) => v[0],
        _ => unreachable!("dtype checked"),
    };
    let seed: [u8; 32] = match take(RNG_SEED)?.payload {
        Payload::U8(v) => v.try_into().map_err(|_| bad(RNG_SEED, "expected 32 bytes"))?,
        _ => unreachable!("dtype checked"),
    };
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(pos[0]);
    rng.set_word_pos(pos[1] as u128 | ((pos[2] as u128) << 64));

    let f32_tensor = |name: &str, e: Entry| -> Result<Tensor<f32>> {
        match e.payload {
            Payload::F32(v) => Tensor::new(&e.shape, v).map_err(|err| bad(name, err.to_string()).into()),
            _ => unreachable!("dtype checked"),
        }
    };
    let mut params = ParamStore::new();
    for spec in config.model.param_specs()? {
        let key = format!("param.{}", spec.name);
        let e = take(&key)?;
        params.insert(&spec.name, f32_tensor(&key, e)?, spec.kind);
    }
    let mut momentum = SgdState::new();
    let mut rest: Vec<_> = entries.into_iter().collect();
    rest.sort_by(|a, b| a.0.cmp(&b.0));
    for (key, e) in rest {
        let Some(name) = key.strip_prefix("momentum.") else {
            return Err(bad(&key, "unexpected entry").into());
        };
        momentum.insert(name.to_owned(), f32_tensor(&key, e)?);
    }
    Ok(Checkpoint {
        config,
        params,
        momentum,
        epoch,
        rng,
        best_accuracy,
        best_epoch,
    })
}
