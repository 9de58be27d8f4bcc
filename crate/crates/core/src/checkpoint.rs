//! Binary checkpoint container.
//!
//! Layout, all integers little-endian, strings length-prefixed (u32 byte
//! count, then UTF-8 bytes):
//!
//! ```text
//! magic           4 bytes, "VGEN"
//! format version  u32, currently 1
//! kind            string ("model" or a baseline tag)
//! config echo     string, the producing config as JSON
//! training step   u64
//! user vocab      u32 count, then ids in row order (rows 1..)
//! video vocab     u32 count, same encoding
//! tensors         u32 count, then per tensor in lexicographic name order:
//!                 name string, rows u32, cols u32, rows*cols f32 payload
//! rng state       init seed u64, shuffle seed u64, shuffle word pos u128
//! ```
//!
//! Tensor payloads are float32, so the first save of an f64 store rounds;
//! loading widens exactly, which makes save -> load -> save byte-identical.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Vocab;
use crate::tensor::{ParameterStore, Tensor};

pub const MAGIC: [u8; 4] = *b"VGEN";
pub const FORMAT_VERSION: u32 = 1;

/// Checkpoint kind tag for the full model; baselines define their own.
pub const KIND_MODEL: &str = "model";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// State of the training-time shuffle RNG: the seed it was created from
/// plus its stream position, enough to reconstruct it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn fresh(seed: u64) -> Self {
        RngState { seed, word_pos: 0 }
    }

    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn to_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub step: u64,
    pub users: Vocab,
    pub videos: Vocab,
    pub store: ParameterStore,
    pub shuffle_rng: RngState,
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Format(format!(
                "checkpoint kind is {:?}, expected {:?}",
                self.kind, kind
            )))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_str(&mut buf, &self.kind)?;
        put_str(&mut buf, &self.config_json)?;
        buf.extend_from_slice(&self.step.to_le_bytes());
        put_vocab(&mut buf, &self.users)?;
        put_vocab(&mut buf, &self.videos)?;
        put_u32(&mut buf, width("tensor count", self.store.tensors.len())?);
        for (name, t) in &self.store.tensors {
            put_str(&mut buf, name)?;
            put_u32(&mut buf, width("tensor rows", t.rows)?);
            put_u32(&mut buf, width("tensor cols", t.cols)?);
            for &v in &t.values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.store.rng_seed.to_le_bytes());
        buf.extend_from_slice(&self.shuffle_rng.seed.to_le_bytes());
        buf.extend_from_slice(&self.shuffle_rng.word_pos.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::Format(format!(
                "bad magic {magic:?}, not a VGEN checkpoint"
            )));
        }
        let version = cur.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let kind = cur.string("kind")?;
        let config_json = cur.string("config echo")?;
        let step = cur.u64("training step")?;
        let users = cur.vocab("user vocab")?;
        let videos = cur.vocab("video vocab")?;

        let n_tensors = cur.u32("tensor count")? as usize;
        let mut store = ParameterStore::new(0);
        let mut prev_name: Option<String> = None;
        for _ in 0..n_tensors {
            let name = cur.string("tensor name")?;
            if let Some(prev) = &prev_name {
                if *prev >= name {
                    return Err(CheckpointError::Format(format!(
                        "tensor names out of order: {prev:?} then {name:?}"
                    )));
                }
            }
            let rows = cur.u32("tensor rows")? as usize;
            let cols = cur.u32("tensor cols")? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| {
                CheckpointError::Format(format!("tensor {name:?} shape overflows"))
            })?;
            let raw = cur.take(4 * n, "tensor payload")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(&name, Tensor::from_values(rows, cols, values));
            prev_name = Some(name);
        }
        store.rng_seed = cur.u64("init seed")?;
        let shuffle_rng = RngState {
            seed: cur.u64("shuffle seed")?,
            word_pos: cur.u128("shuffle word pos")?,
        };
        if cur.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes after rng state",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint {
            kind,
            config_json,
            step,
            users,
            videos,
            store,
            shuffle_rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn width(what: &str, x: usize) -> Result<u32, CheckpointError> {
    u32::try_from(x).map_err(|_| CheckpointError::Format(format!("{what} {x} exceeds u32")))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<(), CheckpointError> {
    put_u32(buf, width("string length", s.len())?);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_vocab(buf: &mut Vec<u8>, v: &Vocab) -> Result<(), CheckpointError> {
    put_u32(buf, width("vocab size", v.ids().len())?);
    for id in v.ids() {
        put_str(buf, id)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Format(format!(
                "truncated while reading {what} at offset {}",
                self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128, CheckpointError> {
        let b = self.take(16, what)?;
        Ok(u128::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| CheckpointError::Format(format!("{what} is not valid UTF-8")))
    }

    fn vocab(&mut self, what: &str) -> Result<Vocab, CheckpointError> {
        let n = self.u32(what)? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            ids.push(self.string(what)?);
        }
        Ok(Vocab::from_id_list(ids))
    }
}
