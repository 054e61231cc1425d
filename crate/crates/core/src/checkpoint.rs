//! Binary checkpoints of a [`TrainState`].
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic "EMCK" | version u8 | config hash u64 | epoch u64 | adam steps u64
//! dims: layers, feat_dim, attn_dim, hidden_dim, lstm_hidden, n_emotions,
//!       n_genders, n_speakers, vocab_size as u32; dropout f64
//! tensor count u32, then per tensor:
//!     name length u16 | name (UTF-8) | rank u8 | extents u32 x rank | f64 x len
//! ```
//!
//! Tensors appear in parameter order three times, prefixed `param.`,
//! `adam_m.` and `adam_v.`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::Tensor;
use crate::params::ParamSet;
use crate::trainer::{AdamState, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EMCK";
pub const CHECKPOINT_VERSION: u8 = 1;

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, state: &TrainState) -> Self {
        Checkpoint {
            config_hash: cfg.config_hash(),
            state: state.clone(),
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.state.params.dims()
    }

    /// Refuses to continue a run whose config or model shape differs.
    pub fn ensure_compatible(&self, cfg: &TrainConfig, dims: &ModelDims) -> Result<()> {
        let expected = cfg.config_hash();
        if self.config_hash != expected {
            return Err(Error::ConfigHashMismatch {
                expected,
                found: self.config_hash,
            });
        }
        let template = template(dims);
        for ((name, want), (_, have)) in template.named_tensors().into_iter().zip(self.state.params.named_tensors()) {
            if want.shape() != have.shape() {
                return Err(Error::ParamMismatch {
                    name,
                    message: format!("shape {:?} in checkpoint, run expects {:?}", have.shape(), want.shape()),
                });
            }
        }
        Ok(())
    }
}

/// Correctly shaped parameters; values are irrelevant.
fn template(dims: &ModelDims) -> ModelParams {
    ModelParams::init(&mut ChaCha8Rng::seed_from_u64(0), dims)
}

fn dims_fields(d: &ModelDims) -> [usize; 9] {
    [
        d.layers,
        d.feat_dim,
        d.attn_dim,
        d.hidden_dim,
        d.lstm_hidden,
        d.n_emotions,
        d.n_genders,
        d.n_speakers,
        d.vocab_size,
    ]
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let s = &ckpt.state;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    out.extend_from_slice(&(s.epoch as u64).to_le_bytes());
    out.extend_from_slice(&s.adam.t.to_le_bytes());
    let dims = ckpt.dims();
    for v in dims_fields(&dims) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&dims.dropout.to_le_bytes());

    let groups = [&s.params, &s.adam.m, &s.adam.v];
    let count: usize = groups.iter().map(|g| g.named_tensors().len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, group) in GROUPS.iter().zip(groups) {
        for (name, t) in group.named_tensors() {
            let name = format!("{prefix}.{name}");
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0, path };
    let magic = c.array::<4>()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = c.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let config_hash = c.u64()?;
    let epoch = c.u64()? as usize;
    let steps = c.u64()?;
    let mut f = [0usize; 9];
    for v in f.iter_mut() {
        *v = c.u32()? as usize;
    }
    let dims = ModelDims {
        layers: f[0],
        feat_dim: f[1],
        attn_dim: f[2],
        hidden_dim: f[3],
        lstm_hidden: f[4],
        n_emotions: f[5],
        n_genders: f[6],
        n_speakers: f[7],
        vocab_size: f[8],
        dropout: c.f64()?,
    };
    if f.contains(&0) || !(0.0..1.0).contains(&dims.dropout) {
        return Err(Error::Format(format!("{}: invalid model dimensions {dims:?}", path.display())));
    }

    let template = template(&dims);
    let mut groups = [template.clone(), template.clone(), template];
    let count = c.u32()? as usize;
    let per_group = groups[0].named_tensors().len();
    if count != 3 * per_group {
        return Err(Error::ParamMismatch {
            name: "<count>".into(),
            message: format!("{count} tensors in checkpoint, expected {}", 3 * per_group),
        });
    }
    for (prefix, group) in GROUPS.iter().zip(groups.iter_mut()) {
        for (name, slot) in group.named_tensors_mut() {
            let want = format!("{prefix}.{name}");
            let len = c.u16()? as usize;
            let found = String::from_utf8_lossy(c.take(len)?).into_owned();
            if found != want {
                return Err(Error::ParamMismatch {
                    name: want,
                    message: format!("found `{found}` in its place"),
                });
            }
            let rank = c.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(c.u32()? as usize);
            }
            if shape != slot.shape() {
                return Err(Error::ParamMismatch {
                    name: want,
                    message: format!("shape {shape:?}, expected {:?}", slot.shape()),
                });
            }
            let mut data = Vec::with_capacity(slot.len());
            for _ in 0..slot.len() {
                data.push(c.f64()?);
            }
            *slot = Tensor::new(shape, data)?;
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after checkpoint payload",
            path.display(),
            bytes.len() - c.pos
        )));
    }
    let [params, m, v] = groups;
    Ok(Checkpoint {
        config_hash,
        state: TrainState {
            params,
            adam: AdamState { m, v, t: steps },
            epoch,
        },
    })
}

/// Writes via a temporary sibling file and a rename, so a crash never
/// leaves a half-written checkpoint under `path`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, encode_checkpoint(ckpt)).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes, path)
}
