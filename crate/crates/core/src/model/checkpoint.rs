//! Single-file checkpoint, little-endian throughout:
//!
//! ```text
//! "ENFG" | version u16 | graph sha256 [32] | epoch u64
//! rng seed [32] | rng stream u64 | rng word position u128
//! dropout f64 | optimizer kind u8 | optimizer step u64
//! meta length u32 | meta (UTF-8)
//! blob count u32 | blobs...
//! sha256 of every preceding byte [32]
//!
//! blob: kind u8 | name length u16 | name | rank u8 | dims u32 x rank | f32 x numel
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::optim::{OptimizerKind, OptimizerState};
use super::{ModelError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ENFG";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Resumable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobKind {
    Param,
    Buffer,
    Optimizer,
}

impl BlobKind {
    fn code(self) -> u8 {
        match self {
            BlobKind::Param => 0,
            BlobKind::Buffer => 1,
            BlobKind::Optimizer => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [BlobKind::Param, BlobKind::Buffer, BlobKind::Optimizer].into_iter().find(|k| k.code() == c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub graph_hash: [u8; 32],
    /// Completed epochs.
    pub epoch: u64,
    pub rng: RngState,
    pub dropout: f64,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub optimizer: OptimizerState,
    /// Free-form caller data (the trainer stores its history here).
    pub meta: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.graph_hash);
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.rng.seed);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&self.dropout.to_le_bytes());
        b.push(self.optimizer.kind.code());
        b.extend_from_slice(&self.optimizer.step.to_le_bytes());
        b.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        b.extend_from_slice(self.meta.as_bytes());
        let blobs: Vec<(BlobKind, &(String, Tensor))> = self
            .params
            .iter()
            .map(|p| (BlobKind::Param, p))
            .chain(self.buffers.iter().map(|p| (BlobKind::Buffer, p)))
            .chain(self.optimizer.slots.iter().map(|p| (BlobKind::Optimizer, p)))
            .collect();
        b.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
        for (kind, (name, t)) in blobs {
            b.push(kind.code());
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.shape().len() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Corrupt(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        if bytes.len() < 6 + 32 {
            return Err(ModelError::Corrupt("truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ModelError::Corrupt("checksum mismatch (truncated or modified file)".into()));
        }
        let mut r = Reader { buf: body, pos: 6 };
        let graph_hash = r.array::<32>()?;
        let epoch = r.u64()?;
        let rng = RngState {
            seed: r.array::<32>()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array::<16>()?),
        };
        let dropout = f64::from_le_bytes(r.array::<8>()?);
        let kind_code = r.array::<1>()?[0];
        let kind = OptimizerKind::from_code(kind_code)
            .ok_or_else(|| ModelError::Corrupt(format!("unknown optimizer code {kind_code}")))?;
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| ModelError::Corrupt("meta is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut ckpt = Checkpoint {
            graph_hash,
            epoch,
            rng,
            dropout,
            params: Vec::new(),
            buffers: Vec::new(),
            optimizer: OptimizerState {
                kind,
                step,
                slots: Vec::new(),
            },
            meta,
        };
        for _ in 0..count {
            let code = r.array::<1>()?[0];
            let kind = BlobKind::from_code(code).ok_or_else(|| ModelError::Corrupt(format!("unknown blob kind {code}")))?;
            let name_len = u16::from_le_bytes(r.array::<2>()?) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| ModelError::Corrupt("blob name is not UTF-8".into()))?;
            let rank = r.array::<1>()?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| ModelError::Corrupt("blob too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(dims, data).map_err(|e| ModelError::Corrupt(format!("blob `{name}`: {e}")))?;
            match kind {
                BlobKind::Param => ckpt.params.push((name, t)),
                BlobKind::Buffer => ckpt.buffers.push((name, t)),
                BlobKind::Optimizer => ckpt.optimizer.slots.push((name, t)),
            }
        }
        if r.pos != body.len() {
            return Err(ModelError::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(ckpt)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// Writes through a temporary file and renames, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
