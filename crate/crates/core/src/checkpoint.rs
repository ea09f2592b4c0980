//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DALCKPT1"
//! u64 epoch | f64 valid_f1_macro | u32 tensor count
//! per tensor: u32 len + group name | u32 len + tensor name | u32 rank | u64 dims[rank] | f64 payload
//! u64 len + TrainConfig as UTF-8 JSON
//! ```

use std::fs;
use std::path::Path;

use crate::error::{DalError, Result};
use crate::model::{Group, Param, ParamSet};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, TrainConfig};

pub const MAGIC: &[u8; 8] = b"DALCKPT1";

const MAX_RANK: usize = 8;

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(ckpt.epoch as u64).to_le_bytes());
    out.extend_from_slice(&ckpt.valid_f1_macro.to_le_bytes());
    let params = ckpt.params.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let put_str = |out: &mut Vec<u8>, s: &str| {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(s.as_bytes());
    };
    for p in params {
        put_str(&mut out, p.group.name());
        put_str(&mut out, &p.name);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&ckpt.config)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            DalError::Corruption(format!("checkpoint truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| DalError::Corruption("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DalError::Corruption("name is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(DalError::Format(format!(
            "not a DALCKPT1 checkpoint (expected magic {:?})",
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let epoch = r.len()?;
    let valid_f1_macro = r.f64()?;
    let n = r.u32()? as usize;
    let mut params = Vec::new();
    for _ in 0..n {
        let group_name = r.string()?;
        let group = Group::from_name(&group_name)
            .ok_or_else(|| DalError::Format(format!("unknown parameter group {group_name:?}")))?;
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > MAX_RANK {
            return Err(DalError::Corruption(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| DalError::Corruption(format!("tensor {name} has implausible shape {shape:?}")))?;
        let payload = r.take(count * 8)?;
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(Param {
            group,
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    let json_len = r.len()?;
    let config: TrainConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| DalError::Corruption(format!("config trailer: {e}")))?;
    if r.pos != bytes.len() {
        return Err(DalError::Corruption(format!(
            "{} trailing bytes after config trailer",
            bytes.len() - r.pos
        )));
    }
    let vocab = params
        .iter()
        .find(|p| p.name == "embedding")
        .map(|p| p.value.shape()[0])
        .ok_or_else(|| DalError::Format("checkpoint has no embedding table".into()))?;
    let params = ParamSet::from_params(config.dims(vocab), params)?;
    Ok(Checkpoint {
        params,
        epoch,
        valid_f1_macro,
        config,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
