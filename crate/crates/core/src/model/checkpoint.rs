//! Checkpoint container: magic `MSKD`, a format version, the model
//! configuration, then named tensors. Each tensor record is
//! (u32 name length, name bytes, dtype code, rank, u32 dims, f32 LE payload).
//! Parse failures report the byte offset where they occurred.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, DTYPE_F32};

use super::adam::AdamState;
use super::{build_model, ModelConfig, SegModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSKD";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A model plus the optimizer state it was saved with.
pub struct Checkpoint {
    pub model: SegModel,
    pub optimizer: AdamState,
}

pub fn save_checkpoint(model: &SegModel, optimizer: &AdamState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = model.config();
    for v in [
        cfg.in_channels,
        cfg.out_channels,
        cfg.depth,
        cfg.base_width,
        cfg.feature_tap_level,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let n_tensors = model.params().len() * 3 + 1;
    w.write_all(&(n_tensors as u32).to_le_bytes())?;

    let step = Tensor::from_vec(&[1], vec![optimizer.step as f64])?;
    write_named(&mut w, "opt.step", &step)?;
    for (i, p) in model.params().iter().enumerate() {
        write_named(&mut w, &p.name, &p.tensor)?;
        write_named(&mut w, &format!("opt.m.{}", p.name), &optimizer.m[i])?;
        write_named(&mut w, &format!("opt.v.{}", p.name), &optimizer.v[i])?;
    }
    Ok(())
}

fn write_named<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F32, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::CorruptCheckpoint {
            offset: at,
            reason: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let mut ver = [0u8; 2];
    r.read_exact_at(&mut ver, "version")?;
    let version = u16::from_le_bytes(ver);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint {
            offset: 4,
            reason: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let cfg = ModelConfig {
        in_channels: r.u32_le("config.in_channels")? as usize,
        out_channels: r.u32_le("config.out_channels")? as usize,
        depth: r.u32_le("config.depth")? as usize,
        base_width: r.u32_le("config.base_width")? as usize,
        feature_tap_level: r.u32_le("config.feature_tap_level")? as usize,
    };
    cfg.validate().map_err(|e| Error::CorruptCheckpoint {
        offset: 6,
        reason: format!("invalid stored config: {e}"),
    })?;
    let n_tensors = r.u32_le("tensor count")? as usize;

    // Build the skeleton, then overwrite every tensor from the file.
    let mut model = build_model(cfg, 0)?;
    let mut optimizer = AdamState::new(&model);
    let mut seen = vec![false; n_tensors];

    for ti in 0..n_tensors {
        let (name, tensor) = read_named(&mut r)?;
        seen[ti] = true;
        if name == "opt.step" {
            if tensor.len() != 1 {
                return Err(Error::CorruptCheckpoint {
                    offset: r.offset,
                    reason: "opt.step must hold exactly one value".to_string(),
                });
            }
            optimizer.step = tensor.data()[0] as u64;
            continue;
        }
        let (target, pname) = if let Some(p) = name.strip_prefix("opt.m.") {
            (TensorSlot::M, p.to_string())
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            (TensorSlot::V, p.to_string())
        } else {
            (TensorSlot::Param, name.clone())
        };
        let idx = model
            .params()
            .iter()
            .position(|p| p.name == pname)
            .ok_or_else(|| Error::CorruptCheckpoint {
                offset: r.offset,
                reason: format!("unknown tensor name {name:?}"),
            })?;
        let expected = model.params()[idx].tensor.shape().to_vec();
        if tensor.shape() != expected.as_slice() {
            return Err(Error::CorruptCheckpoint {
                offset: r.offset,
                reason: format!(
                    "tensor {name:?} has shape {:?}, expected {expected:?}",
                    tensor.shape()
                ),
            });
        }
        match target {
            TensorSlot::Param => model.params_mut()[idx].tensor = tensor,
            TensorSlot::M => optimizer.m[idx] = tensor,
            TensorSlot::V => optimizer.v[idx] = tensor,
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::CorruptCheckpoint {
            offset: r.offset,
            reason: "missing tensor records".to_string(),
        });
    }
    Ok(Checkpoint { model, optimizer })
}

enum TensorSlot {
    Param,
    M,
    V,
}

fn read_named<R: Read>(r: &mut CountingReader<R>) -> Result<(String, Tensor)> {
    let name_len = r.u32_le("name length")? as usize;
    if name_len > 4096 {
        return Err(Error::CorruptCheckpoint {
            offset: r.offset - 4,
            reason: format!("implausible name length {name_len}"),
        });
    }
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact_at(&mut name_bytes, "tensor name")?;
    let name = String::from_utf8(name_bytes).map_err(|_| Error::CorruptCheckpoint {
        offset: r.offset,
        reason: "tensor name is not UTF-8".to_string(),
    })?;
    let mut meta = [0u8; 2];
    r.read_exact_at(&mut meta, "dtype/rank")?;
    if meta[0] != DTYPE_F32 {
        return Err(Error::CorruptCheckpoint {
            offset: r.offset - 2,
            reason: format!("unsupported dtype code {}", meta[0]),
        });
    }
    let rank = meta[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32_le("shape dim")? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 64 << 20 {
        return Err(Error::CorruptCheckpoint {
            offset: r.offset,
            reason: format!("implausible tensor size {n}"),
        });
    }
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        r.read_exact_at(&mut buf, "tensor payload")?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok((name, Tensor::from_vec(&shape, data)?))
}

/// Validates that a loaded model can serve as a teacher (2-class output) for
/// a student with the given arity.
pub fn check_teacher_arity(teacher: &SegModel, student_out_channels: usize) -> Result<()> {
    if teacher.config().out_channels != 2 {
        return Err(Error::config(format!(
            "checkpoint has out_channels={}, but a teacher must have out_channels=2 \
             (student uses out_channels={student_out_channels})",
            teacher.config().out_channels
        )));
    }
    Ok(())
}
