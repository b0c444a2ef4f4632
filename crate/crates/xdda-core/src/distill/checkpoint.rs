//! Versioned binary checkpoints: a small header followed by named f32
//! little-endian parameter blocks for teacher and student side by side.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::detector::model::{DualBranchModel, ModelDims};

use super::{DistillError, Stage};

const MAGIC: &[u8; 4] = b"XDDA";
const VERSION: u32 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn write_param_block(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DistillError> {
        if self.pos + n > self.buf.len() {
            return Err(DistillError::Checkpoint {
                path: self.path.clone(),
                reason: "truncated file".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DistillError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DistillError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DistillError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DistillError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub struct Checkpoint {
    pub dims: ModelDims,
    pub stage: Stage,
    pub iteration: u64,
    pub teacher: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub student: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn save_checkpoint(
    path: &Path,
    dims: &ModelDims,
    stage: Stage,
    iteration: u64,
    teacher: &DualBranchModel,
    student: &DualBranchModel,
) -> Result<(), DistillError> {
    let dims_json = serde_json::to_vec(dims).expect("dims serialize");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a64(&dims_json).to_le_bytes());
    out.push(stage as u8);
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&(dims_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&dims_json);
    for model in [teacher, student] {
        let params = model.named_parameters();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            write_param_block(&mut out, p.name(), p.shape(), &p.values());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: io::Error) -> DistillError {
    DistillError::Io { path: path.display().to_string(), source }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DistillError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| io_err(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path: path.display().to_string() };
    let bad = |reason: &str| DistillError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    };

    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let stored_hash = r.u64()?;
    let stage = match r.u8()? {
        0 => Stage::Jdp,
        1 => Stage::Cdd,
        2 => Stage::Dtr,
        s => return Err(bad(&format!("unknown stage {s}"))),
    };
    let iteration = r.u64()?;
    let dims_len = r.u32()? as usize;
    let dims_json = r.take(dims_len)?;
    if fnv1a64(dims_json) != stored_hash {
        return Err(bad("config hash mismatch"));
    }
    let dims: ModelDims = serde_json::from_slice(dims_json)
        .map_err(|e| bad(&format!("bad model config: {e}")))?;

    let read_model = |r: &mut Reader| -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, DistillError> {
        let count = r.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| bad("non-utf8 parameter name"))?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            out.push((name, shape, values));
        }
        Ok(out)
    };
    let teacher = read_model(&mut r)?;
    let student = read_model(&mut r)?;
    Ok(Checkpoint { dims, stage, iteration, teacher, student })
}

impl Checkpoint {
    /// Rebuild teacher and student models carrying the stored values.
    pub fn instantiate(&self) -> Result<(DualBranchModel, DualBranchModel), DistillError> {
        let teacher = DualBranchModel::new(self.dims, 0)?.deep_clone(true);
        let student = DualBranchModel::new(self.dims, 0)?;
        for (model, stored) in [(&teacher, &self.teacher), (&student, &self.student)] {
            let params = model.named_parameters();
            if params.len() != stored.len() {
                return Err(DistillError::Checkpoint {
                    path: String::new(),
                    reason: format!("expected {} parameters, found {}", params.len(), stored.len()),
                });
            }
            for (p, (name, shape, values)) in params.iter().zip(stored) {
                if p.name() != name || p.shape() != shape.as_slice() {
                    return Err(DistillError::Checkpoint {
                        path: String::new(),
                        reason: format!("parameter mismatch at {}", p.name()),
                    });
                }
                p.set_values(values);
            }
        }
        Ok((teacher, student))
    }
}
