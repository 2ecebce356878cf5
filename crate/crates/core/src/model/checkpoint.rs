//! Checkpoint container.
//!
//! Binary layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "BCKP" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f32 LE data
//! ```
//!
//! Tensor names are `<group>/<layer name>`, e.g. `student/encoder.same0.weight`.
//! A JSON sidecar next to the container (same stem, `.json`) records the
//! model config, the training step and free-form extra state.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams, Role, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)
}

/// Writes the container and its sidecar. I/O errors are returned unwrapped so
/// the caller can attach context such as the last good checkpoint.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    groups: &[(&str, &ModelParams<f32>)],
) -> io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count: usize = groups.iter().map(|(_, p)| p.tensors.len()).sum();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (group, params) in groups {
        for t in &params.tensors {
            let name = format!("{group}/{}", t.name);
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let json = serde_json::to_vec_pretty(meta).map_err(io::Error::other)?;
    write_atomic(path, &buf)?;
    write_atomic(&sidecar_path(path), &json)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format {
                path: self.path.to_path_buf(),
                reason: "truncated checkpoint".into(),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint written for `config`; each group is returned in layout
/// order. Fails if the sidecar config or any tensor shape disagrees.
pub fn load_checkpoint(
    path: &Path,
    config: &ModelConfig,
) -> Result<(CheckpointMeta, BTreeMap<String, ModelParams<f32>>)> {
    let side = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    if meta.model != *config {
        return Err(Error::StructuralMismatch(format!(
            "checkpoint {} was written for a different model config",
            path.display()
        )));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    if cur.u32()? != VERSION {
        return Err(bad("unsupported version"));
    }
    let count = cur.u32()? as usize;
    let mut grouped: BTreeMap<String, Vec<Tensor<f32>>> = BTreeMap::new();
    for _ in 0..count {
        let n = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(n)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = cur.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (group, layer) = name.split_once('/').ok_or_else(|| bad("tensor name without group"))?;
        grouped.entry(group.to_string()).or_default().push(Tensor {
            name: layer.to_string(),
            shape,
            data,
        });
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut out = BTreeMap::new();
    for (group, tensors) in grouped {
        let role = if group == "teacher" { Role::Teacher } else { Role::Student };
        let params = ModelParams { role, tensors };
        params.check_layout(config)?;
        out.insert(group, params);
    }
    Ok((meta, out))
}
