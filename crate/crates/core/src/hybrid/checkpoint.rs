//! Text header followed by named, shaped little-endian `f64` payloads:
//!
//! ```text
//! MIXERFORGE-CHECKPOINT 1
//! {"config":{...},"schedule":"LLLF","tensors":N,"extra":{...}}
//! <name>\t<d0,d1,..>\n<raw bytes>
//! ...
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{build_schedule, HybridConfig, HybridError, HybridModel, ParamStore};
use crate::numerics::Tensor;

const MAGIC: &str = "MIXERFORGE-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: HybridConfig,
    pub schedule: String,
    pub tensors: usize,
    /// Free-form metadata such as the optimizer step.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &HybridModel) -> Self {
        Self {
            header: CheckpointHeader {
                config: model.config.clone(),
                schedule: model.schedule.to_string(),
                tensors: model.params.len(),
                extra: serde_json::Value::Null,
            },
            tensors: model.params.clone(),
        }
    }

    /// Rebuilds the model from the tensors named like its parameters;
    /// other tensors (optimizer state) are ignored.
    pub fn to_model(&self) -> Result<HybridModel, HybridError> {
        let schedule = build_schedule(&self.header.config)?;
        if schedule.to_string() != self.header.schedule {
            return Err(HybridError::Checkpoint(format!(
                "schedule {} does not match config ({schedule})",
                self.header.schedule
            )));
        }
        let template = HybridModel::init(&self.header.config, 0)?;
        let mut params = ParamStore::new();
        for (name, expected) in template.params.iter() {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| HybridError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != expected.shape() {
                return Err(HybridError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            params.insert(name, t.clone());
        }
        Ok(HybridModel {
            config: self.header.config.clone(),
            schedule,
            params,
        })
    }
}

fn io_err(e: std::io::Error) -> HybridError {
    HybridError::Checkpoint(e.to_string())
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<(), HybridError> {
    let header = CheckpointHeader {
        tensors: ckpt.tensors.len(),
        ..ckpt.header.clone()
    };
    let json = serde_json::to_string(&header).map_err(|e| HybridError::Checkpoint(e.to_string()))?;
    writeln!(w, "{MAGIC}\n{json}").map_err(io_err)?;
    for (name, t) in ckpt.tensors.iter() {
        if name.contains(['\t', '\n']) || name.is_empty() {
            return Err(HybridError::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(w, "{name}\t{}", dims.join(",")).map_err(io_err)?;
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_line(r: &mut impl BufRead) -> Result<String, HybridError> {
    let mut line = String::new();
    if r.read_line(&mut line).map_err(io_err)? == 0 {
        return Err(HybridError::Checkpoint("unexpected end of file".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

pub fn read_checkpoint(mut r: impl BufRead) -> Result<Checkpoint, HybridError> {
    let bad = |m: String| HybridError::Checkpoint(m);
    if read_line(&mut r)? != MAGIC {
        return Err(bad("not a mixerforge checkpoint".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_str(&read_line(&mut r)?).map_err(|e| bad(format!("header: {e}")))?;
    let mut tensors = ParamStore::new();
    for _ in 0..header.tensors {
        let line = read_line(&mut r)?;
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| bad(format!("malformed tensor line {line:?}")))?;
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|s| s.parse::<usize>().map_err(|e| bad(format!("shape of {name}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?
        };
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| bad(format!("tensor {name} is implausibly large")))?;
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes).map_err(io_err)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }
    if tensors.len() != header.tensors {
        return Err(bad("duplicate tensor names".into()));
    }
    Ok(Checkpoint { header, tensors })
}
