//! Model checkpoints and metric logs.
//!
//! A checkpoint is `"MSDFCKPT"`, a little-endian `u64` header length, a JSON
//! header, then every buffer's `f64` values in little-endian order, in the
//! order the header lists them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sdfdata::write_atomic;

const MAGIC: &[u8; 8] = b"MSDFCKPT";
pub const CHECKPOINT_FORMAT: &str = "metasdf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Crate version recorded in every artifact.
pub fn version_string() -> String {
    format!("metasdf {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub software: String,
    /// Architecture tag, e.g. `metasdf` or `cnp`.
    pub mode: String,
    /// Fully resolved training configuration.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub step: usize,
    pub metric: Option<f64>,
    /// Mode-specific metadata such as code table keys.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub buffers: Vec<BufferInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub buffers: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(mode: &str, config: serde_json::Value) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                software: version_string(),
                mode: mode.into(),
                config,
                epoch: 0,
                step: 0,
                metric: None,
                extra: serde_json::Value::Null,
                buffers: Vec::new(),
            },
            buffers: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.header.buffers.push(BufferInfo {
            name: name.into(),
            len: data.len(),
        });
        self.buffers.push(data);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.header
            .buffers
            .iter()
            .position(|b| b.name == name)
            .map(|i| self.buffers[i].as_slice())
    }

    /// Like [`Checkpoint::get`] but an error names the missing buffer.
    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no buffer {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let total: usize = self.buffers.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.buffers {
            for v in b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::format(path, e.to_string()))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", header.format, header.version),
            ));
        }
        let mut rest = &bytes[16 + hlen..];
        let mut buffers = Vec::with_capacity(header.buffers.len());
        for info in &header.buffers {
            let n = info.len * 8;
            if rest.len() < n {
                return Err(Error::format(path, format!("buffer {} truncated", info.name)));
            }
            let (data, tail) = rest.split_at(n);
            buffers.push(
                data.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after buffers"));
        }
        Ok(Checkpoint { header, buffers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

/// One row of a training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub outer_loss: f64,
    /// Filled on steps that end with a validation pass.
    pub val_loss: Option<f64>,
    pub wallclock_ms: f64,
}

/// Training curve, optionally mirrored to a CSV file as it grows.
#[derive(Clone, Debug, Default)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
    pub config: serde_json::Value,
}

impl MetricLog {
    pub fn new(config: serde_json::Value) -> Self {
        MetricLog {
            rows: Vec::new(),
            config,
        }
    }

    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Drop rows past `step` (used when resuming).
    pub fn truncate_after(&mut self, step: usize) {
        self.rows.retain(|r| r.step <= step);
    }

    pub fn last_val(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.val_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let cfg = serde_json::json!({ "software": version_string(), "config": self.config });
        let _ = writeln!(s, "# {cfg}");
        s.push_str("step,outer_loss,val_loss,wallclock_ms\n");
        for r in &self.rows {
            let val = r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:e},{},{:.3}", r.step, r.outer_loss, val, r.wallclock_ms);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut log = MetricLog::default();
        for (i, line) in text.lines().enumerate() {
            if let Some(c) = line.strip_prefix("# ") {
                let v: serde_json::Value =
                    serde_json::from_str(c).map_err(|e| Error::format(path, e.to_string()))?;
                log.config = v.get("config").cloned().unwrap_or_default();
                continue;
            }
            if line.starts_with("step,") || line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(path, format!("malformed metric row {}", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            log.rows.push(MetricRow {
                step: f[0].parse().map_err(|_| bad())?,
                outer_loss: num(f[1])?,
                val_loss: if f[2].is_empty() { None } else { Some(num(f[2])?) },
                wallclock_ms: num(f[3])?,
            });
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Checkpoint::new("metasdf", serde_json::json!({ "k": 5 }));
        c.push("theta", vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]);
        c.push("alpha", vec![]);
        c.header.metric = Some(0.25);
        let path = dir.path().join("m.ckpt");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("theta").unwrap()[3], 1e300);
        assert!(back.require("missing").is_err());

        let mut bytes = c.to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
        assert!(Checkpoint::from_bytes(b"MSDFCKPT\xff\xff\xff\xff\xff\xff\xff\xff", &path).is_err());
    }

    #[test]
    fn metric_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricLog::new(serde_json::json!({ "seed": 3 }));
        for step in 1..=3 {
            log.push(MetricRow {
                step,
                outer_loss: 0.1 / step as f64,
                val_loss: (step == 2).then_some(0.07),
                wallclock_ms: 12.5,
            });
        }
        let path = dir.path().join("m.csv");
        log.save(&path).unwrap();
        let back = MetricLog::load(&path).unwrap();
        assert_eq!(back.rows, log.rows);
        assert_eq!(back.config, log.config);
        assert_eq!(back.last_val(), Some(0.07));
    }
}
