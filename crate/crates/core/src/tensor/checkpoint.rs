//! Checkpoint files: a text header followed by a little-endian `f32` payload.
//!
//! ```text
//! MRCL-CHECKPOINT 1
//! config_hash <hex>
//! step <optimizer steps>
//! tensors <count>
//! tensor <name> <dim>x<dim> <byte offset> <byte length>
//! ...
//! end
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte. Parameters are stored as
//! `param/<name>`; optimizer moments as `adam.m/<name>` and `adam.v/<name>`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{AdamWState, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC_LINE: &str = "MRCL-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamWState>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.optimizer.as_ref().map_or(0, |o| o.step)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (name, m) in self.params.names().iter().zip(&opt.m) {
                entries.push((format!("adam.m/{name}"), m));
            }
            for (name, v) in self.params.names().iter().zip(&opt.v) {
                entries.push((format!("adam.v/{name}"), v));
            }
        }
        let mut header = format!(
            "{MAGIC_LINE}\nconfig_hash {}\nstep {}\ntensors {}\n",
            self.config_hash,
            self.step(),
            entries.len()
        );
        let mut offset = 0usize;
        for (name, t) in &entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let bytes = 4 * t.len();
            let _ = writeln!(header, "tensor {name} {} {offset} {bytes}", dims.join("x"));
            offset += bytes;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        let end_marker = b"\nend\n";
        let header_end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| bad("missing header terminator"))?
            + end_marker.len();
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("header is not utf-8"))?;
        let payload = &bytes[header_end..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC_LINE) {
            return Err(bad("bad magic line"));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected {key}, got {line:?}")))
        };
        let config_hash = field("config_hash")?;
        let step: u64 = field("step")?.parse().map_err(|_| bad("step"))?;
        let count: usize = field("tensors")?.parse().map_err(|_| bad("tensor count"))?;

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut expected_offset = 0usize;
        for _ in 0..count {
            let rest = field("tensor")?;
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, dims, offset, len] = parts[..] else {
                return Err(bad(&format!("tensor line {rest:?}")));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| bad("dims")))
                .collect::<Result<_>>()?;
            let offset: usize = offset.parse().map_err(|_| bad("offset"))?;
            let len: usize = len.parse().map_err(|_| bad("length"))?;
            if offset != expected_offset || len != 4 * shape.iter().product::<usize>() {
                return Err(bad(&format!("inconsistent layout for {name}")));
            }
            expected_offset += len;
            let raw = payload
                .get(offset..offset + len)
                .ok_or_else(|| bad("payload truncated"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(n) = name.strip_prefix("param/") {
                params.insert(n, t);
            } else if name.starts_with("adam.m/") {
                m.push(t);
            } else if name.starts_with("adam.v/") {
                v.push(t);
            } else {
                return Err(bad(&format!("unknown tensor {name}")));
            }
        }
        if expected_offset != payload.len() {
            return Err(bad("payload length mismatch"));
        }
        let optimizer = if m.is_empty() && v.is_empty() {
            None
        } else if m.len() == params.len() && v.len() == params.len() {
            Some(AdamWState { step, m, v })
        } else {
            return Err(bad("optimizer state does not match parameters"));
        };
        Ok(Self {
            config_hash,
            params,
            optimizer,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.encode()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
