//! Checkpoints: `manifest.json` describing every tensor plus `weights.bin`
//! holding the values as little-endian f64 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sassl_core::nn::ParamSet;
use sassl_core::Tensor;

use crate::error::{CliError, Result};
use crate::io::write_file;

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT: &str = "sassl-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length in the blob.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub step: u64,
    pub tensors: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>, step: u64) -> Self {
        Checkpoint {
            config_hash: config_hash.into(),
            step,
            tensors: Vec::new(),
        }
    }

    /// Appends every parameter of `set` as `<prefix>.<name>`.
    pub fn push_set(&mut self, prefix: &str, set: &ParamSet) {
        for p in set.iter() {
            self.tensors
                .push((format!("{prefix}.{}", p.name), p.value.clone()));
        }
    }

    /// Loads the `<prefix>.*` tensors into `set`; names and shapes must match
    /// exactly.
    pub fn load_set(&self, prefix: &str, set: &mut ParamSet) -> Result<()> {
        let head = format!("{prefix}.");
        let entries = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&head).map(|rest| (rest, t)));
        set.load_values(entries)
            .map_err(|e| CliError::data(format!("checkpoint section {prefix}: {e}")))
    }

    pub fn has_section(&self, prefix: &str) -> bool {
        let head = format!("{prefix}.");
        self.tensors.iter().any(|(n, _)| n.starts_with(&head))
    }

    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.config_hash == other.config_hash
            && self.step == other.step
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let length = 8 * t.len() as u64;
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect();
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: self.config_hash.clone(),
            step: self.step,
            tensors,
        }
    }

    /// Manifest text and weight blob.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        text.push('\n');
        let total: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut blob = Vec::with_capacity(8 * total);
        for (_, t) in &self.tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (text, blob)
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> std::result::Result<Self, String> {
        let m: Manifest = serde_json::from_str(manifest).map_err(|e| e.to_string())?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(format!("unsupported format {} v{}", m.format, m.version));
        }
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for e in &m.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(format!(
                    "{}: offset {} leaves a gap or overlap (expected {expected})",
                    e.name, e.offset
                ));
            }
            if e.length != 8 * n as u64 {
                return Err(format!(
                    "{}: length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                ));
            }
            let end = expected + e.length;
            if end > blob.len() as u64 {
                return Err(format!("{}: runs past the end of the blob", e.name));
            }
            let data = blob[expected as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| format!("{}: {err}", e.name))?;
            tensors.push((e.name.clone(), t));
            expected = end;
        }
        if expected != blob.len() as u64 {
            return Err(format!(
                "blob has {} bytes, manifest covers {expected}",
                blob.len()
            ));
        }
        Ok(Checkpoint {
            config_hash: m.config_hash,
            step: m.step,
            tensors,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (text, blob) = self.encode();
        write_file(&dir.join(WEIGHTS), &blob)?;
        write_file(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let wpath = dir.join(WEIGHTS);
        let text = fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
        let blob = fs::read(&wpath).map_err(|e| CliError::io(&wpath, e))?;
        Self::decode(&text, &blob).map_err(|m| CliError::data(format!("{}: {m}", dir.display())))
    }
}
