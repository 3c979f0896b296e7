//! JSON checkpoints. Nets are stored block by block under
//! "<net>.l<layer>.w|b" keys in a sorted map, floats in shortest
//! round-trip decimal form, so identical states write identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mlp::{Mlp, ParameterBlock};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetBlock {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub nets: BTreeMap<String, NetBlock>,
    pub config_hash: String,
    pub step: u64,
    /// Non-network state worth restoring, e.g. the entropy temperature.
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
}

impl Checkpoint {
    pub fn new(config_hash: &str, step: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            nets: BTreeMap::new(),
            config_hash: config_hash.to_string(),
            step,
            scalars: BTreeMap::new(),
        }
    }

    /// Adds every block of `net`. Block names already carry the net prefix
    /// given at construction.
    pub fn insert_net(&mut self, net: &Mlp) {
        for b in &net.blocks {
            self.nets.insert(
                b.name.clone(),
                NetBlock {
                    shape: b.shape.clone(),
                    values: b.values.clone(),
                },
            );
        }
    }

    /// Rebuilds the net stored under `prefix` from its "<prefix>.l<i>.w|b"
    /// blocks, validating the layer chain.
    pub fn extract_net(&self, prefix: &str) -> Result<Mlp> {
        let mut layers: BTreeMap<usize, (Option<&NetBlock>, Option<&NetBlock>)> = BTreeMap::new();
        for (name, block) in &self.nets {
            let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix(".l")) else {
                continue;
            };
            let Some((idx, kind)) = rest.split_once('.') else {
                continue;
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Schema(format!("bad layer index in {name}")))?;
            let entry = layers.entry(idx).or_default();
            match kind {
                "w" => entry.0 = Some(block),
                "b" => entry.1 = Some(block),
                _ => return Err(Error::Schema(format!("unknown block kind in {name}"))),
            }
        }
        if layers.is_empty() {
            return Err(Error::Schema(format!("checkpoint has no net {prefix:?}")));
        }

        let n_layers = layers.len();
        let mut blocks = Vec::with_capacity(2 * n_layers);
        let mut widths: Vec<usize> = Vec::with_capacity(n_layers + 1);
        for l in 0..n_layers {
            let (w, b) = layers
                .get(&l)
                .and_then(|(w, b)| w.zip(*b))
                .ok_or_else(|| Error::Schema(format!("net {prefix:?} missing layer {l}")))?;
            if w.shape.len() != 2 || b.shape.len() != 1 || w.shape[0] != b.shape[0] {
                return Err(Error::Schema(format!("net {prefix:?} layer {l} bad shapes")));
            }
            if w.values.len() != w.shape[0] * w.shape[1] || b.values.len() != b.shape[0] {
                return Err(Error::Schema(format!(
                    "net {prefix:?} layer {l} value count mismatch"
                )));
            }
            if l == 0 {
                widths.push(w.shape[1]);
            } else if widths[l] != w.shape[1] {
                return Err(Error::Schema(format!(
                    "net {prefix:?} layer {l} input width {} breaks the chain",
                    w.shape[1]
                )));
            }
            widths.push(w.shape[0]);
            blocks.push(ParameterBlock {
                name: format!("{prefix}.l{l}.w"),
                shape: w.shape.clone(),
                values: w.values.clone(),
            });
            blocks.push(ParameterBlock {
                name: format!("{prefix}.l{l}.b"),
                shape: b.shape.clone(),
                values: b.values.clone(),
            });
        }
        Ok(Mlp {
            input_dim: widths[0],
            hidden: widths[1..widths.len() - 1].to_vec(),
            output_dim: *widths.last().expect("widths nonempty"),
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for (name, b) in &self.nets {
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint block {name}")));
            }
        }
        for (name, v) in &self.scalars {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("checkpoint scalar {name}")));
            }
        }
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
