// SPDX-License-Identifier: MIT OR Apache-2.0

//! LTC ("Laser Tensor Container") checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [0..8)    magic "LTCV0001"
//! [8..16)   u64 header length N
//! [16..16+N) UTF-8 JSON header
//! [16+N..)  raw f32 payload, row-major, tensors in offset order
//! ```
//!
//! The header maps tensor names to `{"dtype": "f32", "shape": [...],
//! "offset": o, "length": bytes}` (offsets relative to the payload start)
//! and additionally carries the reserved keys `config`, `fidelity` and
//! (optionally) `metadata`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LaserError, Result};
use crate::tensor::Matrix;
use crate::transformer::{
    BaseWeights, BlockWeights, LayerNorm, MatrixType, ModelConfig, Slot, TransformerModel,
};

pub const MAGIC: &[u8; 8] = b"LTCV0001";
const RESERVED: [&str; 3] = ["config", "fidelity", "metadata"];

/// Whether the source checkpoint maps onto this engine exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    #[default]
    Full,
    /// The source uses positional or attention variants the engine does
    /// not model; logits are approximate.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// In-memory image of an LTC file. `order` fixes payload layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LtcFile {
    pub config: ModelConfig,
    pub fidelity: Fidelity,
    pub metadata: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
    pub order: Vec<String>,
}

pub fn matrix_name(slot: Slot) -> String {
    format!("layers.{}.{}.weight", slot.layer, slot.tau.as_str())
}

pub fn bias_name(slot: Slot) -> String {
    format!("layers.{}.{}.bias", slot.layer, slot.tau.as_str())
}

/// Canonical tensor names for `config`, in payload order.
pub fn canonical_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec![
        "embedding.weight".to_string(),
        "position.weight".to_string(),
    ];
    for l in 0..config.num_layers {
        for tau in MatrixType::ALL {
            names.push(matrix_name(Slot::new(tau, l)));
            if config.use_bias {
                names.push(bias_name(Slot::new(tau, l)));
            }
        }
        for ln in ["ln1", "ln2"] {
            names.push(format!("layers.{l}.{ln}.weight"));
            names.push(format!("layers.{l}.{ln}.bias"));
        }
    }
    names.push("final_ln.weight".into());
    names.push("final_ln.bias".into());
    names.push("unembedding.weight".into());
    names
}

impl LtcFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        header.insert("config".into(), serde_json::to_value(&self.config)?);
        header.insert("fidelity".into(), serde_json::to_value(self.fidelity)?);
        if !self.metadata.is_empty() {
            header.insert("metadata".into(), serde_json::to_value(&self.metadata)?);
        }
        let mut offset = 0u64;
        for name in &self.order {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| LaserError::Format(format!("order lists unknown tensor {name}")))?;
            if t.data.len() != t.numel() {
                return Err(LaserError::Format(format!(
                    "tensor {name}: shape {:?} does not match {} values",
                    t.shape,
                    t.data.len()
                )));
            }
            let length = 4 * t.data.len() as u64;
            let entry = TensorEntry {
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                length,
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset += length;
        }
        if self.order.len() != self.tensors.len() {
            return Err(LaserError::Format(
                "order does not cover every tensor".into(),
            ));
        }
        let header_bytes = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for name in &self.order {
            for v in &self.tensors[name].data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(LaserError::Format("missing LTCV0001 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| LaserError::Format("header length exceeds file size".into()))?;
        let header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| LaserError::Format(format!("header is not a JSON object: {e}")))?;
        let payload = &bytes[data_start..];

        let config: ModelConfig = serde_json::from_value(
            header
                .get("config")
                .cloned()
                .ok_or_else(|| LaserError::Format("header has no config".into()))?,
        )
        .map_err(|e| LaserError::Format(format!("bad config: {e}")))?;
        let fidelity = match header.get("fidelity") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| LaserError::Format(format!("bad fidelity flag: {e}")))?,
            None => Fidelity::Full,
        };
        let metadata = match header.get("metadata") {
            Some(Value::Object(m)) => m.clone().into_iter().collect(),
            Some(_) => return Err(LaserError::Format("metadata must be an object".into())),
            None => BTreeMap::new(),
        };

        let mut entries: Vec<(String, TensorEntry)> = Vec::new();
        for (name, value) in &header {
            if RESERVED.contains(&name.as_str()) {
                continue;
            }
            let entry: TensorEntry = serde_json::from_value(value.clone())
                .map_err(|e| LaserError::Format(format!("tensor {name}: {e}")))?;
            if entry.dtype != "f32" {
                return Err(LaserError::Format(format!(
                    "tensor {name}: unsupported dtype {}",
                    entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.shape.is_empty() || entry.shape.len() > 2 || entry.length != 4 * numel as u64 {
                return Err(LaserError::Format(format!(
                    "tensor {name}: shape {:?} inconsistent with length {}",
                    entry.shape, entry.length
                )));
            }
            entries.push((name.clone(), entry));
        }
        entries.sort_by_key(|(_, e)| e.offset);
        let mut cursor = 0u64;
        let mut tensors = BTreeMap::new();
        let mut order = Vec::with_capacity(entries.len());
        for (name, e) in entries {
            if e.offset < cursor {
                return Err(LaserError::Format(format!(
                    "tensor {name} overlaps its predecessor"
                )));
            }
            let end = e.offset + e.length;
            if end > payload.len() as u64 {
                return Err(LaserError::Format(format!(
                    "tensor {name} runs past end of file"
                )));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            cursor = end;
            order.push(name.clone());
            tensors.insert(
                name,
                Tensor {
                    shape: e.shape,
                    data,
                },
            );
        }
        Ok(Self {
            config,
            fidelity,
            metadata,
            tensors,
            order,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LaserError::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    fn take_matrix(&self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| LaserError::Format(format!("missing tensor {name}")))?;
        if t.shape != [shape.0, shape.1] {
            return Err(LaserError::Format(format!(
                "tensor {name}: expected shape {:?}, found {:?}",
                [shape.0, shape.1],
                t.shape
            )));
        }
        Matrix::new(
            shape.0,
            shape.1,
            t.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .map_err(|e| LaserError::Format(format!("tensor {name}: {e}")))
    }

    fn take_vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| LaserError::Format(format!("missing tensor {name}")))?;
        if t.shape != [len] {
            return Err(LaserError::Format(format!(
                "tensor {name}: expected shape [{len}], found {:?}",
                t.shape
            )));
        }
        Ok(t.data.iter().map(|&v| f64::from(v)).collect())
    }

    /// Builds a model from the canonical tensor set. Extra tensors are an
    /// error, so a partial or foreign export cannot load silently.
    pub fn to_model(&self) -> Result<TransformerModel> {
        let cfg = &self.config;
        cfg.validate()?;
        let expected = canonical_names(cfg);
        let missing: Vec<&String> = expected
            .iter()
            .filter(|n| !self.tensors.contains_key(*n))
            .collect();
        if !missing.is_empty() {
            return Err(LaserError::Format(format!("missing tensors: {missing:?}")));
        }
        if self.tensors.len() != expected.len() {
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|n| !expected.contains(n))
                .collect();
            return Err(LaserError::Format(format!("unexpected tensors: {extra:?}")));
        }
        if self.fidelity == Fidelity::Reduced {
            log::warn!("container is flagged reduced-fidelity; logits are approximate");
        }
        let (v, d, t) = (cfg.vocab_size, cfg.hidden_dim, cfg.max_context);
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut mats = Vec::with_capacity(6);
            for tau in MatrixType::ALL {
                mats.push(Arc::new(self.take_matrix(
                    &matrix_name(Slot::new(tau, l)),
                    cfg.matrix_shape(tau),
                )?));
            }
            let matrices: [Arc<Matrix>; 6] = mats.try_into().expect("six matrix types");
            let biases = if cfg.use_bias {
                let mut bs = Vec::with_capacity(6);
                for tau in MatrixType::ALL {
                    bs.push(self.take_vector(&bias_name(Slot::new(tau, l)), cfg.bias_len(tau))?);
                }
                Some(bs.try_into().expect("six matrix types"))
            } else {
                None
            };
            let ln = |which: &str| -> Result<LayerNorm> {
                Ok(LayerNorm {
                    weight: self.take_vector(&format!("layers.{l}.{which}.weight"), d)?,
                    bias: self.take_vector(&format!("layers.{l}.{which}.bias"), d)?,
                })
            };
            blocks.push(BlockWeights {
                matrices,
                biases,
                ln1: ln("ln1")?,
                ln2: ln("ln2")?,
            });
        }
        let base = BaseWeights {
            embedding: self.take_matrix("embedding.weight", (v, d))?,
            position: self.take_matrix("position.weight", (t, d))?,
            unembedding: self.take_matrix("unembedding.weight", (d, v))?,
            blocks,
            final_ln: LayerNorm {
                weight: self.take_vector("final_ln.weight", d)?,
                bias: self.take_vector("final_ln.bias", d)?,
            },
        };
        TransformerModel::new(cfg.clone(), base)
    }

    /// Snapshot of a model view's effective weights, rounded to `f32`.
    pub fn from_model(model: &TransformerModel, fidelity: Fidelity) -> Self {
        let cfg = model.config().clone();
        let base = model.base();
        let mut tensors = BTreeMap::new();
        let mat = |m: &Matrix| Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().iter().map(|&v| v as f32).collect(),
        };
        let vec = |x: &[f64]| Tensor {
            shape: vec![x.len()],
            data: x.iter().map(|&v| v as f32).collect(),
        };
        tensors.insert("embedding.weight".into(), mat(&base.embedding));
        tensors.insert("position.weight".into(), mat(&base.position));
        tensors.insert("unembedding.weight".into(), mat(&base.unembedding));
        for (l, block) in base.blocks.iter().enumerate() {
            for tau in MatrixType::ALL {
                let slot = Slot::new(tau, l);
                tensors.insert(matrix_name(slot), mat(model.weight_unchecked(tau, l)));
                if let Some(b) = &block.biases {
                    tensors.insert(bias_name(slot), vec(&b[tau.index()]));
                }
            }
            for (which, ln) in [("ln1", &block.ln1), ("ln2", &block.ln2)] {
                tensors.insert(format!("layers.{l}.{which}.weight"), vec(&ln.weight));
                tensors.insert(format!("layers.{l}.{which}.bias"), vec(&ln.bias));
            }
        }
        tensors.insert("final_ln.weight".into(), vec(&base.final_ln.weight));
        tensors.insert("final_ln.bias".into(), vec(&base.final_ln.bias));
        let order = canonical_names(&cfg);
        Self {
            config: cfg,
            fidelity,
            metadata: BTreeMap::new(),
            tensors,
            order,
        }
    }

    /// Concatenated payload bytes, in `order`.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.order
            .iter()
            .flat_map(|n| self.tensors[n].data.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// Loads a model from an LTC file.
pub fn load_model(path: &Path) -> Result<TransformerModel> {
    LtcFile::read(path)?.to_model()
}

/// Writes `bytes` to `path` via a temporary sibling and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| LaserError::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        LaserError::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{Activation, NormKind};

    fn cfg(use_bias: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            mlp_hidden_dim: 12,
            vocab_size: 11,
            max_context: 6,
            activation: Activation::Relu,
            use_bias,
            norm_kind: NormKind::PreLayernorm,
            layer_norm_eps: 1e-5,
        }
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let model = TransformerModel::random(cfg(false), 4).unwrap();
        let bytes = LtcFile::from_model(&model, Fidelity::Full)
            .encode()
            .unwrap();
        assert_eq!(&bytes[..8], b"LTCV0001");
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        let emb = &header["embedding.weight"];
        assert_eq!(emb["dtype"], "f32");
        assert_eq!(emb["shape"], serde_json::json!([11, 8]));
        assert_eq!(emb["offset"], 0);
        assert_eq!(emb["length"], 11 * 8 * 4);
        assert_eq!(header["position.weight"]["offset"], 11 * 8 * 4);
        assert_eq!(header["config"]["hidden_dim"], 8);
        assert_eq!(header["fidelity"], "full");
        // first payload value is the first embedding entry
        let first = f32::from_le_bytes(bytes[16 + n..20 + n].try_into().unwrap());
        assert_eq!(first, model.base().embedding[(0, 0)] as f32);
        // 2 layers × 6 taxonomy + embeddings/position/unembedding + 4 ln per layer + final ln
        assert_eq!(canonical_names(model.config()).len(), 12 + 3 + 8 + 2);
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        for use_bias in [false, true] {
            let model = TransformerModel::random(cfg(use_bias), 9).unwrap();
            let file = LtcFile::from_model(&model, Fidelity::Full);
            let decoded = LtcFile::decode(&file.encode().unwrap()).unwrap();
            assert_eq!(decoded, file);
            let reloaded = decoded.to_model().unwrap();
            let again = LtcFile::from_model(&reloaded, Fidelity::Full);
            assert_eq!(again.payload_bytes(), file.payload_bytes());
        }
    }

    #[test]
    fn rejects_corruption() {
        let model = TransformerModel::random(cfg(false), 4).unwrap();
        let bytes = LtcFile::from_model(&model, Fidelity::Full)
            .encode()
            .unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(LtcFile::decode(&bad).is_err());
        assert!(LtcFile::decode(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[8..16].copy_from_slice(&(u64::MAX).to_le_bytes());
        assert!(LtcFile::decode(&bad).is_err());
    }

    #[test]
    fn missing_and_extra_tensors_fail_to_load() {
        let model = TransformerModel::random(cfg(false), 4).unwrap();
        let mut file = LtcFile::from_model(&model, Fidelity::Full);
        let mut extra = file.clone();
        extra.tensors.insert(
            "junk".into(),
            Tensor {
                shape: vec![1],
                data: vec![0.0],
            },
        );
        extra.order.push("junk".into());
        assert!(extra.to_model().is_err());
        file.tensors.remove("layers.1.u_out.weight");
        file.order.retain(|n| n != "layers.1.u_out.weight");
        let err = file.to_model().unwrap_err().to_string();
        assert!(err.contains("layers.1.u_out.weight"), "{err}");
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ltc");
        let model = TransformerModel::random(cfg(true), 2).unwrap();
        LtcFile::from_model(&model, Fidelity::Reduced)
            .write(&path)
            .unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
        assert_eq!(LtcFile::read(&path).unwrap().fidelity, Fidelity::Reduced);
    }
}
