// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LaserError, Result};
use crate::tensor::Matrix;
use crate::transformer::config::{MatrixType, ModelConfig};

/// Address of one intervenable weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub tau: MatrixType,
    pub layer: usize,
}

impl Slot {
    pub fn new(tau: MatrixType, layer: usize) -> Self {
        Self { tau, layer }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        x.iter()
            .zip(&self.weight)
            .zip(&self.bias)
            .map(|((v, w), b)| (v - mean) * inv * w + b)
            .collect()
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    /// Indexed by [`MatrixType::index`].
    pub matrices: [Arc<Matrix>; 6],
    /// Present iff the config enables biases. Never intervened on.
    pub biases: Option<[Vec<f64>; 6]>,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

/// The immutable baseline parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    /// `vocab × d`.
    pub embedding: Matrix,
    /// `max_context × d`, learned absolute positions.
    pub position: Matrix,
    /// `d × vocab`.
    pub unembedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_ln: LayerNorm,
}

/// A model view: shared baseline weights plus copy-on-write overrides of
/// individual `(tau, layer)` matrices. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    base: Arc<BaseWeights>,
    overrides: BTreeMap<Slot, Arc<Matrix>>,
}

impl TransformerModel {
    /// Checks every tensor against the shapes implied by `config`.
    pub fn new(config: ModelConfig, base: BaseWeights) -> Result<Self> {
        config.validate()?;
        let (v, d, t) = (config.vocab_size, config.hidden_dim, config.max_context);
        let expect = |what: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                Err(LaserError::invalid(format!(
                    "{what}: expected shape {:?}, got {:?}",
                    shape,
                    m.shape()
                )))
            } else {
                Ok(())
            }
        };
        let expect_len = |what: String, x: &[f64], len: usize| {
            if x.len() != len {
                Err(LaserError::invalid(format!(
                    "{what}: expected length {len}, got {}",
                    x.len()
                )))
            } else if x.iter().any(|v| !v.is_finite()) {
                Err(LaserError::invalid(format!("{what}: non-finite value")))
            } else {
                Ok(())
            }
        };
        expect("embedding", &base.embedding, (v, d))?;
        expect("position", &base.position, (t, d))?;
        expect("unembedding", &base.unembedding, (d, v))?;
        if base.blocks.len() != config.num_layers {
            return Err(LaserError::invalid(format!(
                "config has {} layers but {} blocks were supplied",
                config.num_layers,
                base.blocks.len()
            )));
        }
        for (l, block) in base.blocks.iter().enumerate() {
            for tau in MatrixType::ALL {
                expect(
                    &format!("layers.{l}.{tau}"),
                    &block.matrices[tau.index()],
                    config.matrix_shape(tau),
                )?;
            }
            match (&block.biases, config.use_bias) {
                (Some(biases), true) => {
                    for tau in MatrixType::ALL {
                        expect_len(
                            format!("layers.{l}.{tau}.bias"),
                            &biases[tau.index()],
                            config.bias_len(tau),
                        )?;
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(LaserError::invalid(format!(
                        "layer {l} has biases but use_bias is false"
                    )))
                }
                (None, true) => {
                    return Err(LaserError::invalid(format!(
                        "layer {l} is missing biases required by use_bias"
                    )))
                }
            }
            for (name, ln) in [("ln1", &block.ln1), ("ln2", &block.ln2)] {
                expect_len(format!("layers.{l}.{name}.weight"), &ln.weight, d)?;
                expect_len(format!("layers.{l}.{name}.bias"), &ln.bias, d)?;
            }
        }
        expect_len("final_ln.weight".into(), &base.final_ln.weight, d)?;
        expect_len("final_ln.bias".into(), &base.final_ln.bias, d)?;
        Ok(Self {
            config,
            base: Arc::new(base),
            overrides: BTreeMap::new(),
        })
    }

    /// A model whose matrices, embeddings and biases are all zero (layer
    /// norms are the identity affine map). Its next-token distribution is
    /// uniform everywhere.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, Matrix::zeros, |n| vec![0.0; n])
    }

    /// A seeded random model with entries scaled by `1/sqrt(fan_in)`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = std::cell::RefCell::new(&mut rng);
        Self::build(
            config,
            |r, c| {
                let scale = 1.0 / (r as f64).sqrt();
                Matrix::random_with(r, c, &mut **cell.borrow_mut()).scale(scale * 1.7)
            },
            |n| {
                let mut rng = cell.borrow_mut();
                (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
            },
        )
    }

    fn build(
        config: ModelConfig,
        mut matrix: impl FnMut(usize, usize) -> Matrix,
        mut vector: impl FnMut(usize) -> Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (v, d, t) = (config.vocab_size, config.hidden_dim, config.max_context);
        let embedding = matrix(v, d);
        let position = matrix(t, d).scale(0.5);
        let mut blocks = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let matrices = MatrixType::ALL.map(|tau| {
                let (r, c) = config.matrix_shape(tau);
                Arc::new(matrix(r, c))
            });
            let biases = config
                .use_bias
                .then(|| MatrixType::ALL.map(|tau| vector(config.bias_len(tau))));
            blocks.push(BlockWeights {
                matrices,
                biases,
                ln1: LayerNorm::identity(d),
                ln2: LayerNorm::identity(d),
            });
        }
        let unembedding = matrix(d, v);
        Self::new(
            config,
            BaseWeights {
                embedding,
                position,
                unembedding,
                blocks,
                final_ln: LayerNorm::identity(d),
            },
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    pub fn overrides(&self) -> &BTreeMap<Slot, Arc<Matrix>> {
        &self.overrides
    }

    /// Every intervenable slot, layer-major then in [`MatrixType`] order.
    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        (0..self.config.num_layers).flat_map(|l| {
            MatrixType::ALL
                .into_iter()
                .map(move |tau| Slot::new(tau, l))
        })
    }

    fn check_slot(&self, slot: Slot) -> Result<()> {
        if slot.layer >= self.config.num_layers {
            return Err(LaserError::invalid(format!(
                "layer {} out of range for a {}-layer model",
                slot.layer, self.config.num_layers
            )));
        }
        Ok(())
    }

    /// The effective matrix at `slot` (override if present, else baseline).
    pub fn weight(&self, slot: Slot) -> Result<&Matrix> {
        self.check_slot(slot)?;
        Ok(self.weight_unchecked(slot.tau, slot.layer))
    }

    #[inline]
    pub(crate) fn weight_unchecked(&self, tau: MatrixType, layer: usize) -> &Matrix {
        match self.overrides.get(&Slot::new(tau, layer)) {
            Some(m) => m,
            None => &self.base.blocks[layer].matrices[tau.index()],
        }
    }

    /// The unmodified baseline matrix at `slot`.
    pub fn baseline_weight(&self, slot: Slot) -> Result<&Matrix> {
        self.check_slot(slot)?;
        Ok(&self.base.blocks[slot.layer].matrices[slot.tau.index()])
    }

    /// A new view with `slot` replaced by `matrix`; `self` is untouched.
    pub fn with_override(&self, slot: Slot, matrix: Matrix) -> Result<Self> {
        self.check_slot(slot)?;
        let shape = self.config.matrix_shape(slot.tau);
        if matrix.shape() != shape {
            return Err(LaserError::invalid(format!(
                "override for {}/{} has shape {:?}, expected {:?}",
                slot.tau,
                slot.layer,
                matrix.shape(),
                shape
            )));
        }
        let mut next = self.clone();
        next.overrides.insert(slot, Arc::new(matrix));
        Ok(next)
    }

    /// Drops all overrides.
    pub fn baseline(&self) -> Self {
        Self {
            config: self.config.clone(),
            base: Arc::clone(&self.base),
            overrides: BTreeMap::new(),
        }
    }

    /// Whether two views share the same baseline allocation.
    pub fn shares_baseline_with(&self, other: &TransformerModel) -> bool {
        Arc::ptr_eq(&self.base, &other.base)
    }

    /// SHA-256 over the config and every effective parameter, hex-encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let mut feed = |xs: &[f64]| {
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        feed(self.base.embedding.as_slice());
        feed(self.base.position.as_slice());
        for (l, block) in self.base.blocks.iter().enumerate() {
            for tau in MatrixType::ALL {
                feed(self.weight_unchecked(tau, l).as_slice());
            }
            if let Some(biases) = &block.biases {
                for b in biases {
                    feed(b);
                }
            }
            for ln in [&block.ln1, &block.ln2] {
                feed(&ln.weight);
                feed(&ln.bias);
            }
        }
        feed(&self.base.final_ln.weight);
        feed(&self.base.final_ln.bias);
        feed(self.base.unembedding.as_slice());
        hex::encode(h.finalize())
    }
}
