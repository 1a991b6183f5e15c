// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LaserError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Tanh approximation, as used by GPT-2 style checkpoints.
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
                0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    PreLayernorm,
    PostLayernorm,
}

fn default_ln_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub activation: Activation,
    pub use_bias: bool,
    pub norm_kind: NormKind,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(LaserError::invalid("num_layers must be at least 1"));
        }
        if self.vocab_size < 2 {
            return Err(LaserError::invalid("vocab_size must be at least 2"));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.mlp_hidden_dim == 0 {
            return Err(LaserError::invalid("dimensions must be positive"));
        }
        if self.max_context == 0 {
            return Err(LaserError::invalid("max_context must be positive"));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(LaserError::invalid(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(LaserError::invalid("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Shape of the `(tau, ·)` weight matrix. Vectors multiply on the left,
    /// so every matrix is `input_dim × output_dim`.
    pub fn matrix_shape(&self, tau: MatrixType) -> (usize, usize) {
        let d = self.hidden_dim;
        match tau {
            MatrixType::Wq | MatrixType::Wk | MatrixType::Wv | MatrixType::Wo => (d, d),
            MatrixType::Uin => (d, self.mlp_hidden_dim),
            MatrixType::Uout => (self.mlp_hidden_dim, d),
        }
    }

    /// Length of the bias vector that accompanies `tau` when `use_bias` is set.
    pub fn bias_len(&self, tau: MatrixType) -> usize {
        self.matrix_shape(tau).1
    }
}

/// The six intervention targets of a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MatrixType {
    #[serde(rename = "wq")]
    Wq,
    #[serde(rename = "wk")]
    Wk,
    #[serde(rename = "wv")]
    Wv,
    #[serde(rename = "wo")]
    Wo,
    #[serde(rename = "u_in")]
    Uin,
    #[serde(rename = "u_out")]
    Uout,
}

impl MatrixType {
    pub const ALL: [MatrixType; 6] = [
        MatrixType::Wq,
        MatrixType::Wk,
        MatrixType::Wv,
        MatrixType::Wo,
        MatrixType::Uin,
        MatrixType::Uout,
    ];

    /// Name used in container tensor names and JSON.
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixType::Wq => "wq",
            MatrixType::Wk => "wk",
            MatrixType::Wv => "wv",
            MatrixType::Wo => "wo",
            MatrixType::Uin => "u_in",
            MatrixType::Uout => "u_out",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MatrixType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatrixType {
    type Err = LaserError;

    /// Accepts the canonical names plus common spellings such as `U_in`,
    /// `Uin`, `W_q`, `mlp_in`.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "wq" | "q" | "query" => Ok(MatrixType::Wq),
            "wk" | "k" | "key" => Ok(MatrixType::Wk),
            "wv" | "v" | "value" => Ok(MatrixType::Wv),
            "wo" | "o" | "out" => Ok(MatrixType::Wo),
            "uin" | "mlpin" | "fcin" => Ok(MatrixType::Uin),
            "uout" | "mlpout" | "fcout" => Ok(MatrixType::Uout),
            _ => Err(LaserError::invalid(format!("unknown matrix type {s:?}"))),
        }
    }
}
