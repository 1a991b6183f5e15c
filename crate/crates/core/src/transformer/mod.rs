// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer inference with weights addressed by
//! `(matrix type, layer)`.

mod config;
mod inference;
mod model;
mod tokenizer;
mod tokens;

pub use config::{Activation, MatrixType, ModelConfig, NormKind};
pub use inference::{
    argmax_token, forward, forward_traced, greedy_decode, greedy_extend, log_softmax,
    next_token_log_probs, perplexity_windows, prefill, score_continuation, sequence_log_loss,
    sliding_window_perplexity, target_log_probs, topk_indices, topk_tokens, AttentionTrace,
    DecodeState, TokenId,
};
pub use model::{BaseWeights, BlockWeights, LayerNorm, Slot, TransformerModel};
pub use tokenizer::ByteTokenizer;
pub use tokens::{parse_token_sequence, read_token_sequence};
