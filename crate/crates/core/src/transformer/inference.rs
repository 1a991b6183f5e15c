// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass, decoding and likelihood evaluation.
//!
//! Tokens are processed one position at a time against a per-sequence
//! key/value cache, which makes the attention mask causal by construction.
//! The full-sequence [`forward`] is just a loop over [`DecodeState::step`].

use crate::error::{LaserError, Result};
use crate::tensor::Matrix;
use crate::transformer::config::{MatrixType, NormKind};
use crate::transformer::model::TransformerModel;

pub type TokenId = u32;

/// Attention probabilities recorded by [`forward_traced`]:
/// `[layer][head]` is a `T × T` matrix whose row `i` holds `p(j | i)`.
pub type AttentionTrace = Vec<Vec<Matrix>>;

#[derive(Clone, Default)]
struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Incremental decoding state for one sequence.
#[derive(Clone)]
pub struct DecodeState<'m> {
    model: &'m TransformerModel,
    caches: Vec<LayerCache>,
    position: usize,
}

fn add_bias(x: &mut [f64], model: &TransformerModel, layer: usize, tau: MatrixType) {
    if let Some(biases) = &model.base().blocks[layer].biases {
        for (v, b) in x.iter_mut().zip(&biases[tau.index()]) {
            *v += b;
        }
    }
}

fn project(model: &TransformerModel, layer: usize, tau: MatrixType, x: &[f64]) -> Vec<f64> {
    let mut out = model
        .weight_unchecked(tau, layer)
        .vecmat(x)
        .expect("shapes validated at model construction");
    add_bias(&mut out, model, layer, tau);
    out
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax_token(scores: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Indices of the `k` largest values, descending, lowest index on ties.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<TokenId> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.into_iter().map(|i| i as TokenId).collect()
}

impl<'m> DecodeState<'m> {
    pub fn new(model: &'m TransformerModel) -> Self {
        Self {
            model,
            caches: vec![LayerCache::default(); model.config().num_layers],
            position: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Consumes one token and returns next-token log-probabilities.
    pub fn step(&mut self, token: TokenId) -> Result<Vec<f64>> {
        Ok(self.advance(token, true, None)?.expect("logits requested"))
    }

    /// Consumes one token without computing the output distribution.
    pub fn feed(&mut self, token: TokenId) -> Result<()> {
        self.advance(token, false, None).map(|_| ())
    }

    fn advance(
        &mut self,
        token: TokenId,
        want_logits: bool,
        mut trace: Option<&mut Vec<Vec<Vec<f64>>>>,
    ) -> Result<Option<Vec<f64>>> {
        let model = self.model;
        let cfg = model.config();
        if token as usize >= cfg.vocab_size {
            return Err(LaserError::invalid(format!(
                "token id {token} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if self.position >= cfg.max_context {
            return Err(LaserError::invalid(format!(
                "sequence exceeds max context {}",
                cfg.max_context
            )));
        }
        let base = model.base();
        let eps = cfg.layer_norm_eps;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut h: Vec<f64> = base
            .embedding
            .row(token as usize)
            .iter()
            .zip(base.position.row(self.position))
            .map(|(e, p)| e + p)
            .collect();

        for (l, block) in base.blocks.iter().enumerate() {
            let attn_in = match cfg.norm_kind {
                NormKind::PreLayernorm => block.ln1.apply(&h, eps),
                NormKind::PostLayernorm => h.clone(),
            };
            let q = project(model, l, MatrixType::Wq, &attn_in);
            let k = project(model, l, MatrixType::Wk, &attn_in);
            let v = project(model, l, MatrixType::Wv, &attn_in);
            let cache = &mut self.caches[l];
            cache.keys.push(k);
            cache.values.push(v);

            let mut z = vec![0.0; cfg.hidden_dim];
            let mut layer_trace = Vec::with_capacity(heads);
            for head in 0..heads {
                let range = head * hd..(head + 1) * hd;
                let qh = &q[range.clone()];
                let scores: Vec<f64> = cache
                    .keys
                    .iter()
                    .map(|kj| {
                        qh.iter()
                            .zip(&kj[range.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
                for (p, vj) in probs.iter().zip(&cache.values) {
                    for (zi, vv) in z[range.clone()].iter_mut().zip(&vj[range.clone()]) {
                        *zi += p * vv;
                    }
                }
                if trace.is_some() {
                    layer_trace.push(probs);
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(layer_trace);
            }

            let attn_out = project(model, l, MatrixType::Wo, &z);
            let mut u: Vec<f64> = attn_out.iter().zip(&h).map(|(a, b)| a + b).collect();
            if cfg.norm_kind == NormKind::PostLayernorm {
                u = block.ln1.apply(&u, eps);
            }
            let mlp_in = match cfg.norm_kind {
                NormKind::PreLayernorm => block.ln2.apply(&u, eps),
                NormKind::PostLayernorm => u.clone(),
            };
            let mut hidden = project(model, l, MatrixType::Uin, &mlp_in);
            hidden
                .iter_mut()
                .for_each(|x| *x = cfg.activation.apply(*x));
            let mlp_out = project(model, l, MatrixType::Uout, &hidden);
            h = mlp_out.iter().zip(&u).map(|(a, b)| a + b).collect();
            if cfg.norm_kind == NormKind::PostLayernorm {
                h = block.ln2.apply(&h, eps);
            }
        }
        self.position += 1;

        if !want_logits {
            return Ok(None);
        }
        let last = match cfg.norm_kind {
            NormKind::PreLayernorm => base.final_ln.apply(&h, eps),
            NormKind::PostLayernorm => h,
        };
        let logits = base
            .unembedding
            .vecmat(&last)
            .expect("shapes validated at model construction");
        Ok(Some(log_softmax(&logits)))
    }
}

fn check_length(model: &TransformerModel, len: usize) -> Result<()> {
    if len == 0 {
        return Err(LaserError::invalid("token sequence is empty"));
    }
    if len > model.config().max_context {
        return Err(LaserError::invalid(format!(
            "sequence of length {len} exceeds max context {}",
            model.config().max_context
        )));
    }
    Ok(())
}

/// Next-token log-probabilities for every position: a `T × V` matrix.
pub fn forward(model: &TransformerModel, tokens: &[TokenId]) -> Result<Matrix> {
    check_length(model, tokens.len())?;
    let mut state = DecodeState::new(model);
    let mut data = Vec::with_capacity(tokens.len() * model.config().vocab_size);
    for &t in tokens {
        data.extend(state.step(t)?);
    }
    Ok(Matrix::new(tokens.len(), model.config().vocab_size, data)
        .expect("log-probabilities are finite"))
}

/// [`forward`] plus the attention probabilities of every layer and head.
pub fn forward_traced(
    model: &TransformerModel,
    tokens: &[TokenId],
) -> Result<(Matrix, AttentionTrace)> {
    check_length(model, tokens.len())?;
    let cfg = model.config();
    let n = tokens.len();
    let mut trace: AttentionTrace = (0..cfg.num_layers)
        .map(|_| (0..cfg.num_heads).map(|_| Matrix::zeros(n, n)).collect())
        .collect();
    let mut state = DecodeState::new(model);
    let mut data = Vec::with_capacity(n * cfg.vocab_size);
    for (i, &t) in tokens.iter().enumerate() {
        let mut step_trace = Vec::new();
        data.extend(
            state
                .advance(t, true, Some(&mut step_trace))?
                .expect("logits"),
        );
        for (l, heads) in step_trace.into_iter().enumerate() {
            for (hh, probs) in heads.into_iter().enumerate() {
                for (j, p) in probs.into_iter().enumerate() {
                    trace[l][hh][(i, j)] = p;
                }
            }
        }
    }
    let out = Matrix::new(n, cfg.vocab_size, data).expect("log-probabilities are finite");
    Ok((out, trace))
}

/// Appends `n_tokens` argmax tokens to `prompt` and returns the whole sequence.
pub fn greedy_decode(
    model: &TransformerModel,
    prompt: &[TokenId],
    n_tokens: usize,
) -> Result<Vec<TokenId>> {
    check_length(model, prompt.len())?;
    check_length(model, prompt.len() + n_tokens)?;
    let (state, dist) = prefill(model, prompt)?;
    let mut seq = prompt.to_vec();
    seq.extend(greedy_extend(state, dist, n_tokens)?);
    Ok(seq)
}

/// Consumes `prompt` and returns the state together with the distribution
/// of the following token.
pub fn prefill<'m>(
    model: &'m TransformerModel,
    prompt: &[TokenId],
) -> Result<(DecodeState<'m>, Vec<f64>)> {
    check_length(model, prompt.len())?;
    let mut state = DecodeState::new(model);
    for &t in &prompt[..prompt.len() - 1] {
        state.feed(t)?;
    }
    let dist = state.step(prompt[prompt.len() - 1])?;
    Ok((state, dist))
}

/// Generates `n_tokens` greedy tokens from a prefilled state.
pub fn greedy_extend(
    mut state: DecodeState<'_>,
    mut dist: Vec<f64>,
    n_tokens: usize,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let next = argmax_token(&dist);
        out.push(next);
        if i + 1 < n_tokens {
            dist = state.step(next)?;
        }
    }
    Ok(out)
}

/// Teacher-forced log-probabilities of `target` from a prefilled state.
pub fn score_continuation(
    mut state: DecodeState<'_>,
    mut dist: Vec<f64>,
    target: &[TokenId],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(target.len());
    for (i, &t) in target.iter().enumerate() {
        let lp = *dist
            .get(t as usize)
            .ok_or_else(|| LaserError::invalid(format!("target token {t} out of vocabulary")))?;
        out.push(lp);
        if i + 1 < target.len() {
            dist = state.step(t)?;
        }
    }
    Ok(out)
}

/// Log-probability of each `target` token given `context` and the preceding
/// targets (teacher forcing).
pub fn target_log_probs(
    model: &TransformerModel,
    context: &[TokenId],
    target: &[TokenId],
) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(LaserError::invalid("context must be nonempty"));
    }
    check_length(model, context.len() + target.len().saturating_sub(1))?;
    let (state, dist) = prefill(model, context)?;
    score_continuation(state, dist, target)
}

/// Mean negative log-probability of `target` given `context`.
pub fn sequence_log_loss(
    model: &TransformerModel,
    context: &[TokenId],
    target: &[TokenId],
) -> Result<f64> {
    if target.is_empty() {
        return Err(LaserError::invalid("target must be nonempty"));
    }
    let lps = target_log_probs(model, context, target)?;
    Ok(-lps.iter().sum::<f64>() / lps.len() as f64)
}

/// The `k` most likely next tokens after `prompt`, descending.
pub fn topk_tokens(model: &TransformerModel, prompt: &[TokenId], k: usize) -> Result<Vec<TokenId>> {
    let v = model.config().vocab_size;
    if k == 0 || k > v {
        return Err(LaserError::invalid(format!("k = {k} must be in 1..={v}")));
    }
    check_length(model, prompt.len())?;
    Ok(topk_indices(&next_token_log_probs(model, prompt)?, k))
}

/// Log-probabilities of the token following `prompt`.
pub fn next_token_log_probs(model: &TransformerModel, prompt: &[TokenId]) -> Result<Vec<f64>> {
    Ok(prefill(model, prompt)?.1)
}

/// Per-token losses contributed by each sliding window: `(window_start,
/// first_target, end)` triples. The first window scores every token after
/// its first; later windows score only tokens not scored before.
pub fn perplexity_windows(
    len: usize,
    max_context: usize,
    stride: usize,
) -> Vec<(usize, usize, usize)> {
    let mut windows = Vec::new();
    let mut prev_end = 0usize;
    let mut begin = 0usize;
    while begin < len {
        let end = (begin + max_context).min(len);
        let first = prev_end.max(begin + 1);
        if first < end {
            windows.push((begin, first, end));
        }
        prev_end = end;
        if end == len {
            break;
        }
        begin += stride;
    }
    windows
}

/// `exp` of the mean token negative log-likelihood over `corpus`, scored
/// with windows of `max_context` tokens advancing by `stride`.
pub fn sliding_window_perplexity(
    model: &TransformerModel,
    corpus: &[TokenId],
    stride: usize,
) -> Result<f64> {
    if stride == 0 {
        return Err(LaserError::invalid("stride must be at least 1"));
    }
    if corpus.len() < 2 {
        return Err(LaserError::invalid("corpus must contain at least 2 tokens"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (begin, first, end) in perplexity_windows(corpus.len(), model.config().max_context, stride)
    {
        let context = &corpus[begin..first];
        let targets = &corpus[first..end];
        let lps = target_log_probs(model, context, targets)?;
        total -= lps.iter().sum::<f64>();
        count += lps.len();
    }
    Ok((total / count as f64).exp())
}
