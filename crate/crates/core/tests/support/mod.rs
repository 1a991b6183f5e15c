// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Nothing here calls into the engine's
//! forward pass, SVD or search code.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use laser_core::eval::{evaluate, Content, EvalConfig, QASample};
use laser_core::laser::{apply_plan, InterventionPlan, InterventionSpec, Objective, SearchConfig};
use laser_core::tensor::Matrix;
use laser_core::transformer::{Activation, MatrixType, ModelConfig, NormKind, TransformerModel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/toy")
        .join(name)
}

pub fn small_config(layers: usize, vocab: usize, context: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: 16,
        num_heads: 4,
        mlp_hidden_dim: 32,
        vocab_size: vocab,
        max_context: context,
        activation: Activation::Gelu,
        use_bias: true,
        norm_kind: NormKind::PreLayernorm,
        layer_norm_eps: 1e-5,
    }
}

// ---------------------------------------------------------------------------
// Forward pass, written as whole-sequence matrix algebra with an explicit
// causal mask.

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn matmul(x: &Rows, w: &Rows) -> Rows {
    let (n, k, m) = (x.len(), w.len(), w[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += x[i][t] * w[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add_row(x: &mut Rows, b: Option<&Vec<f64>>) {
    if let Some(b) = b {
        for row in x.iter_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
}

fn layer_norm(x: &Rows, gamma: &[f64], beta: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mu = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| gamma[j] * (v - mu) / (var + eps).sqrt() + beta[j])
                .collect()
        })
        .collect()
}

fn act(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
        }
    }
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Row `i` holds `log p(· | tokens[..=i])`.
pub fn naive_log_probs(model: &TransformerModel, tokens: &[u32]) -> Rows {
    let cfg = model.config();
    let base = model.base();
    let n = tokens.len();
    let eps = cfg.layer_norm_eps;
    let hd = cfg.hidden_dim / cfg.num_heads;
    let pre = cfg.norm_kind == NormKind::PreLayernorm;

    let mut x: Rows = (0..n)
        .map(|i| {
            (0..cfg.hidden_dim)
                .map(|j| base.embedding[(tokens[i] as usize, j)] + base.position[(i, j)])
                .collect()
        })
        .collect();

    for (l, block) in base.blocks.iter().enumerate() {
        let w = |tau: MatrixType| {
            to_rows(
                model
                    .weight(laser_core::transformer::Slot::new(tau, l))
                    .unwrap(),
            )
        };
        let b = |tau: MatrixType| block.biases.as_ref().map(|bs| &bs[tau.index()]);

        let a = if pre {
            layer_norm(&x, &block.ln1.weight, &block.ln1.bias, eps)
        } else {
            x.clone()
        };
        let mut q = matmul(&a, &w(MatrixType::Wq));
        add_row(&mut q, b(MatrixType::Wq));
        let mut k = matmul(&a, &w(MatrixType::Wk));
        add_row(&mut k, b(MatrixType::Wk));
        let mut v = matmul(&a, &w(MatrixType::Wv));
        add_row(&mut v, b(MatrixType::Wv));

        let mut z = vec![vec![0.0; cfg.hidden_dim]; n];
        for h in 0..cfg.num_heads {
            let off = h * hd;
            for i in 0..n {
                let mut s = vec![f64::NEG_INFINITY; n];
                for j in 0..=i {
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += q[i][off + c] * k[j][off + c];
                    }
                    s[j] = dot / (hd as f64).sqrt();
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let total: f64 = e.iter().sum();
                for j in 0..n {
                    for c in 0..hd {
                        z[i][off + c] += e[j] / total * v[j][off + c];
                    }
                }
            }
        }
        let mut o = matmul(&z, &w(MatrixType::Wo));
        add_row(&mut o, b(MatrixType::Wo));
        let mut u = add(&x, &o);
        if !pre {
            u = layer_norm(&u, &block.ln1.weight, &block.ln1.bias, eps);
        }
        let m_in = if pre {
            layer_norm(&u, &block.ln2.weight, &block.ln2.bias, eps)
        } else {
            u.clone()
        };
        let mut hidden = matmul(&m_in, &w(MatrixType::Uin));
        add_row(&mut hidden, b(MatrixType::Uin));
        for row in hidden.iter_mut() {
            for val in row.iter_mut() {
                *val = act(cfg.activation, *val);
            }
        }
        let mut out = matmul(&hidden, &w(MatrixType::Uout));
        add_row(&mut out, b(MatrixType::Uout));
        x = add(&u, &out);
        if !pre {
            x = layer_norm(&x, &block.ln2.weight, &block.ln2.bias, eps);
        }
    }
    if pre {
        x = layer_norm(&x, &base.final_ln.weight, &base.final_ln.bias, eps);
    }
    let logits = matmul(&x, &to_rows(&base.unembedding));
    logits
        .into_iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.into_iter().map(|v| v - z).collect()
        })
        .collect()
}

/// Strided sliding-window perplexity in the usual "labels before the
/// previous window's end are masked" formulation.
pub fn perplexity_oracle(model: &TransformerModel, corpus: &[u32], stride: usize) -> f64 {
    let t_max = model.config().max_context;
    let (mut nll, mut count) = (0.0, 0usize);
    let mut prev_end = 0;
    for begin in (0..corpus.len()).step_by(stride) {
        let end = (begin + t_max).min(corpus.len());
        let trg_len = end - prev_end;
        let lp = naive_log_probs(model, &corpus[begin..end]);
        for pos in (end - trg_len).max(begin + 1)..end {
            nll -= lp[pos - begin - 1][corpus[pos] as usize];
            count += 1;
        }
        prev_end = end;
        if end == corpus.len() {
            break;
        }
    }
    (nll / count as f64).exp()
}

// ---------------------------------------------------------------------------
// Linear algebra checks backed by nalgebra.

pub fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

/// `max |QᵀQ − I|` over the columns of `q`.
pub fn orthonormality_error(q: &Matrix) -> f64 {
    let q = to_nalgebra(q);
    let g = q.transpose() * &q;
    let mut worst = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Largest singular value, via the symmetric eigendecomposition of the
/// smaller Gram matrix.
pub fn spectral_norm_oracle(m: &Matrix) -> f64 {
    let a = to_nalgebra(m);
    let gram = if a.nrows() <= a.ncols() {
        &a * a.transpose()
    } else {
        a.transpose() * &a
    };
    let eig = gram.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(0.0, f64::max).sqrt()
}

/// Singular values in descending order from nalgebra's own SVD.
pub fn singular_values_oracle(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_nalgebra(m).singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

// ---------------------------------------------------------------------------
// Datasets and search.

pub fn ids_sample(id: &str, prompt: Vec<u32>, answer: Vec<u32>) -> QASample {
    QASample {
        id: id.to_owned(),
        prompt: Content::Ids(prompt),
        answer: Content::Ids(answer),
        paraphrases: Vec::new(),
        candidates: Vec::new(),
        frequency: None,
        subject: None,
        answer_text: None,
    }
}

/// `n` samples with prompts of 2 to 4 tokens and single-token answers.
pub fn random_ids_dataset(seed: u64, n: usize, vocab: usize) -> Vec<QASample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(2..=4);
            let prompt = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
            let answer = vec![rng.gen_range(0..vocab as u32)];
            ids_sample(&format!("s{i:03}"), prompt, answer)
        })
        .collect()
}

pub fn objective_of(
    model: &TransformerModel,
    plan: &InterventionPlan,
    samples: &[QASample],
    eval: &EvalConfig,
    objective: Objective,
) -> f64 {
    let view = apply_plan(model, plan).unwrap();
    let agg = evaluate(&view, samples, eval).unwrap().aggregates;
    match objective {
        Objective::Accuracy => agg.accuracy,
        Objective::NegLoss => -agg.mean_loss,
    }
}

fn taus_in_order(cfg: &SearchConfig) -> Vec<MatrixType> {
    MatrixType::ALL
        .into_iter()
        .filter(|t| cfg.tau_set.contains(t))
        .collect()
}

fn sorted_grid(cfg: &SearchConfig) -> Vec<f64> {
    let mut grid = cfg.rho_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid
}

/// Scores every single intervention one at a time and keeps the best, the
/// baseline winning ties.
pub fn exhaustive_single_step(
    model: &TransformerModel,
    cfg: &SearchConfig,
    samples: &[QASample],
    eval: &EvalConfig,
) -> (InterventionPlan, f64) {
    let mut best = (
        InterventionPlan::empty(),
        objective_of(
            model,
            &InterventionPlan::empty(),
            samples,
            eval,
            cfg.objective,
        ),
    );
    for layer in (0..model.config().num_layers).rev() {
        for rho in sorted_grid(cfg) {
            for tau in taus_in_order(cfg) {
                let plan = InterventionPlan::new(vec![
                    InterventionSpec::new(tau, layer, rho).with_method(cfg.method)
                ])
                .unwrap();
                let score = objective_of(model, &plan, samples, eval, cfg.objective);
                if score > best.1 {
                    best = (plan, score);
                }
            }
        }
    }
    best
}

/// Walks layers last to first, every matrix type in turn, scoring every grid
/// value against the plan built so far and keeping the smallest rho that
/// strictly improves.
pub fn exhaustive_greedy(
    model: &TransformerModel,
    cfg: &SearchConfig,
    samples: &[QASample],
    eval: &EvalConfig,
) -> (InterventionPlan, f64) {
    let mut plan = InterventionPlan::empty();
    let mut best = objective_of(model, &plan, samples, eval, cfg.objective);
    for layer in (0..model.config().num_layers).rev() {
        for tau in taus_in_order(cfg) {
            let scored: Vec<(InterventionPlan, f64)> = sorted_grid(cfg)
                .into_iter()
                .map(|rho| {
                    let mut steps = plan.steps.clone();
                    steps.push(InterventionSpec::new(tau, layer, rho).with_method(cfg.method));
                    let p = InterventionPlan::new(steps).unwrap();
                    let s = objective_of(model, &p, samples, eval, cfg.objective);
                    (p, s)
                })
                .collect();
            if let Some((p, s)) = scored.into_iter().find(|(_, s)| *s > best) {
                plan = p;
                best = s;
            }
        }
    }
    (plan, best)
}
