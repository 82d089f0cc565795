#![allow(dead_code, clippy::needless_range_loop)]

//! Test-only reference implementation of the forward pass, kept
//! deliberately independent of the library's compute path: plain f64
//! scalar loops over the same weights, written from the architecture
//! definition rather than shared helpers. Used as the oracle for
//! forward/decode tests and for brute-force accuracy counts.

use adee_core::math::Matrix;
use adee_core::model::{LayerStack, TokenInput, LN_EPS};

fn norm64(x: &[f64], gamma: &[f32], beta: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean: f64 = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + LN_EPS as f64).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| gamma[i] as f64 * ((v - mean) / denom) + beta[i] as f64)
        .collect()
}

fn project(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0f64; w.cols()];
    for (j, o) in out.iter_mut().enumerate() {
        for (i, &xi) in x.iter().enumerate() {
            *o += xi * w.get(i, j) as f64;
        }
    }
    out
}

fn softmax64(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Hidden state after `n_layers_to_apply` layers, one f64 vector per
/// position.
pub fn reference_forward(
    model: &LayerStack,
    input: &TokenInput,
    n_layers_to_apply: usize,
) -> Vec<Vec<f64>> {
    let cfg = *model.config();
    let d = cfg.d_model;
    let mut x: Vec<Vec<f64>> = Vec::new();
    if let Some(prefix) = &input.embedding_prefix {
        for v in prefix {
            x.push(v.iter().map(|&f| f as f64).collect());
        }
    }
    for &t in &input.token_ids {
        x.push(
            (0..d)
                .map(|j| model.token_embedding.get(t as usize, j) as f64)
                .collect(),
        );
    }
    for (pos, row) in x.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += model.pos_embedding.get(pos, j) as f64;
        }
    }

    let seq = x.len();
    let head_dim = d / cfg.n_heads;
    for layer in model.layers.iter().take(n_layers_to_apply) {
        // Attention.
        let normed: Vec<Vec<f64>> = x
            .iter()
            .map(|row| norm64(row, &layer.ln1.gamma, &layer.ln1.beta))
            .collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| project(r, &layer.wq)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| project(r, &layer.wk)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| project(r, &layer.wv)).collect();
        let mut ctx = vec![vec![0.0f64; d]; seq];
        for h in 0..cfg.n_heads {
            let lo = h * head_dim;
            for i in 0..seq {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let mut s = 0.0;
                        for t in 0..head_dim {
                            s += q[i][lo + t] * k[j][lo + t];
                        }
                        s / (head_dim as f64).sqrt()
                    })
                    .collect();
                let weights = softmax64(&scores);
                for (j, &w) in weights.iter().enumerate() {
                    for t in 0..head_dim {
                        ctx[i][lo + t] += w * v[j][lo + t];
                    }
                }
            }
        }
        for i in 0..seq {
            let proj = project(&ctx[i], &layer.wo);
            for j in 0..d {
                x[i][j] += proj[j];
            }
        }
        // Feed-forward.
        for i in 0..seq {
            let normed = norm64(&x[i], &layer.ln2.gamma, &layer.ln2.beta);
            let mut hidden = project(&normed, &layer.w1);
            for (u, h) in hidden.iter_mut().enumerate() {
                *h += layer.b1[u] as f64;
                if *h < 0.0 {
                    *h = 0.0;
                }
            }
            let mut out = project(&hidden, &layer.w2);
            for (j, o) in out.iter_mut().enumerate() {
                *o += layer.b2[j] as f64;
                x[i][j] += *o;
            }
        }
    }
    x
}

/// Next-token probabilities read out from the last position after
/// `n_layers_to_apply` layers.
pub fn reference_decode(
    model: &LayerStack,
    input: &TokenInput,
    n_layers_to_apply: usize,
) -> Vec<f64> {
    let hidden = reference_forward(model, input, n_layers_to_apply);
    let last = hidden.last().expect("non-empty input");
    let normed = norm64(last, &model.final_norm.gamma, &model.final_norm.beta);
    let logits = project(&normed, &model.unembedding);
    softmax64(&logits)
}

/// Raw logits (pre-softmax) of the last position; handy for frozen-value
/// assertions.
pub fn reference_logits(
    model: &LayerStack,
    input: &TokenInput,
    n_layers_to_apply: usize,
) -> Vec<f64> {
    let hidden = reference_forward(model, input, n_layers_to_apply);
    let last = hidden.last().expect("non-empty input");
    let normed = norm64(last, &model.final_norm.gamma, &model.final_norm.beta);
    project(&normed, &model.unembedding)
}

/// Argmax with smallest-index tie-break, mirroring the decode contract.
pub fn reference_top1(probs: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best as u32
}
