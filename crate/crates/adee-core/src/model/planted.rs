//! Synthetic model builders.
//!
//! `build_random_model` produces an ordinary random-weight stack.
//! `build_planted_model` produces a stack whose next-token behavior is
//! known exactly: for any input ending in a mapped key token, the mapped
//! label becomes the top-1 readout at the plant layer and every layer
//! above it, while every layer below decodes to a deliberately wrong
//! token. That step shape is what the profiler is validated against.
//!
//! Construction sketch: the embedding splits the width into two halves,
//! a one-hot token-identity half and a next-token payload half. Layers
//! other than the plant are exact pass-throughs (their attention and
//! feed-forward output projections are zero, so the residual is
//! untouched). The plant layer holds one ReLU unit per mapped key that
//! fires only on that key's identity dimension and writes a large value
//! into the payload dimension of the mapped label. The unembedding reads
//! the payload half strongly and the identity half weakly, the weak path
//! pointing each token at a wrong answer, so below the plant the wrong
//! answer wins and at or above it the payload wins.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::math::{self, Matrix};

use super::{LayerStack, ModelConfig, ModelError, NormParams, TransformerLayer, LN_EPS};

const ONE_HOT: f32 = 1.0;
const PAYLOAD: f32 = 8.0;
const DISTRACT: f32 = 24.0;
const IDENTITY_READOUT: f32 = 2.0;
const PAYLOAD_READOUT: f32 = 8.0;

/// A planted fault above the plant layer: from `layer` on, inputs ending
/// in `key` decode to a wrong token, so full-depth accuracy drops below
/// the accuracy available at the plant layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Distractor {
    pub layer: usize,
    pub key: u32,
}

/// Recipe for a planted-exit model.
#[derive(Debug, Clone)]
pub struct PlantSpec {
    pub n_layers: usize,
    pub plant_layer: usize,
    /// key token -> label token; chains are allowed (a label may itself
    /// be a key), which is how multi-token answers are planted.
    pub mapping: BTreeMap<u32, u32>,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub distractor: Option<Distractor>,
}

impl PlantSpec {
    pub fn new(
        n_layers: usize,
        plant_layer: usize,
        mapping: BTreeMap<u32, u32>,
        seed: u64,
    ) -> Self {
        let max_id = mapping
            .iter()
            .flat_map(|(&k, &v)| [k, v])
            .max()
            .unwrap_or(0);
        PlantSpec {
            n_layers,
            plant_layer,
            mapping,
            vocab_size: (max_id as usize + 2).max(4),
            max_seq: 64,
            seed,
            distractor: None,
        }
    }

    /// The token a mapped input decodes to below the plant layer (and the
    /// token a distractor flips it to above): one past the label, wrapped.
    pub fn wrong_answer(&self, key: u32) -> Option<u32> {
        self.mapping
            .get(&key)
            .map(|&label| (label + 1) % self.vocab_size as u32)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.plant_layer < 1 || self.plant_layer > self.n_layers {
            return Err(ModelError::InfeasiblePlant(format!(
                "plant layer {} outside 1..={}",
                self.plant_layer, self.n_layers
            )));
        }
        if self.mapping.is_empty() {
            return Err(ModelError::InfeasiblePlant(
                "empty key/label mapping".into(),
            ));
        }
        for (&k, &v) in &self.mapping {
            if k as usize >= self.vocab_size || v as usize >= self.vocab_size {
                return Err(ModelError::InfeasiblePlant(format!(
                    "token {} outside vocab of {}",
                    k.max(v),
                    self.vocab_size
                )));
            }
        }
        if let Some(d) = self.distractor {
            if d.layer <= self.plant_layer || d.layer > self.n_layers {
                return Err(ModelError::InfeasiblePlant(format!(
                    "distractor layer {} must lie in {}..={}",
                    d.layer,
                    self.plant_layer + 1,
                    self.n_layers
                )));
            }
            if !self.mapping.contains_key(&d.key) {
                return Err(ModelError::InfeasiblePlant(format!(
                    "distractor key {} is not mapped",
                    d.key
                )));
            }
        }
        Ok(())
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sd: f32) -> Matrix {
    let dist = Normal::new(0.0f32, sd).unwrap();
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Plain random-weight model; useful as an unstructured test subject.
pub fn build_random_model(config: &ModelConfig, seed: u64) -> Result<LayerStack, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let proj_sd = 1.0 / (d as f32).sqrt();
    let token_embedding = normal_matrix(&mut rng, config.vocab_size, d, 0.6);
    let pos_embedding = normal_matrix(&mut rng, config.max_seq, d, 0.1);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(TransformerLayer {
            ln1: NormParams::identity(d),
            wq: normal_matrix(&mut rng, d, d, proj_sd),
            wk: normal_matrix(&mut rng, d, d, proj_sd),
            wv: normal_matrix(&mut rng, d, d, proj_sd),
            wo: normal_matrix(&mut rng, d, d, proj_sd),
            ln2: NormParams::identity(d),
            w1: normal_matrix(&mut rng, d, config.d_ff, proj_sd),
            b1: vec![0.0; config.d_ff],
            w2: normal_matrix(&mut rng, config.d_ff, d, 1.0 / (config.d_ff as f32).sqrt()),
            b2: vec![0.0; d],
        });
    }
    let final_norm = NormParams::identity(d);
    let unembedding = normal_matrix(&mut rng, d, config.vocab_size, proj_sd);
    LayerStack::new(
        *config,
        token_embedding,
        pos_embedding,
        layers,
        final_norm,
        unembedding,
    )
}

/// Post-layer-norm value of the single active identity dimension when the
/// residual holds `extra` in one payload dimension besides the one-hot.
fn active_dim_after_norm(d: usize, extra: Option<f32>) -> f32 {
    let mut h = vec![0.0f32; d];
    h[0] = ONE_HOT;
    if let Some(v) = extra {
        h[d / 2] = v;
    }
    let gamma = vec![1.0f32; d];
    let beta = vec![0.0f32; d];
    let mut out = vec![0.0f32; d];
    math::layer_norm(&h, &gamma, &beta, LN_EPS, &mut out);
    out[0]
}

/// Build a model whose per-layer top-1 over mapped inputs is a step
/// function at `plant_layer`: wrong below it, the mapped label at and
/// above it. Deterministic in `seed`; equal specs produce byte-identical
/// weight files.
pub fn build_planted_model(spec: &PlantSpec) -> Result<LayerStack, ModelError> {
    spec.validate()?;
    let vocab = spec.vocab_size;
    let d = 2 * vocab;
    let d_ff = vocab.max(8);
    let config = ModelConfig {
        n_layers: spec.n_layers,
        d_model: d,
        n_heads: 2,
        d_ff,
        vocab_size: vocab,
        max_seq: spec.max_seq,
    };
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let proj_sd = 0.05;

    let mut token_embedding = Matrix::zeros(vocab, d);
    for t in 0..vocab {
        token_embedding.set(t, t, ONE_HOT);
    }
    let pos_embedding = Matrix::zeros(config.max_seq, d);

    // Identity-half readout: each token's own dimension votes for a wrong
    // answer; payload-half readout votes, much harder, for the real one.
    let mut unembedding = Matrix::zeros(d, vocab);
    for t in 0..vocab {
        let wrong = spec.wrong_answer(t as u32).unwrap_or(t as u32);
        unembedding.set(t, wrong as usize, IDENTITY_READOUT);
        unembedding.set(vocab + t, t, PAYLOAD_READOUT);
    }

    let fire_plain = active_dim_after_norm(d, None);
    let fire_loaded = active_dim_after_norm(d, Some(PAYLOAD));

    let mut layers = Vec::with_capacity(spec.n_layers);
    for layer_idx in 1..=spec.n_layers {
        // Random projections everywhere, but the attention output and the
        // feed-forward readout are zero except where a plant writes, so
        // every layer is a perfect pass-through on the residual stream.
        let mut w1 = normal_matrix(&mut rng, d, d_ff, proj_sd);
        let mut b1 = vec![0.0f32; d_ff];
        let mut w2 = Matrix::zeros(d_ff, d);
        let wq = normal_matrix(&mut rng, d, d, proj_sd);
        let wk = normal_matrix(&mut rng, d, d, proj_sd);
        let wv = normal_matrix(&mut rng, d, d, proj_sd);

        if layer_idx == spec.plant_layer {
            for (unit, (&key, &label)) in spec.mapping.iter().enumerate() {
                for row in 0..d {
                    w1.set(row, unit, 0.0);
                }
                w1.set(key as usize, unit, 1.0);
                b1[unit] = -fire_plain / 2.0;
                w2.set(unit, vocab + label as usize, PAYLOAD / (fire_plain / 2.0));
            }
        }
        if let Some(dis) = spec.distractor {
            if layer_idx == dis.layer {
                let wrong = spec.wrong_answer(dis.key).unwrap();
                for row in 0..d {
                    w1.set(row, 0, 0.0);
                }
                w1.set(dis.key as usize, 0, 1.0);
                b1[0] = -fire_loaded / 2.0;
                w2.set(0, vocab + wrong as usize, DISTRACT / (fire_loaded / 2.0));
            }
        }

        layers.push(TransformerLayer {
            ln1: NormParams::identity(d),
            wq,
            wk,
            wv,
            wo: Matrix::zeros(d, d),
            ln2: NormParams::identity(d),
            w1,
            b1,
            w2,
            b2: vec![0.0; d],
        });
    }

    LayerStack::new(
        config,
        token_embedding,
        pos_embedding,
        layers,
        NormParams::identity(d),
        unembedding,
    )
}
