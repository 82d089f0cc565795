//! Layer-indexed decoder-only transformer with truncated forward passes
//! and intermediate-layer decoding through the shared unembedding.
//!
//! The stack is immutable after load and safe to share across threads;
//! each forward pass allocates its own scratch state.

mod format;
mod planted;

pub use format::{load_model, save_model, FORMAT_VERSION, MAGIC};
pub use planted::{build_planted_model, build_random_model, Distractor, PlantSpec};

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::math::{self, Matrix};

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in tensor '{0}'")]
    NonFinite(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("input length {len} exceeds max sequence length {max_seq}")]
    InputTooLong { len: usize, max_seq: usize },
    #[error("token id {token} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("hidden state width {got} does not match model width {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("infeasible plant: {0}")]
    InfeasiblePlant(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Static shape of a [`LayerStack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers < 1 {
            return Err(ModelError::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.max_seq < 1 {
            return Err(ModelError::InvalidConfig("max_seq must be >= 1".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(ModelError::InvalidConfig(
                "d_model and d_ff must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Scale/shift parameters of one layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl NormParams {
    pub fn identity(d: usize) -> Self {
        NormParams {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

/// One pre-norm transformer block: causal multi-head attention plus a
/// two-layer ReLU feed-forward, each behind its own layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub ln1: NormParams,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2: NormParams,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

/// Immutable weight stack. `exec_counts` is observability only: it counts
/// how many times each layer has been applied since the last reset and
/// never influences any computation.
#[derive(Debug)]
pub struct LayerStack {
    config: ModelConfig,
    pub token_embedding: Matrix,
    pub pos_embedding: Matrix,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: NormParams,
    pub unembedding: Matrix,
    exec_counts: Vec<AtomicU64>,
}

/// Residual-stream snapshot after `layer_index` transformer layers.
/// `layer_index == 0` is the embedded input before any layer runs.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub values: Matrix,
    pub layer_index: usize,
}

impl HiddenState {
    pub fn last_position(&self) -> &[f32] {
        self.values.row(self.values.rows() - 1)
    }
}

/// Token ids plus an optional embedding prefix that is prepended to the
/// token embeddings (a stand-in for precomputed vision features).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenInput {
    pub token_ids: Vec<u32>,
    pub embedding_prefix: Option<Vec<Vec<f32>>>,
}

impl TokenInput {
    pub fn from_tokens(token_ids: Vec<u32>) -> Self {
        TokenInput {
            token_ids,
            embedding_prefix: None,
        }
    }

    pub fn total_len(&self) -> usize {
        self.token_ids.len() + self.embedding_prefix.as_ref().map_or(0, |p| p.len())
    }

    /// Copy with one more token appended; used by autoregressive decoding.
    pub fn extended(&self, token: u32) -> TokenInput {
        let mut next = self.clone();
        next.token_ids.push(token);
        next
    }
}

/// Next-token readout at some layer: full probability vector plus the
/// argmax token (smallest id wins ties).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub probs: Vec<f32>,
    pub top_token: u32,
    pub top_prob: f32,
}

impl LayerStack {
    pub fn new(
        config: ModelConfig,
        token_embedding: Matrix,
        pos_embedding: Matrix,
        layers: Vec<TransformerLayer>,
        final_norm: NormParams,
        unembedding: Matrix,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let stack = LayerStack {
            exec_counts: (0..config.n_layers).map(|_| AtomicU64::new(0)).collect(),
            config,
            token_embedding,
            pos_embedding,
            layers,
            final_norm,
            unembedding,
        };
        stack.check_shapes()?;
        stack.check_finite()?;
        Ok(stack)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let c = &self.config;
        let expect = |ok: bool, what: &str| -> Result<(), ModelError> {
            if ok {
                Ok(())
            } else {
                Err(ModelError::DimensionMismatch(what.to_string()))
            }
        };
        expect(
            self.layers.len() == c.n_layers,
            &format!(
                "config declares {} layers but {} are present",
                c.n_layers,
                self.layers.len()
            ),
        )?;
        expect(
            self.token_embedding.rows() == c.vocab_size && self.token_embedding.cols() == c.d_model,
            "token_embedding shape",
        )?;
        expect(
            self.pos_embedding.rows() == c.max_seq && self.pos_embedding.cols() == c.d_model,
            "pos_embedding shape",
        )?;
        expect(
            self.unembedding.rows() == c.d_model && self.unembedding.cols() == c.vocab_size,
            "unembedding shape",
        )?;
        expect(
            self.final_norm.gamma.len() == c.d_model && self.final_norm.beta.len() == c.d_model,
            "final_norm width",
        )?;
        for (i, l) in self.layers.iter().enumerate() {
            let square = |m: &Matrix| m.rows() == c.d_model && m.cols() == c.d_model;
            expect(
                square(&l.wq) && square(&l.wk) && square(&l.wv) && square(&l.wo),
                &format!("attention projection shape in layer {i}"),
            )?;
            expect(
                l.w1.rows() == c.d_model
                    && l.w1.cols() == c.d_ff
                    && l.w2.rows() == c.d_ff
                    && l.w2.cols() == c.d_model
                    && l.b1.len() == c.d_ff
                    && l.b2.len() == c.d_model,
                &format!("feed-forward shape in layer {i}"),
            )?;
            expect(
                l.ln1.gamma.len() == c.d_model
                    && l.ln1.beta.len() == c.d_model
                    && l.ln2.gamma.len() == c.d_model
                    && l.ln2.beta.len() == c.d_model,
                &format!("layer norm width in layer {i}"),
            )?;
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<(), ModelError> {
        let finite_vec = |v: &[f32]| v.iter().all(|x| x.is_finite());
        if !self.token_embedding.is_finite() {
            return Err(ModelError::NonFinite("token_embedding".into()));
        }
        if !self.pos_embedding.is_finite() {
            return Err(ModelError::NonFinite("pos_embedding".into()));
        }
        if !self.unembedding.is_finite() {
            return Err(ModelError::NonFinite("unembedding".into()));
        }
        if !finite_vec(&self.final_norm.gamma) || !finite_vec(&self.final_norm.beta) {
            return Err(ModelError::NonFinite("final_norm".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let mats = [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2];
            let vecs = [
                &l.ln1.gamma,
                &l.ln1.beta,
                &l.ln2.gamma,
                &l.ln2.beta,
                &l.b1,
                &l.b2,
            ];
            if mats.iter().any(|m| !m.is_finite()) || vecs.iter().any(|v| !finite_vec(v)) {
                return Err(ModelError::NonFinite(format!("layers.{i}")));
            }
        }
        Ok(())
    }

    fn validate_input(&self, input: &TokenInput) -> Result<(), ModelError> {
        let c = &self.config;
        if input.total_len() == 0 {
            return Err(ModelError::InvalidArgument("empty input".into()));
        }
        if input.total_len() > c.max_seq {
            return Err(ModelError::InputTooLong {
                len: input.total_len(),
                max_seq: c.max_seq,
            });
        }
        for &t in &input.token_ids {
            if t as usize >= c.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: t,
                    vocab_size: c.vocab_size,
                });
            }
        }
        if let Some(prefix) = &input.embedding_prefix {
            for v in prefix {
                if v.len() != c.d_model {
                    return Err(ModelError::WidthMismatch {
                        got: v.len(),
                        expected: c.d_model,
                    });
                }
            }
        }
        Ok(())
    }

    /// Token (and prefix) embedding plus learned position embeddings;
    /// this is layer index 0.
    pub fn embed(&self, input: &TokenInput) -> Result<HiddenState, ModelError> {
        self.validate_input(input)?;
        let d = self.config.d_model;
        let len = input.total_len();
        let mut values = Matrix::zeros(len, d);
        let mut pos = 0;
        if let Some(prefix) = &input.embedding_prefix {
            for v in prefix {
                values.row_mut(pos).copy_from_slice(v);
                pos += 1;
            }
        }
        for &t in &input.token_ids {
            values
                .row_mut(pos)
                .copy_from_slice(self.token_embedding.row(t as usize));
            pos += 1;
        }
        for i in 0..len {
            math::add_assign(values.row_mut(i), self.pos_embedding.row(i));
        }
        Ok(HiddenState {
            values,
            layer_index: 0,
        })
    }

    /// Apply transformer layers until `hidden.layer_index == to_layer`.
    /// Layers already applied are never re-run.
    pub fn advance(&self, hidden: &mut HiddenState, to_layer: usize) -> Result<(), ModelError> {
        if to_layer > self.config.n_layers {
            return Err(ModelError::LayerOutOfRange {
                layer: to_layer,
                n_layers: self.config.n_layers,
            });
        }
        if hidden.values.cols() != self.config.d_model {
            return Err(ModelError::WidthMismatch {
                got: hidden.values.cols(),
                expected: self.config.d_model,
            });
        }
        if to_layer < hidden.layer_index {
            return Err(ModelError::InvalidArgument(format!(
                "cannot rewind hidden state from layer {} to {}",
                hidden.layer_index, to_layer
            )));
        }
        while hidden.layer_index < to_layer {
            let idx = hidden.layer_index;
            self.apply_layer(idx, &mut hidden.values);
            hidden.layer_index = idx + 1;
        }
        Ok(())
    }

    /// Embed the input and run exactly the first `layer` transformer layers.
    pub fn forward_to_layer(
        &self,
        input: &TokenInput,
        layer: usize,
    ) -> Result<HiddenState, ModelError> {
        if layer > self.config.n_layers {
            return Err(ModelError::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        let mut hidden = self.embed(input)?;
        self.advance(&mut hidden, layer)?;
        Ok(hidden)
    }

    fn apply_layer(&self, idx: usize, x: &mut Matrix) {
        self.exec_counts[idx].fetch_add(1, Ordering::Relaxed);
        let layer = &self.layers[idx];
        let c = &self.config;
        let d = c.d_model;
        let head_dim = d / c.n_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let seq = x.rows();

        // Attention sublayer on the pre-normed stream.
        let mut normed = Matrix::zeros(seq, d);
        for i in 0..seq {
            math::layer_norm(
                x.row(i),
                &layer.ln1.gamma,
                &layer.ln1.beta,
                LN_EPS,
                normed.row_mut(i),
            );
        }
        let mut q = Matrix::zeros(seq, d);
        let mut k = Matrix::zeros(seq, d);
        let mut v = Matrix::zeros(seq, d);
        for i in 0..seq {
            math::matvec_row(normed.row(i), &layer.wq, q.row_mut(i));
            math::matvec_row(normed.row(i), &layer.wk, k.row_mut(i));
            math::matvec_row(normed.row(i), &layer.wv, v.row_mut(i));
        }
        let mut ctx = Matrix::zeros(seq, d);
        let mut scores = vec![0.0f32; seq];
        for h in 0..c.n_heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            for i in 0..seq {
                let qi = &q.row(i)[lo..hi];
                let active = &mut scores[..=i];
                for (j, s) in active.iter_mut().enumerate() {
                    *s = math::dot(qi, &k.row(j)[lo..hi]) * scale;
                }
                math::softmax_in_place(active);
                let (ctx_i, weights) = (ctx.row_mut(i), &scores[..=i]);
                for (j, &w) in weights.iter().enumerate() {
                    let vj = &v.row(j)[lo..hi];
                    for (o, &vv) in ctx_i[lo..hi].iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
        let mut attn_out = vec![0.0f32; d];
        for i in 0..seq {
            math::matvec_row(ctx.row(i), &layer.wo, &mut attn_out);
            math::add_assign(x.row_mut(i), &attn_out);
        }

        // Feed-forward sublayer.
        let mut ff_in = vec![0.0f32; d];
        let mut ff_hidden = vec![0.0f32; c.d_ff];
        let mut ff_out = vec![0.0f32; d];
        for i in 0..seq {
            math::layer_norm(
                x.row(i),
                &layer.ln2.gamma,
                &layer.ln2.beta,
                LN_EPS,
                &mut ff_in,
            );
            math::matvec_row(&ff_in, &layer.w1, &mut ff_hidden);
            math::add_assign(&mut ff_hidden, &layer.b1);
            math::relu_in_place(&mut ff_hidden);
            math::matvec_row(&ff_hidden, &layer.w2, &mut ff_out);
            math::add_assign(&mut ff_out, &layer.b2);
            math::add_assign(x.row_mut(i), &ff_out);
        }
    }

    /// Logit-lens readout: final norm + unembedding applied to the last
    /// position of `hidden`, softmax-normalized.
    pub fn decode_at_layer(&self, hidden: &HiddenState) -> Result<Decoded, ModelError> {
        let c = &self.config;
        if hidden.values.cols() != c.d_model {
            return Err(ModelError::WidthMismatch {
                got: hidden.values.cols(),
                expected: c.d_model,
            });
        }
        if hidden.layer_index > c.n_layers {
            return Err(ModelError::LayerOutOfRange {
                layer: hidden.layer_index,
                n_layers: c.n_layers,
            });
        }
        let mut normed = vec![0.0f32; c.d_model];
        math::layer_norm(
            hidden.last_position(),
            &self.final_norm.gamma,
            &self.final_norm.beta,
            LN_EPS,
            &mut normed,
        );
        let mut probs = vec![0.0f32; c.vocab_size];
        math::matvec_row(&normed, &self.unembedding, &mut probs);
        math::softmax_in_place(&mut probs);
        let top = math::argmax(&probs);
        Ok(Decoded {
            top_token: top as u32,
            top_prob: probs[top],
            probs,
        })
    }

    /// Greedy decode of up to `max_tokens` tokens, each read out at
    /// `exit_layer`. Stops after emitting `stop_token` when one is set.
    pub fn greedy_continue(
        &self,
        input: &TokenInput,
        exit_layer: usize,
        max_tokens: usize,
        stop_token: Option<u32>,
    ) -> Result<Vec<u32>, ModelError> {
        if exit_layer == 0 || exit_layer > self.config.n_layers {
            return Err(ModelError::LayerOutOfRange {
                layer: exit_layer,
                n_layers: self.config.n_layers,
            });
        }
        if max_tokens == 0 {
            return Err(ModelError::InvalidArgument(
                "max_tokens must be >= 1".into(),
            ));
        }
        let mut current = input.clone();
        let mut out = Vec::with_capacity(max_tokens);
        for _ in 0..max_tokens {
            if current.total_len() + 1 > self.config.max_seq {
                return Err(ModelError::InputTooLong {
                    len: current.total_len() + 1,
                    max_seq: self.config.max_seq,
                });
            }
            let hidden = self.forward_to_layer(&current, exit_layer)?;
            let decoded = self.decode_at_layer(&hidden)?;
            out.push(decoded.top_token);
            if stop_token == Some(decoded.top_token) {
                break;
            }
            current = current.extended(decoded.top_token);
        }
        Ok(out)
    }

    /// Per-layer application counts since the last reset (index 0 is the
    /// first transformer layer).
    pub fn exec_counts(&self) -> Vec<u64> {
        self.exec_counts
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    pub fn reset_exec_counts(&self) {
        for c in &self.exec_counts {
            c.store(0, Ordering::Relaxed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 11,
            max_seq: 16,
        }
    }

    #[test]
    fn config_invariants_enforced() {
        let mut c = tiny_config();
        c.d_model = 9; // not divisible by 2 heads
        assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
        let mut c = tiny_config();
        c.n_layers = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.max_seq = 0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn forward_layer_zero_is_embedding() {
        let model = build_random_model(&tiny_config(), 7).unwrap();
        let input = TokenInput::from_tokens(vec![1, 4, 2]);
        let h = model.forward_to_layer(&input, 0).unwrap();
        assert_eq!(h.layer_index, 0);
        let embedded = model.embed(&input).unwrap();
        assert_eq!(h, embedded);
        // row 1 = token_embedding[4] + pos_embedding[1]
        for j in 0..8 {
            let want = model.token_embedding.get(4, j) + model.pos_embedding.get(1, j);
            assert_eq!(h.values.get(1, j), want);
        }
    }

    #[test]
    fn forward_full_depth_matches_layerwise_advance() {
        let model = build_random_model(&tiny_config(), 3).unwrap();
        let input = TokenInput::from_tokens(vec![0, 9, 5, 5]);
        let full = model.forward_to_layer(&input, 2).unwrap();
        let mut step = model.forward_to_layer(&input, 1).unwrap();
        model.advance(&mut step, 2).unwrap();
        assert_eq!(full, step); // bitwise: same operations in the same order
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model = build_random_model(&tiny_config(), 3).unwrap();
        let too_long = TokenInput::from_tokens(vec![0; 17]);
        assert!(matches!(
            model.forward_to_layer(&too_long, 1),
            Err(ModelError::InputTooLong { .. })
        ));
        let bad_token = TokenInput::from_tokens(vec![11]);
        assert!(matches!(
            model.forward_to_layer(&bad_token, 1),
            Err(ModelError::TokenOutOfRange { token: 11, .. })
        ));
        let input = TokenInput::from_tokens(vec![1]);
        assert!(matches!(
            model.forward_to_layer(&input, 3),
            Err(ModelError::LayerOutOfRange { layer: 3, .. })
        ));
    }

    #[test]
    fn embedding_prefix_prepends_positions() {
        let model = build_random_model(&tiny_config(), 5).unwrap();
        let prefix = vec![vec![0.5; 8], vec![-0.25; 8]];
        let input = TokenInput {
            token_ids: vec![3],
            embedding_prefix: Some(prefix.clone()),
        };
        let h = model.embed(&input).unwrap();
        assert_eq!(h.values.rows(), 3);
        for j in 0..8 {
            assert_eq!(h.values.get(0, j), 0.5 + model.pos_embedding.get(0, j));
            assert_eq!(
                h.values.get(2, j),
                model.token_embedding.get(3, j) + model.pos_embedding.get(2, j)
            );
        }
    }

    #[test]
    fn decode_uniform_when_unembedding_is_zero() {
        let mut model = build_random_model(&tiny_config(), 1).unwrap();
        model.unembedding = Matrix::zeros(8, 11);
        let h = model
            .forward_to_layer(&TokenInput::from_tokens(vec![2, 3]), 1)
            .unwrap();
        let d = model.decode_at_layer(&h).unwrap();
        assert_eq!(d.top_token, 0); // all equal, smallest id wins
        for p in &d.probs {
            assert!((p - 1.0 / 11.0).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_probabilities_sum_to_one() {
        let model = build_random_model(&tiny_config(), 9).unwrap();
        let h = model
            .forward_to_layer(&TokenInput::from_tokens(vec![1, 2, 3]), 2)
            .unwrap();
        let d = model.decode_at_layer(&h).unwrap();
        let sum: f32 = d.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(d.probs[d.top_token as usize], d.top_prob);
    }

    #[test]
    fn decode_rejects_width_mismatch() {
        let model = build_random_model(&tiny_config(), 9).unwrap();
        let h = HiddenState {
            values: Matrix::zeros(1, 4),
            layer_index: 0,
        };
        assert!(matches!(
            model.decode_at_layer(&h),
            Err(ModelError::WidthMismatch {
                got: 4,
                expected: 8
            })
        ));
    }

    #[test]
    fn greedy_single_token_equals_top1() {
        let model = build_random_model(&tiny_config(), 11).unwrap();
        let input = TokenInput::from_tokens(vec![4, 1]);
        let h = model.forward_to_layer(&input, 2).unwrap();
        let top = model.decode_at_layer(&h).unwrap().top_token;
        let seq = model.greedy_continue(&input, 2, 1, None).unwrap();
        assert_eq!(seq, vec![top]);
    }

    #[test]
    fn greedy_errors_on_zero_max_tokens_and_bad_layer() {
        let model = build_random_model(&tiny_config(), 11).unwrap();
        let input = TokenInput::from_tokens(vec![4]);
        assert!(model.greedy_continue(&input, 2, 0, None).is_err());
        assert!(model.greedy_continue(&input, 0, 1, None).is_err());
        assert!(model.greedy_continue(&input, 3, 1, None).is_err());
    }

    #[test]
    fn greedy_overflow_is_an_error() {
        let mut cfg = tiny_config();
        cfg.max_seq = 3;
        let model = build_random_model(&cfg, 11).unwrap();
        let input = TokenInput::from_tokens(vec![4, 1, 2]);
        assert!(matches!(
            model.greedy_continue(&input, 2, 1, None),
            Err(ModelError::InputTooLong { .. })
        ));
    }

    #[test]
    fn greedy_stops_on_stop_token() {
        let model = build_random_model(&tiny_config(), 11).unwrap();
        let input = TokenInput::from_tokens(vec![4, 1]);
        let free = model.greedy_continue(&input, 2, 4, None).unwrap();
        let stopped = model.greedy_continue(&input, 2, 4, Some(free[0])).unwrap();
        assert_eq!(stopped, vec![free[0]]);
    }

    #[test]
    fn determinism_same_input_same_logits() {
        let model = build_random_model(&tiny_config(), 21).unwrap();
        let input = TokenInput::from_tokens(vec![7, 3, 3, 0]);
        let a = model.forward_to_layer(&input, 2).unwrap();
        let b = model.forward_to_layer(&input, 2).unwrap();
        assert_eq!(a, b);
        let da = model.decode_at_layer(&a).unwrap();
        let db = model.decode_at_layer(&b).unwrap();
        assert_eq!(da.probs, db.probs);
    }

    #[test]
    fn exec_counts_track_layer_applications() {
        let model = build_random_model(&tiny_config(), 21).unwrap();
        let input = TokenInput::from_tokens(vec![1, 2]);
        model.reset_exec_counts();
        model.forward_to_layer(&input, 1).unwrap();
        assert_eq!(model.exec_counts(), vec![1, 0]);
        model.forward_to_layer(&input, 2).unwrap();
        assert_eq!(model.exec_counts(), vec![2, 1]);
    }
}
