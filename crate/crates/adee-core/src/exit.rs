//! Early-exit engine: label-token matching against per-layer readouts,
//! the dynamic exit loop, and fixed-layer exit.
//!
//! Matching works on decoded tokens. A layer "matches" when its top-1
//! token starts one of the task's label token sequences with probability
//! at or above the threshold, and greedy continuation at that same layer
//! completes one mapped sequence exactly. Classification (used for the
//! full-depth fallback, fixed exits, and accuracy profiling) is the same
//! sequence lookup without the confidence gate: the threshold decides
//! when the model may *stop early*, not what its answer is.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Decoded, HiddenState, LayerStack, ModelError, TokenInput};

#[derive(Debug, Error)]
pub enum ExitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid match spec: {0}")]
    InvalidSpec(String),
    #[error("exit layer {layer} out of range 1..={n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
}

/// Per-task matching parameters: which token sequences count as which
/// class, the confidence threshold, and which layers to probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub task_id: String,
    pub classes: Vec<String>,
    /// class name -> accepted token sequences (canonical label and synonyms).
    pub label_tokens: BTreeMap<String, Vec<Vec<u32>>>,
    #[serde(rename = "threshold")]
    pub confidence_threshold: f32,
    pub candidate_layers: Vec<usize>,
}

impl MatchSpec {
    /// Structural checks: unambiguous sequences, ascending candidates,
    /// known classes. Model-dependent checks live in [`Self::validate_for_model`].
    pub fn validate(&self) -> Result<(), ExitError> {
        if self.task_id.is_empty() {
            return Err(ExitError::InvalidSpec("empty task_id".into()));
        }
        let mut seen_class = std::collections::BTreeSet::new();
        for c in &self.classes {
            if !seen_class.insert(c) {
                return Err(ExitError::InvalidSpec(format!("duplicate class '{c}'")));
            }
        }
        let mut seq_owner: BTreeMap<&[u32], &str> = BTreeMap::new();
        for (class, seqs) in &self.label_tokens {
            if !self.classes.iter().any(|c| c == class) {
                return Err(ExitError::InvalidSpec(format!(
                    "label_tokens references unknown class '{class}'"
                )));
            }
            if seqs.is_empty() {
                return Err(ExitError::InvalidSpec(format!(
                    "class '{class}' has no label token sequences"
                )));
            }
            for seq in seqs {
                if seq.is_empty() {
                    return Err(ExitError::InvalidSpec(format!(
                        "class '{class}' has an empty token sequence"
                    )));
                }
                if let Some(other) = seq_owner.insert(seq, class) {
                    if other != class {
                        return Err(ExitError::InvalidSpec(format!(
                            "token sequence {seq:?} mapped to both '{other}' and '{class}'"
                        )));
                    }
                }
            }
        }
        if self.candidate_layers.is_empty() {
            return Err(ExitError::InvalidSpec("candidate_layers is empty".into()));
        }
        if !self.candidate_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(ExitError::InvalidSpec(
                "candidate_layers must be strictly increasing".into(),
            ));
        }
        if self.candidate_layers[0] < 1 {
            return Err(ExitError::InvalidSpec(
                "candidate layers start at 1; layer 0 runs no transformer layer".into(),
            ));
        }
        if !self.confidence_threshold.is_finite() || self.confidence_threshold < 0.0 {
            // Values above 1.0 are allowed on purpose: they make matching
            // impossible, which degrades dynamic exit to full inference.
            return Err(ExitError::InvalidSpec(
                "threshold must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn validate_for_model(&self, model: &LayerStack) -> Result<(), ExitError> {
        self.validate()?;
        let n = model.n_layers();
        if let Some(&last) = self.candidate_layers.last() {
            if last > n {
                return Err(ExitError::InvalidSpec(format!(
                    "candidate layer {last} exceeds model depth {n}"
                )));
            }
        }
        for seqs in self.label_tokens.values() {
            for seq in seqs {
                for &t in seq {
                    if t as usize >= model.config().vocab_size {
                        return Err(ExitError::InvalidSpec(format!(
                            "label token {t} outside model vocab"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Class owning exactly this token sequence, if any.
    pub fn class_of_sequence(&self, seq: &[u32]) -> Option<&str> {
        for (class, seqs) in &self.label_tokens {
            if seqs.iter().any(|s| s == seq) {
                return Some(class);
            }
        }
        None
    }

    fn sequences_starting_with(&self, first: u32) -> impl Iterator<Item = &Vec<u32>> {
        self.label_tokens
            .values()
            .flatten()
            .filter(move |s| s.first() == Some(&first))
    }

    /// Length of the longest mapped sequence; the number of greedy tokens
    /// an exit decision emits is capped at this.
    pub fn max_label_len(&self) -> usize {
        self.label_tokens
            .values()
            .flatten()
            .map(|s| s.len())
            .max()
            .unwrap_or(1)
    }

    pub fn load(path: &std::path::Path) -> Result<MatchSpec, ExitError> {
        let text = std::fs::read_to_string(path).map_err(ModelError::Io)?;
        let spec: MatchSpec = serde_json::from_str(&text)
            .map_err(|e| ExitError::InvalidSpec(format!("task json: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ExitError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| ExitError::InvalidSpec(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(ModelError::Io)?;
        Ok(())
    }
}

/// Deterministic and wall-clock cost of one inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub layers_executed: usize,
    /// layers_executed / n_layers; the deterministic latency proxy.
    pub layer_fraction: f64,
    /// Informational only; never asserted on.
    pub wall_ms: f64,
}

/// Outcome of one early-exit (or fixed-exit) inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub exited_layer: usize,
    pub exited_early: bool,
    pub predicted_class: Option<String>,
    /// Top-1 probability of the first decoded token at the exit layer.
    pub confidence: f32,
    pub layers_executed: usize,
    pub latency: LatencyRecord,
    /// Greedy tokens emitted at the exit layer, capped at the longest
    /// mapped label length.
    pub tokens: Vec<u32>,
}

/// Result of evaluating the match predicate at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatch {
    pub matched: bool,
    pub class: Option<String>,
    pub confidence: f32,
    pub tokens: Vec<u32>,
}

/// Pure form of the match predicate over an already-decoded greedy token
/// sequence whose first token carried probability `first_prob`. The
/// shortest mapped sequence completed by a prefix of `tokens` wins.
pub fn match_token_sequence(
    tokens: &[u32],
    first_prob: f32,
    spec: &MatchSpec,
) -> (bool, Option<String>) {
    if tokens.is_empty() || first_prob < spec.confidence_threshold {
        return (false, None);
    }
    for len in 1..=tokens.len() {
        if let Some(class) = spec.class_of_sequence(&tokens[..len]) {
            return (true, Some(class.to_string()));
        }
    }
    (false, None)
}

/// Convenience form of the match predicate for a single decoded
/// distribution (single-token labels resolve immediately).
pub fn match_decoded(decoded: &Decoded, spec: &MatchSpec) -> (bool, Option<String>) {
    match_token_sequence(&[decoded.top_token], decoded.top_prob, spec)
}

/// Greedy continuation decoded entirely at `hidden.layer_index`, reusing
/// the already-advanced hidden state for the first token.
fn greedy_at_hidden(
    model: &LayerStack,
    input: &TokenInput,
    hidden: &HiddenState,
    want: usize,
) -> Result<(Vec<u32>, f32), ExitError> {
    let first = model.decode_at_layer(hidden)?;
    let mut tokens = vec![first.top_token];
    let mut current = input.extended(first.top_token);
    while tokens.len() < want {
        let h = model.forward_to_layer(&current, hidden.layer_index)?;
        let next = model.decode_at_layer(&h)?.top_token;
        tokens.push(next);
        current = current.extended(next);
    }
    Ok((tokens, first.top_prob))
}

/// The exit predicate at one layer, confidence-gated. Decodes the top
/// token from `hidden`; when it starts a longer mapped sequence, greedy
/// continuation at the same layer decides completion.
fn match_with_hidden(
    model: &LayerStack,
    input: &TokenInput,
    hidden: &HiddenState,
    spec: &MatchSpec,
) -> Result<LayerMatch, ExitError> {
    let decoded = model.decode_at_layer(hidden)?;
    let no_match = |tokens: Vec<u32>| LayerMatch {
        matched: false,
        class: None,
        confidence: decoded.top_prob,
        tokens,
    };
    if decoded.top_prob < spec.confidence_threshold {
        return Ok(no_match(vec![decoded.top_token]));
    }
    let longest = spec
        .sequences_starting_with(decoded.top_token)
        .map(|s| s.len())
        .max();
    let Some(longest) = longest else {
        return Ok(no_match(vec![decoded.top_token]));
    };
    let (tokens, confidence) = greedy_at_hidden(model, input, hidden, longest)?;
    let (matched, class) = match_token_sequence(&tokens, confidence, spec);
    let tokens = match (&class, matched) {
        (Some(c), true) => {
            // Trim to the completed sequence (shortest completed wins).
            let len = (1..=tokens.len())
                .find(|&l| spec.class_of_sequence(&tokens[..l]) == Some(c))
                .unwrap();
            tokens[..len].to_vec()
        }
        _ => tokens,
    };
    Ok(LayerMatch {
        matched,
        class,
        confidence,
        tokens,
    })
}

/// The match predicate at an arbitrary layer, forwarding from scratch.
pub fn match_at_layer(
    model: &LayerStack,
    input: &TokenInput,
    layer: usize,
    spec: &MatchSpec,
) -> Result<LayerMatch, ExitError> {
    let hidden = model.forward_to_layer(input, layer)?;
    match_with_hidden(model, input, &hidden, spec)
}

/// Threshold-free greedy classification at a layer (0 = embedding only):
/// decode up to the longest mapped label length and look the sequence up
/// in the label map. Used by fixed exits, the full-depth fallback, and
/// accuracy profiling.
pub fn classify_at_layer(
    model: &LayerStack,
    input: &TokenInput,
    layer: usize,
    spec: &MatchSpec,
) -> Result<LayerMatch, ExitError> {
    let hidden = model.forward_to_layer(input, layer)?;
    classify_with_hidden(model, input, &hidden, spec)
}

fn classify_with_hidden(
    model: &LayerStack,
    input: &TokenInput,
    hidden: &HiddenState,
    spec: &MatchSpec,
) -> Result<LayerMatch, ExitError> {
    let (tokens, confidence) = greedy_at_hidden(model, input, hidden, spec.max_label_len())?;
    let mut class = None;
    let mut matched_len = tokens.len();
    for len in 1..=tokens.len() {
        if let Some(c) = spec.class_of_sequence(&tokens[..len]) {
            class = Some(c.to_string());
            matched_len = len;
            break;
        }
    }
    let tokens = if class.is_some() {
        tokens[..matched_len].to_vec()
    } else {
        tokens
    };
    Ok(LayerMatch {
        matched: class.is_some(),
        class,
        confidence,
        tokens,
    })
}

fn decision(
    exit_layer: usize,
    n_layers: usize,
    outcome: LayerMatch,
    started: Instant,
) -> ExitDecision {
    ExitDecision {
        exited_layer: exit_layer,
        exited_early: exit_layer < n_layers,
        predicted_class: outcome.class,
        confidence: outcome.confidence,
        layers_executed: exit_layer,
        latency: LatencyRecord {
            layers_executed: exit_layer,
            layer_fraction: exit_layer as f64 / n_layers as f64,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        },
        tokens: outcome.tokens,
    }
}

/// Dynamic early exit: probe candidate layers in ascending order and stop
/// at the first one where the match predicate fires. The hidden state of
/// the prompt advances incrementally, so each layer runs at most once per
/// generated token. When no candidate matches, the final layer acts as a
/// fallback and reports the full model's (threshold-free) prediction.
pub fn run_with_early_exit(
    model: &LayerStack,
    input: &TokenInput,
    spec: &MatchSpec,
) -> Result<ExitDecision, ExitError> {
    spec.validate_for_model(model)?;
    let n = model.n_layers();
    let started = Instant::now();
    let mut hidden = model.forward_to_layer(input, 0)?;
    for &layer in &spec.candidate_layers {
        model.advance(&mut hidden, layer)?;
        let outcome = match_with_hidden(model, input, &hidden, spec)?;
        if outcome.matched {
            return Ok(decision(layer, n, outcome, started));
        }
    }
    model.advance(&mut hidden, n)?;
    let outcome = classify_with_hidden(model, input, &hidden, spec)?;
    Ok(decision(n, n, outcome, started))
}

/// Fixed exit: decode at exactly `layer` (greedy continuation covers
/// multi-token labels) and map the result to a class.
pub fn run_fixed_exit(
    model: &LayerStack,
    input: &TokenInput,
    spec: &MatchSpec,
    layer: usize,
) -> Result<ExitDecision, ExitError> {
    let n = model.n_layers();
    if layer < 1 || layer > n {
        return Err(ExitError::LayerOutOfRange { layer, n_layers: n });
    }
    let started = Instant::now();
    let hidden = model.forward_to_layer(input, layer)?;
    let outcome = classify_with_hidden(model, input, &hidden, spec)?;
    Ok(decision(layer, n, outcome, started))
}
