//! Dataset ingestion, the 8:1 profiling/eval split, policy evaluation,
//! and report assembly.

pub mod report;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exit::{run_fixed_exit, run_with_early_exit, ExitDecision, ExitError, MatchSpec};
use crate::model::{LayerStack, TokenInput};
use crate::profiler::LabeledInput;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: label '{label}' is not in the task's class set")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: token id {token} out of vocab (size {vocab_size})")]
    TokenOutOfVocab {
        line: usize,
        token: u32,
        vocab_size: usize,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("no results to report")]
    NoResults,
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error(transparent)]
    Exit(#[from] ExitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    Static,
    Dynamic,
}

/// One dataset record: a tokenized prompt (template already applied),
/// an optional embedding prefix, and the ground-truth class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub prompt_tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_prefix: Option<Vec<Vec<f32>>>,
    pub label: String,
    #[serde(default)]
    pub dynamics: Option<Dynamics>,
}

impl LabeledExample {
    pub fn to_input(&self) -> TokenInput {
        TokenInput {
            token_ids: self.prompt_tokens.clone(),
            embedding_prefix: self.embedding_prefix.clone(),
        }
    }

    pub fn to_labeled_input(&self) -> LabeledInput {
        LabeledInput {
            input: self.to_input(),
            label: self.label.clone(),
        }
    }
}

/// Prompt skeleton with a single scene slot between prefix and suffix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prefix: Vec<u32>,
    pub suffix: Vec<u32>,
}

impl PromptTemplate {
    pub fn render(&self, scene: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.prefix.len() + scene.len() + self.suffix.len());
        out.extend_from_slice(&self.prefix);
        out.extend_from_slice(scene);
        out.extend_from_slice(&self.suffix);
        out
    }
}

/// A task file: the matching parameters plus optional prompt template and
/// static/dynamic partition of the classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(flatten)]
    pub match_spec: MatchSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<PromptTemplate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics_partition: Option<BTreeMap<String, Dynamics>>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        self.match_spec
            .validate()
            .map_err(|e| BenchError::InvalidTask(e.to_string()))?;
        if let Some(partition) = &self.dynamics_partition {
            let classes: std::collections::BTreeSet<&String> =
                self.match_spec.classes.iter().collect();
            let covered: std::collections::BTreeSet<&String> = partition.keys().collect();
            if classes != covered {
                return Err(BenchError::InvalidTask(
                    "dynamics_partition must cover exactly the task's classes".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TaskSpec, BenchError> {
        let text = std::fs::read_to_string(path)?;
        let task: TaskSpec = serde_json::from_str(&text)
            .map_err(|e| BenchError::InvalidTask(format!("task json: {e}")))?;
        task.validate()?;
        Ok(task)
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| BenchError::InvalidTask(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Load a JSONL dataset, validating every record against the task's class
/// set and the model vocabulary. Examples keep their file order.
pub fn load_dataset(
    path: &Path,
    task: &TaskSpec,
    vocab_size: usize,
) -> Result<Vec<LabeledExample>, BenchError> {
    let text = std::fs::read_to_string(path)?;
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(line).map_err(|e| BenchError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !task.match_spec.classes.iter().any(|c| c == &ex.label) {
            return Err(BenchError::UnknownLabel {
                line: line_no,
                label: ex.label,
            });
        }
        for &t in &ex.prompt_tokens {
            if t as usize >= vocab_size {
                return Err(BenchError::TokenOutOfVocab {
                    line: line_no,
                    token: t,
                    vocab_size,
                });
            }
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    Ok(examples)
}

/// Disjoint, exhaustive split of a dataset into a profiling side and an
/// evaluation side.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub profiling: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
    pub warnings: Vec<String>,
}

/// Per-class sizes after an 8:1 split of `n` examples.
pub fn split_sizes(n: usize) -> (usize, usize) {
    let profiling = n * 8 / 9;
    (profiling, n - profiling)
}

/// Stratified 8:1 split: within each class the examples are shuffled
/// deterministically by `seed`, floor(8n/9) go to profiling and the rest
/// to evaluation. Classes with fewer than 9 examples go entirely to
/// profiling, with a warning. File order is preserved within each side.
pub fn split_dataset(examples: &[LabeledExample], seed: u64) -> Result<DatasetSplit, BenchError> {
    if examples.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        by_class.entry(&ex.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut profiling_idx: Vec<usize> = Vec::new();
    let mut eval_idx: Vec<usize> = Vec::new();
    let mut warnings = Vec::new();
    for (class, mut indices) in by_class {
        if indices.len() < 9 {
            warnings.push(format!(
                "class '{class}' has only {} examples (< 9); all assigned to profiling",
                indices.len()
            ));
            profiling_idx.extend(indices);
            continue;
        }
        indices.shuffle(&mut rng);
        let (take, _) = split_sizes(indices.len());
        profiling_idx.extend_from_slice(&indices[..take]);
        eval_idx.extend_from_slice(&indices[take..]);
    }
    profiling_idx.sort_unstable();
    eval_idx.sort_unstable();
    Ok(DatasetSplit {
        profiling: profiling_idx.iter().map(|&i| examples[i].clone()).collect(),
        eval: eval_idx.iter().map(|&i| examples[i].clone()).collect(),
        warnings,
    })
}

/// Inference policy under evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Full,
    Fixed(usize),
    Dynamic,
}

/// Identifies a policy in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum PolicyDescriptor {
    Full,
    Fixed {
        exit_layer: usize,
    },
    Dynamic {
        threshold: f32,
    },
    /// Fixed policy requested but no exit layer exists for the task.
    Unavailable,
}

impl PolicyDescriptor {
    pub fn label(&self) -> String {
        match self {
            PolicyDescriptor::Full => "full".into(),
            PolicyDescriptor::Fixed { exit_layer } => format!("fixed({exit_layer})"),
            PolicyDescriptor::Dynamic { threshold } => format!("dynamic(t={threshold:.2})"),
            PolicyDescriptor::Unavailable => "fixed(-)".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingReason {
    NoData,
    NoExitLayer,
}

/// Aggregates for one class under one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub n: usize,
    pub correct: usize,
    pub accuracy_pct: f64,
    pub mean_layer_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_wall_ms: Option<f64>,
}

/// A class column renders either real stats or a "−" with its cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassCell {
    Stats(ClassStats),
    Missing { reason: MissingReason },
}

impl ClassCell {
    pub fn stats(&self) -> Option<&ClassStats> {
        match self {
            ClassCell::Stats(s) => Some(s),
            ClassCell::Missing { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgStats {
    pub accuracy_pct: f64,
    pub mean_layer_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_wall_ms: Option<f64>,
}

/// Evaluation of one policy over one task's eval split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task_id: String,
    pub descriptor: PolicyDescriptor,
    pub n_layers: usize,
    pub classes: BTreeMap<String, ClassCell>,
    /// Unweighted means over classes with data; absent when none has any.
    pub avg: Option<AvgStats>,
}

impl EvalResult {
    /// Placeholder result when the fixed policy has no exit layer: every
    /// class renders "−".
    pub fn unavailable(task_id: &str, n_layers: usize, classes: &[String]) -> EvalResult {
        EvalResult {
            task_id: task_id.to_string(),
            descriptor: PolicyDescriptor::Unavailable,
            n_layers,
            classes: classes
                .iter()
                .map(|c| {
                    (
                        c.clone(),
                        ClassCell::Missing {
                            reason: MissingReason::NoExitLayer,
                        },
                    )
                })
                .collect(),
            avg: None,
        }
    }

    /// Drop wall-clock numbers; layer fractions remain. Reports meant to
    /// be byte-reproducible use this before serialization.
    pub fn strip_wall(&mut self) {
        for cell in self.classes.values_mut() {
            if let ClassCell::Stats(s) = cell {
                s.mean_wall_ms = None;
            }
        }
        if let Some(avg) = &mut self.avg {
            avg.mean_wall_ms = None;
        }
    }
}

fn run_policy(
    model: &LayerStack,
    input: &TokenInput,
    spec: &MatchSpec,
    policy: Policy,
) -> Result<ExitDecision, ExitError> {
    match policy {
        Policy::Full => run_fixed_exit(model, input, spec, model.n_layers()),
        Policy::Fixed(layer) => run_fixed_exit(model, input, spec, layer),
        Policy::Dynamic => run_with_early_exit(model, input, spec),
    }
}

/// Evaluate one policy: per-class accuracy and latency plus the
/// unweighted average row. Per-example runs are independent and execute
/// in parallel; aggregation is a fixed-order reduction over the collected
/// results, so the outcome does not depend on the worker count.
pub fn evaluate(
    model: &LayerStack,
    examples: &[LabeledExample],
    task: &TaskSpec,
    policy: Policy,
) -> Result<EvalResult, BenchError> {
    if examples.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    task.validate()?;
    let spec = &task.match_spec;
    let n_layers = model.n_layers();

    let runs: Result<Vec<(usize, bool, usize, f64)>, ExitError> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let d = run_policy(model, &ex.to_input(), spec, policy)?;
            let correct = d.predicted_class.as_deref() == Some(ex.label.as_str());
            Ok((i, correct, d.layers_executed, d.latency.wall_ms))
        })
        .collect();
    let mut runs = runs?;
    runs.sort_unstable_by_key(|&(i, ..)| i);

    #[derive(Default)]
    struct Agg {
        n: usize,
        correct: usize,
        layers: u64,
        wall_ms: f64,
    }
    let mut per_class: BTreeMap<&str, Agg> = BTreeMap::new();
    for (i, correct, layers, wall) in runs {
        let agg = per_class.entry(&examples[i].label).or_default();
        agg.n += 1;
        agg.correct += correct as usize;
        agg.layers += layers as u64;
        agg.wall_ms += wall;
    }

    let mut classes = BTreeMap::new();
    for class in &spec.classes {
        let cell = match per_class.get(class.as_str()) {
            Some(agg) => ClassCell::Stats(ClassStats {
                n: agg.n,
                correct: agg.correct,
                accuracy_pct: agg.correct as f64 / agg.n as f64 * 100.0,
                mean_layer_fraction: agg.layers as f64 / (agg.n as u64 * n_layers as u64) as f64,
                mean_wall_ms: Some(agg.wall_ms / agg.n as f64),
            }),
            None => ClassCell::Missing {
                reason: MissingReason::NoData,
            },
        };
        classes.insert(class.clone(), cell);
    }

    let present: Vec<&ClassStats> = classes.values().filter_map(|c| c.stats()).collect();
    let avg = if present.is_empty() {
        None
    } else {
        let m = present.len() as f64;
        Some(AvgStats {
            accuracy_pct: present.iter().map(|s| s.accuracy_pct).sum::<f64>() / m,
            mean_layer_fraction: present.iter().map(|s| s.mean_layer_fraction).sum::<f64>() / m,
            mean_wall_ms: Some(
                present
                    .iter()
                    .map(|s| s.mean_wall_ms.unwrap_or(0.0))
                    .sum::<f64>()
                    / m,
            ),
        })
    };

    let descriptor = match policy {
        Policy::Full => PolicyDescriptor::Full,
        Policy::Fixed(layer) => PolicyDescriptor::Fixed { exit_layer: layer },
        Policy::Dynamic => PolicyDescriptor::Dynamic {
            threshold: spec.confidence_threshold,
        },
    };
    Ok(EvalResult {
        task_id: spec.task_id.clone(),
        descriptor,
        n_layers,
        classes,
        avg,
    })
}

/// Relative deltas of the early-exit policy against the baseline, at the
/// average row. The layer-count improvement is the normative number; the
/// wall-clock one is display only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub avg_accuracy_delta_pts: f64,
    pub latency_improvement_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_latency_improvement_pct: Option<f64>,
}

/// Paired evaluation artifact: baseline vs early-exit policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub n_layers: usize,
    pub baseline: EvalResult,
    pub early_exit: EvalResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Deltas>,
}

impl EvalReport {
    pub fn new(baseline: EvalResult, early_exit: EvalResult) -> EvalReport {
        let deltas = match (&baseline.avg, &early_exit.avg) {
            (Some(base), Some(ee)) => Some(Deltas {
                avg_accuracy_delta_pts: ee.accuracy_pct - base.accuracy_pct,
                latency_improvement_pct: (base.mean_layer_fraction - ee.mean_layer_fraction)
                    / base.mean_layer_fraction
                    * 100.0,
                wall_latency_improvement_pct: match (base.mean_wall_ms, ee.mean_wall_ms) {
                    (Some(b), Some(e)) if b > 0.0 => Some((b - e) / b * 100.0),
                    _ => None,
                },
            }),
            _ => None,
        };
        EvalReport {
            task_id: baseline.task_id.clone(),
            n_layers: baseline.n_layers,
            baseline,
            early_exit,
            deltas,
        }
    }

    pub fn strip_wall(&mut self) {
        self.baseline.strip_wall();
        self.early_exit.strip_wall();
        if let Some(d) = &mut self.deltas {
            d.wall_latency_improvement_pct = None;
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<EvalReport, serde_json::Error> {
        serde_json::from_str(text)
    }
}
