//! Layer-truncation profiling and exit-layer selection.
//!
//! The search runs in three phases over a labeled example set:
//!
//! 1. full-depth baseline accuracy;
//! 2. a truncation sweep that measures fixed-exit accuracy at shallower
//!    depths — exhaustively over every layer, or staged, descending from
//!    the top until a layer at least as accurate as the baseline appears;
//! 3. a restoration check (re-adding layers above the candidate must
//!    reproduce the baseline exactly) plus a downward exploration for a
//!    better exit below the candidate.
//!
//! Accuracies are kept as exact correct/total counts so that equality
//! checks between phases are bitwise, not approximate.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exit::{classify_at_layer, ExitError, MatchSpec};
use crate::model::{LayerStack, TokenInput};

/// Consecutive strictly-worse layers tolerated before a staged descent or
/// downward exploration stops.
pub const PATIENCE: usize = 2;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Exit(#[from] ExitError),
    #[error("empty example set")]
    EmptyExamples,
    #[error("layer {0} was not evaluated in this profile")]
    LayerNotEvaluated(usize),
    #[error("candidate layer {layer} out of range 1..={n_layers}")]
    CandidateOutOfRange { layer: usize, n_layers: usize },
}

/// One labeled instance as the profiler consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput {
    pub input: TokenInput,
    pub label: String,
}

/// Exact accuracy as a count, so equality between runs is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Fixed-exit accuracy per truncation depth (0 = embedding only).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAccuracyProfile {
    pub task_id: String,
    pub n_layers: usize,
    pub acc: BTreeMap<usize, Accuracy>,
    pub acc_clean: Accuracy,
}

impl LayerAccuracyProfile {
    pub fn evaluated_layers(&self) -> Vec<usize> {
        self.acc.keys().copied().collect()
    }

    /// True when some depth in 0..=n_layers was skipped (staged search).
    pub fn is_partial(&self) -> bool {
        self.acc.len() != self.n_layers + 1
    }

    fn best_exit_layer(&self) -> Option<(usize, Accuracy)> {
        let mut best: Option<(usize, Accuracy)> = None;
        for (&layer, &acc) in self.acc.range(1..) {
            if best.is_none_or(|(_, b)| acc.correct > b.correct) {
                best = Some((layer, acc));
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Staged,
    Exhaustive,
}

impl std::fmt::Display for SearchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SearchMode::Staged => write!(f, "staged"),
            SearchMode::Exhaustive => write!(f, "exhaustive"),
        }
    }
}

/// Outcome of the exit-layer search. `optimal_layer` is `None` exactly
/// when no evaluated depth classified a single example correctly.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitLayerSelection {
    pub task_id: String,
    pub optimal_layer: Option<usize>,
    pub acc_at_optimal: Option<f64>,
    pub restoration_validated: bool,
    pub search_mode: SearchMode,
}

/// Accuracy gap to the reference layer, per layer, and its mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentEffectReport {
    pub task_id: String,
    pub reference_layer: usize,
    pub te: BTreeMap<usize, f64>,
    pub ate: f64,
    /// True when the underlying profile skipped layers.
    pub partial: bool,
}

/// Fixed-exit accuracy of `examples` at one truncation depth.
pub fn accuracy_at_layer(
    model: &LayerStack,
    examples: &[LabeledInput],
    spec: &MatchSpec,
    layer: usize,
) -> Result<Accuracy, ProfileError> {
    if examples.is_empty() {
        return Err(ProfileError::EmptyExamples);
    }
    let outcomes: Result<Vec<bool>, ExitError> = examples
        .par_iter()
        .map(|ex| {
            let m = classify_at_layer(model, &ex.input, layer, spec)?;
            Ok(m.class.as_deref() == Some(ex.label.as_str()))
        })
        .collect();
    let outcomes = outcomes?;
    Ok(Accuracy {
        correct: outcomes.iter().filter(|&&ok| ok).count(),
        total: outcomes.len(),
    })
}

/// Full-depth accuracy; the baseline every other depth is judged against.
pub fn baseline_accuracy(
    model: &LayerStack,
    examples: &[LabeledInput],
    spec: &MatchSpec,
) -> Result<Accuracy, ProfileError> {
    accuracy_at_layer(model, examples, spec, model.n_layers())
}

/// Accuracy under progressive truncation from the top of the stack.
///
/// Exhaustive mode visits every depth 0..=N. Staged mode descends from
/// N-1, recording as it goes, and stops at the first depth whose accuracy
/// is at least the baseline; if none qualifies it keeps descending to
/// depth 1 and the caller falls back to the best depth seen.
pub fn truncation_sweep(
    model: &LayerStack,
    examples: &[LabeledInput],
    spec: &MatchSpec,
    mode: SearchMode,
) -> Result<LayerAccuracyProfile, ProfileError> {
    if examples.is_empty() {
        return Err(ProfileError::EmptyExamples);
    }
    spec.validate_for_model(model)?;
    let n = model.n_layers();
    let acc_clean = baseline_accuracy(model, examples, spec)?;
    let mut acc = BTreeMap::new();
    acc.insert(n, acc_clean);
    match mode {
        SearchMode::Exhaustive => {
            for layer in 0..n {
                acc.insert(layer, accuracy_at_layer(model, examples, spec, layer)?);
            }
        }
        SearchMode::Staged => {
            for layer in (1..n).rev() {
                let a = accuracy_at_layer(model, examples, spec, layer)?;
                acc.insert(layer, a);
                if a.correct >= acc_clean.correct {
                    break;
                }
            }
        }
    }
    Ok(LayerAccuracyProfile {
        task_id: spec.task_id.clone(),
        n_layers: n,
        acc,
        acc_clean,
    })
}

/// Re-add layers above `candidate` one at a time. Intermediate depths are
/// recorded for inspection; validation itself is the exact count match
/// between a fresh full-depth evaluation and the recorded baseline, which
/// confirms nothing outside the truncation influenced the comparison.
pub fn restoration_check(
    model: &LayerStack,
    examples: &[LabeledInput],
    spec: &MatchSpec,
    candidate: usize,
    profile: &mut LayerAccuracyProfile,
) -> Result<bool, ProfileError> {
    let n = model.n_layers();
    if candidate < 1 || candidate > n {
        return Err(ProfileError::CandidateOutOfRange {
            layer: candidate,
            n_layers: n,
        });
    }
    for layer in candidate + 1..n {
        if let std::collections::btree_map::Entry::Vacant(slot) = profile.acc.entry(layer) {
            slot.insert(accuracy_at_layer(model, examples, spec, layer)?);
        }
    }
    if candidate == n {
        return Ok(true); // nothing to restore
    }
    let restored_full = accuracy_at_layer(model, examples, spec, n)?;
    Ok(restored_full == profile.acc_clean)
}

/// Probe depths below `candidate` for a better exit, stopping after
/// [`PATIENCE`] consecutive strictly-worse layers. Returns the smallest
/// depth among the most accurate ones evaluated so far.
pub fn explore_below(
    model: &LayerStack,
    examples: &[LabeledInput],
    spec: &MatchSpec,
    candidate: usize,
    profile: &mut LayerAccuracyProfile,
) -> Result<usize, ProfileError> {
    let n = model.n_layers();
    if candidate < 1 || candidate > n {
        return Err(ProfileError::CandidateOutOfRange {
            layer: candidate,
            n_layers: n,
        });
    }
    let mut best_correct = profile
        .best_exit_layer()
        .map(|(_, a)| a.correct)
        .unwrap_or(0);
    let mut consecutive_drops = 0;
    for layer in (1..candidate).rev() {
        let a = match profile.acc.get(&layer) {
            Some(&a) => a,
            None => {
                let a = accuracy_at_layer(model, examples, spec, layer)?;
                profile.acc.insert(layer, a);
                a
            }
        };
        if a.correct < best_correct {
            consecutive_drops += 1;
            if consecutive_drops >= PATIENCE {
                break;
            }
        } else {
            consecutive_drops = 0;
            best_correct = a.correct;
        }
    }
    let (best_layer, _) = profile
        .best_exit_layer()
        .ok_or(ProfileError::LayerNotEvaluated(candidate))?;
    Ok(best_layer)
}

/// The full search: baseline, truncation sweep, downward exploration, and
/// the restoration gate. In exhaustive mode the result is simply the
/// argmax over all depths 1..=N with ties broken toward the smaller
/// layer; staged mode must agree with it whenever the profile's maximal
/// region is contiguous below its peak.
pub fn select_exit_layer(
    model: &LayerStack,
    examples: &[LabeledInput],
    spec: &MatchSpec,
    mode: SearchMode,
) -> Result<(LayerAccuracyProfile, ExitLayerSelection), ProfileError> {
    let mut profile = truncation_sweep(model, examples, spec, mode)?;
    let none_correct = profile.acc.range(1..).all(|(_, a)| a.correct == 0);
    if none_correct {
        let selection = ExitLayerSelection {
            task_id: spec.task_id.clone(),
            optimal_layer: None,
            acc_at_optimal: None,
            restoration_validated: false,
            search_mode: mode,
        };
        return Ok((profile, selection));
    }

    // Candidates in quality order; a candidate that failed restoration is
    // discarded and the search resumes from the next-best depth.
    loop {
        let (candidate, _) = profile.best_exit_layer().expect("some layer is correct");
        let refined = explore_below(model, examples, spec, candidate, &mut profile)?;
        let validated = restoration_check(model, examples, spec, refined, &mut profile)?;
        if validated {
            let acc = profile.acc[&refined];
            let selection = ExitLayerSelection {
                task_id: spec.task_id.clone(),
                optimal_layer: Some(refined),
                acc_at_optimal: Some(acc.value()),
                restoration_validated: true,
                search_mode: mode,
            };
            return Ok((profile, selection));
        }
        profile.acc.remove(&refined);
        if profile.acc.range(1..).all(|(_, a)| a.correct == 0) {
            let selection = ExitLayerSelection {
                task_id: spec.task_id.clone(),
                optimal_layer: None,
                acc_at_optimal: None,
                restoration_validated: false,
                search_mode: mode,
            };
            return Ok((profile, selection));
        }
    }
}

/// Per-layer accuracy gap to `reference`: te[L] = acc[reference] - acc[L],
/// averaged over every evaluated layer.
pub fn treatment_effect(
    profile: &LayerAccuracyProfile,
    reference: usize,
) -> Result<TreatmentEffectReport, ProfileError> {
    let ref_acc = profile
        .acc
        .get(&reference)
        .ok_or(ProfileError::LayerNotEvaluated(reference))?
        .value();
    let te: BTreeMap<usize, f64> = profile
        .acc
        .iter()
        .map(|(&layer, a)| (layer, ref_acc - a.value()))
        .collect();
    let ate = te.values().sum::<f64>() / te.len() as f64;
    Ok(TreatmentEffectReport {
        task_id: profile.task_id.clone(),
        reference_layer: reference,
        te,
        ate,
        partial: profile.is_partial(),
    })
}

/// One JSON report per task, combining the profile, the selection, and
/// the treatment-effect statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub task_id: String,
    pub mode: SearchMode,
    pub acc_clean: f64,
    pub acc: BTreeMap<usize, f64>,
    pub optimal_layer: Option<usize>,
    pub restoration_validated: bool,
    pub te: BTreeMap<usize, f64>,
    pub ate: Option<f64>,
    pub partial: bool,
}

impl ProfileReport {
    pub fn assemble(
        profile: &LayerAccuracyProfile,
        selection: &ExitLayerSelection,
        te: Option<&TreatmentEffectReport>,
    ) -> ProfileReport {
        ProfileReport {
            task_id: profile.task_id.clone(),
            mode: selection.search_mode,
            acc_clean: profile.acc_clean.value(),
            acc: profile.acc.iter().map(|(&l, a)| (l, a.value())).collect(),
            optimal_layer: selection.optimal_layer,
            restoration_validated: selection.restoration_validated,
            te: te.map(|t| t.te.clone()).unwrap_or_default(),
            ate: te.map(|t| t.ate),
            partial: profile.is_partial(),
        }
    }

    /// The model depth: the deepest evaluated layer, which is always
    /// present because the baseline runs at full depth.
    pub fn full_layers(&self) -> usize {
        self.acc.keys().max().copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<ProfileReport, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// End-to-end profiling for one task: search, then treatment effects
/// against the selected layer when one exists.
pub fn profile_task(
    model: &LayerStack,
    examples: &[LabeledInput],
    spec: &MatchSpec,
    mode: SearchMode,
) -> Result<ProfileReport, ProfileError> {
    let (profile, selection) = select_exit_layer(model, examples, spec, mode)?;
    let te = match selection.optimal_layer {
        Some(l) => Some(treatment_effect(&profile, l)?),
        None => None,
    };
    Ok(ProfileReport::assemble(&profile, &selection, te.as_ref()))
}
