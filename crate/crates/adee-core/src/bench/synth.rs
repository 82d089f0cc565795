//! Synthetic task and dataset construction for planted-exit models, used
//! by the CLI's fixture generation and throughout the test suites.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exit::MatchSpec;
use crate::model::PlantSpec;

use super::{Dynamics, LabeledExample, PromptTemplate, TaskSpec};

/// Key/label mapping with labels spaced two apart. The spacing keeps the
/// below-plant wrong answers (label + 1) outside the label set, so they
/// can never satisfy the matcher early.
pub fn default_mapping(n_classes: usize, vocab_size: usize) -> BTreeMap<u32, u32> {
    assert!(n_classes >= 1);
    let first_label = (vocab_size / 2) as u32;
    assert!(
        first_label as usize + 2 * (n_classes - 1) + 1 < vocab_size,
        "vocab of {vocab_size} too small for {n_classes} spaced labels"
    );
    assert!(
        n_classes < first_label as usize,
        "keys would collide with labels"
    );
    (0..n_classes)
        .map(|i| (i as u32 + 1, first_label + 2 * i as u32))
        .collect()
}

/// Class name of the i-th mapped key (in sorted key order).
pub fn class_name(index: usize) -> String {
    format!("class{index}")
}

/// Task spec matching a planted model: one single-token label per class
/// and every layer as an exit candidate.
pub fn planted_task(plant: &PlantSpec, threshold: f32) -> TaskSpec {
    let classes: Vec<String> = (0..plant.mapping.len()).map(class_name).collect();
    let label_tokens = plant
        .mapping
        .values()
        .enumerate()
        .map(|(i, &label)| (class_name(i), vec![vec![label]]))
        .collect();
    let dynamics_partition = classes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                c.clone(),
                if i % 2 == 0 {
                    Dynamics::Dynamic
                } else {
                    Dynamics::Static
                },
            )
        })
        .collect();
    TaskSpec {
        match_spec: MatchSpec {
            task_id: "planted".into(),
            classes,
            label_tokens,
            confidence_threshold: threshold,
            candidate_layers: (1..=plant.n_layers).collect(),
        },
        prompt_template: Some(PromptTemplate {
            prefix: vec![0],
            suffix: vec![],
        }),
        dynamics_partition: Some(dynamics_partition),
    }
}

/// Labeled examples for a planted model: each prompt is random filler
/// followed by one of the mapped key tokens, labeled with that key's
/// class. Deterministic in `seed`.
pub fn planted_dataset(plant: &PlantSpec, per_key: usize, seed: u64) -> Vec<LabeledExample> {
    let task = planted_task(plant, 0.0);
    let template = task.prompt_template.as_ref().unwrap();
    let partition = task.dynamics_partition.as_ref().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(plant.mapping.len() * per_key);
    for (i, &key) in plant.mapping.keys().enumerate() {
        let class = class_name(i);
        for j in 0..per_key {
            let filler_len = rng.random_range(1..=4);
            let mut scene: Vec<u32> = (0..filler_len)
                .map(|_| rng.random_range(0..plant.vocab_size as u32))
                .collect();
            scene.push(key);
            out.push(LabeledExample {
                id: format!("{class}-{j:03}"),
                prompt_tokens: template.render(&scene),
                embedding_prefix: None,
                label: class.clone(),
                dynamics: partition.get(&class).copied(),
            });
        }
    }
    out
}

/// Serialize examples as JSONL (one object per line, file order).
pub fn dataset_to_jsonl(examples: &[LabeledExample]) -> String {
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex).expect("example serializes"));
        text.push('\n');
    }
    text
}
