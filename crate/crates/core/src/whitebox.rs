//! Decision patterns over binarized activations and label augmentation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::evaluator::{Label, LabeledExample};
use crate::rules::Target;
use crate::trees::{
    fit_tree, FeatureInfo, FeatureSpace, Node, Split, TrainingSet, TreeConfig, BINARY_CLASSES,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WhiteboxError {
    #[error("examples carry no activations")]
    NoActivations,
    #[error("activation vectors differ in length")]
    InconsistentLength,
    #[error("no leaf of the pattern tree predicts `{0}`")]
    NoTargetLeaf(&'static str),
}

/// A channel is active when its output is at least zero.
pub fn binarize(activations: &[f64]) -> Vec<bool> {
    activations.iter().map(|a| *a >= 0.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConstraint {
    pub channel: usize,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ActivationPattern {
    pub constraints: Vec<ChannelConstraint>,
    pub source_label: Label,
    /// Fraction of source-label examples satisfying the pattern.
    pub support: f64,
    /// Fraction of pattern-satisfying examples with the source label.
    pub precision: f64,
}

impl ActivationPattern {
    pub fn matches_bits(&self, bits: &[bool]) -> bool {
        self.constraints
            .iter()
            .all(|c| bits.get(c.channel) == Some(&c.active))
    }

    pub fn matches(&self, activations: &[f64]) -> bool {
        self.constraints.iter().all(|c| {
            activations
                .get(c.channel)
                .is_some_and(|a| (*a >= 0.0) == c.active)
        })
    }

    /// Support recounted on `data`.
    pub fn support_on(&self, data: &[LabeledExample]) -> f64 {
        let mut total = 0;
        let mut hit = 0;
        for e in data.iter().filter(|e| e.label == self.source_label) {
            total += 1;
            if e.activations.as_deref().is_some_and(|a| self.matches(a)) {
                hit += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    pub fn describe(&self) -> String {
        if self.constraints.is_empty() {
            return "true".to_string();
        }
        let parts: Vec<String> = self
            .constraints
            .iter()
            .map(|c| format!("ch{} {}", c.channel, if c.active { "on" } else { "off" }))
            .collect();
        parts.join(" ∧ ")
    }
}

fn channel_dim(data: &[LabeledExample]) -> Result<usize, WhiteboxError> {
    let mut dim = None;
    for e in data {
        let a = e.activations.as_ref().ok_or(WhiteboxError::NoActivations)?;
        match dim {
            None => dim = Some(a.len()),
            Some(d) if d != a.len() => return Err(WhiteboxError::InconsistentLength),
            _ => {}
        }
    }
    dim.ok_or(WhiteboxError::NoActivations)
}

/// Fits a tree over binarized channels predicting the binary label, with
/// class-balanced weights, and returns the path of the `target` leaf with
/// the highest support. Precision breaks support ties.
pub fn mine_pattern(
    data: &[LabeledExample],
    target: Label,
    cfg: &TreeConfig,
    seed: u64,
) -> Result<ActivationPattern, WhiteboxError> {
    let dim = channel_dim(data)?;
    let space = Arc::new(
        FeatureSpace::new(
            (0..dim)
                .map(|j| FeatureInfo::numeric(format!("ch{j}"), j))
                .collect(),
        )
        .expect("numeric channels"),
    );
    let rows: Vec<Vec<f64>> = data
        .iter()
        .map(|e| {
            binarize(e.activations.as_deref().unwrap_or(&[]))
                .into_iter()
                .map(|b| if b { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let class_of = |l: Label| {
        BINARY_CLASSES
            .iter()
            .position(|c| *c == Target::from(l))
            .expect("binary")
    };
    let y: Vec<usize> = data.iter().map(|e| class_of(e.label)).collect();
    let mut ts = TrainingSet::new(space, rows, y, BINARY_CLASSES.to_vec())
        .map_err(|_| WhiteboxError::NoActivations)?;
    ts.balance();
    let tree = fit_tree(&ts, cfg, seed).map_err(|_| WhiteboxError::NoActivations)?;
    let tc = class_of(target);
    let n_target = ts.y.iter().filter(|&&c| c == tc).count();
    let mut best: Option<(f64, f64, Vec<ChannelConstraint>)> = None;
    let mut stack = vec![(0usize, Vec::<ChannelConstraint>::new())];
    while let Some((id, path)) = stack.pop() {
        match &tree.nodes[id] {
            Node::Leaf { class, counts, .. } => {
                if *class != tc || n_target == 0 {
                    continue;
                }
                let support = counts[tc] as f64 / n_target as f64;
                let total: usize = counts.iter().sum();
                let precision = if total == 0 {
                    0.0
                } else {
                    counts[tc] as f64 / total as f64
                };
                let better = match &best {
                    None => true,
                    Some((s, p, _)) => support > *s || (support == *s && precision > *p),
                };
                if better {
                    best = Some((support, precision, path));
                }
            }
            Node::Internal {
                feature,
                split,
                left,
                right,
                ..
            } => {
                let Split::Threshold(_) = split else {
                    unreachable!("channels are numeric")
                };
                // Binary channels: the left branch holds the inactive side.
                for (child, active) in [(*right, true), (*left, false)] {
                    let mut p = path.clone();
                    if !p.iter().any(|c| c.channel == *feature) {
                        p.push(ChannelConstraint {
                            channel: *feature,
                            active,
                        });
                    }
                    stack.push((child, p));
                }
            }
        }
    }
    let (support, precision, mut constraints) = best.ok_or(WhiteboxError::NoTargetLeaf(target.as_str()))?;
    constraints.sort_by_key(|c| c.channel);
    Ok(ActivationPattern {
        constraints,
        source_label: target,
        support,
        precision,
    })
}

/// Splits each binary label into decision-pattern and unlabelled classes.
/// A missing pattern is satisfied by no example.
pub fn augment_labels(
    data: &mut [LabeledExample],
    correct: Option<&ActivationPattern>,
    incorrect: Option<&ActivationPattern>,
) {
    for e in data {
        let acts = e.activations.as_deref().unwrap_or(&[]);
        let (pattern, dp, unlabelled) = match e.label {
            Label::Correct => (correct, Target::CorrectDp, Target::CorrectUnlabelled),
            Label::Incorrect => (incorrect, Target::IncorrectDp, Target::IncorrectUnlabelled),
        };
        e.augmented = Some(if pattern.is_some_and(|p| p.matches(acts)) {
            dp
        } else {
            unlabelled
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::ImageEvaluation;
    use crate::sampler::FeatureVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example(label: Label, acts: Vec<f64>) -> LabeledExample {
        LabeledExample {
            features: FeatureVector {
                values: Vec::new(),
                seed_index: 0,
            },
            evaluation: ImageEvaluation::from_counts(0, 0, 0),
            label,
            activations: Some(acts),
            augmented: None,
        }
    }

    #[test]
    fn binarize_cases() {
        assert_eq!(binarize(&[-1.0, 0.0, 2.0]), vec![false, true, true]);
        assert_eq!(binarize(&[1.0, 3.0]), vec![true, true]);
        let a = [0.5, -0.2, 1.5];
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let flipped: Vec<bool> = binarize(&a).into_iter().map(|b| !b).collect();
        assert_eq!(binarize(&neg), flipped);
    }

    fn planted(n: usize, seed: u64) -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let incorrect = rng.random::<f64>() < 0.3;
                let mut acts: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                acts[3] = if incorrect { 0.5 } else { -0.5 };
                let label = if incorrect {
                    Label::Incorrect
                } else {
                    Label::Correct
                };
                example(label, acts)
            })
            .collect()
    }

    #[test]
    fn perfect_channel_is_mined() {
        let data = planted(300, 1);
        let p = mine_pattern(&data, Label::Incorrect, &TreeConfig::default(), 0).unwrap();
        assert_eq!(
            p.constraints,
            vec![ChannelConstraint {
                channel: 3,
                active: true
            }]
        );
        assert_eq!(p.support, 1.0);
        assert_eq!(p.support_on(&data), p.support);
        let c = mine_pattern(&data, Label::Correct, &TreeConfig::default(), 0).unwrap();
        assert!(!c.constraints[0].active);
    }

    #[test]
    fn augmentation_partitions_and_projects() {
        let mut data = planted(200, 2);
        let cp = mine_pattern(&data, Label::Correct, &TreeConfig::default(), 0).unwrap();
        let ip = mine_pattern(&data, Label::Incorrect, &TreeConfig::default(), 0).unwrap();
        augment_labels(&mut data, Some(&cp), Some(&ip));
        let n_correct = data.iter().filter(|e| e.label == Label::Correct).count();
        let dp = data
            .iter()
            .filter(|e| e.augmented == Some(Target::CorrectDp))
            .count();
        assert_eq!(dp as f64 / n_correct as f64, cp.support);
        for e in &data {
            assert_eq!(e.augmented.unwrap().binary(), e.label);
        }
    }

    #[test]
    fn empty_and_missing_patterns() {
        let mut data = planted(50, 3);
        let empty = ActivationPattern {
            constraints: Vec::new(),
            source_label: Label::Correct,
            support: 1.0,
            precision: 0.0,
        };
        augment_labels(&mut data, Some(&empty), None);
        for e in &data {
            let expected = match e.label {
                Label::Correct => Target::CorrectDp,
                Label::Incorrect => Target::IncorrectUnlabelled,
            };
            assert_eq!(e.augmented, Some(expected));
        }
    }

    #[test]
    fn missing_activations_is_an_error() {
        let mut e = example(Label::Correct, vec![]);
        e.activations = None;
        assert_eq!(
            mine_pattern(&[e], Label::Correct, &TreeConfig::default(), 0),
            Err(WhiteboxError::NoActivations)
        );
    }
}
