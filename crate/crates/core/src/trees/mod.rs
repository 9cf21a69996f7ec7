//! CART decision trees and random forests over encoded feature rows.

mod cart;
mod forest;

use std::sync::Arc;

use serde::Serialize;

use crate::dsl::{Domain, FeatureDescriptor, Schema};
use crate::rules::Target;
use crate::sampler::{FeatureVector, Value};

pub use cart::{fit_tree, DecisionTree, Node, Split, SplitChoice, TreeConfig};
pub use forest::{fit_forest, ForestConfig, RandomForest};

/// Categorical features are limited to this many levels so a split subset
/// fits in one machine word.
pub const MAX_LEVELS: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TreeError {
    #[error("cannot fit a model on an empty dataset")]
    EmptyData,
    #[error("feature `{0}` has more than 64 categories")]
    TooManyLevels(String),
    #[error("rows, labels and weights differ in length")]
    Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureInfo {
    pub name: String,
    /// Position of the feature within a source feature vector.
    #[serde(skip)]
    pub slot: usize,
    /// Category names for categorical features, in code order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<Arc<str>>>,
}

impl FeatureInfo {
    pub fn numeric(name: impl Into<String>, slot: usize) -> Self {
        FeatureInfo {
            name: name.into(),
            slot,
            levels: None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.levels.is_some()
    }
}

/// The columns a model is trained on and how to encode a feature vector
/// into a row of reals. Categories are encoded by their position in the
/// feature's domain; a value outside the domain gets the code one past the
/// last level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSpace {
    pub features: Vec<FeatureInfo>,
}

impl FeatureSpace {
    pub fn new(features: Vec<FeatureInfo>) -> Result<Self, TreeError> {
        for f in &features {
            if f.levels.as_ref().is_some_and(|l| l.len() > MAX_LEVELS) {
                return Err(TreeError::TooManyLevels(f.name.clone()));
            }
        }
        Ok(FeatureSpace { features })
    }

    /// Every schema feature accepted by `keep`.
    pub fn from_schema(
        schema: &Schema,
        keep: impl Fn(&FeatureDescriptor) -> bool,
    ) -> Result<Self, TreeError> {
        let features = schema
            .features
            .iter()
            .enumerate()
            .filter(|(_, d)| keep(d))
            .map(|(slot, d)| FeatureInfo {
                name: d.name.clone(),
                slot,
                levels: match &d.domain {
                    Domain::Values(v) if d.is_categorical() => Some(v.clone()),
                    _ => None,
                },
            })
            .collect();
        Self::new(features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn encode(&self, f: &FeatureVector) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.features.len());
        self.encode_into(f, &mut row);
        row
    }

    pub fn encode_into(&self, f: &FeatureVector, row: &mut Vec<f64>) {
        row.clear();
        for info in &self.features {
            let v = &f.values[info.slot];
            row.push(match (&info.levels, v) {
                (Some(levels), Value::Cat(s)) => levels
                    .iter()
                    .position(|l| Arc::ptr_eq(l, s) || l == s)
                    .unwrap_or(levels.len()) as f64,
                (None, Value::Num(x)) => *x,
                (Some(levels), Value::Num(_)) => levels.len() as f64,
                (None, Value::Cat(_)) => f64::NAN,
            });
        }
    }
}

/// Rows, class indices and per-row weights for fitting.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub space: Arc<FeatureSpace>,
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub weights: Vec<f64>,
    /// Target named by each class index. Lower indices win ties.
    pub classes: Vec<Target>,
}

impl TrainingSet {
    pub fn new(
        space: Arc<FeatureSpace>,
        rows: Vec<Vec<f64>>,
        y: Vec<usize>,
        classes: Vec<Target>,
    ) -> Result<Self, TreeError> {
        if rows.len() != y.len() {
            return Err(TreeError::Shape);
        }
        let weights = vec![1.0; y.len()];
        Ok(TrainingSet {
            space,
            rows,
            y,
            weights,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Weights each row by `n / (K * n_c)` so every present class carries
    /// the same total weight.
    pub fn balance(&mut self) {
        let k = self.classes.len();
        let mut counts = vec![0usize; k];
        for &c in &self.y {
            counts[c] += 1;
        }
        let present = counts.iter().filter(|&&c| c > 0).count().max(1);
        let n = self.y.len() as f64;
        for (w, &c) in self.weights.iter_mut().zip(&self.y) {
            *w = n / (present as f64 * counts[c] as f64);
        }
    }
}

/// Class order for binary labels: incorrect first so ties resolve to it.
pub const BINARY_CLASSES: [Target; 2] = [Target::Incorrect, Target::Correct];

/// Class order for augmented labels.
pub const AUGMENTED_CLASSES: [Target; 4] = [
    Target::IncorrectDp,
    Target::IncorrectUnlabelled,
    Target::CorrectDp,
    Target::CorrectUnlabelled,
];

pub fn gini(counts: &[f64]) -> f64 {
    let w: f64 = counts.iter().sum();
    if w <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / w) * (c / w)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gini_of_two_classes() {
        for p in [0.0, 0.1, 0.5, 0.73, 1.0] {
            assert_relative_eq!(gini(&[p, 1.0 - p]), 2.0 * p * (1.0 - p), epsilon = 1e-15);
        }
    }

    #[test]
    fn balanced_weights_equalize_classes() {
        let space = Arc::new(FeatureSpace::new(vec![FeatureInfo::numeric("x", 0)]).unwrap());
        let mut t = TrainingSet::new(
            space,
            vec![vec![0.0]; 4],
            vec![0, 1, 1, 1],
            BINARY_CLASSES.to_vec(),
        )
        .unwrap();
        t.balance();
        let w0: f64 = t.weights[..1].iter().sum();
        let w1: f64 = t.weights[1..].iter().sum();
        assert_relative_eq!(w0, w1);
        assert_relative_eq!(w0 + w1, 4.0);
    }
}
