use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cart::fit_on;
use super::{DecisionTree, FeatureSpace, TrainingSet, TreeConfig, TreeError};
use crate::rng::derive_seed_index;
use crate::rules::Target;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features tried per split; `None` uses the rounded-up square root of
    /// the feature count.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub tree: TreeConfig,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_features: None,
            bootstrap: true,
            tree: TreeConfig {
                min_split: 10,
                min_bucket: 5,
                complexity_penalty: 0.0,
                ..TreeConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    pub space: Arc<FeatureSpace>,
    pub trees: Vec<DecisionTree>,
    pub classes: Vec<Target>,
}

pub fn fit_forest(data: &TrainingSet, cfg: &ForestConfig, seed: u64) -> Result<RandomForest, TreeError> {
    if data.is_empty() {
        return Err(TreeError::EmptyData);
    }
    let p = data.space.len().max(1);
    let mtry = cfg
        .max_features
        .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize);
    let tree_cfg = TreeConfig {
        max_features: Some(mtry),
        ..cfg.tree.clone()
    };
    let n = data.len();
    let trees = (0..cfg.n_trees.max(1) as u64)
        .into_par_iter()
        .map(|t| {
            let s = derive_seed_index(seed, t);
            let mut idx: Vec<usize> = if cfg.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_on(data, &mut idx, &tree_cfg, s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RandomForest {
        space: data.space.clone(),
        trees,
        classes: data.classes.clone(),
    })
}

impl RandomForest {
    pub fn votes(&self, row: &[f64]) -> Vec<usize> {
        let mut v = vec![0; self.classes.len()];
        for t in &self.trees {
            v[t.predict_class(row)] += 1;
        }
        v
    }

    /// Majority vote; ties go to the lowest class index.
    pub fn predict(&self, row: &[f64]) -> Target {
        let v = self.votes(row);
        let mut best = 0;
        for (i, c) in v.iter().enumerate() {
            if *c > v[best] {
                best = i;
            }
        }
        self.classes[best]
    }
}

#[cfg(test)]
mod tests {
    use super::super::{FeatureInfo, BINARY_CLASSES};
    use super::*;
    use crate::trees::fit_tree;

    fn separable(n: usize) -> TrainingSet {
        let space = Arc::new(
            FeatureSpace::new(vec![FeatureInfo::numeric("a", 0), FeatureInfo::numeric("b", 1)]).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
            .collect();
        let y = rows.iter().map(|r| usize::from(r[0] + r[1] > 10.0)).collect();
        TrainingSet::new(space, rows, y, BINARY_CLASSES.to_vec()).unwrap()
    }

    #[test]
    fn single_tree_without_bootstrap_equals_cart() {
        let data = separable(200);
        let cfg = ForestConfig {
            n_trees: 1,
            bootstrap: false,
            max_features: Some(2),
            ..ForestConfig::default()
        };
        let forest = fit_forest(&data, &cfg, 4).unwrap();
        let tree_cfg = TreeConfig {
            max_features: Some(2),
            ..cfg.tree.clone()
        };
        let tree = fit_tree(&data, &tree_cfg, derive_seed_index(4, 0)).unwrap();
        assert_eq!(forest.trees[0].nodes, tree.nodes);
    }

    #[test]
    fn forest_fits_separable_data() {
        let data = separable(400);
        let forest = fit_forest(&data, &ForestConfig::default(), 1).unwrap();
        let test = separable(600);
        let hits = test.rows[400..]
            .iter()
            .zip(&test.y[400..])
            .filter(|(r, y)| forest.predict(r) == BINARY_CLASSES[**y])
            .count();
        assert!(hits as f64 / 200.0 >= 0.9, "{hits}");
    }

    #[test]
    fn constant_labels_predict_constant() {
        let mut data = separable(50);
        data.y = vec![1; 50];
        let forest = fit_forest(&data, &ForestConfig::default(), 0).unwrap();
        assert!(data.rows.iter().all(|r| forest.predict(r) == Target::Correct));
    }

    #[test]
    fn deterministic_across_runs() {
        let data = separable(150);
        let a = fit_forest(&data, &ForestConfig::default(), 7).unwrap();
        let b = fit_forest(&data, &ForestConfig::default(), 7).unwrap();
        for (x, y) in a.trees.iter().zip(&b.trees) {
            assert_eq!(x.nodes, y.nodes);
        }
    }
}
