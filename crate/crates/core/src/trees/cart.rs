use std::collections::BTreeMap;
use std::fmt::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gini, FeatureSpace, TrainingSet, TreeError};
use crate::rules::{normalize, Predicate, Provenance, Rule, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub min_split: usize,
    pub min_bucket: usize,
    /// A split must reduce the weighted Gini impurity of the tree by at
    /// least this fraction of the root impurity.
    pub complexity_penalty: f64,
    pub max_depth: usize,
    /// Multiplier applied to the weight of every row of a class.
    pub label_weights: BTreeMap<Target, f64>,
    /// Features considered per split; `None` means all of them.
    pub max_features: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            min_split: 20,
            min_bucket: 7,
            complexity_penalty: 0.01,
            max_depth: 30,
            label_weights: BTreeMap::new(),
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Split {
    /// Rows with `x <= threshold` go left.
    Threshold(f64),
    /// Rows whose category code is in the bit set go left.
    Subset(u64),
}

impl Split {
    pub fn goes_left(&self, x: f64) -> bool {
        match self {
            Split::Threshold(t) => x <= *t,
            Split::Subset(mask) => {
                let code = x as u64;
                code < 64 && mask & (1 << code) != 0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Node {
    Leaf {
        class: usize,
        counts: Vec<usize>,
        weighted: Vec<f64>,
    },
    #[serde(rename_all = "camelCase")]
    Internal {
        feature: usize,
        split: Split,
        left: usize,
        right: usize,
        counts: Vec<usize>,
        weighted: Vec<f64>,
        /// Gini decrease of this split, normalized by the node weight.
        impurity_decrease: f64,
    },
}

impl Node {
    pub fn counts(&self) -> &[usize] {
        match self {
            Node::Leaf { counts, .. } | Node::Internal { counts, .. } => counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecisionTree {
    #[serde(skip)]
    pub space: Arc<FeatureSpace>,
    pub classes: Vec<Target>,
    pub nodes: Vec<Node>,
}

/// The best split found at a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub split: Split,
    pub impurity_decrease: f64,
}

fn argmax(weighted: &[f64]) -> usize {
    let mut best = 0;
    for (i, w) in weighted.iter().enumerate() {
        if *w > weighted[best] {
            best = i;
        }
    }
    best
}

struct Grower<'a> {
    data: &'a TrainingSet,
    cfg: &'a TreeConfig,
    w: Vec<f64>,
    k: usize,
    root_risk: f64,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Grower<'_> {
    fn tally(&self, idx: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let mut counts = vec![0usize; self.k];
        let mut weighted = vec![0.0; self.k];
        for &i in idx {
            counts[self.data.y[i]] += 1;
            weighted[self.data.y[i]] += self.w[i];
        }
        (counts, weighted)
    }

    fn numeric_split(
        &self,
        f: usize,
        idx: &[usize],
        total: &[f64],
        parent_gini: f64,
        buf: &mut Vec<usize>,
    ) -> Option<(Split, f64)> {
        let rows = &self.data.rows;
        buf.clear();
        buf.extend_from_slice(idx);
        buf.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]));
        let n = buf.len();
        let w_total: f64 = total.iter().sum();
        let mut left = vec![0.0; self.k];
        let mut best: Option<(Split, f64)> = None;
        for pos in 0..n - 1 {
            let i = buf[pos];
            left[self.data.y[i]] += self.w[i];
            let (a, b) = (rows[i][f], rows[buf[pos + 1]][f]);
            if a == b {
                continue;
            }
            let nl = pos + 1;
            if nl < self.cfg.min_bucket || n - nl < self.cfg.min_bucket {
                continue;
            }
            let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let wl: f64 = left.iter().sum();
            let wr = w_total - wl;
            let dec = parent_gini - (wl / w_total) * gini(&left) - (wr / w_total) * gini(&right);
            if best.is_none_or(|(_, d)| dec > d) {
                let mut t = a + (b - a) / 2.0;
                if t >= b {
                    t = a;
                }
                best = Some((Split::Threshold(t), dec));
            }
        }
        best
    }

    fn categorical_split(
        &self,
        f: usize,
        idx: &[usize],
        total: &[f64],
        parent_gini: f64,
    ) -> Option<(Split, f64)> {
        let mut per_level: BTreeMap<u64, (usize, Vec<f64>)> = BTreeMap::new();
        for &i in idx {
            let code = self.data.rows[i][f] as u64;
            let e = per_level.entry(code).or_insert_with(|| (0, vec![0.0; self.k]));
            e.0 += 1;
            e.1[self.data.y[i]] += self.w[i];
        }
        let levels: Vec<(u64, usize, Vec<f64>)> =
            per_level.into_iter().map(|(c, (n, w))| (c, n, w)).collect();
        let m = levels.len();
        if m < 2 {
            return None;
        }
        let n: usize = idx.len();
        let w_total: f64 = total.iter().sum();
        let candidates: Vec<Vec<usize>> = if m <= 12 {
            (1u64..(1 << (m - 1)))
                .map(|mask| (0..m - 1).filter(|j| mask & (1 << j) != 0).collect())
                .collect()
        } else {
            (0..m).map(|j| vec![j]).collect()
        };
        let mut best: Option<(Split, f64)> = None;
        for members in candidates {
            let mut left = vec![0.0; self.k];
            let mut nl = 0;
            let mut mask = 0u64;
            for &j in &members {
                let (code, cnt, w) = &levels[j];
                nl += cnt;
                mask |= 1 << code;
                for (l, x) in left.iter_mut().zip(w) {
                    *l += x;
                }
            }
            if nl < self.cfg.min_bucket || n - nl < self.cfg.min_bucket {
                continue;
            }
            let right: Vec<f64> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let wl: f64 = left.iter().sum();
            let wr = w_total - wl;
            let dec = parent_gini - (wl / w_total) * gini(&left) - (wr / w_total) * gini(&right);
            if best.is_none_or(|(_, d)| dec > d) {
                best = Some((Split::Subset(mask), dec));
            }
        }
        best
    }

    fn best_split(&mut self, idx: &[usize], weighted: &[f64]) -> Option<SplitChoice> {
        let parent = gini(weighted);
        let p = self.data.space.len();
        self.order.clear();
        self.order.extend(0..p);
        self.order.shuffle(&mut self.rng);
        let take = self.cfg.max_features.map_or(p, |m| m.clamp(1, p));
        let mut buf = Vec::with_capacity(idx.len());
        let mut best: Option<SplitChoice> = None;
        for &f in &self.order[..take] {
            let found = if self.data.space.features[f].is_categorical() {
                self.categorical_split(f, idx, weighted, parent)
            } else {
                self.numeric_split(f, idx, weighted, parent, &mut buf)
            };
            if let Some((split, dec)) = found {
                if best.is_none_or(|b| dec > b.impurity_decrease) {
                    best = Some(SplitChoice {
                        feature: f,
                        split,
                        impurity_decrease: dec,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let (counts, weighted) = self.tally(idx);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            class: argmax(&weighted),
            counts: counts.clone(),
            weighted: weighted.clone(),
        });
        let node_weight: f64 = weighted.iter().sum();
        if idx.len() < self.cfg.min_split
            || depth >= self.cfg.max_depth
            || gini(&weighted) <= 0.0
            || idx.len() < 2
        {
            return id;
        }
        let Some(choice) = self.best_split(idx, &weighted) else {
            return id;
        };
        let gain = choice.impurity_decrease * node_weight;
        if choice.impurity_decrease <= 0.0 || gain < self.cfg.complexity_penalty * self.root_risk {
            return id;
        }
        let rows = &self.data.rows;
        let mut cut = 0;
        for j in 0..idx.len() {
            if choice.split.goes_left(rows[idx[j]][choice.feature]) {
                idx.swap(cut, j);
                cut += 1;
            }
        }
        let (l, r) = idx.split_at_mut(cut);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Internal {
            feature: choice.feature,
            split: choice.split,
            left,
            right,
            counts,
            weighted,
            impurity_decrease: choice.impurity_decrease,
        };
        id
    }
}

/// Fits a tree on the rows listed in `idx` (repeats allowed).
pub(super) fn fit_on(
    data: &TrainingSet,
    idx: &mut [usize],
    cfg: &TreeConfig,
    seed: u64,
) -> Result<DecisionTree, TreeError> {
    if idx.is_empty() {
        return Err(TreeError::EmptyData);
    }
    if data.rows.len() != data.y.len() || data.weights.len() != data.y.len() {
        return Err(TreeError::Shape);
    }
    let k = data.classes.len();
    let w: Vec<f64> = data
        .weights
        .iter()
        .zip(&data.y)
        .map(|(w, &c)| w * cfg.label_weights.get(&data.classes[c]).copied().unwrap_or(1.0))
        .collect();
    let mut g = Grower {
        data,
        cfg,
        w,
        k,
        root_risk: 0.0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
        order: Vec::new(),
    };
    let (_, weighted) = g.tally(idx);
    g.root_risk = weighted.iter().sum::<f64>() * gini(&weighted);
    g.grow(idx, 0);
    Ok(DecisionTree {
        space: data.space.clone(),
        classes: data.classes.clone(),
        nodes: g.nodes,
    })
}

/// Grows a CART tree by recursive binary splitting on weighted Gini
/// impurity. The seed only breaks ties between equally good splits.
pub fn fit_tree(data: &TrainingSet, cfg: &TreeConfig, seed: u64) -> Result<DecisionTree, TreeError> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    fit_on(data, &mut idx, cfg, seed)
}

impl DecisionTree {
    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { .. } => return id,
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                    ..
                } => {
                    id = if split.goes_left(row[*feature]) {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn predict_class(&self, row: &[f64]) -> usize {
        match &self.nodes[self.leaf_of(row)] {
            Node::Leaf { class, .. } => *class,
            Node::Internal { .. } => unreachable!(),
        }
    }

    pub fn predict(&self, row: &[f64]) -> Target {
        self.classes[self.predict_class(row)]
    }

    pub fn root_split(&self) -> Option<SplitChoice> {
        match &self.nodes[0] {
            Node::Internal {
                feature,
                split,
                impurity_decrease,
                ..
            } => Some(SplitChoice {
                feature: *feature,
                split: *split,
                impurity_decrease: *impurity_decrease,
            }),
            Node::Leaf { .. } => None,
        }
    }

    fn edge_predicate(&self, feature: usize, split: &Split, left: bool) -> Predicate {
        let info = &self.space.features[feature];
        let name = info.name.clone();
        match split {
            Split::Threshold(t) if left => Predicate::Le {
                feature: name,
                value: *t,
            },
            Split::Threshold(t) => Predicate::Gt {
                feature: name,
                value: *t,
            },
            Split::Subset(mask) => {
                let levels = info.levels.as_deref().unwrap_or(&[]);
                let values = levels
                    .iter()
                    .enumerate()
                    .filter(|(code, _)| (mask & (1 << code) != 0) == left)
                    .map(|(_, l)| l.to_string())
                    .collect();
                Predicate::In {
                    feature: name,
                    values,
                }
            }
        }
    }

    /// Root-to-leaf predicate paths, one per leaf, in node order.
    pub fn leaf_paths(&self) -> Vec<(usize, Vec<Predicate>)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((id, path)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { .. } => out.push((id, path)),
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                    ..
                } => {
                    let mut r = path.clone();
                    r.push(self.edge_predicate(*feature, split, false));
                    stack.push((*right, r));
                    let mut l = path;
                    l.push(self.edge_predicate(*feature, split, true));
                    stack.push((*left, l));
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// One rule per leaf predicting `target`.
    pub fn extract_rules(&self, target: Target, provenance: Provenance) -> Vec<Rule> {
        let Some(class) = self.classes.iter().position(|c| *c == target) else {
            return Vec::new();
        };
        self.leaf_paths()
            .into_iter()
            .filter(|(id, _)| matches!(self.nodes[*id], Node::Leaf { class: c, .. } if c == class))
            .map(|(_, path)| Rule::new(target, normalize(&path), provenance))
            .collect()
    }

    /// Graphviz rendering of the tree.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph tree {\n  node [shape=box];\n");
        for (id, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Leaf { class, counts, .. } => {
                    let _ = writeln!(
                        s,
                        "  n{id} [label=\"{}\\n{:?}\"];",
                        self.classes[*class].as_str(),
                        counts
                    );
                }
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                    ..
                } => {
                    let p = self.edge_predicate(*feature, split, true);
                    let _ = writeln!(s, "  n{id} [label=\"{}\"];", p.to_string().replace('"', "'"));
                    let _ = writeln!(s, "  n{id} -> n{left} [label=\"yes\"];");
                    let _ = writeln!(s, "  n{id} -> n{right} [label=\"no\"];");
                }
            }
        }
        s.push_str("}\n");
        s
    }
}
