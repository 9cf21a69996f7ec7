//! Anchors: high-precision local rules found by beam search, with precision
//! estimated by sampling the scenario program around an instance and
//! querying a surrogate classifier.

mod bandit;
mod discretize;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bandit::{exploration_rate, kl_bernoulli, kl_lower, kl_lucb, kl_upper, ArmStats};
pub use discretize::{percentile, Discretizer};

use crate::evaluator::LabeledExample;
use crate::rng::{derive_seed, derive_seed_index, mix_words};
use crate::rules::{compile_predicates, Method, Predicate, Provenance, Rule, Target, View};
use crate::sampler::{FeatureVector, SampleError, Sampler, SlotTest};
use crate::trees::{DecisionTree, RandomForest};

const ANCHOR_BB: Provenance = Provenance::new(Method::Anchor, View::BlackBox);

/// Anything that labels a feature vector.
pub trait Classifier: Sync {
    fn classify(&self, f: &FeatureVector) -> Target;
}

impl Classifier for RandomForest {
    fn classify(&self, f: &FeatureVector) -> Target {
        self.predict(&self.space.encode(f))
    }
}

impl Classifier for DecisionTree {
    fn classify(&self, f: &FeatureVector) -> Target {
        self.predict(&self.space.encode(f))
    }
}

impl<F: Fn(&FeatureVector) -> Target + Sync> Classifier for F {
    fn classify(&self, f: &FeatureVector) -> Target {
        self(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub precision_threshold: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub beam_width: usize,
    pub batch_size: u64,
    pub max_anchor_size: usize,
    pub max_covered_instances: usize,
    pub bins: usize,
    /// Cap on samples spent confirming a single candidate.
    pub max_samples_per_candidate: u64,
    pub max_lucb_rounds: u64,
    pub max_rejections: u64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            precision_threshold: 0.95,
            delta: 0.05,
            epsilon: 0.1,
            beam_width: 10,
            batch_size: 32,
            max_anchor_size: 5,
            max_covered_instances: 50,
            bins: 4,
            max_samples_per_candidate: 2048,
            max_lucb_rounds: 500,
            max_rejections: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnchorError {
    #[error("the surrogate does not assign the target label to the instance")]
    SurrogateDisagrees,
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CandidateTrace {
    pub anchor: String,
    pub samples: u64,
    pub precision: f64,
    pub lower: f64,
    pub upper: f64,
    pub coverage: f64,
}

/// Search record for one explained instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AnchorTrace {
    pub seed_index: u64,
    pub target: Target,
    /// Candidates kept in the beam at each anchor size.
    pub beams: Vec<Vec<CandidateTrace>>,
    pub samples_used: u64,
    pub result: Option<CandidateTrace>,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub predicates: Vec<Predicate>,
    pub precision: f64,
    pub lower: f64,
    pub upper: f64,
    pub samples: u64,
    pub coverage: f64,
    /// Whether the lower bound cleared the precision threshold.
    pub accepted: bool,
    pub trace: AnchorTrace,
}

impl Anchor {
    pub fn to_rule(&self, target: Target, provenance: Provenance) -> Rule {
        Rule::new(target, self.predicates.clone(), provenance)
    }
}

struct Search<'a> {
    sampler: &'a Sampler,
    surrogate: &'a dyn Classifier,
    target: Target,
    cfg: &'a AnchorConfig,
    seed: u64,
    /// Candidate predicates, their sampler slots and the coverage rows they match.
    preds: Vec<(usize, Predicate)>,
    matches: Vec<Vec<bool>>,
    stats: HashMap<Vec<usize>, ArmStats>,
    samples_used: u64,
}

impl Search<'_> {
    /// Draws `n` more perturbations for `key`. The draws depend only on the
    /// candidate and how many it already had.
    fn draw(&self, key: &[usize], from: u64, n: u64) -> Result<(u64, u64), SampleError> {
        let mut tests: Vec<Option<SlotTest>> = vec![None; self.sampler.schema().len()];
        for &k in key {
            let (slot, p) = &self.preds[k];
            tests[*slot] = Some(p.to_test());
        }
        let seed = mix_words(self.seed, key.iter().map(|k| *k as u64 + 1));
        let mut hits = 0;
        for i in from..from + n {
            let z = self
                .sampler
                .sample_with(seed, i, &tests, self.cfg.max_rejections)?;
            if self.surrogate.classify(&z) == self.target {
                hits += 1;
            }
        }
        Ok((n, hits))
    }

    fn pull(&mut self, key: &[usize], n: u64) -> Result<(), SampleError> {
        let from = self.stats.get(key).map_or(0, |s| s.n);
        let (s, p) = self.draw(key, from, n)?;
        let e = self.stats.entry(key.to_vec()).or_default();
        e.n += s;
        e.positives += p;
        self.samples_used += s;
        Ok(())
    }

    fn coverage(&self, key: &[usize]) -> f64 {
        let rows = self.matches.first().map_or(0, |m| m.len());
        if rows == 0 {
            return 0.0;
        }
        let hit = (0..rows)
            .filter(|&r| key.iter().all(|&k| self.matches[k][r]))
            .count();
        hit as f64 / rows as f64
    }

    fn bounds(&self, key: &[usize], beta: f64) -> (f64, f64, f64) {
        let s = self.stats.get(key).copied().unwrap_or_default();
        if s.n == 0 {
            return (0.0, 0.0, 1.0);
        }
        let m = s.mean();
        (m, kl_lower(m, beta / s.n as f64), kl_upper(m, beta / s.n as f64))
    }

    /// Samples until the candidate is clearly above or below the threshold,
    /// or its budget runs out. Returns whether it was accepted.
    fn confirm(&mut self, key: &[usize], beta: f64) -> Result<bool, SampleError> {
        let tau = self.cfg.precision_threshold;
        loop {
            let (m, lb, _) = self.bounds(key, beta);
            let n = self.stats.get(key).map_or(0, |s| s.n);
            if lb > tau {
                return Ok(true);
            }
            if m < tau || n >= self.cfg.max_samples_per_candidate {
                return Ok(false);
            }
            self.pull(key, self.cfg.batch_size)?;
        }
    }

    fn trace(&self, key: &[usize], beta: f64) -> CandidateTrace {
        let (precision, lower, upper) = self.bounds(key, beta);
        let preds: Vec<Predicate> = key.iter().map(|&k| self.preds[k].1.clone()).collect();
        CandidateTrace {
            anchor: Rule::new(self.target, preds, ANCHOR_BB).to_string(),
            samples: self.stats.get(key).map_or(0, |s| s.n),
            precision,
            lower,
            upper,
            coverage: self.coverage(key),
        }
    }
}

/// Finds an anchor for `instance`: the smallest conjunction of bin
/// predicates whose precision lower bound exceeds the threshold, or the
/// best candidate of the largest size tried when none does.
#[allow(clippy::too_many_arguments)]
pub fn explain_instance(
    instance: &FeatureVector,
    target: Target,
    surrogate: &dyn Classifier,
    sampler: &Sampler,
    discretizer: &Discretizer,
    coverage_rows: &[FeatureVector],
    cfg: &AnchorConfig,
    seed: u64,
) -> Result<Anchor, AnchorError> {
    if surrogate.classify(instance) != target {
        return Err(AnchorError::SurrogateDisagrees);
    }
    let preds = discretizer.predicates(instance);
    let schema = sampler.schema();
    let matches = preds
        .iter()
        .map(|(_, p)| {
            let c = compile_predicates(schema, std::slice::from_ref(p)).expect("schema feature");
            coverage_rows.iter().map(|f| c.matches(f)).collect()
        })
        .collect();
    let mut s = Search {
        sampler,
        surrogate,
        target,
        cfg,
        seed,
        preds,
        matches,
        stats: HashMap::new(),
        samples_used: 0,
    };
    let nf = s.preds.len();
    let beam = cfg.beam_width.max(1);
    let beta = (1.0 / (cfg.delta / (1.0 + (beam as f64 - 1.0) * nf as f64))).ln();
    let finish = |s: &Search, key: &[usize], accepted: bool, beams: Vec<Vec<CandidateTrace>>| {
        let t = s.trace(key, beta);
        let mut preds: Vec<Predicate> = key.iter().map(|&k| s.preds[k].1.clone()).collect();
        preds.sort_by_key(|p| s.sampler.schema().index_of(p.feature()));
        Anchor {
            predicates: preds,
            precision: t.precision,
            lower: t.lower,
            upper: t.upper,
            samples: t.samples,
            coverage: t.coverage,
            accepted,
            trace: AnchorTrace {
                seed_index: instance.seed_index,
                target,
                beams,
                samples_used: s.samples_used,
                result: Some(t),
                accepted,
                error: None,
            },
        }
    };

    s.pull(&[], cfg.batch_size)?;
    if s.confirm(&[], beta)? {
        return Ok(finish(&s, &[], true, Vec::new()));
    }

    let mut beams: Vec<Vec<CandidateTrace>> = Vec::new();
    let mut previous: Vec<Vec<usize>> = vec![Vec::new()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _size in 1..=cfg.max_anchor_size.min(nf) {
        let mut candidates: Vec<Vec<usize>> = Vec::new();
        for base in &previous {
            for k in 0..nf {
                if base.contains(&k) {
                    continue;
                }
                let mut c = base.clone();
                c.push(k);
                c.sort_unstable();
                if !candidates.contains(&c) {
                    candidates.push(c);
                }
            }
        }
        candidates.sort();
        if candidates.is_empty() {
            break;
        }
        // First batches for new candidates are independent of each other.
        let fresh: Vec<_> = candidates
            .par_iter()
            .filter(|c| !s.stats.contains_key(*c))
            .map(|c| (c.clone(), s.draw(c, 0, cfg.batch_size)))
            .collect();
        for (c, r) in fresh {
            let (n, p) = r?;
            s.stats.insert(c, ArmStats { n, positives: p });
            s.samples_used += n;
        }
        let mut arm_stats: Vec<ArmStats> = candidates.iter().map(|c| s.stats[c]).collect();
        let chosen = {
            let cands = &candidates;
            let s_ref = &s;
            let mut pulled: Vec<(usize, u64, u64)> = Vec::new();
            let chosen = kl_lucb(
                &mut arm_stats,
                beam.min(candidates.len()),
                cfg.epsilon,
                cfg.delta,
                cfg.batch_size,
                cfg.max_lucb_rounds,
                |arm, b| {
                    let prior = s_ref.stats[&cands[arm]].n
                        + pulled.iter().filter(|p| p.0 == arm).map(|p| p.1).sum::<u64>();
                    let (n, h) = s_ref.draw(&cands[arm], prior, b)?;
                    pulled.push((arm, n, h));
                    Ok::<_, SampleError>((n, h))
                },
            )?;
            for (arm, n, h) in pulled {
                let e = s.stats.get_mut(&candidates[arm]).expect("known candidate");
                e.n += n;
                e.positives += h;
                s.samples_used += n;
            }
            chosen
        };
        let kept: Vec<Vec<usize>> = chosen.iter().map(|&i| candidates[i].clone()).collect();
        for key in &kept {
            if s.confirm(key, beta)? {
                let cov = s.coverage(key);
                if best.as_ref().is_none_or(|(c, _)| cov > *c) {
                    best = Some((cov, key.clone()));
                }
            }
        }
        beams.push(kept.iter().map(|k| s.trace(k, beta)).collect());
        if let Some((_, key)) = &best {
            return Ok(finish(&s, &key.clone(), true, beams));
        }
        previous = kept;
    }
    let fallback = previous
        .iter()
        .max_by(|a, b| {
            s.bounds(a, beta)
                .1
                .total_cmp(&s.bounds(b, beta).1)
                .then_with(|| b.cmp(a))
        })
        .cloned()
        .unwrap_or_default();
    Ok(finish(&s, &fallback, false, beams))
}

/// Anchors explaining the training instances of `target`, plus the search
/// trace of every instance that was explained or skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorExtraction {
    pub rules: Vec<Rule>,
    pub traces: Vec<AnchorTrace>,
    pub covered: usize,
}

/// Explains target instances in seed-index order, skipping those already
/// covered by an extracted anchor, until the anchors cover
/// `max_covered_instances` target instances or the instances run out.
#[allow(clippy::too_many_arguments)]
pub fn extract_anchor_rules(
    train: &[LabeledExample],
    target: Target,
    surrogate: &dyn Classifier,
    sampler: &Sampler,
    discretizer: &Discretizer,
    cfg: &AnchorConfig,
    provenance: Provenance,
    seed: u64,
) -> AnchorExtraction {
    let mut order: Vec<&LabeledExample> = train.iter().filter(|e| e.has_target(target)).collect();
    order.sort_by_key(|e| e.features.seed_index);
    let coverage_rows: Vec<FeatureVector> = train.iter().map(|e| e.features.clone()).collect();
    let schema = sampler.schema();
    let base_seed = derive_seed(seed, &format!("anchor/{}", target.as_str()));
    let mut covered = vec![false; order.len()];
    let mut n_covered = 0;
    let mut rules: Vec<Rule> = Vec::new();
    let mut traces = Vec::new();
    for i in 0..order.len() {
        if n_covered >= cfg.max_covered_instances {
            break;
        }
        if covered[i] {
            continue;
        }
        let ex = order[i];
        let instance_seed = derive_seed_index(base_seed, ex.features.seed_index);
        match explain_instance(
            &ex.features,
            target,
            surrogate,
            sampler,
            discretizer,
            &coverage_rows,
            cfg,
            instance_seed,
        ) {
            Ok(anchor) => {
                let rule = anchor.to_rule(target, provenance);
                let compiled = rule.compile(schema).expect("anchor over schema features");
                for (j, e) in order.iter().enumerate() {
                    if !covered[j] && compiled.matches(&e.features) {
                        covered[j] = true;
                        n_covered += 1;
                    }
                }
                if !rules.iter().any(|r| r.canonical_text() == rule.canonical_text()) {
                    rules.push(rule);
                }
                traces.push(anchor.trace);
            }
            Err(e) => traces.push(AnchorTrace {
                seed_index: ex.features.seed_index,
                target,
                beams: Vec::new(),
                samples_used: 0,
                result: None,
                accepted: false,
                error: Some(e.to_string()),
            }),
        }
    }
    AnchorExtraction {
        rules,
        traces,
        covered: n_covered,
    }
}
