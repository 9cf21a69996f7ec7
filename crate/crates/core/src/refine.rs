//! Specializing a scenario program with a rule, and checking the result.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorError};
use crate::dsl::{emit, feature_schema, CmpOp, DslError, Expr, FeatureSource, ScenarioProgram, Schema};
use crate::evaluator::{label_vectors, EvaluationConfig, Label};
use crate::rng::derive_seed;
use crate::rules::{Predicate, Rule, RuleError};
use crate::sampler::{FeatureVector, SampleError, Sampler, SamplerConfig};
use crate::world::ViewCone;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RefineError {
    #[error("feature `{0}` cannot be expressed in the scenario language")]
    UnspliceableFeature(String),
    #[error("refined program is invalid: {0}")]
    Invalid(#[from] DslError),
    #[error("program looks unsatisfiable: {0}")]
    Unsatisfiable(SampleError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Rule(#[from] RuleError),
}

impl From<SampleError> for RefineError {
    fn from(e: SampleError) -> Self {
        RefineError::Unsatisfiable(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedProgram {
    pub base: ScenarioProgram,
    pub rule: Rule,
    pub spliced: ScenarioProgram,
}

impl RefinedProgram {
    pub fn text(&self) -> String {
        self.spliced.source_text.clone()
    }
}

/// The expression computing schema feature `name`.
fn feature_expr(p: &ScenarioProgram, schema: &Schema, name: &str) -> Option<Expr> {
    let d = schema.get(name)?;
    Some(match d.source {
        FeatureSource::Param { index } => Expr::Param(p.params[index].name.clone()),
        FeatureSource::Object { index, field } => Expr::field(&p.objects[index].name, field),
        FeatureSource::Derived { builtin, object } => Expr::Call {
            builtin,
            a: p.ego().name.clone(),
            b: p.objects[object].name.clone(),
        },
    })
}

fn predicate_expr(f: Expr, pred: &Predicate) -> Expr {
    let num = |v: f64| Expr::Num(v);
    match pred {
        Predicate::Ge { value, .. } => Expr::compare(CmpOp::Ge, f, num(*value)),
        Predicate::Gt { value, .. } => Expr::compare(CmpOp::Gt, f, num(*value)),
        Predicate::Le { value, .. } => Expr::compare(CmpOp::Le, f, num(*value)),
        Predicate::Lt { value, .. } => Expr::compare(CmpOp::Lt, f, num(*value)),
        Predicate::Interval {
            lo,
            hi,
            lo_inclusive,
            hi_inclusive,
            ..
        } => Expr::and(
            Expr::compare(
                if *lo_inclusive { CmpOp::Ge } else { CmpOp::Gt },
                f.clone(),
                num(*lo),
            ),
            Expr::compare(if *hi_inclusive { CmpOp::Le } else { CmpOp::Lt }, f, num(*hi)),
        ),
        Predicate::In { values, .. } => Expr::In {
            expr: Box::new(f),
            values: values.iter().map(|v| v.as_str().into()).collect(),
        },
    }
}

/// Appends one `require` per rule predicate.
pub fn splice(p: &ScenarioProgram, rule: &Rule) -> Result<RefinedProgram, RefineError> {
    let schema = feature_schema(p);
    let mut spliced = p.clone();
    for pred in &rule.predicates {
        let f = feature_expr(p, &schema, pred.feature())
            .ok_or_else(|| RefineError::UnspliceableFeature(pred.feature().to_string()))?;
        spliced.requires.push(predicate_expr(f, pred));
    }
    spliced.validate()?;
    spliced.source_text = emit(&spliced);
    Ok(RefinedProgram {
        base: p.clone(),
        rule: rule.clone(),
        spliced,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub evaluation: EvaluationConfig,
    pub max_rejections: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            n_samples: 500,
            seed: 0,
            evaluation: EvaluationConfig::default(),
            max_rejections: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ValidationReport {
    pub rule: String,
    pub n_samples: usize,
    pub incorrect_ratio: f64,
    pub correct_ratio: f64,
    pub baseline_incorrect_ratio: f64,
    pub baseline_correct_ratio: f64,
    /// Incorrect ratio over the first `i + 1` samples.
    pub cumulative_series: Vec<f64>,
    /// Largest distance of the last 100 series entries from the final ratio.
    pub stabilization: f64,
    /// Fraction of refined samples the rule matches; 1 for a sound splice.
    pub rule_match_ratio: f64,
}

impl ValidationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sampleIndex,cumulativeIncorrectRatio\n");
        for (i, v) in self.cumulative_series.iter().enumerate() {
            let _ = writeln!(s, "{i},{v}");
        }
        s
    }
}

pub fn cumulative_series(labels: &[Label]) -> Vec<f64> {
    let mut bad = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if *l == Label::Incorrect {
                bad += 1;
            }
            bad as f64 / (i + 1) as f64
        })
        .collect()
}

pub fn stabilization(series: &[f64], window: usize) -> f64 {
    let Some(last) = series.last() else {
        return 0.0;
    };
    series[series.len().saturating_sub(window)..]
        .iter()
        .map(|v| (v - last).abs())
        .fold(0.0, f64::max)
}

fn labels_of(
    program: &ScenarioProgram,
    schema: &Schema,
    cone: &ViewCone,
    detector: &dyn Detector,
    n: usize,
    seed: u64,
    cfg: &ValidationConfig,
) -> Result<(Vec<Label>, Vec<FeatureVector>), RefineError> {
    let sampler = Sampler::with_cone(program, *cone);
    let sc = SamplerConfig {
        seed,
        max_rejections_per_sample: cfg.max_rejections,
        first_index: 0,
    };
    let vectors = sampler.sample(n, &sc)?;
    let labelled = label_vectors(schema, cone, detector, vectors.clone(), &cfg.evaluation)?;
    Ok((labelled.iter().map(|e| e.label).collect(), vectors))
}

/// Samples the refined program and its base with fresh seeds, labels both
/// and reports the ratios and the running incorrect ratio.
pub fn validate(
    rp: &RefinedProgram,
    detector: &dyn Detector,
    cone: &ViewCone,
    cfg: &ValidationConfig,
) -> Result<ValidationReport, RefineError> {
    let schema = feature_schema(&rp.base);
    let n = cfg.n_samples.max(1);
    let (labels, vectors) = labels_of(
        &rp.spliced,
        &schema,
        cone,
        detector,
        n,
        derive_seed(cfg.seed, "validate"),
        cfg,
    )?;
    let (base_labels, _) = labels_of(
        &rp.base,
        &schema,
        cone,
        detector,
        n,
        derive_seed(cfg.seed, "validate/baseline"),
        cfg,
    )?;
    let compiled = rp.rule.compile(&schema)?;
    let matched = vectors.iter().filter(|f| compiled.matches(f)).count();
    let ratio = |ls: &[Label]| ls.iter().filter(|l| **l == Label::Incorrect).count() as f64 / ls.len() as f64;
    let series = cumulative_series(&labels);
    let incorrect = ratio(&labels);
    let baseline = ratio(&base_labels);
    Ok(ValidationReport {
        rule: rp.rule.to_string(),
        n_samples: n,
        incorrect_ratio: incorrect,
        correct_ratio: 1.0 - incorrect,
        baseline_incorrect_ratio: baseline,
        baseline_correct_ratio: 1.0 - baseline,
        stabilization: stabilization(&series, 100),
        cumulative_series: series,
        rule_match_ratio: matched as f64 / n as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CoverageEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

/// Monte Carlo estimate of the share of the base program's distribution
/// matched by `rule`.
pub fn feature_space_coverage(
    base: &ScenarioProgram,
    rule: &Rule,
    n_mc: usize,
    seed: u64,
) -> Result<CoverageEstimate, RefineError> {
    let sampler = Sampler::new(base);
    let compiled = rule.compile(sampler.schema())?;
    let n = n_mc.max(1);
    let vectors = sampler.sample(n, &SamplerConfig::with_seed(derive_seed(seed, "coverage")))?;
    let hits = vectors.iter().filter(|f| compiled.matches(f)).count();
    let p = hits as f64 / n as f64;
    Ok(CoverageEstimate {
        estimate: p,
        std_error: (p * (1.0 - p) / n as f64).sqrt(),
        n_samples: n,
    })
}
