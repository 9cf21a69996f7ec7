//! The end-to-end debugging workflow: sample, label, extract rules, refine
//! the program with the best rules and validate the refined programs.

mod config;
mod report;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};

pub use config::PipelineConfig;
pub use report::summary_markdown;

use crate::anchors::{extract_anchor_rules, AnchorTrace, Discretizer};
use crate::detector::{Detector, DetectorError, ExternalDetections, FaultModelConfig, SyntheticDetector};
use crate::dsl::{parse, Domain, ScenarioProgram, Schema};
use crate::evaluator::{incorrect_ratio, label_vectors, EvaluationConfig, Label, LabeledExample};
use crate::refine::{
    feature_space_coverage, splice, validate, CoverageEstimate, RefineError, ValidationConfig,
    ValidationReport,
};
use crate::rng::derive_seed;
use crate::rules::{rule_order, select_best, Method, Provenance, Rule, Target, View};
use crate::sampler::{to_json, SampleError, Sampler, SamplerConfig};
use crate::trees::{fit_forest, fit_tree, FeatureSpace, TrainingSet, AUGMENTED_CLASSES, BINARY_CLASSES};
use crate::whitebox::{augment_labels, mine_pattern, ActivationPattern, WhiteboxError};
use crate::world::ViewCone;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsatisfiable program: {0}")]
    Unsatisfiable(String),
    #[error("method failure: {0}")]
    Method(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Io(_) => 2,
            PipelineError::Unsatisfiable(_) => 3,
            PipelineError::Method(_) => 4,
        }
    }
}

impl From<SampleError> for PipelineError {
    fn from(e: SampleError) -> Self {
        PipelineError::Unsatisfiable(e.to_string())
    }
}

impl From<DetectorError> for PipelineError {
    fn from(e: DetectorError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

pub fn read_program(path: &Path) -> Result<ScenarioProgram, PipelineError> {
    let text =
        fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    parse(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn to_pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Features a learner may split on: every schema feature whose domain holds
/// more than one value.
pub fn learnable_space(schema: &Schema) -> FeatureSpace {
    FeatureSpace::from_schema(schema, |d| match &d.domain {
        Domain::Interval { lo, hi } => lo < hi,
        Domain::Values(v) => v.len() > 1,
    })
    .expect("category counts are bounded by the language")
}

/// A loaded program together with its detector.
pub struct Context {
    pub program: ScenarioProgram,
    pub sampler: Sampler,
    pub detector: Box<dyn Detector>,
    pub cone: ViewCone,
    pub evaluation: EvaluationConfig,
    pub max_rejections: u64,
}

impl Context {
    pub fn new(program: ScenarioProgram, detector: Box<dyn Detector>, evaluation: EvaluationConfig) -> Self {
        let cone = ViewCone::default();
        Context {
            sampler: Sampler::with_cone(&program, cone),
            program,
            detector,
            cone,
            evaluation,
            max_rejections: 10_000,
        }
    }

    pub fn load(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let program = read_program(&cfg.scenario_path)?;
        let schema = crate::dsl::feature_schema(&program);
        let detector: Box<dyn Detector> = match (&cfg.detector_config_path, &cfg.external_detections_path) {
            (Some(p), _) => Box::new(SyntheticDetector::new(FaultModelConfig::load(p)?, &schema)?),
            (None, Some(p)) => Box::new(ExternalDetections::load(p)?),
            (None, None) => return Err(PipelineError::Config("no detector configured".into())),
        };
        let mut ctx = Context::new(
            program,
            detector,
            EvaluationConfig {
                iou_threshold: cfg.iou_threshold,
                f1_threshold: cfg.f1_threshold,
            },
        );
        ctx.max_rejections = cfg.max_rejections;
        Ok(ctx)
    }

    pub fn schema(&self) -> &Arc<Schema> {
        self.sampler.schema()
    }

    /// Samples `n` vectors starting at seed index `first` and labels them.
    pub fn labelled(&self, n: usize, seed: u64, first: u64) -> Result<Vec<LabeledExample>, PipelineError> {
        let sc = SamplerConfig {
            seed,
            max_rejections_per_sample: self.max_rejections,
            first_index: first,
        };
        let vectors = self.sampler.sample(n, &sc)?;
        Ok(label_vectors(
            self.schema(),
            &self.cone,
            self.detector.as_ref(),
            vectors,
            &self.evaluation,
        )?)
    }
}

/// One JSON Lines record per example.
pub fn labels_jsonl(schema: &Schema, data: &[LabeledExample]) -> String {
    let mut out = String::new();
    for e in data {
        let mut m = Map::new();
        m.insert("features".into(), Json::Object(to_json(schema, &e.features)));
        m.insert("label".into(), json!(e.label));
        m.insert("tp".into(), json!(e.evaluation.tp));
        m.insert("fp".into(), json!(e.evaluation.fp));
        m.insert("fn".into(), json!(e.evaluation.fn_));
        m.insert("f1".into(), json!(e.evaluation.f1));
        if let Some(a) = e.augmented {
            m.insert("augmented".into(), json!(a));
        }
        if let Some(a) = &e.activations {
            m.insert("activations".into(), json!(a));
        }
        out.push_str(&Json::Object(m).to_string());
        out.push('\n');
    }
    out
}

/// Reads records written by [`labels_jsonl`].
pub fn read_labels_jsonl(schema: &Schema, text: &str) -> Result<Vec<LabeledExample>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: String| PipelineError::Config(format!("labels line {}: {m}", i + 1));
        let v: Json = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let features = v["features"]
            .as_object()
            .ok_or_else(|| bad("missing `features`".into()))
            .and_then(|m| crate::sampler::from_json(schema, m).map_err(bad))?;
        let label: Label = serde_json::from_value(v["label"].clone()).map_err(|e| bad(e.to_string()))?;
        let count = |k: &str| v[k].as_u64().unwrap_or(0) as usize;
        let evaluation =
            crate::evaluator::ImageEvaluation::from_counts(count("tp"), count("fp"), count("fn"));
        let activations = match &v["activations"] {
            Json::Null => None,
            a => Some(serde_json::from_value(a.clone()).map_err(|e| bad(e.to_string()))?),
        };
        let augmented = match &v["augmented"] {
            Json::Null => None,
            a => Some(serde_json::from_value(a.clone()).map_err(|e| bad(e.to_string()))?),
        };
        out.push(LabeledExample {
            features,
            evaluation,
            label,
            activations,
            augmented,
        });
    }
    Ok(out)
}

/// Reads a rule from either a bare rule object or a rules file, whose
/// `best` entry is used.
pub fn read_rule(text: &str) -> Result<Rule, PipelineError> {
    let v: Json = serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("rule file: {e}")))?;
    let r = if v.get("predicates").is_some() {
        v
    } else {
        v["best"].clone()
    };
    if r.is_null() {
        return Err(PipelineError::Config("rule file holds no rule".into()));
    }
    serde_json::from_value(r).map_err(|e| PipelineError::Config(format!("rule file: {e}")))
}

/// Mined patterns for both labels and the support of each.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Patterns {
    pub correct: Option<ActivationPattern>,
    pub incorrect: Option<ActivationPattern>,
}

impl Patterns {
    pub fn support(&self, label: Label) -> f64 {
        let p = match label {
            Label::Correct => &self.correct,
            Label::Incorrect => &self.incorrect,
        };
        p.as_ref().map_or(0.0, |p| p.support)
    }

    pub fn to_json(&self) -> Json {
        let one = |p: &Option<ActivationPattern>| match p {
            Some(p) => {
                let mut v = serde_json::to_value(p).expect("serializable");
                v["kind"] = json!("activation-pattern");
                v["pattern"] = json!(p.describe());
                v
            }
            None => Json::Null,
        };
        json!({ "correct": one(&self.correct), "incorrect": one(&self.incorrect) })
    }
}

/// Mines decision patterns on `train` and augments both datasets.
pub fn augment(
    train: &mut [LabeledExample],
    test: &mut [LabeledExample],
    cfg: &PipelineConfig,
) -> Result<Patterns, PipelineError> {
    if train.iter().chain(test.iter()).any(|e| e.activations.is_none()) {
        return Err(PipelineError::Method(
            "white-box methods need activations, but the detector provides none".into(),
        ));
    }
    let seed = derive_seed(cfg.seed, "pattern");
    let mine = |label: Label| match mine_pattern(train, label, &cfg.pattern_tree, seed) {
        Ok(p) => Ok(Some(p)),
        Err(WhiteboxError::NoTargetLeaf(_)) => Ok(None),
        Err(e) => Err(PipelineError::Method(e.to_string())),
    };
    let patterns = Patterns {
        correct: mine(Label::Correct)?,
        incorrect: mine(Label::Incorrect)?,
    };
    augment_labels(train, patterns.correct.as_ref(), patterns.incorrect.as_ref());
    augment_labels(test, patterns.correct.as_ref(), patterns.incorrect.as_ref());
    Ok(patterns)
}

/// Rules of one method for one binary target, before measurement.
#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub rules: Vec<Rule>,
    pub traces: Vec<AnchorTrace>,
    pub tree_dot: Option<String>,
}

fn training_set(
    space: &Arc<FeatureSpace>,
    data: &[LabeledExample],
    view: View,
    balance: bool,
) -> TrainingSet {
    let classes: Vec<Target> = match view {
        View::BlackBox => BINARY_CLASSES.to_vec(),
        View::WhiteBox => AUGMENTED_CLASSES.to_vec(),
    };
    let rows = data.iter().map(|e| space.encode(&e.features)).collect();
    let y = data
        .iter()
        .map(|e| {
            let t = match view {
                View::BlackBox => Target::from(e.label),
                View::WhiteBox => e.augmented.expect("augmented labels"),
            };
            classes.iter().position(|c| *c == t).expect("known class")
        })
        .collect();
    let mut ts = TrainingSet::new(space.clone(), rows, y, classes).expect("aligned rows");
    if balance {
        ts.balance();
    }
    ts
}

/// The targets a method extracts for a binary label.
fn sub_targets(view: View, label: Label) -> Vec<Target> {
    match (view, label) {
        (View::BlackBox, l) => vec![Target::from(l)],
        (View::WhiteBox, Label::Correct) => vec![Target::CorrectDp, Target::CorrectUnlabelled],
        (View::WhiteBox, Label::Incorrect) => vec![Target::IncorrectDp, Target::IncorrectUnlabelled],
    }
}

/// Runs one extraction method for one binary label. White-box rules are
/// extracted for the augmented sub-classes and retargeted to the label.
pub fn extract(
    ctx: &Context,
    train: &[LabeledExample],
    provenance: Provenance,
    label: Label,
    cfg: &PipelineConfig,
) -> Result<Extraction, PipelineError> {
    let space = Arc::new(learnable_space(ctx.schema()));
    let ts = training_set(&space, train, provenance.view, cfg.balance_labels);
    let tag = provenance.as_str();
    let mut out = Extraction::default();
    let mut pooled: Vec<Rule> = Vec::new();
    match provenance.method {
        Method::Dt => {
            let tree = fit_tree(&ts, &cfg.tree, derive_seed(cfg.seed, &format!("tree/{tag}")))
                .map_err(|e| PipelineError::Method(e.to_string()))?;
            for t in sub_targets(provenance.view, label) {
                pooled.extend(tree.extract_rules(t, provenance));
            }
            out.tree_dot = Some(tree.to_dot());
        }
        Method::Anchor => {
            let forest = fit_forest(&ts, &cfg.forest, derive_seed(cfg.seed, &format!("forest/{tag}")))
                .map_err(|e| PipelineError::Method(e.to_string()))?;
            let rows: Vec<_> = train.iter().map(|e| e.features.clone()).collect();
            let disc = Discretizer::fit(&space, &rows, cfg.anchors.bins);
            for t in sub_targets(provenance.view, label) {
                let ex = extract_anchor_rules(
                    train,
                    t,
                    &forest,
                    &ctx.sampler,
                    &disc,
                    &cfg.anchors,
                    provenance,
                    derive_seed(cfg.seed, tag),
                );
                pooled.extend(ex.rules);
                out.traces.extend(ex.traces);
            }
        }
    }
    for mut r in pooled {
        r.target = Target::from(label);
        if !out.rules.iter().any(|x| x.canonical_text() == r.canonical_text()) {
            out.rules.push(r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ValidationSummary {
    pub incorrect_ratio: f64,
    pub correct_ratio: f64,
    pub baseline_incorrect_ratio: f64,
    pub baseline_correct_ratio: f64,
    pub stabilization: f64,
    pub rule_match_ratio: f64,
}

impl From<&ValidationReport> for ValidationSummary {
    fn from(r: &ValidationReport) -> Self {
        ValidationSummary {
            incorrect_ratio: r.incorrect_ratio,
            correct_ratio: r.correct_ratio,
            baseline_incorrect_ratio: r.baseline_incorrect_ratio,
            baseline_correct_ratio: r.baseline_correct_ratio,
            stabilization: r.stabilization,
            rule_match_ratio: r.rule_match_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MethodResult {
    pub method: String,
    pub target: Target,
    /// `ok`, `no-examples`, `no-rules` or `unsatisfiable`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub rules_considered: usize,
    pub best: Option<Rule>,
    pub best_text: Option<String>,
    pub validation: Option<ValidationSummary>,
    pub coverage: Option<CoverageEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_support: Option<f64>,
}

impl MethodResult {
    fn empty(p: Provenance, label: Label, status: &str, note: String) -> Self {
        MethodResult {
            method: p.method_name(),
            target: Target::from(label),
            status: status.into(),
            note: Some(note),
            rules_considered: 0,
            best: None,
            best_text: None,
            validation: None,
            coverage: None,
            pattern_support: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Baseline {
    pub train_incorrect_ratio: f64,
    pub test_incorrect_ratio: f64,
    pub test_correct_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PipelineReport {
    pub scenario: String,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub validate_size: usize,
    pub features: Vec<String>,
    pub baseline: Baseline,
    pub patterns: Option<Json>,
    pub results: Vec<MethodResult>,
}

impl PipelineReport {
    pub fn result(&self, method: &str, target: Target) -> Option<&MethodResult> {
        self.results
            .iter()
            .find(|r| r.method == method && r.target == target)
    }
}

/// Measures, selects, splices, validates and writes the artifacts of one
/// method and label.
fn finish_method(
    ctx: &Context,
    cfg: &PipelineConfig,
    test: &[LabeledExample],
    provenance: Provenance,
    label: Label,
    ex: Extraction,
    patterns: Option<&Patterns>,
) -> Result<MethodResult, PipelineError> {
    let out = &cfg.output_dir;
    let name = format!("{}_{}", provenance.method_name(), label.as_str());
    let schema = ctx.schema();
    let mut measured: Vec<Rule> = ex
        .rules
        .iter()
        .map(|r| r.measure(schema, test))
        .collect::<Result<_, _>>()
        .map_err(|e| PipelineError::Method(e.to_string()))?;
    measured.sort_by(rule_order);
    let mut envelope = json!({
        "kind": "rules",
        "method": provenance.method_name(),
        "target": label.as_str(),
        "rules": measured,
    });
    if let Some(p) = patterns {
        envelope["patterns"] = p.to_json();
    }
    if !ex.traces.is_empty() {
        write_file(
            &out.join(format!("anchors_{name}_trace.json")),
            &to_pretty_json(&ex.traces),
        )?;
    }
    let pattern_support = patterns.map(|p| p.support(label));
    let Ok(best) = select_best(&measured) else {
        envelope["best"] = Json::Null;
        write_file(
            &out.join(format!("rules_{name}.json")),
            &to_pretty_json(&envelope),
        )?;
        let mut r = MethodResult::empty(
            provenance,
            label,
            "no-rules",
            format!("no {} rules extracted", label.as_str()),
        );
        r.pattern_support = pattern_support;
        return Ok(r);
    };
    let best = best.clone();
    envelope["best"] = serde_json::to_value(&best).expect("serializable");
    write_file(
        &out.join(format!("rules_{name}.json")),
        &to_pretty_json(&envelope),
    )?;

    let mut result = MethodResult {
        method: provenance.method_name(),
        target: Target::from(label),
        status: "ok".into(),
        note: None,
        rules_considered: measured.len(),
        best_text: Some(best.to_string()),
        best: Some(best.clone()),
        validation: None,
        coverage: None,
        pattern_support,
    };
    let rp = match splice(&ctx.program, &best) {
        Ok(rp) => rp,
        Err(e) => {
            result.status = "unspliceable".into();
            result.note = Some(e.to_string());
            return Ok(result);
        }
    };
    write_file(&out.join(format!("refined_{name}.scn")), &rp.text())?;
    let vcfg = ValidationConfig {
        n_samples: cfg.validate_size,
        seed: cfg.seed,
        evaluation: ctx.evaluation,
        max_rejections: cfg.max_rejections,
    };
    match validate(&rp, ctx.detector.as_ref(), &ctx.cone, &vcfg) {
        Ok(report) => {
            write_file(&out.join(format!("validation_{name}.csv")), &report.to_csv())?;
            write_file(
                &out.join(format!("validation_{name}.json")),
                &to_pretty_json(&report),
            )?;
            result.validation = Some(ValidationSummary::from(&report));
        }
        Err(RefineError::Unsatisfiable(e)) => {
            result.status = "unsatisfiable".into();
            result.note = Some(e.to_string());
            return Ok(result);
        }
        Err(e) => return Err(PipelineError::Method(e.to_string())),
    }
    result.coverage = Some(
        feature_space_coverage(&ctx.program, &best, cfg.coverage_samples, cfg.seed)
            .map_err(|e| PipelineError::Method(e.to_string()))?,
    );
    Ok(result)
}

/// Runs the whole workflow and writes every artifact to `cfg.output_dir`.
pub fn run(cfg: &PipelineConfig) -> Result<PipelineReport, PipelineError> {
    cfg.check()?;
    let provenances = cfg.provenances()?;
    let ctx = Context::load(cfg)?;
    let wants_wb = provenances.iter().any(|p| p.view == View::WhiteBox);
    if wants_wb && ctx.detector.activation_dim().is_none_or(|d| d == 0) {
        return Err(PipelineError::Method(
            "white-box methods need activations, but the detector provides none".into(),
        ));
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;

    let mut train = ctx.labelled(cfg.train_size, cfg.seed, 0)?;
    let mut test = ctx.labelled(cfg.test_size, cfg.seed, cfg.train_size as u64)?;
    let patterns = if wants_wb {
        Some(augment(&mut train, &mut test, cfg)?)
    } else {
        None
    };
    let schema = ctx.schema().clone();
    write_file(
        &cfg.output_dir.join("labels_train.jsonl"),
        &labels_jsonl(&schema, &train),
    )?;
    write_file(
        &cfg.output_dir.join("labels_test.jsonl"),
        &labels_jsonl(&schema, &test),
    )?;

    let mut results = Vec::new();
    for p in &provenances {
        for label in [Label::Correct, Label::Incorrect] {
            if !train.iter().any(|e| e.label == label) {
                results.push(MethodResult::empty(
                    *p,
                    label,
                    "no-examples",
                    format!("no {} examples", label.as_str()),
                ));
                continue;
            }
            let ex = extract(&ctx, &train, *p, label, cfg)?;
            if let Some(dot) = &ex.tree_dot {
                write_file(&cfg.output_dir.join(format!("tree_{}.dot", p.method_name())), dot)?;
            }
            let pats = if p.view == View::WhiteBox {
                patterns.as_ref()
            } else {
                None
            };
            results.push(finish_method(&ctx, cfg, &test, *p, label, ex, pats)?);
        }
    }

    let test_incorrect = incorrect_ratio(&test);
    let report = PipelineReport {
        scenario: cfg
            .scenario_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: cfg.seed,
        train_size: cfg.train_size,
        test_size: cfg.test_size,
        validate_size: cfg.validate_size,
        features: learnable_space(&schema)
            .features
            .iter()
            .map(|f| f.name.clone())
            .collect(),
        baseline: Baseline {
            train_incorrect_ratio: incorrect_ratio(&train),
            test_incorrect_ratio: test_incorrect,
            test_correct_ratio: 1.0 - test_incorrect,
        },
        patterns: patterns.as_ref().map(Patterns::to_json),
        results,
    };
    write_file(&cfg.output_dir.join("summary.json"), &to_pretty_json(&report))?;
    write_file(&cfg.output_dir.join("summary.md"), &summary_markdown(&report))?;
    Ok(report)
}
