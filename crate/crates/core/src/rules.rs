//! Conjunctive rules over features: matching, measurement and selection.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dsl::Schema;
use crate::evaluator::{Label, LabeledExample};
use crate::sampler::{FeatureVector, SlotTest, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "camelCase")]
pub enum Predicate {
    Ge {
        feature: String,
        value: f64,
    },
    Gt {
        feature: String,
        value: f64,
    },
    Le {
        feature: String,
        value: f64,
    },
    Lt {
        feature: String,
        value: f64,
    },
    #[serde(rename_all = "camelCase")]
    Interval {
        feature: String,
        lo: f64,
        hi: f64,
        lo_inclusive: bool,
        hi_inclusive: bool,
    },
    In {
        feature: String,
        values: Vec<String>,
    },
}

/// A numeric bound: `(value, inclusive)`.
type Bound = Option<(f64, bool)>;

fn tighter_lo(a: Bound, b: Bound) -> Bound {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some((av, ai)), Some((bv, bi))) => match av.total_cmp(&bv) {
            Ordering::Greater => Some((av, ai)),
            Ordering::Less => Some((bv, bi)),
            Ordering::Equal => Some((av, ai && bi)),
        },
    }
}

fn tighter_hi(a: Bound, b: Bound) -> Bound {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some((av, ai)), Some((bv, bi))) => match av.total_cmp(&bv) {
            Ordering::Less => Some((av, ai)),
            Ordering::Greater => Some((bv, bi)),
            Ordering::Equal => Some((av, ai && bi)),
        },
    }
}

impl Predicate {
    pub fn feature(&self) -> &str {
        match self {
            Predicate::Ge { feature, .. }
            | Predicate::Gt { feature, .. }
            | Predicate::Le { feature, .. }
            | Predicate::Lt { feature, .. }
            | Predicate::Interval { feature, .. }
            | Predicate::In { feature, .. } => feature,
        }
    }

    /// Lower and upper bounds of a numeric predicate.
    pub fn bounds(&self) -> Option<(Bound, Bound)> {
        Some(match self {
            Predicate::Ge { value, .. } => (Some((*value, true)), None),
            Predicate::Gt { value, .. } => (Some((*value, false)), None),
            Predicate::Le { value, .. } => (None, Some((*value, true))),
            Predicate::Lt { value, .. } => (None, Some((*value, false))),
            Predicate::Interval {
                lo,
                hi,
                lo_inclusive,
                hi_inclusive,
                ..
            } => (Some((*lo, *lo_inclusive)), Some((*hi, *hi_inclusive))),
            Predicate::In { .. } => return None,
        })
    }

    pub fn from_bounds(feature: String, lo: Bound, hi: Bound) -> Option<Predicate> {
        Some(match (lo, hi) {
            (None, None) => return None,
            (Some((value, true)), None) => Predicate::Ge { feature, value },
            (Some((value, false)), None) => Predicate::Gt { feature, value },
            (None, Some((value, true))) => Predicate::Le { feature, value },
            (None, Some((value, false))) => Predicate::Lt { feature, value },
            (Some((lo, lo_inclusive)), Some((hi, hi_inclusive))) => Predicate::Interval {
                feature,
                lo,
                hi,
                lo_inclusive,
                hi_inclusive,
            },
        })
    }

    pub fn to_test(&self) -> SlotTest {
        match self {
            Predicate::In { values, .. } => {
                SlotTest::OneOf(values.iter().map(|v| Arc::from(v.as_str())).collect())
            }
            numeric => {
                let (lo, hi) = numeric.bounds().expect("numeric predicate");
                SlotTest::Range { lo, hi }
            }
        }
    }

    pub fn holds(&self, v: &Value) -> bool {
        self.to_test().holds(v)
    }

    fn render(&self, num: &dyn Fn(f64) -> String) -> String {
        let f = self.feature();
        match self {
            Predicate::Ge { value, .. } => format!("{f} ≥ {}", num(*value)),
            Predicate::Gt { value, .. } => format!("{f} > {}", num(*value)),
            Predicate::Le { value, .. } => format!("{f} ≤ {}", num(*value)),
            Predicate::Lt { value, .. } => format!("{f} < {}", num(*value)),
            Predicate::Interval {
                lo,
                hi,
                lo_inclusive,
                hi_inclusive,
                ..
            } => format!(
                "{} {} {f} {} {}",
                num(*lo),
                if *lo_inclusive { "≤" } else { "<" },
                if *hi_inclusive { "≤" } else { "<" },
                num(*hi)
            ),
            Predicate::In { values, .. } if values.len() == 1 => format!("{f} = {}", values[0]),
            Predicate::In { values, .. } => format!("{f} ∈ {{{}}}", values.join(", ")),
        }
    }
}

fn short_number(v: f64) -> String {
    let s = format!("{:.2}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(&short_number))
    }
}

/// Merges predicates on the same feature: numeric bounds are intersected
/// and membership sets are intersected. Features keep the order of their
/// first appearance. An empty intersection is kept as an unsatisfiable
/// predicate rather than dropped.
pub fn normalize(predicates: &[Predicate]) -> Vec<Predicate> {
    let mut order: Vec<&str> = Vec::new();
    for p in predicates {
        if !order.contains(&p.feature()) {
            order.push(p.feature());
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for feature in order {
        let mut lo: Bound = None;
        let mut hi: Bound = None;
        let mut set: Option<Vec<String>> = None;
        for p in predicates.iter().filter(|p| p.feature() == feature) {
            match p {
                Predicate::In { values, .. } => {
                    set = Some(match set {
                        None => {
                            let mut v: Vec<String> = Vec::new();
                            for x in values {
                                if !v.contains(x) {
                                    v.push(x.clone());
                                }
                            }
                            v
                        }
                        Some(prev) => prev.into_iter().filter(|x| values.contains(x)).collect(),
                    })
                }
                numeric => {
                    let (l, h) = numeric.bounds().expect("numeric predicate");
                    lo = tighter_lo(lo, l);
                    hi = tighter_hi(hi, h);
                }
            }
        }
        if let Some(values) = set {
            out.push(Predicate::In {
                feature: feature.to_string(),
                values,
            });
        }
        if let Some(p) = Predicate::from_bounds(feature.to_string(), lo, hi) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Correct,
    Incorrect,
    CorrectDp,
    CorrectUnlabelled,
    IncorrectDp,
    IncorrectUnlabelled,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Correct => "correct",
            Target::Incorrect => "incorrect",
            Target::CorrectDp => "correct-dp",
            Target::CorrectUnlabelled => "correct-unlabelled",
            Target::IncorrectDp => "incorrect-dp",
            Target::IncorrectUnlabelled => "incorrect-unlabelled",
        }
    }

    /// The binary label, for the two binary targets.
    pub fn as_label(self) -> Option<Label> {
        match self {
            Target::Correct => Some(Label::Correct),
            Target::Incorrect => Some(Label::Incorrect),
            _ => None,
        }
    }

    /// Projection onto the binary label.
    pub fn binary(self) -> Label {
        match self {
            Target::Correct | Target::CorrectDp | Target::CorrectUnlabelled => Label::Correct,
            _ => Label::Incorrect,
        }
    }
}

impl From<Label> for Target {
    fn from(l: Label) -> Self {
        match l {
            Label::Correct => Target::Correct,
            Label::Incorrect => Target::Incorrect,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Dt,
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    BlackBox,
    WhiteBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Provenance {
    pub method: Method,
    pub view: View,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::new(Method::Dt, View::BlackBox),
        Provenance::new(Method::Dt, View::WhiteBox),
        Provenance::new(Method::Anchor, View::BlackBox),
        Provenance::new(Method::Anchor, View::WhiteBox),
    ];

    pub const fn new(method: Method, view: View) -> Self {
        Provenance { method, view }
    }

    /// `dt/bb`, `anchor/wb`, ...
    pub fn as_str(self) -> &'static str {
        match (self.method, self.view) {
            (Method::Dt, View::BlackBox) => "dt/bb",
            (Method::Dt, View::WhiteBox) => "dt/wb",
            (Method::Anchor, View::BlackBox) => "anchor/bb",
            (Method::Anchor, View::WhiteBox) => "anchor/wb",
        }
    }

    /// `dt-bb`, `anchor-wb`, ... as used on the command line.
    pub fn method_name(self) -> String {
        self.as_str().replace('/', "-")
    }

    pub fn parse(s: &str) -> Option<Provenance> {
        let s = s.replace('-', "/");
        Provenance::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl Serialize for Provenance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Provenance::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown provenance `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Support {
    pub matching: usize,
    pub matching_target: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub target: Target,
    pub predicates: Vec<Predicate>,
    pub precision: f64,
    pub coverage: f64,
    #[serde(default)]
    pub support: Support,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuleError {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("cannot select from an empty rule set")]
    EmptyRuleSet,
}

/// A rule resolved against a schema, for fast repeated matching.
#[derive(Debug, Clone)]
pub struct CompiledRule {
    tests: Vec<(usize, SlotTest)>,
}

impl CompiledRule {
    pub fn matches(&self, f: &FeatureVector) -> bool {
        self.tests.iter().all(|(i, t)| t.holds(&f.values[*i]))
    }

    /// Per-slot sampling conditions equivalent to this rule.
    pub fn slot_tests(&self, width: usize) -> Vec<Option<SlotTest>> {
        let mut out = vec![None; width];
        for (i, t) in &self.tests {
            out[*i] = Some(t.clone());
        }
        out
    }
}

pub fn compile_predicates(schema: &Schema, predicates: &[Predicate]) -> Result<CompiledRule, RuleError> {
    let tests = normalize(predicates)
        .iter()
        .map(|p| {
            schema
                .index_of(p.feature())
                .map(|i| (i, p.to_test()))
                .ok_or_else(|| RuleError::UnknownFeature(p.feature().to_string()))
        })
        .collect::<Result<_, _>>()?;
    Ok(CompiledRule { tests })
}

impl Rule {
    pub fn new(target: Target, predicates: Vec<Predicate>, provenance: Provenance) -> Self {
        Rule {
            target,
            predicates: normalize(&predicates),
            precision: 0.0,
            coverage: 0.0,
            support: Support::default(),
            provenance,
        }
    }

    pub fn compile(&self, schema: &Schema) -> Result<CompiledRule, RuleError> {
        compile_predicates(schema, &self.predicates)
    }

    pub fn matches(&self, schema: &Schema, f: &FeatureVector) -> Result<bool, RuleError> {
        Ok(self.compile(schema)?.matches(f))
    }

    /// Precision and coverage of the rule on `data`.
    pub fn measure(&self, schema: &Schema, data: &[LabeledExample]) -> Result<Rule, RuleError> {
        let compiled = self.compile(schema)?;
        let mut matching = 0;
        let mut hits = 0;
        for ex in data {
            if compiled.matches(&ex.features) {
                matching += 1;
                if ex.has_target(self.target) {
                    hits += 1;
                }
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Ok(Rule {
            precision: ratio(hits, matching),
            coverage: ratio(matching, data.len()),
            support: Support {
                matching,
                matching_target: hits,
                total: data.len(),
            },
            ..self.clone()
        })
    }

    /// Full-precision text used for deterministic ordering.
    pub fn canonical_text(&self) -> String {
        let parts: Vec<String> = self
            .predicates
            .iter()
            .map(|p| p.render(&|v| format!("{v}")))
            .collect();
        parts.join(" ∧ ")
    }

    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.predicates.iter().map(|p| p.feature())
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.predicates.is_empty() {
            return f.write_str("true");
        }
        let parts: Vec<String> = self.predicates.iter().map(|p| p.to_string()).collect();
        f.write_str(&parts.join(" ∧ "))
    }
}

/// Orders rules best first: higher precision, then higher coverage, then
/// fewer predicates, then canonical text.
pub fn rule_order(a: &Rule, b: &Rule) -> Ordering {
    b.precision
        .total_cmp(&a.precision)
        .then(b.coverage.total_cmp(&a.coverage))
        .then(a.predicates.len().cmp(&b.predicates.len()))
        .then_with(|| a.canonical_text().cmp(&b.canonical_text()))
        .then_with(|| a.provenance.cmp(&b.provenance))
}

pub fn select_best(rules: &[Rule]) -> Result<&Rule, RuleError> {
    rules
        .iter()
        .min_by(|a, b| rule_order(a, b))
        .ok_or(RuleError::EmptyRuleSet)
}
