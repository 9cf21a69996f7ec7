//! Rejection sampling of feature vectors from a scenario program.

use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use crate::dsl::{
    feature_schema, BinOp, Builtin, CmpOp, Distribution, Expr, FeatureKind, FeatureSource, Field, Literal,
    ScenarioProgram, Schema,
};
use crate::rng::{stream, StreamRng};
use crate::world::{heading_diff, in_view_cone, ViewCone};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Cat(Arc<str>),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            Value::Num(_) => None,
        }
    }
}

/// One sampled assignment of every schema feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<Value>,
    pub seed_index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub seed: u64,
    pub max_rejections_per_sample: u64,
    /// Seed index of the first vector drawn by [`Sampler::sample`].
    pub first_index: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            seed: 0,
            max_rejections_per_sample: 10_000,
            first_index: 0,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(seed: u64) -> Self {
        SamplerConfig {
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("no sample satisfying all requires found for sample {sample_index} after {attempts} attempts")]
    RejectionExhausted { sample_index: u64, attempts: u64 },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
}

/// A condition placed on one feature while sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotTest {
    /// Exact equality with a fixed value.
    Equals(Value),
    /// Numeric range; each bound is `(value, inclusive)`.
    Range {
        lo: Option<(f64, bool)>,
        hi: Option<(f64, bool)>,
    },
    /// Categorical membership.
    OneOf(Vec<Arc<str>>),
}

impl SlotTest {
    pub fn holds(&self, v: &Value) -> bool {
        match (self, v) {
            (SlotTest::Equals(e), v) => e == v,
            (SlotTest::Range { lo, hi }, Value::Num(x)) => {
                let lo_ok = match lo {
                    None => true,
                    Some((b, true)) => *x >= *b,
                    Some((b, false)) => *x > *b,
                };
                let hi_ok = match hi {
                    None => true,
                    Some((b, true)) => *x <= *b,
                    Some((b, false)) => *x < *b,
                };
                lo_ok && hi_ok
            }
            (SlotTest::OneOf(vals), Value::Cat(s)) => vals.iter().any(|v| v == s),
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Num(f64),
    Str(Arc<str>),
    Slot(usize),
    Sample(Distribution),
    Neg(Box<Op>),
    Bin(BinOp, Box<Op>, Box<Op>),
    Cmp(CmpOp, Box<Op>, Box<Op>),
    In(Box<Op>, Vec<Arc<str>>),
    And(Box<Op>, Box<Op>),
    Dist(usize, usize),
    HeadingDiff(usize, usize),
    Visible(usize, usize),
}

#[derive(Debug, Clone)]
enum V {
    N(f64),
    S(Arc<str>),
    B(bool),
}

/// Evaluation failed in a way that invalidates the current attempt.
struct Reject;

#[derive(Debug, Clone)]
enum Step {
    Draw(Distribution),
    Eval(Op),
    /// Heading: evaluated then normalized into `[0, 360)`.
    EvalHeading(Op),
}

#[derive(Debug, Clone)]
struct Derived {
    builtin: Builtin,
    object: usize,
}

/// A program compiled for repeated sampling.
#[derive(Debug, Clone)]
pub struct Sampler {
    program: Arc<ScenarioProgram>,
    schema: Arc<Schema>,
    steps: Vec<Step>,
    derived: Vec<(usize, Derived)>,
    requires: Vec<Op>,
    params: usize,
    cone: ViewCone,
}

fn draw(d: &Distribution, rng: &mut StreamRng) -> Value {
    match d {
        Distribution::UniformReal { lo, hi } => Value::Num(rng.random_range(*lo..*hi)),
        Distribution::UniformInt { lo, hi } => Value::Num(rng.random_range(*lo..=*hi) as f64),
        Distribution::Categorical { values } => Value::Cat(values[rng.random_range(0..values.len())].clone()),
        Distribution::Constant(Literal::Num(v)) => Value::Num(*v),
        Distribution::Constant(Literal::Str(s)) => Value::Cat(s.clone()),
    }
}

/// Draws from `d` conditioned on `test`; `None` when the condition cannot
/// be met.
fn draw_truncated(d: &Distribution, test: &SlotTest, rng: &mut StreamRng) -> Option<Value> {
    match (d, test) {
        (_, SlotTest::Equals(v)) => {
            let feasible = match (d, v) {
                (Distribution::UniformReal { lo, hi }, Value::Num(x)) => x >= lo && x < hi,
                (Distribution::UniformInt { lo, hi }, Value::Num(x)) => {
                    x.fract() == 0.0 && *x >= *lo as f64 && *x <= *hi as f64
                }
                (Distribution::Categorical { values }, Value::Cat(s)) => values.contains(s),
                (Distribution::Constant(Literal::Num(c)), Value::Num(x)) => c == x,
                (Distribution::Constant(Literal::Str(c)), Value::Cat(s)) => c == s,
                _ => false,
            };
            feasible.then(|| v.clone())
        }
        (Distribution::UniformReal { lo, hi }, SlotTest::Range { lo: tlo, hi: thi }) => {
            let a = tlo.map_or(*lo, |(b, _)| b.max(*lo));
            let b = thi.map_or(*hi, |(b, _)| b.min(*hi));
            if a >= b {
                // A closed bound touching a closed endpoint still leaves a
                // single point, which has probability zero under a density.
                return None;
            }
            for _ in 0..64 {
                let v = Value::Num(rng.random_range(a..b));
                if test.holds(&v) {
                    return Some(v);
                }
            }
            None
        }
        (Distribution::UniformInt { lo, hi }, SlotTest::Range { lo: tlo, hi: thi }) => {
            let a = match tlo {
                None => *lo,
                Some((b, true)) => (*lo).max(b.ceil() as i64),
                Some((b, false)) => (*lo).max(b.floor() as i64 + 1),
            };
            let b = match thi {
                None => *hi,
                Some((c, true)) => (*hi).min(c.floor() as i64),
                Some((c, false)) => (*hi).min(c.ceil() as i64 - 1),
            };
            if a > b {
                return None;
            }
            Some(Value::Num(rng.random_range(a..=b) as f64))
        }
        (Distribution::Categorical { values }, SlotTest::OneOf(allowed)) => {
            let kept: Vec<&Arc<str>> = values.iter().filter(|v| allowed.contains(v)).collect();
            if kept.is_empty() {
                return None;
            }
            Some(Value::Cat(kept[rng.random_range(0..kept.len())].clone()))
        }
        (Distribution::Constant(_), test) => {
            let v = draw(d, rng);
            test.holds(&v).then_some(v)
        }
        _ => None,
    }
}

impl Sampler {
    /// Compiles a validated program.
    pub fn new(program: &ScenarioProgram) -> Self {
        Self::with_cone(program, ViewCone::default())
    }

    pub fn with_cone(program: &ScenarioProgram, cone: ViewCone) -> Self {
        let schema = feature_schema(program);
        let params = program.params.len();
        let mut c = Compiler {
            program,
            schema: &schema,
            params,
        };
        let mut steps = Vec::with_capacity(schema.len());
        for p in &program.params {
            steps.push(Step::Draw(p.dist.clone()));
        }
        for o in &program.objects {
            steps.push(Step::Eval(c.op(&o.x)));
            steps.push(Step::Eval(c.op(&o.y)));
            steps.push(Step::EvalHeading(c.op(&o.heading)));
            steps.push(Step::Draw(o.model.clone()));
            for d in &o.color {
                steps.push(Step::Draw(d.clone()));
            }
        }
        let derived = schema
            .features
            .iter()
            .enumerate()
            .filter_map(|(i, f)| match f.source {
                FeatureSource::Derived { builtin, object } => Some((i, Derived { builtin, object })),
                _ => None,
            })
            .collect();
        let requires = program.requires.iter().map(|r| c.op(r)).collect();
        Sampler {
            program: Arc::new(program.clone()),
            schema: Arc::new(schema),
            steps,
            derived,
            requires,
            params,
            cone,
        }
    }

    pub fn program(&self) -> &ScenarioProgram {
        &self.program
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn cone(&self) -> &ViewCone {
        &self.cone
    }

    fn pose(&self, values: &[Value], object: usize) -> (f64, f64, f64) {
        let base = self.params + object * Field::ALL.len();
        let n = |i: usize| values[base + i].as_num().unwrap_or(f64::NAN);
        (n(0), n(1), n(2))
    }

    fn eval(&self, op: &Op, values: &[Value], rng: &mut StreamRng) -> Result<V, Reject> {
        Ok(match op {
            Op::Num(v) => V::N(*v),
            Op::Str(s) => V::S(s.clone()),
            Op::Slot(i) => match &values[*i] {
                Value::Num(v) => V::N(*v),
                Value::Cat(s) => V::S(s.clone()),
            },
            Op::Sample(d) => match draw(d, rng) {
                Value::Num(v) => V::N(v),
                Value::Cat(s) => V::S(s),
            },
            Op::Neg(inner) => V::N(-self.num(inner, values, rng)?),
            Op::Bin(op, l, r) => {
                let a = self.num(l, values, rng)?;
                let b = self.num(r, values, rng)?;
                let v = match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(Reject);
                        }
                        a / b
                    }
                };
                if !v.is_finite() {
                    return Err(Reject);
                }
                V::N(v)
            }
            Op::Cmp(op, l, r) => {
                let a = self.eval(l, values, rng)?;
                let b = self.eval(r, values, rng)?;
                V::B(match (a, b) {
                    (V::N(a), V::N(b)) => match op {
                        CmpOp::Lt => a < b,
                        CmpOp::Le => a <= b,
                        CmpOp::Gt => a > b,
                        CmpOp::Ge => a >= b,
                        CmpOp::Eq => a == b,
                    },
                    (V::S(a), V::S(b)) => *op == CmpOp::Eq && a == b,
                    _ => return Err(Reject),
                })
            }
            Op::In(e, set) => match self.eval(e, values, rng)? {
                V::S(s) => V::B(set.contains(&s)),
                _ => return Err(Reject),
            },
            Op::And(l, r) => V::B(self.bool(l, values, rng)? && self.bool(r, values, rng)?),
            Op::Dist(a, b) => {
                let (ax, ay, _) = self.pose(values, *a);
                let (bx, by, _) = self.pose(values, *b);
                V::N((ax - bx).hypot(ay - by))
            }
            Op::HeadingDiff(a, b) => {
                let (_, _, ah) = self.pose(values, *a);
                let (_, _, bh) = self.pose(values, *b);
                V::N(heading_diff(ah, bh))
            }
            Op::Visible(a, b) => {
                let (ax, ay, ah) = self.pose(values, *a);
                let (bx, by, _) = self.pose(values, *b);
                V::B(in_view_cone(ax, ay, ah, &self.cone, bx, by))
            }
        })
    }

    fn num(&self, op: &Op, values: &[Value], rng: &mut StreamRng) -> Result<f64, Reject> {
        match self.eval(op, values, rng)? {
            V::N(v) => Ok(v),
            _ => Err(Reject),
        }
    }

    fn bool(&self, op: &Op, values: &[Value], rng: &mut StreamRng) -> Result<bool, Reject> {
        match self.eval(op, values, rng)? {
            V::B(v) => Ok(v),
            _ => Err(Reject),
        }
    }

    fn derive_into(&self, values: &mut [Value]) {
        for (slot, d) in &self.derived {
            let (ex, ey, eh) = self.pose(values, 0);
            let (ox, oy, oh) = self.pose(values, d.object);
            values[*slot] = Value::Num(match d.builtin {
                Builtin::Dist => (ex - ox).hypot(ey - oy),
                Builtin::HeadingDiff => heading_diff(eh, oh),
                Builtin::VisibleFrom => unreachable!("visibility is not a derived feature"),
            });
        }
    }

    /// One attempt at producing a vector. `tests[i]` constrains slot `i`.
    fn attempt(&self, rng: &mut StreamRng, tests: &[Option<SlotTest>], values: &mut [Value]) -> bool {
        for (i, step) in self.steps.iter().enumerate() {
            let test = tests.get(i).and_then(|t| t.as_ref());
            let v = match (step, test) {
                (_, Some(SlotTest::Equals(v))) => v.clone(),
                (Step::Draw(d), Some(t)) | (Step::Eval(Op::Sample(d)), Some(t)) => {
                    match draw_truncated(d, t, rng) {
                        Some(v) => v,
                        None => return false,
                    }
                }
                (Step::EvalHeading(Op::Sample(d @ Distribution::UniformReal { lo, hi })), Some(t))
                    if *lo >= 0.0 && *hi <= 360.0 =>
                {
                    match draw_truncated(d, t, rng) {
                        Some(v) => v,
                        None => return false,
                    }
                }
                (Step::Draw(d), None) => draw(d, rng),
                (Step::Eval(op), _) => match self.eval(op, values, rng) {
                    Ok(V::N(v)) => Value::Num(v),
                    _ => return false,
                },
                (Step::EvalHeading(op), _) => match self.eval(op, values, rng) {
                    Ok(V::N(v)) => Value::Num(v.rem_euclid(360.0)),
                    _ => return false,
                },
            };
            if let Some(t) = test {
                if !t.holds(&v) {
                    return false;
                }
            }
            values[i] = v;
        }
        self.derive_into(values);
        for (slot, _) in &self.derived {
            if let Some(Some(t)) = tests.get(*slot) {
                if !t.holds(&values[*slot]) {
                    return false;
                }
            }
        }
        self.requires
            .iter()
            .all(|r| matches!(self.bool(r, values, rng), Ok(true)))
    }

    /// Draws vector `index` under `seed`, with optional per-slot conditions.
    pub fn sample_with(
        &self,
        seed: u64,
        index: u64,
        tests: &[Option<SlotTest>],
        max_attempts: u64,
    ) -> Result<FeatureVector, SampleError> {
        let mut rng = stream(seed, index);
        let mut values = vec![Value::Num(f64::NAN); self.schema.len()];
        for _ in 0..max_attempts.max(1) {
            if self.attempt(&mut rng, tests, &mut values) {
                return Ok(FeatureVector {
                    values,
                    seed_index: index,
                });
            }
        }
        Err(SampleError::RejectionExhausted {
            sample_index: index,
            attempts: max_attempts.max(1),
        })
    }

    pub fn sample_one(&self, cfg: &SamplerConfig, index: u64) -> Result<FeatureVector, SampleError> {
        self.sample_with(cfg.seed, index, &[], cfg.max_rejections_per_sample)
    }

    /// Draws `n` vectors with seed indices `cfg.first_index ..`. The result
    /// does not depend on the number of worker threads.
    pub fn sample(&self, n: usize, cfg: &SamplerConfig) -> Result<Vec<FeatureVector>, SampleError> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| self.sample_one(cfg, cfg.first_index + i))
            .collect()
    }

    /// Keeps `base` on the `fixed` features and redraws everything else.
    /// A fixed derived feature acts as an equality constraint.
    pub fn conditional_resample(
        &self,
        base: &FeatureVector,
        fixed: &[&str],
        cfg: &SamplerConfig,
        index: u64,
    ) -> Result<FeatureVector, SampleError> {
        let mut tests = vec![None; self.schema.len()];
        for name in fixed {
            let i = self
                .schema
                .index_of(name)
                .ok_or_else(|| SampleError::UnknownFeature(name.to_string()))?;
            tests[i] = Some(SlotTest::Equals(base.values[i].clone()));
        }
        let mut out = self.sample_with(cfg.seed, index, &tests, cfg.max_rejections_per_sample)?;
        out.seed_index = index;
        Ok(out)
    }

    /// Recomputes derived features from the declared ones.
    pub fn derive_features(&self, raw: &FeatureVector) -> FeatureVector {
        let mut out = raw.clone();
        out.values.resize(self.schema.len(), Value::Num(f64::NAN));
        self.derive_into(&mut out.values);
        out
    }

    /// Whether a vector satisfies every require of the program.
    pub fn satisfies_requires(&self, f: &FeatureVector) -> bool {
        let mut rng = stream(0, 0);
        self.requires
            .iter()
            .all(|r| matches!(self.bool(r, &f.values, &mut rng), Ok(true)))
    }

    /// Whether every value lies in its descriptor's domain.
    pub fn in_domain(&self, f: &FeatureVector) -> bool {
        self.schema.features.iter().zip(&f.values).all(|(d, v)| match v {
            Value::Num(x) => {
                d.domain.contains_num(*x) && (d.kind != FeatureKind::Integer || x.fract() == 0.0)
            }
            Value::Cat(s) => d.domain.values().contains(s),
        })
    }
}

struct Compiler<'a> {
    program: &'a ScenarioProgram,
    schema: &'a Schema,
    params: usize,
}

impl Compiler<'_> {
    fn object(&self, name: &str) -> usize {
        self.program
            .objects
            .iter()
            .position(|o| o.name == name)
            .expect("validated program")
    }

    fn op(&mut self, e: &Expr) -> Op {
        match e {
            Expr::Num(v) => Op::Num(*v),
            Expr::Str(s) => Op::Str(s.clone()),
            Expr::Param(name) => Op::Slot(self.schema.index_of(name).expect("validated program")),
            Expr::Field { object, field } => {
                Op::Slot(self.schema.object_slot(self.params, self.object(object), *field))
            }
            Expr::Sample(d) => Op::Sample(d.clone()),
            Expr::Neg(inner) => Op::Neg(Box::new(self.op(inner))),
            Expr::Binary { op, lhs, rhs } => Op::Bin(*op, Box::new(self.op(lhs)), Box::new(self.op(rhs))),
            Expr::Compare { op, lhs, rhs } => Op::Cmp(*op, Box::new(self.op(lhs)), Box::new(self.op(rhs))),
            Expr::In { expr, values } => {
                let set: HashSet<&Arc<str>> = values.iter().collect();
                let mut vs: Vec<Arc<str>> = set.into_iter().cloned().collect();
                vs.sort();
                Op::In(Box::new(self.op(expr)), vs)
            }
            Expr::And(l, r) => Op::And(Box::new(self.op(l)), Box::new(self.op(r))),
            Expr::Call { builtin, a, b } => {
                let (a, b) = (self.object(a), self.object(b));
                match builtin {
                    Builtin::Dist => Op::Dist(a, b),
                    Builtin::HeadingDiff => Op::HeadingDiff(a, b),
                    Builtin::VisibleFrom => Op::Visible(a, b),
                }
            }
        }
    }
}

/// Serializes a vector as one JSON object keyed by feature name.
pub fn to_json(schema: &Schema, f: &FeatureVector) -> Map<String, Json> {
    let mut m = Map::new();
    for (d, v) in schema.features.iter().zip(&f.values) {
        let j = match v {
            Value::Num(x) if d.kind == FeatureKind::Integer && x.fract() == 0.0 && x.abs() < 9e15 => {
                Json::from(*x as i64)
            }
            Value::Num(x) => Json::from(*x),
            Value::Cat(s) => Json::from(s.as_ref()),
        };
        m.insert(d.name.clone(), j);
    }
    m.insert("_seedIndex".into(), Json::from(f.seed_index));
    m
}

/// Reads a vector back from its JSON object form.
pub fn from_json(schema: &Schema, m: &Map<String, Json>) -> Result<FeatureVector, String> {
    let mut values = Vec::with_capacity(schema.len());
    for d in &schema.features {
        let j = m
            .get(&d.name)
            .ok_or_else(|| format!("missing feature `{}`", d.name))?;
        let v = if d.is_categorical() {
            Value::Cat(Arc::from(
                j.as_str()
                    .ok_or_else(|| format!("feature `{}` must be a string", d.name))?,
            ))
        } else {
            Value::Num(
                j.as_f64()
                    .ok_or_else(|| format!("feature `{}` must be a number", d.name))?,
            )
        };
        values.push(v);
    }
    let seed_index = m
        .get("_seedIndex")
        .and_then(Json::as_u64)
        .ok_or("missing `_seedIndex`")?;
    Ok(FeatureVector { values, seed_index })
}
