//! The ordered feature schema of a program.

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;

use super::ast::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Real,
    Integer,
    Categorical,
}

/// The range of values a feature can take. Numeric intervals are reported
/// as closed hulls; the half-open upper end of `uniform` is not tracked.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Interval { lo: f64, hi: f64 },
    Values(Vec<Arc<str>>),
}

impl Domain {
    pub fn values(&self) -> &[Arc<str>] {
        match self {
            Domain::Values(v) => v,
            Domain::Interval { .. } => &[],
        }
    }

    pub fn contains_num(&self, v: f64) -> bool {
        match self {
            Domain::Interval { lo, hi } => v >= *lo && v <= *hi,
            Domain::Values(_) => false,
        }
    }
}

/// Where a feature's value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "source", rename_all = "camelCase")]
pub enum FeatureSource {
    Param { index: usize },
    Object { index: usize, field: Field },
    Derived { builtin: Builtin, object: usize },
}

impl Serialize for Field {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl Serialize for Builtin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub kind: FeatureKind,
    pub domain: Domain,
    #[serde(flatten)]
    pub source: FeatureSource,
}

impl FeatureDescriptor {
    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }

    pub fn is_derived(&self) -> bool {
        matches!(self.source, FeatureSource::Derived { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub features: Vec<FeatureDescriptor>,
    index: HashMap<String, usize>,
}

impl Schema {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&FeatureDescriptor> {
        self.index_of(name).map(|i| &self.features[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    /// Slot of an object field within a feature vector.
    pub fn object_slot(&self, params: usize, object: usize, field: Field) -> usize {
        params + object * Field::ALL.len() + field as usize
    }
}

pub fn field_feature_name(object: &str, field: Field) -> String {
    format!("{object}.{field}")
}

pub fn derived_feature_name(builtin: Builtin, a: &str, b: &str) -> String {
    format!("{}({a},{b})", builtin.as_str())
}

fn hull(a: (f64, f64), b: (f64, f64), op: BinOp) -> (f64, f64) {
    let cands = match op {
        BinOp::Add => return (a.0 + b.0, a.1 + b.1),
        BinOp::Sub => return (a.0 - b.1, a.1 - b.0),
        BinOp::Mul => [a.0 * b.0, a.0 * b.1, a.1 * b.0, a.1 * b.1],
        BinOp::Div => {
            if b.0 <= 0.0 && b.1 >= 0.0 {
                return (f64::NEG_INFINITY, f64::INFINITY);
            }
            [a.0 / b.0, a.0 / b.1, a.1 / b.0, a.1 / b.1]
        }
    };
    let lo = cands
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::INFINITY, f64::min);
    let hi = cands
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn dist_range(d: &Distribution) -> (f64, f64) {
    match d {
        Distribution::UniformReal { lo, hi } => (*lo, *hi),
        Distribution::UniformInt { lo, hi } => (*lo as f64, *hi as f64),
        Distribution::Constant(Literal::Num(v)) => (*v, *v),
        _ => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

fn dist_kind(d: &Distribution) -> FeatureKind {
    match d {
        Distribution::UniformReal { .. } => FeatureKind::Real,
        Distribution::UniformInt { .. } => FeatureKind::Integer,
        Distribution::Constant(Literal::Num(v)) if v.fract() == 0.0 => FeatureKind::Integer,
        Distribution::Constant(Literal::Num(_)) => FeatureKind::Real,
        Distribution::Categorical { .. } | Distribution::Constant(Literal::Str(_)) => {
            FeatureKind::Categorical
        }
    }
}

fn dist_domain(d: &Distribution) -> Domain {
    match d {
        Distribution::Categorical { values } => Domain::Values(values.clone()),
        Distribution::Constant(Literal::Str(s)) => Domain::Values(vec![s.clone()]),
        other => {
            let (lo, hi) = dist_range(other);
            Domain::Interval { lo, hi }
        }
    }
}

struct Ranges<'a> {
    features: &'a [FeatureDescriptor],
}

impl Ranges<'_> {
    fn numeric(&self, name: &str) -> (f64, f64) {
        self.features
            .iter()
            .find(|f| f.name == name)
            .and_then(|f| match f.domain {
                Domain::Interval { lo, hi } => Some((lo, hi)),
                Domain::Values(_) => None,
            })
            .unwrap_or((f64::NEG_INFINITY, f64::INFINITY))
    }

    fn range(&self, e: &Expr) -> (f64, f64) {
        match e {
            Expr::Num(v) => (*v, *v),
            Expr::Param(name) => self.numeric(name),
            Expr::Field { object, field } => self.numeric(&field_feature_name(object, *field)),
            Expr::Sample(d) => dist_range(d),
            Expr::Neg(inner) => {
                let (lo, hi) = self.range(inner);
                (-hi, -lo)
            }
            Expr::Binary { op, lhs, rhs } => hull(self.range(lhs), self.range(rhs), *op),
            Expr::Call {
                builtin: Builtin::Dist,
                ..
            } => (0.0, f64::INFINITY),
            Expr::Call {
                builtin: Builtin::HeadingDiff,
                ..
            } => (0.0, 180.0),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

fn expr_kind(e: &Expr, features: &[FeatureDescriptor]) -> FeatureKind {
    match e {
        Expr::Num(v) if v.fract() == 0.0 => FeatureKind::Integer,
        Expr::Sample(d) => dist_kind(d),
        Expr::Param(name) => features
            .iter()
            .find(|f| &f.name == name)
            .map(|f| f.kind)
            .unwrap_or(FeatureKind::Real),
        _ => FeatureKind::Real,
    }
}

/// Builds the ordered schema: parameters, then the seven fields of each
/// object, then `dist` and `headingDiff` from ego to every other object.
pub fn feature_schema(p: &ScenarioProgram) -> Schema {
    let mut features: Vec<FeatureDescriptor> = Vec::new();
    for (i, param) in p.params.iter().enumerate() {
        features.push(FeatureDescriptor {
            name: param.name.clone(),
            kind: dist_kind(&param.dist),
            domain: dist_domain(&param.dist),
            source: FeatureSource::Param { index: i },
        });
    }
    for (oi, o) in p.objects.iter().enumerate() {
        for field in Field::ALL {
            let (kind, domain) = match field {
                Field::X | Field::Y => {
                    let e = if field == Field::X { &o.x } else { &o.y };
                    let r = Ranges { features: &features };
                    let (lo, hi) = r.range(e);
                    (expr_kind(e, &features), Domain::Interval { lo, hi })
                }
                Field::Heading => {
                    let r = Ranges { features: &features };
                    let (lo, hi) = r.range(&o.heading);
                    let (lo, hi) = if lo >= 0.0 && hi <= 360.0 {
                        (lo, hi)
                    } else {
                        (0.0, 360.0)
                    };
                    (expr_kind(&o.heading, &features), Domain::Interval { lo, hi })
                }
                Field::Model => (FeatureKind::Categorical, dist_domain(&o.model)),
                Field::ColorR | Field::ColorG | Field::ColorB => {
                    let d = &o.color[field as usize - Field::ColorR as usize];
                    (dist_kind(d), dist_domain(d))
                }
            };
            features.push(FeatureDescriptor {
                name: field_feature_name(&o.name, field),
                kind,
                domain,
                source: FeatureSource::Object { index: oi, field },
            });
        }
    }
    if let Some(ego) = p.objects.first() {
        for (oi, o) in p.objects.iter().enumerate().skip(1) {
            features.push(FeatureDescriptor {
                name: derived_feature_name(Builtin::Dist, &ego.name, &o.name),
                kind: FeatureKind::Real,
                domain: Domain::Interval {
                    lo: 0.0,
                    hi: f64::INFINITY,
                },
                source: FeatureSource::Derived {
                    builtin: Builtin::Dist,
                    object: oi,
                },
            });
            features.push(FeatureDescriptor {
                name: derived_feature_name(Builtin::HeadingDiff, &ego.name, &o.name),
                kind: FeatureKind::Real,
                domain: Domain::Interval { lo: 0.0, hi: 180.0 },
                source: FeatureSource::Derived {
                    builtin: Builtin::HeadingDiff,
                    object: oi,
                },
            });
        }
    }
    let index = features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.clone(), i))
        .collect();
    Schema { features, index }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn one_car_program_schema() {
        let p = parse(
            "param time = uniform(360, 1080)\nego = car(x: 0, y: 0, heading: 0)\notherCar = car(x: uniform(-4, 4), y: uniform(5, 20))",
        )
        .unwrap();
        let s = feature_schema(&p);
        let names: Vec<&str> = s.names().collect();
        assert_eq!(
            &names[8..],
            &[
                "otherCar.x",
                "otherCar.y",
                "otherCar.heading",
                "otherCar.model",
                "otherCar.colorR",
                "otherCar.colorG",
                "otherCar.colorB",
                "dist(ego,otherCar)",
                "headingDiff(ego,otherCar)"
            ]
        );
        assert_eq!(s.get("otherCar.model").unwrap().domain.values().len(), 14);
        assert_eq!(
            s.get("otherCar.x").unwrap().domain,
            Domain::Interval { lo: -4.0, hi: 4.0 }
        );
        assert_eq!(s.get("otherCar.colorG").unwrap().kind, FeatureKind::Integer);
    }

    #[test]
    fn ego_only_schema() {
        let p = parse("param t = uniform(0, 1)\nego = car(x: 0, y: 0)").unwrap();
        let names: Vec<String> = feature_schema(&p).names().map(String::from).collect();
        assert_eq!(
            names,
            [
                "t",
                "ego.x",
                "ego.y",
                "ego.heading",
                "ego.model",
                "ego.colorR",
                "ego.colorG",
                "ego.colorB"
            ]
        );
    }

    #[test]
    fn schema_is_deterministic() {
        let src = "ego = car(x: 0, y: 0)\nc = car(x: ego.x + uniform(1, 2) * 3, y: 4)";
        let a = feature_schema(&parse(src).unwrap());
        let b = feature_schema(&parse(src).unwrap());
        assert_eq!(a, b);
        assert_eq!(
            a.get("c.x").unwrap().domain,
            Domain::Interval { lo: 3.0, hi: 6.0 }
        );
    }
}
