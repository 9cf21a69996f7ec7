//! The scenario language: lexing, parsing, validation, emission and the
//! feature schema derived from a program.

pub mod ast;
mod emit;
mod lexer;
mod parser;
pub mod schema;

use std::collections::HashSet;

pub use ast::*;
pub use emit::emit;
pub use lexer::Pos;
pub use parser::{fold_constant, parse, parse_unvalidated};
pub use schema::{feature_schema, Domain, FeatureDescriptor, FeatureKind, FeatureSource, Schema};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DslError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid program: {message}")]
    Validation {
        message: String,
        identifier: Option<String>,
    },
}

fn invalid(identifier: &str, message: impl Into<String>) -> DslError {
    DslError::Validation {
        message: message.into(),
        identifier: Some(identifier.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Num,
    Cat,
    Bool,
}

impl Ty {
    fn name(self) -> &'static str {
        match self {
            Ty::Num => "number",
            Ty::Cat => "string",
            Ty::Bool => "boolean",
        }
    }
}

struct Scope<'a> {
    program: &'a ScenarioProgram,
    params: usize,
    objects: usize,
    in_require: bool,
}

impl Scope<'_> {
    fn type_of(&self, e: &Expr) -> Result<Ty, DslError> {
        Ok(match e {
            Expr::Num(v) => {
                if !v.is_finite() {
                    return Err(invalid(&v.to_string(), "numeric literal must be finite"));
                }
                Ty::Num
            }
            Expr::Str(_) => Ty::Cat,
            Expr::Param(name) => {
                let p = self.program.params[..self.params]
                    .iter()
                    .find(|p| &p.name == name)
                    .ok_or_else(|| invalid(name, format!("unknown parameter `{name}`")))?;
                if p.dist.is_categorical() {
                    Ty::Cat
                } else {
                    Ty::Num
                }
            }
            Expr::Field { object, field } => {
                self.object(object)?;
                if *field == Field::Model {
                    Ty::Cat
                } else {
                    Ty::Num
                }
            }
            Expr::Sample(d) => {
                if self.in_require {
                    return Err(invalid(
                        "require",
                        "random draws are not allowed inside `require`",
                    ));
                }
                check_distribution("expression", d)?;
                if d.is_categorical() {
                    Ty::Cat
                } else {
                    Ty::Num
                }
            }
            Expr::Neg(inner) => {
                self.expect(inner, Ty::Num, "operand of unary minus")?;
                Ty::Num
            }
            Expr::Binary { op, lhs, rhs } => {
                let ctx = format!("operand of `{}`", op.symbol());
                self.expect(lhs, Ty::Num, &ctx)?;
                self.expect(rhs, Ty::Num, &ctx)?;
                Ty::Num
            }
            Expr::Compare { op, lhs, rhs } => {
                let lt = self.type_of(lhs)?;
                let rt = self.type_of(rhs)?;
                let ok = match op {
                    CmpOp::Eq => lt == rt && lt != Ty::Bool,
                    _ => lt == Ty::Num && rt == Ty::Num,
                };
                if !ok {
                    return Err(invalid(
                        op.symbol(),
                        format!(
                            "cannot compare {} with {} using `{}`",
                            lt.name(),
                            rt.name(),
                            op.symbol()
                        ),
                    ));
                }
                Ty::Bool
            }
            Expr::In { expr, values } => {
                self.expect(expr, Ty::Cat, "left side of `in`")?;
                if values.is_empty() {
                    return Err(invalid("in", "empty set in `in` expression"));
                }
                Ty::Bool
            }
            Expr::And(lhs, rhs) => {
                self.expect(lhs, Ty::Bool, "operand of `and`")?;
                self.expect(rhs, Ty::Bool, "operand of `and`")?;
                Ty::Bool
            }
            Expr::Call { builtin, a, b } => {
                self.object(a)?;
                self.object(b)?;
                match builtin {
                    Builtin::VisibleFrom => Ty::Bool,
                    Builtin::Dist | Builtin::HeadingDiff => Ty::Num,
                }
            }
        })
    }

    fn expect(&self, e: &Expr, want: Ty, ctx: &str) -> Result<(), DslError> {
        let got = self.type_of(e)?;
        if got != want {
            return Err(DslError::Validation {
                message: format!("{ctx} must be a {}, found a {}", want.name(), got.name()),
                identifier: None,
            });
        }
        Ok(())
    }

    fn object(&self, name: &str) -> Result<(), DslError> {
        if self.program.objects[..self.objects]
            .iter()
            .any(|o| o.name == name)
        {
            Ok(())
        } else if self.program.object(name).is_some() {
            Err(invalid(name, format!("`{name}` is used before it is declared")))
        } else {
            Err(invalid(name, format!("unknown object `{name}`")))
        }
    }
}

fn check_distribution(owner: &str, d: &Distribution) -> Result<(), DslError> {
    match d {
        Distribution::UniformReal { lo, hi } => {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(invalid(
                    owner,
                    format!("uniform({lo}, {hi}) needs finite bounds with lo < hi"),
                ));
            }
        }
        Distribution::UniformInt { lo, hi } => {
            if lo > hi {
                return Err(invalid(owner, format!("range({lo}, {hi}) needs lo <= hi")));
            }
        }
        Distribution::Categorical { values } => {
            if values.is_empty() {
                return Err(invalid(owner, "choice() needs at least one value"));
            }
            let mut seen = HashSet::new();
            for v in values {
                if !seen.insert(v.as_ref()) {
                    return Err(invalid(owner, format!("duplicate choice value \"{v}\"")));
                }
            }
        }
        Distribution::Constant(Literal::Num(v)) => {
            if !v.is_finite() {
                return Err(invalid(owner, "constant must be finite"));
            }
        }
        Distribution::Constant(Literal::Str(_)) => {}
    }
    Ok(())
}

fn check_model(owner: &str, d: &Distribution) -> Result<(), DslError> {
    let values: Vec<&str> = match d {
        Distribution::Categorical { values } => values.iter().map(|v| v.as_ref()).collect(),
        Distribution::Constant(Literal::Str(s)) => vec![s.as_ref()],
        _ => return Err(invalid(owner, "model must be a string or choice(...)")),
    };
    for v in values {
        if !CAR_MODELS.contains(&v) {
            return Err(invalid(owner, format!("unknown car model \"{v}\"")));
        }
    }
    Ok(())
}

fn check_color(owner: &str, d: &Distribution) -> Result<(), DslError> {
    let (lo, hi) = match d {
        Distribution::UniformReal { lo, hi } => (*lo, *hi),
        Distribution::UniformInt { lo, hi } => (*lo as f64, *hi as f64),
        Distribution::Constant(Literal::Num(v)) => (*v, *v),
        _ => return Err(invalid(owner, "color channels must be numeric")),
    };
    if lo < 0.0 || hi > 255.0 {
        return Err(invalid(owner, "color channels must lie in [0, 255]"));
    }
    Ok(())
}

impl ScenarioProgram {
    /// Checks every structural and typing invariant of a program.
    pub fn validate(&self) -> Result<(), DslError> {
        match self.objects.first() {
            Some(o) if o.name == "ego" => {}
            Some(_) if self.object("ego").is_some() => {
                return Err(invalid("ego", "`ego` must be the first object"))
            }
            _ => return Err(invalid("ego", "program must declare an `ego` car")),
        }
        let mut names = HashSet::new();
        for name in self
            .params
            .iter()
            .map(|p| &p.name)
            .chain(self.objects.iter().map(|o| &o.name))
        {
            if !names.insert(name.as_str()) {
                return Err(invalid(name, format!("`{name}` is declared twice")));
            }
        }
        for p in &self.params {
            check_distribution(&p.name, &p.dist)?;
        }
        let mut scope = Scope {
            program: self,
            params: self.params.len(),
            objects: 0,
            in_require: false,
        };
        for (i, o) in self.objects.iter().enumerate() {
            scope.objects = i;
            for (field, e) in [("x", &o.x), ("y", &o.y), ("heading", &o.heading)] {
                let got = scope.type_of(e)?;
                if got != Ty::Num {
                    return Err(invalid(
                        &format!("{}.{field}", o.name),
                        format!("`{}.{field}` must be a number", o.name),
                    ));
                }
            }
            check_distribution(&format!("{}.model", o.name), &o.model)?;
            check_model(&format!("{}.model", o.name), &o.model)?;
            for (c, f) in o.color.iter().zip([Field::ColorR, Field::ColorG, Field::ColorB]) {
                let owner = format!("{}.{f}", o.name);
                check_distribution(&owner, c)?;
                check_color(&owner, c)?;
            }
        }
        scope.objects = self.objects.len();
        scope.in_require = true;
        for r in &self.requires {
            if scope.type_of(r)? != Ty::Bool {
                return Err(invalid("require", "`require` needs a boolean condition"));
            }
        }
        Ok(())
    }
}
