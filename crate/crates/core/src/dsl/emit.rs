use std::fmt::Write;

use super::ast::*;

/// Renders a program as canonical source text: parameters, then objects with
/// every field spelled out, then requires.
pub fn emit(p: &ScenarioProgram) -> String {
    let mut out = String::new();
    for param in &p.params {
        let _ = writeln!(out, "param {} = {}", param.name, dist(&param.dist));
    }
    for o in &p.objects {
        let _ = writeln!(
            out,
            "{} = car(x: {}, y: {}, heading: {}, model: {}, colorR: {}, colorG: {}, colorB: {})",
            o.name,
            expr(&o.x),
            expr(&o.y),
            expr(&o.heading),
            dist(&o.model),
            dist(&o.color[0]),
            dist(&o.color[1]),
            dist(&o.color[2]),
        );
    }
    for r in &p.requires {
        let _ = writeln!(out, "require {}", expr(r));
    }
    out
}

pub(crate) fn string_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

pub(crate) fn number(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn dist(d: &Distribution) -> String {
    match d {
        Distribution::UniformReal { lo, hi } => format!("uniform({}, {})", number(*lo), number(*hi)),
        Distribution::UniformInt { lo, hi } => format!("range({lo}, {hi})"),
        Distribution::Categorical { values } => {
            let vs: Vec<String> = values.iter().map(|v| string_literal(v)).collect();
            format!("choice({})", vs.join(", "))
        }
        Distribution::Constant(Literal::Num(v)) => number(*v),
        Distribution::Constant(Literal::Str(s)) => string_literal(s),
    }
}

fn level(e: &Expr) -> u8 {
    match e {
        Expr::And(..) => 1,
        Expr::Compare { .. } | Expr::In { .. } => 2,
        Expr::Binary {
            op: BinOp::Add | BinOp::Sub,
            ..
        } => 3,
        Expr::Binary { .. } => 4,
        _ => 5,
    }
}

fn wrapped(e: &Expr, min_level: u8) -> String {
    if level(e) < min_level {
        format!("({})", expr(e))
    } else {
        expr(e)
    }
}

pub(crate) fn expr(e: &Expr) -> String {
    match e {
        Expr::Num(v) => number(*v),
        Expr::Str(s) => string_literal(s),
        Expr::Param(name) => name.clone(),
        Expr::Field { object, field } => format!("{object}.{field}"),
        Expr::Sample(d) => dist(d),
        Expr::Neg(inner) => format!("-({})", expr(inner)),
        Expr::Binary { op, lhs, rhs } => {
            let l = level(e);
            format!("{} {} {}", wrapped(lhs, l), op.symbol(), wrapped(rhs, l + 1))
        }
        Expr::Compare { op, lhs, rhs } => {
            format!("{} {} {}", wrapped(lhs, 3), op.symbol(), wrapped(rhs, 3))
        }
        Expr::In { expr: inner, values } => {
            let vs: Vec<String> = values.iter().map(|v| string_literal(v)).collect();
            format!("{} in {{{}}}", wrapped(inner, 3), vs.join(", "))
        }
        Expr::And(lhs, rhs) => format!("{} and {}", wrapped(lhs, 1), wrapped(rhs, 2)),
        Expr::Call { builtin, a, b } => format!("{}({a}, {b})", builtin.as_str()),
    }
}
