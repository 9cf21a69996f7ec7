//! Recursive descent parser for scenario programs.
//!
//! ```text
//! program   = { statement NEWLINE } ;
//! statement = "param" IDENT "=" dist
//!           | IDENT "=" "car" "(" field { "," field } ")"
//!           | "require" expr ;
//! field     = ("x" | "y" | "heading" | "model" | "colorR" | "colorG" | "colorB") ":" expr
//!           | "color" ":" "(" expr "," expr "," expr ")" ;
//! expr      = cmp { "and" cmp } ;
//! cmp       = sum [ ("<" | "<=" | ">" | ">=" | "==") sum | "in" "{" STRING { "," STRING } "}" ] ;
//! sum       = product { ("+" | "-") product } ;
//! product   = unary { ("*" | "/") unary } ;
//! unary     = "-" unary | primary ;
//! primary   = NUMBER | STRING | "(" expr ")" | IDENT [ "." IDENT ] | IDENT "(" args ")" ;
//! ```

use std::collections::HashSet;
use std::sync::Arc;

use super::ast::*;
use super::lexer::{tokenize, Pos, Tok, Token};
use super::DslError;

// Short-lived; boxing the object variant buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug)]
enum Statement {
    Param(ParamDecl),
    Object(ObjectDecl),
    Require(Expr),
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

type PResult<T> = Result<T, DslError>;

fn syntax_at(pos: Pos, message: impl Into<String>) -> DslError {
    DslError::Syntax {
        line: pos.line,
        column: pos.column,
        message: message.into(),
    }
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn here(&self) -> Pos {
        self.tokens[self.pos].pos
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == tok {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok) -> PResult<Pos> {
        if *self.peek() == tok {
            Ok(self.bump().pos)
        } else {
            Err(syntax_at(
                self.here(),
                format!("expected {tok}, found {}", self.peek()),
            ))
        }
    }

    fn ident(&mut self) -> PResult<(String, Pos)> {
        match self.peek().clone() {
            Tok::Ident(name) => {
                let pos = self.bump().pos;
                Ok((name, pos))
            }
            other => Err(syntax_at(
                self.here(),
                format!("expected identifier, found {other}"),
            )),
        }
    }

    fn statements(&mut self) -> PResult<Vec<Statement>> {
        let mut out = Vec::new();
        loop {
            while self.eat(&Tok::Newline) {}
            if *self.peek() == Tok::Eof {
                return Ok(out);
            }
            out.push(self.statement()?);
            match self.peek() {
                Tok::Newline | Tok::Eof => {}
                other => {
                    return Err(syntax_at(
                        self.here(),
                        format!("expected end of line, found {other}"),
                    ))
                }
            }
        }
    }

    fn statement(&mut self) -> PResult<Statement> {
        let start = self.here();
        match self.peek().clone() {
            Tok::Param => {
                self.bump();
                let (name, _) = self.ident()?;
                self.expect(Tok::Assign)?;
                let at = self.here();
                let expr = self.expr()?;
                let dist = to_distribution(expr, at)?;
                Ok(Statement::Param(ParamDecl { name, dist }))
            }
            Tok::Require => {
                self.bump();
                let expr = self.expr()?;
                Ok(Statement::Require(expr))
            }
            Tok::Ident(_) => {
                let (name, _) = self.ident()?;
                self.expect(Tok::Assign)?;
                let (ctor, ctor_pos) = self.ident()?;
                if ctor != "car" {
                    return Err(syntax_at(
                        ctor_pos,
                        format!("unknown object class `{ctor}`, expected `car`"),
                    ));
                }
                let decl = self.car_fields(name, start)?;
                Ok(Statement::Object(decl))
            }
            other => Err(syntax_at(
                start,
                format!("expected `param`, `require` or an object declaration, found {other}"),
            )),
        }
    }

    fn car_fields(&mut self, name: String, start: Pos) -> PResult<ObjectDecl> {
        self.expect(Tok::LParen)?;
        let mut x = None;
        let mut y = None;
        let mut heading = None;
        let mut model = None;
        let mut color: [Option<Distribution>; 3] = [None, None, None];
        let mut seen = HashSet::new();
        if *self.peek() != Tok::RParen {
            loop {
                let (field, fpos) = self.ident()?;
                if !seen.insert(field.clone()) {
                    return Err(syntax_at(fpos, format!("field `{field}` given twice")));
                }
                self.expect(Tok::Colon)?;
                let at = self.here();
                match field.as_str() {
                    "x" => x = Some(self.expr()?),
                    "y" => y = Some(self.expr()?),
                    "heading" => heading = Some(self.expr()?),
                    "model" => model = Some(to_distribution(self.expr()?, at)?),
                    "colorR" => color[0] = Some(to_distribution(self.expr()?, at)?),
                    "colorG" => color[1] = Some(to_distribution(self.expr()?, at)?),
                    "colorB" => color[2] = Some(to_distribution(self.expr()?, at)?),
                    "color" => {
                        self.expect(Tok::LParen)?;
                        for (i, slot) in color.iter_mut().enumerate() {
                            if i > 0 {
                                self.expect(Tok::Comma)?;
                            }
                            let at = self.here();
                            *slot = Some(to_distribution(self.expr()?, at)?);
                        }
                        self.expect(Tok::RParen)?;
                    }
                    other => {
                        return Err(syntax_at(fpos, format!("unknown car field `{other}`")));
                    }
                }
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        let x = x.ok_or_else(|| syntax_at(start, format!("object `{name}` is missing `x`")))?;
        let y = y.ok_or_else(|| syntax_at(start, format!("object `{name}` is missing `y`")))?;
        let [r, g, b] = color;
        Ok(ObjectDecl {
            name,
            x,
            y,
            heading: heading.unwrap_or(Expr::Sample(Distribution::default_heading())),
            model: model.unwrap_or_else(Distribution::default_model),
            color: [
                r.unwrap_or_else(Distribution::default_color),
                g.unwrap_or_else(Distribution::default_color),
                b.unwrap_or_else(Distribution::default_color),
            ],
        })
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.comparison()?;
        while self.eat(&Tok::And) {
            let rhs = self.comparison()?;
            lhs = Expr::and(lhs, rhs);
        }
        Ok(lhs)
    }

    fn comparison(&mut self) -> PResult<Expr> {
        let lhs = self.sum()?;
        let op = match self.peek() {
            Tok::Lt => CmpOp::Lt,
            Tok::Le => CmpOp::Le,
            Tok::Gt => CmpOp::Gt,
            Tok::Ge => CmpOp::Ge,
            Tok::EqEq => CmpOp::Eq,
            Tok::In => {
                self.bump();
                self.expect(Tok::LBrace)?;
                let mut values = Vec::new();
                loop {
                    match self.peek().clone() {
                        Tok::Str(s) => {
                            self.bump();
                            values.push(Arc::from(s.as_str()));
                        }
                        other => {
                            return Err(syntax_at(
                                self.here(),
                                format!("expected string in set, found {other}"),
                            ))
                        }
                    }
                    if !self.eat(&Tok::Comma) {
                        break;
                    }
                }
                self.expect(Tok::RBrace)?;
                return Ok(Expr::In {
                    expr: Box::new(lhs),
                    values,
                });
            }
            _ => return Ok(lhs),
        };
        self.bump();
        let rhs = self.sum()?;
        Ok(Expr::compare(op, lhs, rhs))
    }

    fn sum(&mut self) -> PResult<Expr> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.product()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn product(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Expr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat(&Tok::Minus) {
            // A minus directly before a number literal is part of the literal.
            if let Tok::Number(v) = *self.peek() {
                self.bump();
                return Ok(Expr::Num(-v));
            }
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.primary()
    }

    fn primary(&mut self) -> PResult<Expr> {
        let pos = self.here();
        match self.peek().clone() {
            Tok::Number(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Str(s) => {
                self.bump();
                Ok(Expr::Str(Arc::from(s.as_str())))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                self.bump();
                match self.peek() {
                    Tok::LParen => self.call(name, pos),
                    Tok::Dot => {
                        self.bump();
                        let (field, fpos) = self.ident()?;
                        let field = Field::parse(&field)
                            .ok_or_else(|| syntax_at(fpos, format!("unknown field `{field}`")))?;
                        Ok(Expr::Field { object: name, field })
                    }
                    _ => Ok(Expr::Param(name)),
                }
            }
            other => Err(syntax_at(pos, format!("expected expression, found {other}"))),
        }
    }

    fn call(&mut self, name: String, pos: Pos) -> PResult<Expr> {
        self.expect(Tok::LParen)?;
        if let Some(builtin) = Builtin::parse(&name) {
            let (a, _) = self.ident()?;
            self.expect(Tok::Comma)?;
            let (b, _) = self.ident()?;
            self.expect(Tok::RParen)?;
            return Ok(Expr::Call { builtin, a, b });
        }
        let mut args = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                let at = self.here();
                args.push((self.expr()?, at));
                if !self.eat(&Tok::Comma) {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        let dist = match name.as_str() {
            "uniform" => {
                let [lo, hi] = two_numbers(&name, &args, pos)?;
                Distribution::UniformReal { lo, hi }
            }
            "range" => {
                let [lo, hi] = two_numbers(&name, &args, pos)?;
                if lo.fract() != 0.0 || hi.fract() != 0.0 {
                    return Err(syntax_at(pos, "`range` bounds must be integers"));
                }
                Distribution::UniformInt {
                    lo: lo as i64,
                    hi: hi as i64,
                }
            }
            "choice" => {
                if args.is_empty() {
                    return Err(syntax_at(pos, "`choice` needs at least one value"));
                }
                let mut values = Vec::with_capacity(args.len());
                for (arg, at) in args {
                    match arg {
                        Expr::Str(s) => values.push(s),
                        _ => return Err(syntax_at(at, "`choice` arguments must be strings")),
                    }
                }
                Distribution::Categorical { values }
            }
            other => return Err(syntax_at(pos, format!("unknown function `{other}`"))),
        };
        Ok(Expr::Sample(dist))
    }
}

fn two_numbers(name: &str, args: &[(Expr, Pos)], pos: Pos) -> PResult<[f64; 2]> {
    if args.len() != 2 {
        return Err(syntax_at(
            pos,
            format!("`{name}` takes 2 arguments, got {}", args.len()),
        ));
    }
    let mut out = [0.0; 2];
    for (slot, (arg, at)) in out.iter_mut().zip(args) {
        *slot = fold_constant(arg)
            .ok_or_else(|| syntax_at(*at, format!("`{name}` bounds must be constant numbers")))?;
    }
    Ok(out)
}

/// Evaluates a closed numeric expression, if it is one.
pub fn fold_constant(e: &Expr) -> Option<f64> {
    match e {
        Expr::Num(v) => Some(*v),
        Expr::Neg(inner) => fold_constant(inner).map(|v| -v),
        Expr::Binary { op, lhs, rhs } => {
            let (a, b) = (fold_constant(lhs)?, fold_constant(rhs)?);
            match op {
                BinOp::Add => Some(a + b),
                BinOp::Sub => Some(a - b),
                BinOp::Mul => Some(a * b),
                BinOp::Div if b != 0.0 => Some(a / b),
                BinOp::Div => None,
            }
        }
        _ => None,
    }
}

fn to_distribution(expr: Expr, at: Pos) -> PResult<Distribution> {
    match expr {
        Expr::Sample(d) => Ok(d),
        Expr::Str(s) => Ok(Distribution::Constant(Literal::Str(s))),
        other => fold_constant(&other)
            .map(|v| Distribution::Constant(Literal::Num(v)))
            .ok_or_else(|| syntax_at(at, "expected a distribution or a constant")),
    }
}

/// Checks that every identifier is declared before the statement that
/// references it.
fn check_declaration_order(stmts: &[Statement]) -> PResult<()> {
    let mut params: HashSet<&str> = HashSet::new();
    let mut objects: HashSet<&str> = HashSet::new();
    for stmt in stmts {
        let exprs: Vec<&Expr> = match stmt {
            Statement::Param(_) => Vec::new(),
            Statement::Object(o) => vec![&o.x, &o.y, &o.heading],
            Statement::Require(e) => vec![e],
        };
        for e in exprs {
            let mut missing: Option<String> = None;
            e.walk(&mut |node| {
                if missing.is_some() {
                    return;
                }
                match node {
                    Expr::Param(name) if !params.contains(name.as_str()) => missing = Some(name.clone()),
                    Expr::Field { object, .. } if !objects.contains(object.as_str()) => {
                        missing = Some(object.clone())
                    }
                    Expr::Call { a, b, .. } => {
                        for n in [a, b] {
                            if !objects.contains(n.as_str()) {
                                missing = Some(n.clone());
                                break;
                            }
                        }
                    }
                    _ => {}
                }
            });
            if let Some(name) = missing {
                return Err(DslError::Validation {
                    identifier: Some(name.clone()),
                    message: format!("`{name}` is used before it is declared"),
                });
            }
        }
        match stmt {
            Statement::Param(p) => {
                params.insert(p.name.as_str());
            }
            Statement::Object(o) => {
                objects.insert(o.name.as_str());
            }
            Statement::Require(_) => {}
        }
    }
    Ok(())
}

/// Parses source text into a program without semantic validation.
pub fn parse_unvalidated(source: &str) -> PResult<ScenarioProgram> {
    let tokens = tokenize(source)?;
    let mut parser = Parser { tokens, pos: 0 };
    let stmts = parser.statements()?;
    check_declaration_order(&stmts)?;
    let mut program = ScenarioProgram {
        params: Vec::new(),
        objects: Vec::new(),
        requires: Vec::new(),
        source_text: source.to_string(),
    };
    for stmt in stmts {
        match stmt {
            Statement::Param(p) => program.params.push(p),
            Statement::Object(o) => program.objects.push(o),
            Statement::Require(e) => program.requires.push(e),
        }
    }
    Ok(program)
}

/// Parses and validates a scenario program.
pub fn parse(source: &str) -> PResult<ScenarioProgram> {
    let program = parse_unvalidated(source)?;
    program.validate()?;
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_with_uniform() {
        let p = parse_unvalidated("param time = uniform(360, 1080)").unwrap();
        assert_eq!(
            p.params,
            vec![ParamDecl {
                name: "time".into(),
                dist: Distribution::UniformReal {
                    lo: 360.0,
                    hi: 1080.0
                }
            }]
        );
    }

    #[test]
    fn constant_folded_bounds() {
        let p = parse_unvalidated("param time = uniform(6*60, 18*60)").unwrap();
        assert_eq!(
            p.params[0].dist,
            Distribution::UniformReal {
                lo: 360.0,
                hi: 1080.0
            }
        );
    }

    #[test]
    fn empty_source_parses_but_fails_validation() {
        let p = parse_unvalidated("").unwrap();
        assert!(p.params.is_empty() && p.objects.is_empty() && p.requires.is_empty());
        match parse("") {
            Err(DslError::Validation { identifier, .. }) => {
                assert_eq!(identifier.as_deref(), Some("ego"))
            }
            other => panic!("expected missing-ego validation error, got {other:?}"),
        }
    }

    #[test]
    fn two_objects_two_requires() {
        let src = "ego = car(x: 0, y: 0, heading: 0)\nc0 = car(x: 3, y: 4, heading: 180)\nrequire dist(ego, c0) <= 20\nrequire dist(ego, c0) >= 5";
        let p = parse(src).unwrap();
        assert_eq!(p.objects.len(), 2);
        assert_eq!(p.requires.len(), 2);
        assert_eq!(
            p.requires[0],
            Expr::compare(
                CmpOp::Le,
                Expr::Call {
                    builtin: Builtin::Dist,
                    a: "ego".into(),
                    b: "c0".into()
                },
                Expr::Num(20.0)
            )
        );
    }

    #[test]
    fn syntax_error_has_line_number() {
        let err = parse("ego = car(x: 0, y: 0)\nrequire ego.x <= )").unwrap_err();
        match err {
            DslError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn use_before_declaration_is_rejected() {
        let err = parse("ego = car(x: other.x, y: 0)\nother = car(x: 1, y: 1)").unwrap_err();
        assert!(matches!(err, DslError::Validation { identifier: Some(ref n), .. } if n == "other"));
    }

    #[test]
    fn negative_literal_folds() {
        let p = parse_unvalidated("ego = car(x: -205.4, y: 3 - -2)").unwrap();
        assert_eq!(p.objects[0].x, Expr::Num(-205.4));
        assert_eq!(
            p.objects[0].y,
            Expr::Binary {
                op: BinOp::Sub,
                lhs: Box::new(Expr::Num(3.0)),
                rhs: Box::new(Expr::Num(-2.0))
            }
        );
    }

    #[test]
    fn membership_and_conjunction() {
        let p = parse(
            "ego = car(x: 0, y: 0)\nc = car(x: 0, y: 10)\nrequire c.model in {\"PRANGER\", \"ASEA\"} and c.x >= -1",
        )
        .unwrap();
        assert!(matches!(p.requires[0], Expr::And(..)));
    }

    #[test]
    fn multi_line_car_declaration() {
        let p = parse("ego = car(\n  x: 0,\n  y: 0,\n  color: (1, 2, 3)\n)\n").unwrap();
        assert_eq!(p.objects[0].color[1], Distribution::Constant(Literal::Num(2.0)));
    }
}
