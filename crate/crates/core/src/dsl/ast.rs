//! Abstract syntax tree for scenario programs.

use std::fmt;
use std::sync::Arc;

/// Car models a detector may be asked to find, in the order used as the
/// default `model` distribution.
pub const CAR_MODELS: [&str; 14] = [
    "BLISTA",
    "BUS",
    "NINEF",
    "ASEA",
    "BALLER",
    "BISON",
    "BUFFALO",
    "BOBCATXL",
    "DOMINATOR",
    "GRANGER",
    "JACKAL",
    "ORACLE",
    "PATRIOT",
    "PRANGER",
];

/// Weather conditions, for programs that declare a weather parameter.
pub const WEATHERS: [&str; 14] = [
    "NEUTRAL",
    "CLEAR",
    "EXTRASUNNY",
    "SMOG",
    "CLOUDS",
    "OVERCAST",
    "RAIN",
    "THUNDER",
    "CLEARING",
    "XMAS",
    "FOGGY",
    "SNOWLIGHT",
    "BLIZZARD",
    "SNOW",
];

/// A parsed scenario program.
///
/// Equality is structural: the retained source text is ignored.
#[derive(Debug, Clone)]
pub struct ScenarioProgram {
    pub params: Vec<ParamDecl>,
    pub objects: Vec<ObjectDecl>,
    pub requires: Vec<Expr>,
    pub source_text: String,
}

impl PartialEq for ScenarioProgram {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.objects == other.objects && self.requires == other.requires
    }
}

impl ScenarioProgram {
    pub fn object(&self, name: &str) -> Option<&ObjectDecl> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }

    /// The camera-carrying object. Only meaningful on validated programs.
    pub fn ego(&self) -> &ObjectDecl {
        &self.objects[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub dist: Distribution,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    /// Half-open `[lo, hi)`.
    UniformReal {
        lo: f64,
        hi: f64,
    },
    /// Closed `[lo, hi]`.
    UniformInt {
        lo: i64,
        hi: i64,
    },
    Categorical {
        values: Vec<Arc<str>>,
    },
    Constant(Literal),
}

impl Distribution {
    pub fn is_categorical(&self) -> bool {
        matches!(
            self,
            Distribution::Categorical { .. } | Distribution::Constant(Literal::Str(_))
        )
    }

    pub fn default_model() -> Self {
        Distribution::Categorical {
            values: CAR_MODELS.iter().map(|m| Arc::from(*m)).collect(),
        }
    }

    pub fn default_color() -> Self {
        Distribution::UniformInt { lo: 0, hi: 255 }
    }

    pub fn default_heading() -> Self {
        Distribution::UniformReal { lo: 0.0, hi: 360.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Num(f64),
    Str(Arc<str>),
}

/// A `car(...)` declaration.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDecl {
    pub name: String,
    pub x: Expr,
    pub y: Expr,
    pub heading: Expr,
    pub model: Distribution,
    pub color: [Distribution; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    X,
    Y,
    Heading,
    Model,
    ColorR,
    ColorG,
    ColorB,
}

impl Field {
    pub const ALL: [Field; 7] = [
        Field::X,
        Field::Y,
        Field::Heading,
        Field::Model,
        Field::ColorR,
        Field::ColorG,
        Field::ColorB,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Field::X => "x",
            Field::Y => "y",
            Field::Heading => "heading",
            Field::Model => "model",
            Field::ColorR => "colorR",
            Field::ColorG => "colorG",
            Field::ColorB => "colorB",
        }
    }

    pub fn parse(s: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.as_str() == s)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Builtin {
    /// Euclidean distance between two objects' positions (meters).
    Dist,
    /// Minimal angular difference between two headings, in `[0, 180]`.
    HeadingDiff,
    /// Whether the second object's center lies in the first one's view cone.
    VisibleFrom,
}

impl Builtin {
    pub fn as_str(self) -> &'static str {
        match self {
            Builtin::Dist => "dist",
            Builtin::HeadingDiff => "headingDiff",
            Builtin::VisibleFrom => "visibleFrom",
        }
    }

    pub fn parse(s: &str) -> Option<Builtin> {
        match s {
            "dist" => Some(Builtin::Dist),
            "headingDiff" => Some(Builtin::HeadingDiff),
            "visibleFrom" => Some(Builtin::VisibleFrom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
            CmpOp::Eq => "==",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Str(Arc<str>),
    /// Reference to a `param`.
    Param(String),
    /// Reference to an object's field, e.g. `otherCar.x`.
    Field {
        object: String,
        field: Field,
    },
    /// A fresh draw, e.g. `uniform(5, 20)` inside a field expression.
    Sample(Distribution),
    Neg(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Compare {
        op: CmpOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    /// Categorical membership, `expr in {"A", "B"}`.
    In {
        expr: Box<Expr>,
        values: Vec<Arc<str>>,
    },
    And(Box<Expr>, Box<Expr>),
    Call {
        builtin: Builtin,
        a: String,
        b: String,
    },
}

impl Expr {
    pub fn field(object: &str, field: Field) -> Expr {
        Expr::Field {
            object: object.to_string(),
            field,
        }
    }

    pub fn compare(op: CmpOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Compare {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn and(lhs: Expr, rhs: Expr) -> Expr {
        Expr::And(Box::new(lhs), Box::new(rhs))
    }

    /// Visits every node, parents before children.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Neg(e) => e.walk(f),
            Expr::Binary { lhs, rhs, .. } | Expr::Compare { lhs, rhs, .. } => {
                lhs.walk(f);
                rhs.walk(f);
            }
            Expr::And(lhs, rhs) => {
                lhs.walk(f);
                rhs.walk(f);
            }
            Expr::In { expr, .. } => expr.walk(f),
            _ => {}
        }
    }
}
