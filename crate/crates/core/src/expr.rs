//! A small expression language for coefficient fields.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | atom
//! atom   := number | 't' | 'w' | 'x' | 'pi' | func '(' expr (',' expr)? ')' | '(' expr ')'
//! func   := sin | cos | exp | sqrt | abs | pow
//! ```
//!
//! `t` is time, `w` the current value of the Brownian driver and `x` the
//! spatial variable of multiplication-operator fields.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    T,
    W,
    X,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Sin(Box<Node>),
    Cos(Box<Node>),
    Exp(Box<Node>),
    Sqrt(Box<Node>),
    Abs(Box<Node>),
    Pow(Box<Node>, Box<Node>),
}

/// A parsed field expression in the variables `t`, `w` and `x`.
#[derive(Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expression(format!(
                "unexpected trailing input in {src:?}"
            )));
        }
        Ok(Self {
            source: src.to_string(),
            root,
        })
    }

    pub fn constant(v: f64) -> Self {
        Self {
            source: format!("{v:?}"),
            root: Node::Const(v),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, t: f64, w: f64, x: f64) -> f64 {
        eval(&self.root, t, w, x)
    }

    pub fn uses_w(&self) -> bool {
        uses(&self.root, &|n| matches!(n, Node::W))
    }

    pub fn uses_x(&self) -> bool {
        uses(&self.root, &|n| matches!(n, Node::X))
    }

    /// Constant value if the expression depends on no variable.
    pub fn as_constant(&self) -> Option<f64> {
        if uses(&self.root, &|n| matches!(n, Node::T | Node::W | Node::X)) {
            None
        } else {
            Some(eval(&self.root, 0.0, 0.0, 0.0))
        }
    }
}

fn uses(n: &Node, pred: &dyn Fn(&Node) -> bool) -> bool {
    if pred(n) {
        return true;
    }
    match n {
        Node::Const(_) | Node::T | Node::W | Node::X => false,
        Node::Neg(a) | Node::Sin(a) | Node::Cos(a) | Node::Exp(a) | Node::Sqrt(a) | Node::Abs(a) => {
            uses(a, pred)
        }
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
            uses(a, pred) || uses(b, pred)
        }
    }
}

fn eval(n: &Node, t: f64, w: f64, x: f64) -> f64 {
    match n {
        Node::Const(c) => *c,
        Node::T => t,
        Node::W => w,
        Node::X => x,
        Node::Neg(a) => -eval(a, t, w, x),
        Node::Add(a, b) => eval(a, t, w, x) + eval(b, t, w, x),
        Node::Sub(a, b) => eval(a, t, w, x) - eval(b, t, w, x),
        Node::Mul(a, b) => eval(a, t, w, x) * eval(b, t, w, x),
        Node::Div(a, b) => eval(a, t, w, x) / eval(b, t, w, x),
        Node::Sin(a) => eval(a, t, w, x).sin(),
        Node::Cos(a) => eval(a, t, w, x).cos(),
        Node::Exp(a) => eval(a, t, w, x).exp(),
        Node::Sqrt(a) => eval(a, t, w, x).sqrt(),
        Node::Abs(a) => eval(a, t, w, x).abs(),
        Node::Pow(a, b) => eval(a, t, w, x).powf(eval(b, t, w, x)),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s
                .parse::<f64>()
                .map_err(|_| Error::Expression(format!("bad number {s:?} in {src:?}")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/(),".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(Error::Expression(format!(
                "unexpected character {c:?} in {src:?}"
            )));
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn eat_op(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Op(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, c: char) -> Result<()> {
        if self.eat_op(c) {
            Ok(())
        } else {
            Err(Error::Expression(format!(
                "expected {c:?} at token {}",
                self.pos
            )))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat_op('-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat_op('/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat_op('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Node::Const(v))
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                match name.as_str() {
                    "t" => Ok(Node::T),
                    "w" => Ok(Node::W),
                    "x" => Ok(Node::X),
                    "pi" => Ok(Node::Const(std::f64::consts::PI)),
                    "sin" | "cos" | "exp" | "sqrt" | "abs" => {
                        self.expect_op('(')?;
                        let a = Box::new(self.expr()?);
                        self.expect_op(')')?;
                        Ok(match name.as_str() {
                            "sin" => Node::Sin(a),
                            "cos" => Node::Cos(a),
                            "exp" => Node::Exp(a),
                            "sqrt" => Node::Sqrt(a),
                            _ => Node::Abs(a),
                        })
                    }
                    "pow" => {
                        self.expect_op('(')?;
                        let a = Box::new(self.expr()?);
                        self.expect_op(',')?;
                        let b = Box::new(self.expr()?);
                        self.expect_op(')')?;
                        Ok(Node::Pow(a, b))
                    }
                    other => Err(Error::Expression(format!("unknown identifier {other:?}"))),
                }
            }
            other => Err(Error::Expression(format!(
                "unexpected token {other:?} at position {}",
                self.pos
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("0.2*sin(w) + 1").unwrap();
        assert!((e.eval(0.0, 1.0, 0.0) - (0.2 * 1f64.sin() + 1.0)).abs() < 1e-15);
        assert!(e.uses_w());
        assert!(!e.uses_x());
        let e = Expr::parse("exp(-t) * cos(2*w) - -3").unwrap();
        assert!((e.eval(0.5, 0.25, 0.0) - ((-0.5f64).exp() * 0.5f64.cos() + 3.0)).abs() < 1e-15);
        let e = Expr::parse("pow(x, -0.25) * (1 + 0.5*sin(w))").unwrap();
        assert!(e.uses_x());
        assert!((e.eval(0.0, 0.0, 16.0) - 0.5).abs() < 1e-15);
        assert_eq!(Expr::parse("2.5e-1").unwrap().as_constant(), Some(0.25));
        assert_eq!(Expr::parse("1 - 2 - 3").unwrap().as_constant(), Some(-4.0));
        assert_eq!(Expr::parse("8 / 2 / 2").unwrap().as_constant(), Some(2.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Expr::parse("sin(w").is_err());
        assert!(Expr::parse("foo(w)").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("1 $ 2").is_err());
        assert!(Expr::parse("(1)(2)").is_err());
    }
}
