//! A small arithmetic language for scalar plant nonlinearities `f(y)`.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := base ('^' factor)?
//! base   := number | 'y' | '(' expr ')' | fn '(' expr ')' | '-' factor
//! fn     := ln | exp | sin | cos | abs | sqrt
//! ```

use std::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown function '{name}' at {pos}")]
    UnknownFunction { pos: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("{func} of non-positive or negative argument {arg}")]
    Domain { func: &'static str, arg: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Ln,
    Exp,
    Sin,
    Cos,
    Abs,
    Sqrt,
}

impl Func {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "ln" => Func::Ln,
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Ln => "ln",
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
        }
    }

    fn apply(self, x: f64) -> Result<f64, EvalError> {
        Ok(match self {
            Func::Ln if x <= 0.0 => return Err(EvalError::Domain { func: "ln", arg: x }),
            Func::Sqrt if x < 0.0 => return Err(EvalError::Domain { func: "sqrt", arg: x }),
            Func::Ln => x.ln(),
            Func::Exp => x.exp(),
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Abs => x.abs(),
            Func::Sqrt => x.sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

/// Expression tree in the single free variable `y`.
#[derive(Debug, Clone, PartialEq)]
pub enum PlantExpr {
    Num(f64),
    Var,
    Neg(Box<PlantExpr>),
    Call(Func, Box<PlantExpr>),
    Bin(BinOp, Box<PlantExpr>, Box<PlantExpr>),
}

impl PlantExpr {
    pub fn eval(&self, y: f64) -> Result<f64, EvalError> {
        Ok(match self {
            PlantExpr::Num(v) => *v,
            PlantExpr::Var => y,
            PlantExpr::Neg(e) => -e.eval(y)?,
            PlantExpr::Call(f, e) => f.apply(e.eval(y)?)?,
            PlantExpr::Bin(op, l, r) => {
                let (a, b) = (l.eval(y)?, r.eval(y)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div if b == 0.0 => return Err(EvalError::DivisionByZero),
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                }
            }
        })
    }
}

/// Fully parenthesised rendering; reparses to an equivalent tree.
impl fmt::Display for PlantExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // `{:?}` keeps enough digits to reproduce the value exactly.
            PlantExpr::Num(v) => write!(f, "{v:?}"),
            PlantExpr::Var => write!(f, "y"),
            PlantExpr::Neg(e) => write!(f, "(-{e})"),
            PlantExpr::Call(func, e) => write!(f, "{}({e})", func.name()),
            PlantExpr::Bin(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
        }
    }
}

pub fn parse_plant(text: &str) -> Result<PlantExpr, ParseError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn syntax(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            pos: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.syntax(&format!("expected '{}'", c as char)))
        }
    }

    fn expr(&mut self) -> Result<PlantExpr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = PlantExpr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<PlantExpr, ParseError> {
        let mut lhs = self.factor()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = PlantExpr::Bin(op, Box::new(lhs), Box::new(self.factor()?));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<PlantExpr, ParseError> {
        let base = self.base()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exponent = self.factor()?;
            return Ok(PlantExpr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<PlantExpr, ParseError> {
        match self.peek() {
            None => Err(self.syntax("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(b'-') => {
                self.pos += 1;
                Ok(PlantExpr::Neg(Box::new(self.factor()?)))
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
                if name == "y" {
                    return Ok(PlantExpr::Var);
                }
                let func = Func::from_name(name).ok_or_else(|| ParseError::UnknownFunction {
                    pos: start,
                    name: name.to_string(),
                })?;
                self.expect(b'(')?;
                let arg = self.expr()?;
                self.expect(b')')?;
                Ok(PlantExpr::Call(func, Box::new(arg)))
            }
            Some(_) => Err(self.syntax("unexpected character")),
        }
    }

    fn number(&mut self) -> Result<PlantExpr, ParseError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
        };
        digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            digits(self);
        }
        if let Some(b'e' | b'E') = self.src.get(self.pos) {
            let save = self.pos;
            self.pos += 1;
            if let Some(b'+' | b'-') = self.src.get(self.pos) {
                self.pos += 1;
            }
            let exp_start = self.pos;
            digits(self);
            if self.pos == exp_start {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map(PlantExpr::Num)
            .map_err(|_| ParseError::Syntax {
                pos: start,
                message: format!("malformed number '{text}'"),
            })
    }
}
