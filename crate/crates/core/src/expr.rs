//! A small arithmetic expression language for config-defined dynamics,
//! bounding functions and input signals.
//!
//! Grammar (standard precedence, `^` binds tightest, then unary minus,
//! then `*` `/`, then `+` `-`; binary operators of equal precedence are
//! left-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' integer)*
//! atom   := number | symbol | ('sin' | 'cos') '(' expr ')' | '(' expr ')'
//! ```
//!
//! Symbols are `x<k>` (state), `y<k>` (measured output), `u<k>` (input),
//! `xl<k>` / `xu<k>` (lower/upper state bound) and `t` (time), all with
//! 1-based indices. Exponents are integer literals.
//!
//! Parsed expressions are immutable and evaluation is a pure function, so
//! values may be shared freely across threads.

use nalgebra::DVector;
use std::fmt;
use thiserror::Error;

/// A named quantity an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    /// `x<k>`, 0-based index.
    State(usize),
    /// `y<k>`, 0-based index.
    Output(usize),
    /// `u<k>`, 0-based index.
    Input(usize),
    /// `xl<k>`, 0-based index.
    StateLower(usize),
    /// `xu<k>`, 0-based index.
    StateUpper(usize),
    /// `t`.
    Time,
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::State(i) => write!(f, "x{}", i + 1),
            Symbol::Output(i) => write!(f, "y{}", i + 1),
            Symbol::Input(i) => write!(f, "u{}", i + 1),
            Symbol::StateLower(i) => write!(f, "xl{}", i + 1),
            Symbol::StateUpper(i) => write!(f, "xu{}", i + 1),
            Symbol::Time => write!(f, "t"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown identifier `{name}` at byte {pos}; valid symbols are x<k>, y<k>, u<k>, xl<k>, xu<k>, t")]
    UnknownIdentifier { pos: usize, name: String },
    #[error("symbol `{symbol}` is not available in this evaluation context")]
    SymbolUnavailable { symbol: String },
    #[error("division by zero")]
    DivisionByZero,
}

/// A parsed arithmetic expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Symbol),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
}

/// Values available to [`Expr::eval`]. Absent entries make the matching
/// symbols unavailable.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalContext<'a> {
    pub state: Option<&'a DVector<f64>>,
    pub output: Option<&'a DVector<f64>>,
    pub input: Option<&'a DVector<f64>>,
    pub state_lower: Option<&'a DVector<f64>>,
    pub state_upper: Option<&'a DVector<f64>>,
    pub time: Option<f64>,
}

impl<'a> EvalContext<'a> {
    fn lookup(&self, sym: Symbol) -> Result<f64, ExprError> {
        let fetch = |v: Option<&'a DVector<f64>>, i: usize| {
            v.and_then(|v| v.as_slice().get(i).copied())
                .ok_or_else(|| ExprError::SymbolUnavailable {
                    symbol: sym.to_string(),
                })
        };
        match sym {
            Symbol::State(i) => fetch(self.state, i),
            Symbol::Output(i) => fetch(self.output, i),
            Symbol::Input(i) => fetch(self.input, i),
            Symbol::StateLower(i) => fetch(self.state_lower, i),
            Symbol::StateUpper(i) => fetch(self.state_upper, i),
            Symbol::Time => self.time.ok_or_else(|| ExprError::SymbolUnavailable {
                symbol: sym.to_string(),
            }),
        }
    }
}

impl Expr {
    pub fn eval(&self, ctx: &EvalContext<'_>) -> Result<f64, ExprError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(sym) => ctx.lookup(*sym),
            Expr::Add(a, b) => Ok(a.eval(ctx)? + b.eval(ctx)?),
            Expr::Sub(a, b) => Ok(a.eval(ctx)? - b.eval(ctx)?),
            Expr::Mul(a, b) => Ok(a.eval(ctx)? * b.eval(ctx)?),
            Expr::Div(a, b) => {
                let d = b.eval(ctx)?;
                if d == 0.0 {
                    return Err(ExprError::DivisionByZero);
                }
                Ok(a.eval(ctx)? / d)
            }
            Expr::Neg(a) => Ok(-a.eval(ctx)?),
            Expr::Pow(a, e) => Ok(a.eval(ctx)?.powi(*e)),
            Expr::Sin(a) => Ok(a.eval(ctx)?.sin()),
            Expr::Cos(a) => Ok(a.eval(ctx)?.cos()),
        }
    }

    /// Collects every symbol referenced by the expression.
    pub fn symbols(&self) -> Vec<Symbol> {
        let mut out = Vec::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut Vec<Symbol>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(s) => out.push(*s),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_symbols(out);
                b.collect_symbols(out);
            }
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) => a.collect_symbols(out),
            Expr::Pow(a, _) => a.collect_symbols(out),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(_) | Expr::Var(_) | Expr::Sin(_) | Expr::Cos(_) => 5,
        }
    }
}

fn fmt_child(f: &mut fmt::Formatter<'_>, child: &Expr, min_prec: u8) -> fmt::Result {
    if child.precedence() < min_prec {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(s) => write!(f, "{s}"),
            Expr::Add(a, b) => {
                fmt_child(f, a, 1)?;
                write!(f, "+")?;
                fmt_child(f, b, 2)
            }
            Expr::Sub(a, b) => {
                fmt_child(f, a, 1)?;
                write!(f, "-")?;
                fmt_child(f, b, 2)
            }
            Expr::Mul(a, b) => {
                fmt_child(f, a, 2)?;
                write!(f, "*")?;
                fmt_child(f, b, 3)
            }
            Expr::Div(a, b) => {
                fmt_child(f, a, 2)?;
                write!(f, "/")?;
                fmt_child(f, b, 3)
            }
            Expr::Neg(a) => {
                write!(f, "-")?;
                fmt_child(f, a, 3)
            }
            Expr::Pow(a, e) => {
                fmt_child(f, a, 5)?;
                write!(f, "^{e}")
            }
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
        }
    }
}

/// Parses `text` into an expression tree.
pub fn parse_expression(text: &str) -> Result<Expr, ExprError> {
    let mut parser = Parser {
        bytes: text.as_bytes(),
        pos: 0,
    };
    let expr = parser.parse_expr()?;
    parser.skip_ws();
    if parser.pos != parser.bytes.len() {
        return Err(ExprError::Syntax {
            pos: parser.pos,
            message: format!("unexpected `{}`", parser.current_char()),
        });
    }
    Ok(expr)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn current_char(&self) -> String {
        match self.bytes.get(self.pos) {
            Some(b) => (*b as char).to_string(),
            None => "end of input".to_string(),
        }
    }

    fn expect(&mut self, byte: u8) -> Result<(), ExprError> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(ExprError::Syntax {
                pos: self.pos,
                message: format!("expected `{}`, found `{}`", byte as char, self.current_char()),
            })
        }
    }

    fn parse_expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.parse_term()?;
        while let Some(op) = self.peek() {
            match op {
                b'+' => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                b'-' => {
                    self.pos += 1;
                    let rhs = self.parse_term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.parse_unary()?;
        while let Some(op) = self.peek() {
            match op {
                b'*' => {
                    self.pos += 1;
                    let rhs = self.parse_unary()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                b'/' => {
                    self.pos += 1;
                    let rhs = self.parse_unary()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.parse_unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Expr, ExprError> {
        let mut base = self.parse_atom()?;
        while self.peek() == Some(b'^') {
            self.pos += 1;
            let exponent = self.parse_integer()?;
            base = Expr::Pow(Box::new(base), exponent);
        }
        Ok(base)
    }

    fn parse_integer(&mut self) -> Result<i32, ExprError> {
        self.skip_ws();
        let start = self.pos;
        if self.bytes.get(self.pos) == Some(&b'-') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(ExprError::Syntax {
                pos: self.pos,
                message: "expected integer exponent".to_string(),
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse().map_err(|_| ExprError::Syntax {
            pos: start,
            message: format!("exponent `{text}` out of range"),
        })
    }

    fn parse_atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.parse_expr()?;
                self.expect(b')')?;
                Ok(inner)
            }
            Some(b) if b.is_ascii_digit() => self.parse_number(),
            Some(b) if b.is_ascii_alphabetic() || b == b'_' => self.parse_identifier(),
            _ => Err(ExprError::Syntax {
                pos: self.pos,
                message: format!("expected value, found `{}`", self.current_char()),
            }),
        }
    }

    fn parse_number(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.bytes.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        // Scientific notation: only consume `e`/`E` when digits follow.
        if matches!(self.bytes.get(self.pos), Some(b'e') | Some(b'E')) {
            let mut probe = self.pos + 1;
            if matches!(self.bytes.get(probe), Some(b'+') | Some(b'-')) {
                probe += 1;
            }
            if self.bytes.get(probe).is_some_and(u8::is_ascii_digit) {
                self.pos = probe;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| ExprError::Syntax {
            pos: start,
            message: format!("invalid number `{text}`"),
        })?;
        Ok(Expr::Const(value))
    }

    fn parse_identifier(&mut self) -> Result<Expr, ExprError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        match name {
            "sin" | "cos" => {
                self.expect(b'(')?;
                let arg = self.parse_expr()?;
                self.expect(b')')?;
                Ok(if name == "sin" {
                    Expr::Sin(Box::new(arg))
                } else {
                    Expr::Cos(Box::new(arg))
                })
            }
            "t" => Ok(Expr::Var(Symbol::Time)),
            _ => {
                let sym = parse_symbol(name).ok_or_else(|| ExprError::UnknownIdentifier {
                    pos: start,
                    name: name.to_string(),
                })?;
                Ok(Expr::Var(sym))
            }
        }
    }
}

fn parse_symbol(name: &str) -> Option<Symbol> {
    let (prefix, index) = name.split_at(name.find(|c: char| c.is_ascii_digit())?);
    let idx: usize = index.parse().ok()?;
    if idx == 0 {
        return None;
    }
    let idx = idx - 1;
    match prefix {
        "x" => Some(Symbol::State(idx)),
        "y" => Some(Symbol::Output(idx)),
        "u" => Some(Symbol::Input(idx)),
        "xl" => Some(Symbol::StateLower(idx)),
        "xu" => Some(Symbol::StateUpper(idx)),
        _ => None,
    }
}
