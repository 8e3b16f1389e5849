//! Arithmetic expressions for defining nonlinearity components and initial
//! histories from configuration text.
//!
//! Grammar, lowest to highest precedence:
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?          right-associative
//! atom  := number | var | func '(' expr ')' | '(' expr ')'
//! ```
//!
//! Variables are `x1..xN`, `xd1..xdN` (delayed state), `u` and `t`.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Parenthesis / unary-minus nesting limit; keeps recursion bounded on hostile input.
const MAX_DEPTH: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier '{name}' at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("unknown function '{name}' at offset {offset}")]
    UnknownFunction { offset: usize, name: String },
    #[error("unbound variable '{0}'")]
    Unbound(Var),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    /// `x<i>`, 1-based.
    X(usize),
    /// `xd<i>`, 1-based.
    Xd(usize),
    U,
    T,
}

impl Var {
    /// 1-based state index, if the variable refers to one.
    pub fn index(self) -> Option<usize> {
        match self {
            Var::X(i) | Var::Xd(i) => Some(i),
            Var::U | Var::T => None,
        }
    }

    fn from_name(name: &str) -> Option<Var> {
        let index = |digits: &str| -> Option<usize> {
            if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
                return None;
            }
            digits.parse().ok()
        };
        match name {
            "u" => Some(Var::U),
            "t" => Some(Var::T),
            _ => {
                if let Some(rest) = name.strip_prefix("xd") {
                    index(rest).map(Var::Xd)
                } else if let Some(rest) = name.strip_prefix('x') {
                    index(rest).map(Var::X)
                } else {
                    None
                }
            }
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "x{i}"),
            Var::Xd(i) => write!(f, "xd{i}"),
            Var::U => f.write_str("u"),
            Var::T => f.write_str("t"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Abs,
}

impl Func {
    pub const ALL: [Func; 8] = [
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Tanh,
        Func::Exp,
        Func::Ln,
        Func::Sqrt,
        Func::Abs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Func::ALL.into_iter().find(|f| f.name() == name)
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Tan => v.tan(),
            Func::Tanh => v.tanh(),
            Func::Exp => v.exp(),
            Func::Ln => v.ln(),
            Func::Sqrt => v.sqrt(),
            Func::Abs => v.abs(),
        }
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

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Call(Func, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

/// Fully parenthesized form; `parse` reads it back to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 => write!(f, "(0-{})", -v),
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Call(func, e) => write!(f, "{}({e})", func.name()),
            Expr::Binary(op, l, r) => write!(f, "({l}{}{r})", op.symbol()),
        }
    }
}

/// Variable lookup used by [`eval`].
pub trait Env {
    fn lookup(&self, var: Var) -> Option<f64>;
}

impl<F: Fn(Var) -> Option<f64>> Env for F {
    fn lookup(&self, var: Var) -> Option<f64> {
        self(var)
    }
}

pub fn eval(e: &Expr, env: &impl Env) -> Result<f64, ExprError> {
    Ok(match e {
        Expr::Num(v) => *v,
        Expr::Var(v) => env.lookup(*v).ok_or(ExprError::Unbound(*v))?,
        Expr::Neg(inner) => -eval(inner, env)?,
        Expr::Call(func, arg) => func.apply(eval(arg, env)?),
        Expr::Binary(op, l, r) => {
            let (a, b) = (eval(l, env)?, eval(r, env)?);
            match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
                BinOp::Pow => a.powf(b),
            }
        }
    })
}

pub fn free_vars(e: &Expr) -> BTreeSet<Var> {
    fn walk(e: &Expr, out: &mut BTreeSet<Var>) {
        match e {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                out.insert(*v);
            }
            Expr::Neg(inner) | Expr::Call(_, inner) => walk(inner, out),
            Expr::Binary(_, l, r) => {
                walk(l, out);
                walk(r, out);
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(e, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn next_token(&mut self) -> Result<(usize, Tok), ExprError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&b) = bytes.get(start) else {
            return Ok((start, Tok::End));
        };
        let tok = match b {
            b'0'..=b'9' | b'.' => {
                let mut end = start;
                while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                    end += 1;
                }
                if end < bytes.len() && matches!(bytes[end], b'e' | b'E') {
                    let mut k = end + 1;
                    if k < bytes.len() && matches!(bytes[k], b'+' | b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        while k < bytes.len() && bytes[k].is_ascii_digit() {
                            k += 1;
                        }
                        end = k;
                    }
                }
                let text = &self.src[start..end];
                let value = text.parse::<f64>().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("malformed number '{text}'"),
                })?;
                self.pos = end;
                Tok::Num(value)
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = start;
                while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                    end += 1;
                }
                self.pos = end;
                Tok::Ident(self.src[start..end].to_string())
            }
            b'+' | b'-' | b'*' | b'/' | b'^' => {
                self.pos += 1;
                Tok::Op(b as char)
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            _ => {
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return Err(ExprError::Syntax {
                    offset: start,
                    message: format!("unexpected character '{ch}'"),
                });
            }
        };
        Ok((start, tok))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    offset: usize,
    depth: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, ExprError> {
        let mut lexer = Lexer { src, pos: 0 };
        let (offset, tok) = lexer.next_token()?;
        Ok(Parser {
            lexer,
            tok,
            offset,
            depth: 0,
        })
    }

    fn bump(&mut self) -> Result<(), ExprError> {
        let (offset, tok) = self.lexer.next_token()?;
        self.tok = tok;
        self.offset = offset;
        Ok(())
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ExprError> {
        Err(ExprError::Syntax {
            offset: self.offset,
            message: message.into(),
        })
    }

    fn enter(&mut self) -> Result<(), ExprError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return self.error("expression nested too deeply");
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Tok::Op(c @ ('+' | '-')) = self.tok {
            self.bump()?;
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Tok::Op(c @ ('*' | '/')) = self.tok {
            self.bump()?;
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.tok == Tok::Op('-') {
            self.enter()?;
            self.bump()?;
            let inner = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.tok == Tok::Op('^') {
            self.enter()?;
            self.bump()?;
            let exponent = self.unary()?;
            self.depth -= 1;
            return Ok(Expr::Binary(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn parenthesized(&mut self) -> Result<Expr, ExprError> {
        self.enter()?;
        self.bump()?;
        let inner = self.expr()?;
        if self.tok != Tok::RParen {
            return self.error("expected ')'");
        }
        self.bump()?;
        self.depth -= 1;
        Ok(inner)
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.tok.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Num(v))
            }
            Tok::LParen => self.parenthesized(),
            Tok::Ident(name) => {
                let offset = self.offset;
                self.bump()?;
                if self.tok == Tok::LParen {
                    let func = Func::from_name(&name)
                        .ok_or(ExprError::UnknownFunction { offset, name })?;
                    let arg = self.parenthesized()?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                if Func::from_name(&name).is_some() {
                    return Err(ExprError::Syntax {
                        offset: self.offset,
                        message: format!("expected '(' after function '{name}'"),
                    });
                }
                Var::from_name(&name)
                    .map(Expr::Var)
                    .ok_or(ExprError::UnknownIdentifier { offset, name })
            }
            Tok::Op(c) => self.error(format!("unexpected operator '{c}'")),
            Tok::RParen => self.error("unexpected ')'"),
            Tok::End => self.error("unexpected end of input"),
        }
    }
}

pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let mut p = Parser::new(text)?;
    let e = p.expr()?;
    if p.tok != Tok::End {
        return p.error("unexpected trailing input");
    }
    Ok(e)
}
