//! Small expression language for coefficient definitions.
//!
//! Coefficients are not arbitrary user code: they are closed-form expression
//! trees over the variables `x1..xP` (fast spatial variable, 1-periodic use),
//! `y1..yQ` (solution value) and `z11..zQP` (solution gradient), numeric
//! literals, `pi`, and the functions `sin`, `cos`, `exp`, `sqrt`, plus
//! `+ - * / ^` and unary minus. A config file therefore fully determines a
//! run.
//!
//! For hot loops the tree is compiled once into a flat stack program
//! ([`Program`]); evaluation never allocates.

use crate::error::{HomError, Result};
use std::fmt;

/// Variable reference. Indices are zero-based internally; the surface syntax
/// is one-based (`x1`, `y2`, `z11`, ...). `x`, `y`, `z` alias `x1`, `y1`,
/// `z11`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    X(usize),
    Y(usize),
    /// `Z(j, l)` refers to the (j, l) entry of the Q×P gradient matrix.
    Z(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Sqrt(Box<Expr>),
}

impl Expr {
    pub fn constant(v: f64) -> Self {
        Expr::Const(v)
    }

    pub fn zero() -> Self {
        Expr::Const(0.0)
    }

    /// Parse an expression from its textual form.
    pub fn parse(src: &str) -> Result<Expr> {
        Parser::new(src).parse()
    }

    /// Highest x/y index and z index pair used, as (x_count, y_count, z_rows, z_cols).
    pub fn var_extent(&self) -> (usize, usize, usize, usize) {
        let mut e = (0, 0, 0, 0);
        self.walk(&mut |node| {
            if let Expr::Var(v) = node {
                match *v {
                    Var::X(i) => e.0 = e.0.max(i + 1),
                    Var::Y(j) => e.1 = e.1.max(j + 1),
                    Var::Z(j, l) => {
                        e.2 = e.2.max(j + 1);
                        e.3 = e.3.max(l + 1);
                    }
                }
            }
        });
        e
    }

    pub fn depends_on_x(&self) -> bool {
        let mut dep = false;
        self.walk(&mut |n| {
            if let Expr::Var(Var::X(_)) = n {
                dep = true;
            }
        });
        dep
    }

    pub fn depends_on_y(&self) -> bool {
        let mut dep = false;
        self.walk(&mut |n| {
            if let Expr::Var(Var::Y(_)) = n {
                dep = true;
            }
        });
        dep
    }

    pub fn depends_on_z(&self) -> bool {
        let mut dep = false;
        self.walk(&mut |n| {
            if let Expr::Var(Var::Z(_, _)) = n {
                dep = true;
            }
        });
        dep
    }

    fn walk(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Const(_) | Expr::Var(_) => {}
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.walk(f);
                b.walk(f);
            }
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) | Expr::Sqrt(a) => a.walk(f),
        }
    }

    /// Tree-walking evaluation. Convenient for cold paths; hot paths go
    /// through [`Program`].
    pub fn eval(&self, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
        match self {
            Expr::Const(v) => *v,
            Expr::Var(Var::X(i)) => x[*i],
            Expr::Var(Var::Y(j)) => y[*j],
            Expr::Var(Var::Z(j, l)) => z[*j * zp_cols(x, z) + *l],
            Expr::Add(a, b) => a.eval(x, y, z) + b.eval(x, y, z),
            Expr::Sub(a, b) => a.eval(x, y, z) - b.eval(x, y, z),
            Expr::Mul(a, b) => a.eval(x, y, z) * b.eval(x, y, z),
            Expr::Div(a, b) => a.eval(x, y, z) / b.eval(x, y, z),
            Expr::Pow(a, b) => a.eval(x, y, z).powf(b.eval(x, y, z)),
            Expr::Neg(a) => -a.eval(x, y, z),
            Expr::Sin(a) => a.eval(x, y, z).sin(),
            Expr::Cos(a) => a.eval(x, y, z).cos(),
            Expr::Exp(a) => a.eval(x, y, z).exp(),
            Expr::Sqrt(a) => a.eval(x, y, z).sqrt(),
        }
    }

    /// Compile to a stack program. `p_dim` fixes the z-row stride.
    pub fn compile(&self, p_dim: usize) -> Program {
        let mut ops = Vec::new();
        self.emit(p_dim, &mut ops);
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Push(_) | Op::LoadX(_) | Op::LoadY(_) | Op::LoadZ(_) => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Pow => depth -= 1,
                _ => {}
            }
            max_depth = max_depth.max(depth);
        }
        Program { ops, max_depth }
    }

    fn emit(&self, p: usize, ops: &mut Vec<Op>) {
        match self {
            Expr::Const(v) => ops.push(Op::Push(*v)),
            Expr::Var(Var::X(i)) => ops.push(Op::LoadX(*i as u8)),
            Expr::Var(Var::Y(j)) => ops.push(Op::LoadY(*j as u8)),
            Expr::Var(Var::Z(j, l)) => ops.push(Op::LoadZ((j * p + l) as u8)),
            Expr::Add(a, b) => {
                a.emit(p, ops);
                b.emit(p, ops);
                ops.push(Op::Add);
            }
            Expr::Sub(a, b) => {
                a.emit(p, ops);
                b.emit(p, ops);
                ops.push(Op::Sub);
            }
            Expr::Mul(a, b) => {
                a.emit(p, ops);
                b.emit(p, ops);
                ops.push(Op::Mul);
            }
            Expr::Div(a, b) => {
                a.emit(p, ops);
                b.emit(p, ops);
                ops.push(Op::Div);
            }
            Expr::Pow(a, b) => {
                a.emit(p, ops);
                b.emit(p, ops);
                ops.push(Op::Pow);
            }
            Expr::Neg(a) => {
                a.emit(p, ops);
                ops.push(Op::Neg);
            }
            Expr::Sin(a) => {
                a.emit(p, ops);
                ops.push(Op::Sin);
            }
            Expr::Cos(a) => {
                a.emit(p, ops);
                ops.push(Op::Cos);
            }
            Expr::Exp(a) => {
                a.emit(p, ops);
                ops.push(Op::Exp);
            }
            Expr::Sqrt(a) => {
                a.emit(p, ops);
                ops.push(Op::Sqrt);
            }
        }
    }
}

// z-row stride recovery for tree eval: callers pass a dense row-major Q×P
// slice; the stride is not recoverable from the slice alone, so tree eval is
// only valid when P is the x arity. Hot paths use Program, which bakes the
// stride in. Tree eval with z is used only where P == x.len().
fn zp_cols(x: &[f64], _z: &[f64]) -> usize {
    x.len()
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Var(Var::X(i)) => write!(f, "x{}", i + 1),
            Expr::Var(Var::Y(j)) => write!(f, "y{}", j + 1),
            Expr::Var(Var::Z(j, l)) => write!(f, "z{}{}", j + 1, l + 1),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Sqrt(a) => write!(f, "sqrt({a})"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Push(f64),
    LoadX(u8),
    LoadY(u8),
    /// Flattened index j*P + l into the gradient row-major storage.
    LoadZ(u8),
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
}

/// Compiled stack program. Stack never exceeds `max_depth` (bounded by the
/// tree depth, in practice < 16).
#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    max_depth: usize,
}

impl Program {
    /// Evaluate at a single point. `z` is the row-major Q×P gradient (empty
    /// slice when the coefficient takes no z argument).
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
        let mut stack = [0.0f64; 32];
        debug_assert!(self.max_depth <= 32);
        let mut top = 0usize;
        for op in &self.ops {
            match *op {
                Op::Push(v) => {
                    stack[top] = v;
                    top += 1;
                }
                Op::LoadX(i) => {
                    stack[top] = x[i as usize];
                    top += 1;
                }
                Op::LoadY(j) => {
                    stack[top] = y[j as usize];
                    top += 1;
                }
                Op::LoadZ(k) => {
                    stack[top] = z[k as usize];
                    top += 1;
                }
                Op::Add => {
                    top -= 1;
                    stack[top - 1] += stack[top];
                }
                Op::Sub => {
                    top -= 1;
                    stack[top - 1] -= stack[top];
                }
                Op::Mul => {
                    top -= 1;
                    stack[top - 1] *= stack[top];
                }
                Op::Div => {
                    top -= 1;
                    stack[top - 1] /= stack[top];
                }
                Op::Pow => {
                    top -= 1;
                    stack[top - 1] = stack[top - 1].powf(stack[top]);
                }
                Op::Neg => stack[top - 1] = -stack[top - 1],
                Op::Sin => stack[top - 1] = stack[top - 1].sin(),
                Op::Cos => stack[top - 1] = stack[top - 1].cos(),
                Op::Exp => stack[top - 1] = stack[top - 1].exp(),
                Op::Sqrt => stack[top - 1] = stack[top - 1].sqrt(),
            }
        }
        stack[0]
    }

    /// Evaluate over `n` points given per-variable column accessors; each
    /// accessor slice has either length `n` or length 1 (broadcast).
    pub fn eval_batch(
        &self,
        n: usize,
        x_cols: &[&[f64]],
        y_cols: &[&[f64]],
        z_cols: &[&[f64]],
        out: &mut Vec<f64>,
    ) {
        out.clear();
        out.reserve(n);
        let mut xbuf = [0.0f64; 8];
        let mut ybuf = [0.0f64; 8];
        let mut zbuf = [0.0f64; 16];
        for i in 0..n {
            for (k, col) in x_cols.iter().enumerate() {
                xbuf[k] = col[if col.len() == 1 { 0 } else { i }];
            }
            for (k, col) in y_cols.iter().enumerate() {
                ybuf[k] = col[if col.len() == 1 { 0 } else { i }];
            }
            for (k, col) in z_cols.iter().enumerate() {
                zbuf[k] = col[if col.len() == 1 { 0 } else { i }];
            }
            out.push(self.eval(&xbuf[..x_cols.len()], &ybuf[..y_cols.len()], &zbuf[..z_cols.len()]));
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn parse(mut self) -> Result<Expr> {
        let e = self.expr()?;
        self.skip_ws();
        if self.pos != self.src.len() {
            return Err(HomError::usage(format!(
                "unexpected trailing input at byte {} of expression",
                self.pos
            )));
        }
        Ok(e)
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

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(Expr::Neg(Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            // right-associative, exponent may itself be unary-negated
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(HomError::usage("expected `)` in expression"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            other => Err(HomError::usage(format!(
                "unexpected token {:?} in expression",
                other.map(|b| b as char)
            ))),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E')
                && self.pos > start
                && self
                    .src
                    .get(self.pos + 1)
                    .is_some_and(|&d| d.is_ascii_digit() || d == b'+' || d == b'-')
            {
                self.pos += 2;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| HomError::usage(format!("bad numeric literal `{text}`")))
    }

    fn ident(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        match name {
            "pi" => return Ok(Expr::Const(std::f64::consts::PI)),
            "x" => return Ok(Expr::Var(Var::X(0))),
            "y" => return Ok(Expr::Var(Var::Y(0))),
            "z" => return Ok(Expr::Var(Var::Z(0, 0))),
            "sin" | "cos" | "exp" | "sqrt" => {
                if self.peek() != Some(b'(') {
                    return Err(HomError::usage(format!("function `{name}` needs `(`")));
                }
                self.pos += 1;
                let arg = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(HomError::usage(format!("unclosed `{name}(`")));
                }
                self.pos += 1;
                let b = Box::new(arg);
                return Ok(match name {
                    "sin" => Expr::Sin(b),
                    "cos" => Expr::Cos(b),
                    "exp" => Expr::Exp(b),
                    _ => Expr::Sqrt(b),
                });
            }
            _ => {}
        }
        // indexed variables: x3, y2, z12
        let (head, digits) = name.split_at(1);
        let all_digits = !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit());
        match head {
            "x" if all_digits => {
                let i: usize = digits.parse().unwrap();
                if i == 0 {
                    return Err(HomError::usage("variable indices are 1-based"));
                }
                Ok(Expr::Var(Var::X(i - 1)))
            }
            "y" if all_digits => {
                let j: usize = digits.parse().unwrap();
                if j == 0 {
                    return Err(HomError::usage("variable indices are 1-based"));
                }
                Ok(Expr::Var(Var::Y(j - 1)))
            }
            "z" if all_digits && digits.len() == 2 => {
                let j = (digits.as_bytes()[0] - b'0') as usize;
                let l = (digits.as_bytes()[1] - b'0') as usize;
                if j == 0 || l == 0 {
                    return Err(HomError::usage("z indices are 1-based"));
                }
                Ok(Expr::Var(Var::Z(j - 1, l - 1)))
            }
            _ => Err(HomError::usage(format!("unknown identifier `{name}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn parses_and_evaluates() {
        let e = Expr::parse("2 + sin(2*pi*x)").unwrap();
        let v = e.eval(&[0.25], &[], &[]);
        assert!((v - 3.0).abs() < 1e-14);
    }

    #[test]
    fn indexed_variables() {
        let e = Expr::parse("x2 * y1 + z12").unwrap();
        // P = 2 so z12 is flat index 0*2+1 = 1
        let p = e.compile(2);
        let v = p.eval(&[7.0, 3.0], &[2.0], &[10.0, 20.0]);
        assert!((v - 26.0).abs() < 1e-13);
    }

    #[test]
    fn precedence_and_unary() {
        let e = Expr::parse("-2*x + 3^2").unwrap();
        let v = e.eval(&[1.5], &[], &[]);
        assert!((v - 6.0).abs() < 1e-13);
    }

    #[test]
    fn compiled_matches_tree() {
        let e = Expr::parse("sqrt(2 + sin(2*pi*x)) * cos(y) - 0.5*z").unwrap();
        let prog = e.compile(1);
        let (x, y, z) = ([0.3], [0.7], [1.2]);
        let a = e.eval(&x, &y, &z);
        let b = prog.eval(&x, &y, &z);
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        assert!(a.is_finite());
        let expected = (2.0 + (2.0 * PI * 0.3).sin()).sqrt() * 0.7f64.cos() - 0.6;
        assert!((a - expected).abs() < 1e-14);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Expr::parse("sin(").is_err());
        assert!(Expr::parse("x + ").is_err());
        assert!(Expr::parse("foo(x)").is_err());
        assert!(Expr::parse("x0").is_err());
    }

    #[test]
    fn dependence_flags() {
        let e = Expr::parse("sin(2*pi*x1)*y1 + 1").unwrap();
        assert!(e.depends_on_x());
        assert!(e.depends_on_y());
        assert!(!e.depends_on_z());
        assert_eq!(e.var_extent(), (1, 1, 0, 0));
    }
}
