//! Evaluation and forward-mode gradients of barrier expressions.
//!
//! Non-differentiable points follow fixed subgradient rules: `abs'(0) = 0`
//! and `min`/`max` take the derivative of their first argument on ties.

use std::collections::BTreeMap;

use thiserror::Error;

use super::ast::{BinOp, Expr, Func};

pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("state index x[{index}] out of range for state dimension {dim}")]
    StateIndex { index: usize, dim: usize },
    #[error("missing parameter p.{0}")]
    MissingParam(String),
    #[error("domain error: {0}")]
    Domain(String),
}

impl EvalError {
    pub fn is_domain(&self) -> bool {
        matches!(self, EvalError::Domain(_))
    }
}

/// Value plus tangent vector. An empty tangent means value-only evaluation.
#[derive(Debug, Clone)]
struct Dual {
    v: f64,
    d: Vec<f64>,
}

impl Dual {
    fn constant(v: f64, n: usize) -> Dual {
        Dual { v, d: vec![0.0; n] }
    }

    fn map(self, v: f64, scale: f64) -> Dual {
        Dual { v, d: self.d.into_iter().map(|di| di * scale).collect() }
    }

    fn is_constant(&self) -> bool {
        self.d.iter().all(|&di| di == 0.0)
    }
}

fn domain(msg: impl Into<String>) -> EvalError {
    EvalError::Domain(msg.into())
}

fn finite(value: Dual, what: &str) -> Result<Dual, EvalError> {
    if value.v.is_finite() && value.d.iter().all(|d| d.is_finite()) {
        Ok(value)
    } else {
        Err(domain(format!("non-finite result in {what}")))
    }
}

struct Evaluator<'a> {
    x: &'a [f64],
    params: &'a Params,
    tangents: usize,
}

impl Evaluator<'_> {
    fn eval(&self, e: &Expr) -> Result<Dual, EvalError> {
        let n = self.tangents;
        match e {
            Expr::Num(v) => Ok(Dual::constant(*v, n)),
            Expr::State(i) => {
                let v = *self.x.get(*i).ok_or(EvalError::StateIndex { index: *i, dim: self.x.len() })?;
                let mut d = vec![0.0; n];
                if n > 0 {
                    d[*i] = 1.0;
                }
                Ok(Dual { v, d })
            }
            Expr::Param(p) => {
                let v = *self.params.get(p).ok_or_else(|| EvalError::MissingParam(p.clone()))?;
                Ok(Dual::constant(v, n))
            }
            Expr::Neg(a) => {
                let a = self.eval(a)?;
                let v = -a.v;
                Ok(a.map(v, -1.0))
            }
            Expr::Binary(op, l, r) => {
                let a = self.eval(l)?;
                let b = self.eval(r)?;
                self.binary(*op, a, b)
            }
            Expr::Call(func, args) => {
                let mut vals = args.iter().map(|a| self.eval(a)).collect::<Result<Vec<_>, _>>()?;
                if *func == Func::Min || *func == Func::Max {
                    let b = vals.pop().expect("binary function");
                    let a = vals.pop().expect("binary function");
                    let first = match func {
                        Func::Min => a.v <= b.v,
                        _ => a.v >= b.v,
                    };
                    return Ok(if first { a } else { b });
                }
                let a = vals.pop().expect("unary function");
                self.unary(*func, a)
            }
        }
    }

    fn binary(&self, op: BinOp, a: Dual, b: Dual) -> Result<Dual, EvalError> {
        let out = match op {
            BinOp::Add => Dual { v: a.v + b.v, d: zip(&a.d, &b.d, |x, y| x + y) },
            BinOp::Sub => Dual { v: a.v - b.v, d: zip(&a.d, &b.d, |x, y| x - y) },
            BinOp::Mul => Dual { v: a.v * b.v, d: zip(&a.d, &b.d, |x, y| x * b.v + a.v * y) },
            BinOp::Div => {
                if b.v == 0.0 {
                    return Err(domain("division by zero"));
                }
                let q = a.v / b.v;
                Dual { v: q, d: zip(&a.d, &b.d, |x, y| (x - q * y) / b.v) }
            }
            BinOp::Pow => return pow(a, b),
        };
        finite(out, op.symbol())
    }

    fn unary(&self, f: Func, a: Dual) -> Result<Dual, EvalError> {
        let x = a.v;
        let out = match f {
            Func::Sin => a.map(x.sin(), x.cos()),
            Func::Cos => a.map(x.cos(), -x.sin()),
            Func::Exp => {
                let e = x.exp();
                a.map(e, e)
            }
            Func::Ln => {
                if x <= 0.0 {
                    return Err(domain(format!("ln of non-positive value {x}")));
                }
                a.map(x.ln(), 1.0 / x)
            }
            Func::Sqrt => {
                if x < 0.0 {
                    return Err(domain(format!("sqrt of negative value {x}")));
                }
                let s = x.sqrt();
                if a.is_constant() {
                    a.map(s, 0.0)
                } else {
                    a.map(s, 0.5 / s)
                }
            }
            Func::Abs => {
                let sign = if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                a.map(x.abs(), sign)
            }
            Func::Tanh => {
                let t = x.tanh();
                a.map(t, 1.0 - t * t)
            }
            Func::Min | Func::Max => unreachable!("handled by caller"),
        };
        finite(out, f.name())
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn pow(a: Dual, b: Dual) -> Result<Dual, EvalError> {
    if a.v == 0.0 && b.v < 0.0 {
        return Err(domain("zero raised to a negative power"));
    }
    if a.v < 0.0 && b.v.fract() != 0.0 {
        return Err(domain(format!("negative base {} with non-integer exponent {}", a.v, b.v)));
    }
    let v = a.v.powf(b.v);
    let scale = if b.v == 0.0 || a.is_constant() { 0.0 } else { b.v * a.v.powf(b.v - 1.0) };
    let mut d: Vec<f64> = a.d.iter().map(|x| x * scale).collect();
    if !b.is_constant() {
        if a.v <= 0.0 {
            return Err(domain("variable exponent requires a positive base"));
        }
        let lg = v * a.v.ln();
        for (di, bi) in d.iter_mut().zip(&b.d) {
            *di += lg * bi;
        }
    }
    finite(Dual { v, d }, "^")
}

/// Value of `h(x)`.
pub fn eval_barrier(expr: &Expr, x: &[f64], params: &Params) -> Result<f64, EvalError> {
    Evaluator { x, params, tangents: 0 }.eval(expr).map(|d| d.v)
}

/// Gradient of `h` with respect to `x`.
pub fn grad_barrier(expr: &Expr, x: &[f64], params: &Params) -> Result<Vec<f64>, EvalError> {
    eval_with_gradient(expr, x, params).map(|(_, g)| g)
}

pub fn eval_with_gradient(expr: &Expr, x: &[f64], params: &Params) -> Result<(f64, Vec<f64>), EvalError> {
    let d = Evaluator { x, params, tangents: x.len() }.eval(expr)?;
    Ok((d.v, d.d))
}
