//! Scalar fields and smooth maps as expression trees with exact forward-mode
//! differentiation.
//!
//! The expression grammar is deliberately closed: decimal constants, the
//! built-in constant `pi`, variables `x1..xn`, binary `+ - * /`, integer
//! powers `^k`, and the analytic primitives `sin cos exp tanh`. Every value
//! the pipeline differentiates (fields, metrics-adjusted gradients, map
//! components, Lyapunov functions) goes through [`Jet1`] or [`Jet2`], so
//! gradients, Jacobians and Hessians are exact up to rounding; Hessians are
//! symmetric by construction because only the lower triangle is stored.

mod jet;
mod parse;

pub use jet::{Jet1, Jet2};
pub use parse::parse;

use crate::linalg::Mat;
use crate::real::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("expression uses variable x{0} but the point has dimension {1}")]
    Arity(usize, usize),
}

/// Expression tree. Variables are zero-based internally; the surface syntax
/// `x1..xn` is shifted on parse.
#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Const(f64),
    Var(usize),
    Add(Box<Expression>, Box<Expression>),
    Sub(Box<Expression>, Box<Expression>),
    Mul(Box<Expression>, Box<Expression>),
    Div(Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, i32),
    Neg(Box<Expression>),
    Sin(Box<Expression>),
    Cos(Box<Expression>),
    Exp(Box<Expression>),
    Tanh(Box<Expression>),
}

impl Expression {
    /// Highest variable index used, plus one (0 for constant expressions).
    pub fn min_arity(&self) -> usize {
        match self {
            Expression::Const(_) => 0,
            Expression::Var(i) => i + 1,
            Expression::Add(a, b)
            | Expression::Sub(a, b)
            | Expression::Mul(a, b)
            | Expression::Div(a, b) => a.min_arity().max(b.min_arity()),
            Expression::Pow(a, _) => a.min_arity(),
            Expression::Neg(a)
            | Expression::Sin(a)
            | Expression::Cos(a)
            | Expression::Exp(a)
            | Expression::Tanh(a) => a.min_arity(),
        }
    }

    pub fn eval<T: Real>(&self, p: &[T]) -> Result<T, ExprError> {
        Ok(match self {
            Expression::Const(c) => T::of(*c),
            Expression::Var(i) => {
                *p.get(*i).ok_or(ExprError::Arity(*i + 1, p.len()))?
            }
            Expression::Add(a, b) => a.eval(p)? + b.eval(p)?,
            Expression::Sub(a, b) => a.eval(p)? - b.eval(p)?,
            Expression::Mul(a, b) => a.eval(p)? * b.eval(p)?,
            Expression::Div(a, b) => {
                let d = b.eval(p)?;
                if d == T::zero() {
                    return Err(ExprError::Eval("division by zero".into()));
                }
                a.eval(p)? / d
            }
            Expression::Pow(a, k) => {
                let base = a.eval(p)?;
                if *k < 0 && base == T::zero() {
                    return Err(ExprError::Eval("zero raised to negative power".into()));
                }
                base.powi(*k)
            }
            Expression::Neg(a) => -a.eval(p)?,
            Expression::Sin(a) => a.eval(p)?.sin(),
            Expression::Cos(a) => a.eval(p)?.cos(),
            Expression::Exp(a) => a.eval(p)?.exp(),
            Expression::Tanh(a) => a.eval(p)?.tanh(),
        })
    }

    /// First-order jet: value and gradient with respect to all `n` variables.
    pub fn eval_jet1<T: Real>(&self, p: &[T]) -> Result<Jet1<T>, ExprError> {
        let n = p.len();
        Ok(match self {
            Expression::Const(c) => Jet1::constant(T::of(*c), n),
            Expression::Var(i) => {
                if *i >= n {
                    return Err(ExprError::Arity(*i + 1, n));
                }
                Jet1::variable(p[*i], *i, n)
            }
            Expression::Add(a, b) => a.eval_jet1(p)?.add(&b.eval_jet1(p)?),
            Expression::Sub(a, b) => a.eval_jet1(p)?.sub(&b.eval_jet1(p)?),
            Expression::Mul(a, b) => a.eval_jet1(p)?.mul(&b.eval_jet1(p)?),
            Expression::Div(a, b) => a
                .eval_jet1(p)?
                .div(&b.eval_jet1(p)?)
                .ok_or_else(|| ExprError::Eval("division by zero".into()))?,
            Expression::Pow(a, k) => a
                .eval_jet1(p)?
                .powi(*k)
                .ok_or_else(|| ExprError::Eval("zero raised to negative power".into()))?,
            Expression::Neg(a) => a.eval_jet1(p)?.neg(),
            Expression::Sin(a) => a.eval_jet1(p)?.sin(),
            Expression::Cos(a) => a.eval_jet1(p)?.cos(),
            Expression::Exp(a) => a.eval_jet1(p)?.exp(),
            Expression::Tanh(a) => a.eval_jet1(p)?.tanh(),
        })
    }

    /// Second-order jet: value, gradient and exact symmetric Hessian.
    pub fn eval_jet2<T: Real>(&self, p: &[T]) -> Result<Jet2<T>, ExprError> {
        let n = p.len();
        Ok(match self {
            Expression::Const(c) => Jet2::constant(T::of(*c), n),
            Expression::Var(i) => {
                if *i >= n {
                    return Err(ExprError::Arity(*i + 1, n));
                }
                Jet2::variable(p[*i], *i, n)
            }
            Expression::Add(a, b) => a.eval_jet2(p)?.add(&b.eval_jet2(p)?),
            Expression::Sub(a, b) => a.eval_jet2(p)?.sub(&b.eval_jet2(p)?),
            Expression::Mul(a, b) => a.eval_jet2(p)?.mul(&b.eval_jet2(p)?),
            Expression::Div(a, b) => a
                .eval_jet2(p)?
                .div(&b.eval_jet2(p)?)
                .ok_or_else(|| ExprError::Eval("division by zero".into()))?,
            Expression::Pow(a, k) => a
                .eval_jet2(p)?
                .powi(*k)
                .ok_or_else(|| ExprError::Eval("zero raised to negative power".into()))?,
            Expression::Neg(a) => a.eval_jet2(p)?.neg(),
            Expression::Sin(a) => a.eval_jet2(p)?.sin(),
            Expression::Cos(a) => a.eval_jet2(p)?.cos(),
            Expression::Exp(a) => a.eval_jet2(p)?.exp(),
            Expression::Tanh(a) => a.eval_jet2(p)?.tanh(),
        })
    }

    /// Substitute `subs[i]` for variable `i`. Used to compose a field with a
    /// smooth map symbolically, so composites stay inside the grammar.
    pub fn substitute(&self, subs: &[Expression]) -> Expression {
        match self {
            Expression::Const(c) => Expression::Const(*c),
            Expression::Var(i) => subs
                .get(*i)
                .cloned()
                .unwrap_or_else(|| panic!("substitution missing variable x{}", i + 1)),
            Expression::Add(a, b) => Expression::Add(
                Box::new(a.substitute(subs)),
                Box::new(b.substitute(subs)),
            ),
            Expression::Sub(a, b) => Expression::Sub(
                Box::new(a.substitute(subs)),
                Box::new(b.substitute(subs)),
            ),
            Expression::Mul(a, b) => Expression::Mul(
                Box::new(a.substitute(subs)),
                Box::new(b.substitute(subs)),
            ),
            Expression::Div(a, b) => Expression::Div(
                Box::new(a.substitute(subs)),
                Box::new(b.substitute(subs)),
            ),
            Expression::Pow(a, k) => Expression::Pow(Box::new(a.substitute(subs)), *k),
            Expression::Neg(a) => Expression::Neg(Box::new(a.substitute(subs))),
            Expression::Sin(a) => Expression::Sin(Box::new(a.substitute(subs))),
            Expression::Cos(a) => Expression::Cos(Box::new(a.substitute(subs))),
            Expression::Exp(a) => Expression::Exp(Box::new(a.substitute(subs))),
            Expression::Tanh(a) => Expression::Tanh(Box::new(a.substitute(subs))),
        }
    }
}

/// Flat domain: an n-torus with unit periods or an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Torus { dim: usize },
    Box { bounds: Vec<(f64, f64)> },
}

impl Domain {
    pub fn dim(&self) -> usize {
        match self {
            Domain::Torus { dim } => *dim,
            Domain::Box { bounds } => bounds.len(),
        }
    }

    pub fn is_torus(&self) -> bool {
        matches!(self, Domain::Torus { .. })
    }

    /// Characteristic length: 1 for tori, the longest side for boxes.
    pub fn scale(&self) -> f64 {
        match self {
            Domain::Torus { .. } => 1.0,
            Domain::Box { bounds } => bounds
                .iter()
                .map(|(a, b)| b - a)
                .fold(0.0_f64, f64::max),
        }
    }

    /// Reduce a point into the fundamental domain (mod 1 per coordinate on
    /// tori; identity on boxes).
    pub fn reduce<T: Real>(&self, p: &[T]) -> Vec<T> {
        match self {
            Domain::Torus { .. } => p
                .iter()
                .map(|&x| {
                    let r = x - x.floor();
                    if r == T::one() { T::zero() } else { r }
                })
                .collect(),
            Domain::Box { .. } => p.to_vec(),
        }
    }

    /// Shortest displacement `a - b` respecting torus periodicity.
    pub fn displacement<T: Real>(&self, a: &[T], b: &[T]) -> Vec<T> {
        match self {
            Domain::Torus { .. } => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x - y;
                    let r = d - d.round();
                    r
                })
                .collect(),
            Domain::Box { .. } => a.iter().zip(b).map(|(&x, &y)| x - y).collect(),
        }
    }

    pub fn distance<T: Real>(&self, a: &[T], b: &[T]) -> T {
        crate::linalg::norm(&self.displacement(a, b))
    }

    pub fn sample_grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let n = self.dim();
        let axes: Vec<Vec<f64>> = match self {
            Domain::Torus { .. } => (0..n)
                .map(|_| (0..per_axis).map(|i| i as f64 / per_axis as f64).collect())
                .collect(),
            Domain::Box { bounds } => bounds
                .iter()
                .map(|(a, b)| {
                    (0..per_axis)
                        .map(|i| a + (b - a) * (i as f64 + 0.5) / per_axis as f64)
                        .collect()
                })
                .collect(),
        };
        let mut points = vec![vec![]];
        for axis in &axes {
            let mut next = Vec::with_capacity(points.len() * axis.len());
            for p in &points {
                for &v in axis {
                    let mut q = p.clone();
                    q.push(v);
                    next.push(q);
                }
            }
            points = next;
        }
        points
    }
}

/// Scalar field over a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub expr: Expression,
    pub dim: usize,
}

impl ScalarField {
    pub fn new(expr: Expression, dim: usize) -> Result<Self, ExprError> {
        if expr.min_arity() > dim {
            return Err(ExprError::Arity(expr.min_arity(), dim));
        }
        Ok(ScalarField { expr, dim })
    }

    pub fn parse(text: &str, dim: usize) -> Result<Self, ExprError> {
        Self::new(parse(text)?, dim)
    }

    /// Second-order jet at the domain-reduced point. Reduction first makes
    /// evaluation at `p` and `p + k` identical on tori, bit for bit.
    pub fn jet2<T: Real>(&self, domain: &Domain, p: &[T]) -> Result<Jet2<T>, ExprError> {
        self.expr.eval_jet2(&domain.reduce(p))
    }

    pub fn jet1<T: Real>(&self, domain: &Domain, p: &[T]) -> Result<Jet1<T>, ExprError> {
        self.expr.eval_jet1(&domain.reduce(p))
    }

    pub fn value<T: Real>(&self, domain: &Domain, p: &[T]) -> Result<T, ExprError> {
        self.expr.eval(&domain.reduce(p))
    }
}

/// Smooth map between domains, one expression per target component.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothMap {
    pub components: Vec<Expression>,
    pub source: Domain,
    pub target: Domain,
}

impl SmoothMap {
    pub fn new(
        components: Vec<Expression>,
        source: Domain,
        target: Domain,
    ) -> Result<Self, ExprError> {
        if components.len() != target.dim() {
            return Err(ExprError::Eval(format!(
                "map has {} components but target dimension is {}",
                components.len(),
                target.dim()
            )));
        }
        for c in &components {
            if c.min_arity() > source.dim() {
                return Err(ExprError::Arity(c.min_arity(), source.dim()));
            }
        }
        Ok(SmoothMap { components, source, target })
    }

    pub fn parse(
        components: &[&str],
        source: Domain,
        target: Domain,
    ) -> Result<Self, ExprError> {
        let exprs = components
            .iter()
            .map(|c| parse(c))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(exprs, source, target)
    }

    pub fn identity(domain: Domain) -> Self {
        let components = (0..domain.dim()).map(Expression::Var).collect();
        SmoothMap { components, source: domain.clone(), target: domain }
    }

    /// Image point, reduced into the target domain.
    pub fn apply<T: Real>(&self, p: &[T]) -> Result<Vec<T>, ExprError> {
        let q = self.source.reduce(p);
        let img: Vec<T> = self
            .components
            .iter()
            .map(|c| c.eval(&q))
            .collect::<Result<_, _>>()?;
        Ok(self.target.reduce(&img))
    }

    /// Image point and Jacobian. The Jacobian is unaffected by the mod-1
    /// reductions because translations have identity derivative.
    pub fn apply_jet<T: Real>(&self, p: &[T]) -> Result<(Vec<T>, Mat<T>), ExprError> {
        let q = self.source.reduce(p);
        let m = self.target.dim();
        let n = self.source.dim();
        let mut value = Vec::with_capacity(m);
        let mut jac = Mat::zeros(m, n);
        for (i, c) in self.components.iter().enumerate() {
            let jet = c.eval_jet1(&q)?;
            value.push(jet.v);
            for j in 0..n {
                jac[(i, j)] = jet.g[j];
            }
        }
        Ok((self.target.reduce(&value), jac))
    }

    /// Compose a scalar field on the target with this map, symbolically.
    pub fn pull_back_field(&self, f: &ScalarField) -> ScalarField {
        ScalarField {
            expr: f.expr.substitute(&self.components),
            dim: self.source.dim(),
        }
    }

    /// Compose maps symbolically: `self` after `inner`.
    pub fn after(&self, inner: &SmoothMap) -> SmoothMap {
        let components = self
            .components
            .iter()
            .map(|c| c.substitute(&inner.components))
            .collect();
        SmoothMap {
            components,
            source: inner.source.clone(),
            target: self.target.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jet2_of(text: &str, p: &[f64]) -> Jet2<f64> {
        parse(text).unwrap().eval_jet2(p).unwrap()
    }

    #[test]
    fn square_jet_at_three() {
        let j = jet2_of("x1^2", &[3.0]);
        assert_eq!(j.v, 9.0);
        assert_eq!(j.g, vec![6.0]);
        assert_eq!(j.hess_entry(0, 0), 2.0);
    }

    #[test]
    fn cosine_height_jet_at_zero() {
        let j = jet2_of("cos(2*pi*x1)", &[0.0]);
        let w = 2.0 * std::f64::consts::PI;
        assert!((j.v - 1.0).abs() < 1e-15);
        assert!(j.g[0].abs() < 1e-15);
        assert!((j.hess_entry(0, 0) + w * w).abs() < 1e-9);
    }

    #[test]
    fn division_and_negative_powers_error_cleanly() {
        assert!(matches!(
            parse("1/x1").unwrap().eval_jet2(&[0.0]),
            Err(ExprError::Eval(_))
        ));
        assert!(matches!(
            parse("x1^-2").unwrap().eval(&[0.0]),
            Err(ExprError::Eval(_))
        ));
        let j: Jet2<f64> = parse("x1^-2").unwrap().eval_jet2(&[2.0]).unwrap();
        assert!((j.v - 0.25).abs() < 1e-15);
        assert!((j.g[0] + 0.25).abs() < 1e-15); // d/dx x^-2 = -2 x^-3
    }

    #[test]
    fn torus_reduction_makes_jets_periodic_bitwise() {
        // Points chosen so the integer shifts are exact in binary; reduction
        // then recovers the identical representative and the jets agree
        // bitwise. (For non-representable shifts agreement is only up to
        // rounding of the shift itself, which is the caller's rounding, not
        // the reduction's.)
        let f = ScalarField::parse("cos(2*pi*x1) + 0.3*sin(2*pi*x2)", 2).unwrap();
        let t2 = Domain::Torus { dim: 2 };
        let a = f.jet2(&t2, &[0.25, 0.625]).unwrap();
        let b = f.jet2(&t2, &[0.25 + 3.0, 0.625 - 2.0]).unwrap();
        assert_eq!(a.v, b.v);
        assert_eq!(a.g, b.g);
        assert_eq!(a.h, b.h);
    }

    #[test]
    fn map_jet_projection() {
        let t2 = Domain::Torus { dim: 2 };
        let t1 = Domain::Torus { dim: 1 };
        let h = SmoothMap::parse(&["x1"], t2, t1).unwrap();
        let (v, j) = h.apply_jet(&[0.25, 0.8]).unwrap();
        assert_eq!(v, vec![0.25]);
        assert_eq!((j.rows, j.cols), (1, 2));
        assert_eq!(j[(0, 0)], 1.0);
        assert_eq!(j[(0, 1)], 0.0);
    }

    #[test]
    fn symbolic_pullback_matches_pointwise_composition() {
        let t2 = Domain::Torus { dim: 2 };
        let t1 = Domain::Torus { dim: 1 };
        let h = SmoothMap::parse(&["x1 + 0.5*x2"], t2.clone(), t1.clone()).unwrap();
        let f = ScalarField::parse("cos(2*pi*x1)", 1).unwrap();
        let fh = h.pull_back_field(&f);
        let p = [0.3f64, 0.9];
        let direct: f64 = f.value(&t1, &h.apply(&p).unwrap()).unwrap();
        let pulled: f64 = fh.value(&t2, &p).unwrap();
        assert!((direct - pulled).abs() < 1e-14);
    }

    #[test]
    fn torus_displacement_takes_shortest_representative() {
        let t1 = Domain::Torus { dim: 1 };
        let d = t1.displacement(&[0.95f64], &[0.05]);
        assert!((d[0] + 0.1).abs() < 1e-15);
    }
}
