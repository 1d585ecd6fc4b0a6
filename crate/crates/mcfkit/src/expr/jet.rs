//! Forward-mode duals of first and second order.
//!
//! `Jet2` carries value, gradient and the lower triangle of the Hessian in
//! packed form, so symmetry is structural rather than numerical. Chain rules
//! for the unary primitives use phi' and phi'' evaluated at the inner value.

use crate::real::Real;

/// Value and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet1<T> {
    pub v: T,
    pub g: Vec<T>,
}

/// Value, gradient and packed symmetric Hessian.
///
/// `h[idx(i, j)]` with `i >= j` stores `d^2 f / dx_i dx_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet2<T> {
    pub v: T,
    pub g: Vec<T>,
    pub h: Vec<T>,
}

#[inline]
fn hidx(i: usize, j: usize) -> usize {
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    i * (i + 1) / 2 + j
}

impl<T: Real> Jet1<T> {
    pub fn constant(v: T, n: usize) -> Self {
        Jet1 { v, g: vec![T::zero(); n] }
    }

    pub fn variable(v: T, i: usize, n: usize) -> Self {
        let mut g = vec![T::zero(); n];
        g[i] = T::one();
        Jet1 { v, g }
    }

    pub fn add(&self, o: &Self) -> Self {
        Jet1 {
            v: self.v + o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| *a + *b).collect(),
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        Jet1 {
            v: self.v - o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| *a - *b).collect(),
        }
    }

    pub fn mul(&self, o: &Self) -> Self {
        Jet1 {
            v: self.v * o.v,
            g: self
                .g
                .iter()
                .zip(&o.g)
                .map(|(a, b)| *a * o.v + self.v * *b)
                .collect(),
        }
    }

    pub fn div(&self, o: &Self) -> Option<Self> {
        if o.v == T::zero() {
            return None;
        }
        let q = self.v / o.v;
        Some(Jet1 {
            v: q,
            g: self
                .g
                .iter()
                .zip(&o.g)
                .map(|(a, b)| (*a - q * *b) / o.v)
                .collect(),
        })
    }

    pub fn neg(&self) -> Self {
        Jet1 { v: -self.v, g: self.g.iter().map(|a| -*a).collect() }
    }

    fn chain(&self, v: T, d: T) -> Self {
        Jet1 { v, g: self.g.iter().map(|a| d * *a).collect() }
    }

    pub fn powi(&self, k: i32) -> Option<Self> {
        if k == 0 {
            return Some(Self::constant(T::one(), self.g.len()));
        }
        if k < 0 && self.v == T::zero() {
            return None;
        }
        let d = T::of(k as f64) * self.v.powi(k - 1);
        Some(self.chain(self.v.powi(k), d))
    }

    pub fn sin(&self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }

    pub fn cos(&self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }

    pub fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    pub fn tanh(&self) -> Self {
        let t = self.v.tanh();
        self.chain(t, T::one() - t * t)
    }
}

impl<T: Real> Jet2<T> {
    pub fn constant(v: T, n: usize) -> Self {
        Jet2 { v, g: vec![T::zero(); n], h: vec![T::zero(); n * (n + 1) / 2] }
    }

    pub fn variable(v: T, i: usize, n: usize) -> Self {
        let mut g = vec![T::zero(); n];
        g[i] = T::one();
        Jet2 { v, g, h: vec![T::zero(); n * (n + 1) / 2] }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn hess_entry(&self, i: usize, j: usize) -> T {
        self.h[hidx(i, j)]
    }

    /// Full symmetric Hessian matrix.
    pub fn hessian(&self) -> crate::linalg::Mat<T> {
        let n = self.dim();
        let mut m = crate::linalg::Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.hess_entry(i, j);
            }
        }
        m
    }

    pub fn add(&self, o: &Self) -> Self {
        Jet2 {
            v: self.v + o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| *a + *b).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| *a + *b).collect(),
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        Jet2 {
            v: self.v - o.v,
            g: self.g.iter().zip(&o.g).map(|(a, b)| *a - *b).collect(),
            h: self.h.iter().zip(&o.h).map(|(a, b)| *a - *b).collect(),
        }
    }

    pub fn mul(&self, o: &Self) -> Self {
        let n = self.dim();
        let mut h = vec![T::zero(); self.h.len()];
        for i in 0..n {
            for j in 0..=i {
                h[hidx(i, j)] = self.v * o.h[hidx(i, j)]
                    + o.v * self.h[hidx(i, j)]
                    + self.g[i] * o.g[j]
                    + self.g[j] * o.g[i];
            }
        }
        Jet2 {
            v: self.v * o.v,
            g: self
                .g
                .iter()
                .zip(&o.g)
                .map(|(a, b)| *a * o.v + self.v * *b)
                .collect(),
            h,
        }
    }

    pub fn div(&self, o: &Self) -> Option<Self> {
        if o.v == T::zero() {
            return None;
        }
        let n = self.dim();
        let q = self.v / o.v;
        let qg: Vec<T> = self
            .g
            .iter()
            .zip(&o.g)
            .map(|(a, b)| (*a - q * *b) / o.v)
            .collect();
        let mut h = vec![T::zero(); self.h.len()];
        for i in 0..n {
            for j in 0..=i {
                h[hidx(i, j)] = (self.h[hidx(i, j)]
                    - q * o.h[hidx(i, j)]
                    - qg[i] * o.g[j]
                    - qg[j] * o.g[i])
                    / o.v;
            }
        }
        Some(Jet2 { v: q, g: qg, h })
    }

    pub fn neg(&self) -> Self {
        Jet2 {
            v: -self.v,
            g: self.g.iter().map(|a| -*a).collect(),
            h: self.h.iter().map(|a| -*a).collect(),
        }
    }

    /// Unary chain rule with phi(u), phi'(u), phi''(u).
    fn chain(&self, v: T, d1: T, d2: T) -> Self {
        let n = self.dim();
        let mut h = vec![T::zero(); self.h.len()];
        for i in 0..n {
            for j in 0..=i {
                h[hidx(i, j)] = d1 * self.h[hidx(i, j)] + d2 * self.g[i] * self.g[j];
            }
        }
        Jet2 { v, g: self.g.iter().map(|a| d1 * *a).collect(), h }
    }

    pub fn powi(&self, k: i32) -> Option<Self> {
        if k == 0 {
            return Some(Self::constant(T::one(), self.dim()));
        }
        if k < 0 && self.v == T::zero() {
            return None;
        }
        let kf = T::of(k as f64);
        let d1 = kf * self.v.powi(k - 1);
        let d2 = kf * T::of((k - 1) as f64) * self.v.powi(k - 2);
        // k = 1 has zero second derivative regardless of v = 0.
        let d2 = if k == 1 { T::zero() } else { d2 };
        Some(self.chain(self.v.powi(k), d1, d2))
    }

    pub fn sin(&self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.chain(s, c, -s)
    }

    pub fn cos(&self) -> Self {
        let (s, c) = (self.v.sin(), self.v.cos());
        self.chain(c, -s, -c)
    }

    pub fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    pub fn tanh(&self) -> Self {
        let t = self.v.tanh();
        let sech2 = T::one() - t * t;
        self.chain(t, sech2, -T::of(2.0) * t * sech2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_cross_terms() {
        // f = x*y at (2,5): grad (5,2), hessian [[0,1],[1,0]].
        let x = Jet2::variable(2.0, 0, 2);
        let y = Jet2::variable(5.0, 1, 2);
        let f = x.mul(&y);
        assert_eq!(f.v, 10.0);
        assert_eq!(f.g, vec![5.0, 2.0]);
        assert_eq!(f.hess_entry(0, 0), 0.0);
        assert_eq!(f.hess_entry(0, 1), 1.0);
        assert_eq!(f.hess_entry(1, 0), 1.0);
    }

    #[test]
    fn quotient_rule_second_order() {
        // f = 1/x at 2: f = 0.5, f' = -0.25, f'' = 0.25.
        let one: Jet2<f64> = Jet2::constant(1.0, 1);
        let x = Jet2::variable(2.0, 0, 1);
        let f = one.div(&x).unwrap();
        assert!((f.v - 0.5).abs() < 1e-15);
        assert!((f.g[0] + 0.25).abs() < 1e-15);
        assert!((f.hess_entry(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn tanh_second_derivative() {
        // (tanh x)'' = -2 tanh x sech^2 x at x = 0.3.
        let x = Jet2::variable(0.3, 0, 1);
        let f = x.tanh();
        let t = 0.3_f64.tanh();
        assert!((f.hess_entry(0, 0) + 2.0 * t * (1.0 - t * t)).abs() < 1e-14);
    }

    #[test]
    fn linear_power_at_zero_has_no_curvature() {
        let x = Jet2::variable(0.0, 0, 1);
        let f = x.powi(1).unwrap();
        assert_eq!(f.g[0], 1.0);
        assert_eq!(f.hess_entry(0, 0), 0.0);
    }
}
