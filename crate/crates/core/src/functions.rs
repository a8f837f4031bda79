//! Closed-form smooth functions with exact gradients: test functions for the
//! operator checks and sources for the conduction problems.

use rayon::prelude::*;
use std::f64::consts::PI;
use std::sync::OnceLock;

/// A scalar function on the cube with an exact gradient.
pub trait Analytic: Sync {
    fn value(&self, x: [f64; 3]) -> f64;
    fn grad(&self, x: [f64; 3]) -> [f64; 3];

    fn value_grad(&self, x: [f64; 3]) -> (f64, [f64; 3]) {
        (self.value(x), self.grad(x))
    }
}

/// One-dimensional building block of a separable term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factor {
    /// `c0 + c1 x + c2 x^2 + c3 x^3`
    Poly([f64; 4]),
    /// `cos(pi m x)`
    Cos(u32),
    /// `sin(2 pi m x)`
    Sin2(u32),
}

impl Factor {
    pub const ONE: Factor = Factor::Poly([1.0, 0.0, 0.0, 0.0]);
    pub const X: Factor = Factor::Poly([0.0, 1.0, 0.0, 0.0]);

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Factor::Poly(c) => c[0] + x * (c[1] + x * (c[2] + x * c[3])),
            Factor::Cos(m) => (PI * m as f64 * x).cos(),
            Factor::Sin2(m) => (2.0 * PI * m as f64 * x).sin(),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Factor::Poly(c) => c[1] + x * (2.0 * c[2] + x * 3.0 * c[3]),
            Factor::Cos(m) => {
                let w = PI * m as f64;
                -w * (w * x).sin()
            }
            Factor::Sin2(m) => {
                let w = 2.0 * PI * m as f64;
                w * (w * x).cos()
            }
        }
    }
}

/// `coef * f_1(x_1) f_2(x_2) f_3(x_3)`
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coef: f64,
    pub factors: [Factor; 3],
}

/// Smooth one-dimensional cutoff: 1 for `|x| <= inner`, 0 for `|x| >= outer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cutoff {
    pub inner: f64,
    pub outer: f64,
}

impl Cutoff {
    pub const DEFAULT: Cutoff = Cutoff { inner: 0.35, outer: 0.48 };

    fn psi(t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            (-1.0 / t).exp()
        }
    }

    fn dpsi(t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            (-1.0 / t).exp() / (t * t)
        }
    }

    /// Smooth step from 0 at `t <= 0` to 1 at `t >= 1`, with derivative.
    fn step(t: f64) -> (f64, f64) {
        let (a, b) = (Self::psi(t), Self::psi(1.0 - t));
        let s = a + b;
        let da = Self::dpsi(t);
        let db = -Self::dpsi(1.0 - t);
        (a / s, (da * s - a * (da + db)) / (s * s))
    }

    #[inline]
    pub fn value_and_derivative(&self, x: f64) -> (f64, f64) {
        let width = self.outer - self.inner;
        let t = (self.outer - x.abs()) / width;
        let (v, dv) = Self::step(t);
        (v, -dv * x.signum() / width)
    }
}

/// A sum of separable terms, optionally multiplied by a product cutoff that
/// makes it compactly supported in the open cube.
#[derive(Debug, Clone)]
pub struct SmoothTestFunction {
    name: String,
    terms: Vec<Term>,
    cutoff: Option<Cutoff>,
    grad_sup: OnceLock<f64>,
}

impl PartialEq for SmoothTestFunction {
    fn eq(&self, other: &Self) -> bool {
        self.terms == other.terms && self.cutoff == other.cutoff
    }
}

impl SmoothTestFunction {
    pub fn new(name: impl Into<String>, terms: Vec<Term>, cutoff: Option<Cutoff>) -> Self {
        Self { name: name.into(), terms, cutoff, grad_sup: OnceLock::new() }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("const({c})"), vec![Term { coef: c, factors: [Factor::ONE; 3] }], None)
    }

    /// The coordinate function `x_axis`.
    pub fn coordinate(axis: usize) -> Self {
        let mut factors = [Factor::ONE; 3];
        factors[axis] = Factor::X;
        Self::new(format!("x{}", axis + 1), vec![Term { coef: 1.0, factors }], None)
    }

    /// `x_axis^2`
    pub fn coordinate_squared(axis: usize) -> Self {
        let mut factors = [Factor::ONE; 3];
        factors[axis] = Factor::Poly([0.0, 0.0, 1.0, 0.0]);
        Self::new(format!("x{}^2", axis + 1), vec![Term { coef: 1.0, factors }], None)
    }

    /// `amplitude * cos(pi x_1) cos(pi x_2) cos(pi x_3)`
    pub fn separable_cosine(amplitude: f64) -> Self {
        Self::new(
            format!("{amplitude}*cos*cos*cos"),
            vec![Term { coef: amplitude, factors: [Factor::Cos(1); 3] }],
            None,
        )
    }

    pub fn with_cutoff(mut self, cutoff: Cutoff) -> Self {
        self.cutoff = Some(cutoff);
        self.name = format!("{}*bump", self.name);
        self.grad_sup = OnceLock::new();
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn cutoff(&self) -> Option<Cutoff> {
        self.cutoff
    }

    /// True when the function vanishes identically on the cube boundary.
    pub fn vanishes_on_boundary(&self) -> bool {
        if self.cutoff.is_some() {
            return true;
        }
        // Each term must have a factor vanishing at both x = -1/2 and x = 1/2.
        self.terms.iter().all(|t| {
            t.factors.iter().any(|f| f.value(-0.5).abs() < 1e-14 && f.value(0.5).abs() < 1e-14)
        })
    }

    /// Sup norm of the gradient magnitude, sampled on a 121^3 lattice of the
    /// closed cube together with the axis-aligned extremal lines.
    pub fn grad_sup_norm(&self) -> f64 {
        *self.grad_sup.get_or_init(|| {
            const N: usize = 121;
            let coord = |j: usize| -0.5 + j as f64 / (N - 1) as f64;
            (0..N * N * N)
                .into_par_iter()
                .map(|idx| {
                    let p = [coord(idx % N), coord((idx / N) % N), coord(idx / (N * N))];
                    let g = self.grad(p);
                    (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt()
                })
                .reduce(|| 0.0, f64::max)
        })
    }

    fn cutoff_parts(&self, x: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        match self.cutoff {
            None => ([1.0; 3], [0.0; 3]),
            Some(c) => {
                let parts = x.map(|xi| c.value_and_derivative(xi));
                (parts.map(|p| p.0), parts.map(|p| p.1))
            }
        }
    }

    fn raw_value(&self, x: [f64; 3]) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coef * t.factors[0].value(x[0]) * t.factors[1].value(x[1]) * t.factors[2].value(x[2]))
            .sum()
    }

    fn raw_value_grad(&self, x: [f64; 3]) -> (f64, [f64; 3]) {
        let mut value = 0.0;
        let mut g = [0.0; 3];
        for t in &self.terms {
            let v = [t.factors[0].value(x[0]), t.factors[1].value(x[1]), t.factors[2].value(x[2])];
            let d = [
                t.factors[0].derivative(x[0]),
                t.factors[1].derivative(x[1]),
                t.factors[2].derivative(x[2]),
            ];
            value += t.coef * v[0] * v[1] * v[2];
            g[0] += t.coef * d[0] * v[1] * v[2];
            g[1] += t.coef * v[0] * d[1] * v[2];
            g[2] += t.coef * v[0] * v[1] * d[2];
        }
        (value, g)
    }

    fn raw_grad(&self, x: [f64; 3]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for t in &self.terms {
            let v = [t.factors[0].value(x[0]), t.factors[1].value(x[1]), t.factors[2].value(x[2])];
            let d = [
                t.factors[0].derivative(x[0]),
                t.factors[1].derivative(x[1]),
                t.factors[2].derivative(x[2]),
            ];
            g[0] += t.coef * d[0] * v[1] * v[2];
            g[1] += t.coef * v[0] * d[1] * v[2];
            g[2] += t.coef * v[0] * v[1] * d[2];
        }
        g
    }
}

impl Analytic for SmoothTestFunction {
    fn value(&self, x: [f64; 3]) -> f64 {
        let (c, _) = self.cutoff_parts(x);
        let chi = c[0] * c[1] * c[2];
        if chi == 0.0 {
            return 0.0;
        }
        chi * self.raw_value(x)
    }

    fn grad(&self, x: [f64; 3]) -> [f64; 3] {
        let (c, dc) = self.cutoff_parts(x);
        let chi = c[0] * c[1] * c[2];
        let gchi = [dc[0] * c[1] * c[2], c[0] * dc[1] * c[2], c[0] * c[1] * dc[2]];
        if chi == 0.0 && gchi == [0.0; 3] {
            return [0.0; 3];
        }
        let v = self.raw_value(x);
        let g = self.raw_grad(x);
        [chi * g[0] + v * gchi[0], chi * g[1] + v * gchi[1], chi * g[2] + v * gchi[2]]
    }

    fn value_grad(&self, x: [f64; 3]) -> (f64, [f64; 3]) {
        let (c, dc) = self.cutoff_parts(x);
        let chi = c[0] * c[1] * c[2];
        let gchi = [dc[0] * c[1] * c[2], c[0] * dc[1] * c[2], c[0] * c[1] * dc[2]];
        if chi == 0.0 && gchi == [0.0; 3] {
            return (0.0, [0.0; 3]);
        }
        let (v, g) = self.raw_value_grad(x);
        (chi * v, [chi * g[0] + v * gchi[0], chi * g[1] + v * gchi[1], chi * g[2] + v * gchi[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd_grad(f: &impl Analytic, x: [f64; 3]) -> [f64; 3] {
        let h = 1e-6;
        std::array::from_fn(|d| {
            let mut p = x;
            let mut m = x;
            p[d] += h;
            m[d] -= h;
            (f.value(p) - f.value(m)) / (2.0 * h)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = SmoothTestFunction::new(
            "mix",
            vec![
                Term { coef: 1.5, factors: [Factor::Cos(1), Factor::Sin2(1), Factor::Poly([0.1, -0.2, 0.3, 0.4])] },
                Term { coef: -0.7, factors: [Factor::X, Factor::Cos(3), Factor::ONE] },
            ],
            Some(Cutoff::DEFAULT),
        );
        for x in [[0.1, -0.2, 0.3], [0.4, 0.37, -0.41], [0.0, 0.0, 0.0], [-0.36, 0.2, 0.45]] {
            let g = f.grad(x);
            assert_eq!(f.value_grad(x), (f.value(x), g));
            let fd = fd_grad(&f, x);
            for d in 0..3 {
                assert!((g[d] - fd[d]).abs() < 1e-6 * (1.0 + g[d].abs()), "{x:?} {g:?} {fd:?}");
            }
        }
    }

    #[test]
    fn cutoff_support() {
        let f = SmoothTestFunction::constant(2.0).with_cutoff(Cutoff::DEFAULT);
        assert_eq!(f.value([0.49, 0.0, 0.0]), 0.0);
        assert_eq!(f.value([0.0, 0.5, 0.0]), 0.0);
        assert_relative_eq!(f.value([0.3, -0.2, 0.1]), 2.0, max_relative = 1e-15);
        assert!(f.vanishes_on_boundary());
        assert!(SmoothTestFunction::separable_cosine(1.0).vanishes_on_boundary());
        assert!(!SmoothTestFunction::coordinate(0).vanishes_on_boundary());
    }

    #[test]
    fn grad_sup_of_simple_functions() {
        assert_relative_eq!(SmoothTestFunction::coordinate(1).grad_sup_norm(), 1.0, max_relative = 1e-14);
        assert_eq!(SmoothTestFunction::constant(3.0).grad_sup_norm(), 0.0);
        // |grad cos cos cos| peaks at pi / sqrt(3) * sqrt(...); just bound it.
        let s = SmoothTestFunction::separable_cosine(1.0).grad_sup_norm();
        assert!(s > 1.5 && s <= PI + 1e-12);
    }
}
