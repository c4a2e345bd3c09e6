//! Closed-form Gaussian conditional expectations.
//!
//! [`ExpPoly`] represents functions of a scalar Brownian state of the form
//! `x -> Σ_j exp(γ_j x) P_j(x)` with polynomial `P_j`. The family is closed
//! under sums, products, differentiation and under the heat semigroup
//! `f -> E f(x + sqrt(s) N)`, which lets the built-in Gaussian problems run
//! every scheme with conditional expectations computed exactly.

/// `exp(rate * x) * Σ_k coeffs[k] x^k`.
#[derive(Debug, Clone, PartialEq)]
struct Term {
    rate: f64,
    coeffs: Vec<f64>,
}

impl Term {
    fn trim(&mut self) {
        while self.coeffs.last() == Some(&0.0) {
            self.coeffs.pop();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpPoly {
    terms: Vec<Term>,
}

fn add_into(dst: &mut Vec<f64>, src: &[f64], scale: f64) {
    if dst.len() < src.len() {
        dst.resize(src.len(), 0.0);
    }
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn binomial_row(k: usize) -> Vec<f64> {
    let mut row = vec![1.0; k + 1];
    let mut c = 1.0_f64;
    for (j, r) in row.iter_mut().enumerate() {
        *r = c;
        c = c * (k - j) as f64 / (j + 1) as f64;
    }
    row
}

/// `Q(u) = E P(u + sqrt(s) N)` for polynomial `P`.
fn heat_poly(coeffs: &[f64], s: f64) -> Vec<f64> {
    let deg = coeffs.len();
    if deg == 0 {
        return Vec::new();
    }
    // Gaussian moments E Y^m, Y ~ N(0, s)
    let mut moments = vec![0.0; deg];
    moments[0] = 1.0;
    let mut m = 2;
    while m < deg {
        moments[m] = moments[m - 2] * (m - 1) as f64 * s;
        m += 2;
    }
    let mut out = vec![0.0; deg];
    for (k, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let binom = binomial_row(k);
        for j in 0..=k {
            let mo = moments[k - j];
            if mo != 0.0 {
                out[j] += c * binom[j] * mo;
            }
        }
    }
    out
}

/// `R(x) = P(x + mu)`.
fn taylor_shift(coeffs: &[f64], mu: f64) -> Vec<f64> {
    if mu == 0.0 {
        return coeffs.to_vec();
    }
    let mut out = coeffs.to_vec();
    let n = out.len();
    for i in 0..n {
        for j in (i..n.saturating_sub(1)).rev() {
            out[j] += mu * out[j + 1];
        }
    }
    out
}

impl ExpPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self::polynomial(vec![c])
    }

    /// `Σ coeffs[k] x^k`.
    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        Self::term(0.0, coeffs)
    }

    /// `exp(rate x)`.
    pub fn exponential(rate: f64) -> Self {
        Self::term(rate, vec![1.0])
    }

    /// The identity `x`.
    pub fn identity() -> Self {
        Self::polynomial(vec![0.0, 1.0])
    }

    fn term(rate: f64, coeffs: Vec<f64>) -> Self {
        let mut t = Term { rate, coeffs };
        t.trim();
        let mut p = Self { terms: vec![t] };
        p.normalize();
        p
    }

    fn normalize(&mut self) {
        let mut merged: Vec<Term> = Vec::with_capacity(self.terms.len());
        for t in self.terms.drain(..) {
            match merged.iter_mut().find(|m| m.rate == t.rate) {
                Some(m) => add_into(&mut m.coeffs, &t.coeffs, 1.0),
                None => merged.push(t),
            }
        }
        for m in merged.iter_mut() {
            m.trim();
        }
        merged.retain(|m| !m.coeffs.is_empty());
        merged.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        self.terms = merged;
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Largest polynomial degree over all terms.
    pub fn degree(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.coeffs.len().saturating_sub(1))
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let p = t.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c);
                if t.rate == 0.0 {
                    p
                } else {
                    (t.rate * x).exp() * p
                }
            })
            .sum()
    }

    pub fn scale(&self, c: f64) -> Self {
        let mut out = self.clone();
        for t in out.terms.iter_mut() {
            for v in t.coeffs.iter_mut() {
                *v *= c;
            }
        }
        out.normalize();
        out
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, other: &Self, c: f64) -> Self {
        let mut out = self.clone();
        for t in &other.terms {
            out.terms.push(Term {
                rate: t.rate,
                coeffs: t.coeffs.iter().map(|v| c * v).collect(),
            });
        }
        out.normalize();
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.add_scaled(other, 1.0)
    }

    pub fn add_constant(&self, c: f64) -> Self {
        self.add_scaled(&Self::constant(c), 1.0)
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut terms = Vec::new();
        for a in &self.terms {
            for b in &other.terms {
                let mut coeffs = vec![0.0; a.coeffs.len() + b.coeffs.len() - 1];
                for (i, x) in a.coeffs.iter().enumerate() {
                    for (j, y) in b.coeffs.iter().enumerate() {
                        coeffs[i + j] += x * y;
                    }
                }
                terms.push(Term {
                    rate: a.rate + b.rate,
                    coeffs,
                });
            }
        }
        let mut out = Self { terms };
        out.normalize();
        out
    }

    /// Multiply by `exp(b x)`.
    pub fn shift_rate(&self, b: f64) -> Self {
        let mut out = self.clone();
        for t in out.terms.iter_mut() {
            t.rate += b;
        }
        out.normalize();
        out
    }

    pub fn derivative(&self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let mut coeffs: Vec<f64> = t.coeffs.iter().map(|c| t.rate * c).collect();
            for k in 1..t.coeffs.len() {
                coeffs[k - 1] += k as f64 * t.coeffs[k];
            }
            terms.push(Term {
                rate: t.rate,
                coeffs,
            });
        }
        let mut out = Self { terms };
        out.normalize();
        out
    }

    /// `x -> E f(x + Y)` with `Y ~ N(0, var)`.
    pub fn gaussian_expect(&self, var: f64) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            // E exp(γ(x+Y)) P(x+Y) = exp(γx + γ²s/2) E P(x + γs + Y)
            let q = heat_poly(&t.coeffs, var);
            let mut coeffs = taylor_shift(&q, t.rate * var);
            if t.rate != 0.0 {
                let g = (0.5 * t.rate * t.rate * var).exp();
                for c in coeffs.iter_mut() {
                    *c *= g;
                }
            }
            terms.push(Term {
                rate: t.rate,
                coeffs,
            });
        }
        let mut out = Self { terms };
        out.normalize();
        out
    }

    /// `x -> E f(x + Y) Y` with `Y ~ N(0, var)`, by Gaussian integration by parts.
    pub fn gaussian_expect_increment(&self, var: f64) -> Self {
        self.derivative().gaussian_expect(var).scale(var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_of_powers() {
        // E (x+Y)^2 = x^2 + s, E (x+Y)^3 = x^3 + 3 s x, E (x+Y)^4 = x^4 + 6 s x^2 + 3 s^2
        let s = 0.3;
        let p2 = ExpPoly::polynomial(vec![0.0, 0.0, 1.0]).gaussian_expect(s);
        assert_eq!(p2, ExpPoly::polynomial(vec![s, 0.0, 1.0]));
        let p4 = ExpPoly::polynomial(vec![0.0, 0.0, 0.0, 0.0, 1.0]).gaussian_expect(s);
        let x = 0.7_f64;
        let want = x.powi(4) + 6.0 * s * x * x + 3.0 * s * s;
        assert!((p4.eval(x) - want).abs() < 1e-14);
    }

    #[test]
    fn heat_of_exponential() {
        let b = 0.2;
        let s = 0.5;
        let e = ExpPoly::exponential(b).gaussian_expect(s);
        let x = 0.4_f64;
        let want = (b * x + 0.5 * b * b * s).exp();
        assert!((e.eval(x) - want).abs() < 1e-15);
    }

    #[test]
    fn exp_times_linear() {
        // E exp(b(x+Y)) (x+Y) = exp(bx + b²s/2) (x + b s)
        let (b, s, x) = (0.7, 0.25, -0.3_f64);
        let f = ExpPoly::exponential(b).mul(&ExpPoly::identity());
        let got = f.gaussian_expect(s).eval(x);
        let want = (b * x + 0.5 * b * b * s).exp() * (x + b * s);
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn increment_moment() {
        // E (x+Y)^2 Y = 2 x s
        let s = 0.125;
        let f = ExpPoly::polynomial(vec![1.0, 0.0, 1.0]);
        let g = f.gaussian_expect_increment(s);
        assert_eq!(g, ExpPoly::polynomial(vec![0.0, 2.0 * s]));
    }

    #[test]
    fn rates_cancel_exactly() {
        let f = ExpPoly::constant(2.0).shift_rate(0.2).shift_rate(-0.2);
        assert_eq!(f, ExpPoly::constant(2.0));
    }

    #[test]
    fn taylor_shift_matches_direct() {
        let c = vec![1.0, -2.0, 0.5, 3.0];
        let shifted = taylor_shift(&c, 0.3);
        let p = ExpPoly::polynomial(c);
        let q = ExpPoly::polynomial(shifted);
        for x in [-1.0, 0.0, 0.4, 2.0] {
            assert!((q.eval(x) - p.eval(x + 0.3)).abs() < 1e-13);
        }
    }
}
