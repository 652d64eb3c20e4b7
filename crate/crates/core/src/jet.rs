//! Truncated multivariate Taylor arithmetic ("jets").
//!
//! Used as an independent route to derivatives of symbols: values and all
//! partial derivatives up to a fixed total order are propagated through sums,
//! products and complex powers, without touching the symbolic differentiation
//! rules.

use crate::symcore::{multi_index_factorial, multi_indices_of_order, HomogeneousSymbol, MultiIndex, TorusFourierSeries};
use num_complex::Complex64;
use std::collections::HashMap;
use std::f64::consts::PI;

#[derive(Clone, Debug)]
pub struct JetSpace {
    n: usize,
    order: u32,
    indices: Vec<MultiIndex>,
    lookup: HashMap<MultiIndex, usize>,
    products: Vec<(usize, usize, usize)>,
}

impl JetSpace {
    pub fn new(n: usize, order: u32) -> Self {
        let indices: Vec<MultiIndex> = (0..=order).flat_map(|k| multi_indices_of_order(n, k)).collect();
        let lookup: HashMap<MultiIndex, usize> = indices.iter().enumerate().map(|(i, a)| (*a, i)).collect();
        let mut products = Vec::new();
        for (i, a) in indices.iter().enumerate() {
            for (j, b) in indices.iter().enumerate() {
                let s = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
                if let Some(&k) = lookup.get(&s) {
                    products.push((i, j, k));
                }
            }
        }
        JetSpace { n, order, indices, lookup, products }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn constant(&self, c: Complex64) -> Jet {
        let mut v = vec![Complex64::new(0.0, 0.0); self.len()];
        v[0] = c;
        Jet(v)
    }

    /// x0 + h_axis
    pub fn variable(&self, axis: usize, x0: f64) -> Jet {
        let mut j = self.constant(Complex64::new(x0, 0.0));
        if self.order >= 1 {
            let mut e = [0u8; 3];
            e[axis] = 1;
            j.0[self.lookup[&e]] = Complex64::new(1.0, 0.0);
        }
        j
    }

    pub fn add(&self, a: &Jet, b: &Jet) -> Jet {
        Jet(a.0.iter().zip(&b.0).map(|(x, y)| x + y).collect())
    }

    pub fn scale(&self, a: &Jet, c: Complex64) -> Jet {
        Jet(a.0.iter().map(|x| x * c).collect())
    }

    pub fn mul(&self, a: &Jet, b: &Jet) -> Jet {
        let mut out = vec![Complex64::new(0.0, 0.0); self.len()];
        for &(i, j, k) in &self.products {
            out[k] += a.0[i] * b.0[j];
        }
        Jet(out)
    }

    /// a^s for a jet with nonzero value, via the binomial series in the
    /// nilpotent part.
    pub fn pow(&self, a: &Jet, s: Complex64) -> Jet {
        let a0 = a.0[0];
        let mut u = a.clone();
        u.0[0] = Complex64::new(0.0, 0.0);
        let u = self.scale(&u, a0.inv());
        let mut result = self.constant(Complex64::new(1.0, 0.0));
        let mut power = self.constant(Complex64::new(1.0, 0.0));
        let mut binom = Complex64::new(1.0, 0.0);
        for k in 1..=self.order {
            power = self.mul(&power, &u);
            binom *= (s - (k - 1) as f64) / k as f64;
            result = self.add(&result, &self.scale(&power, binom));
        }
        let lead = if s.im == 0.0 && s.re.fract() == 0.0 { a0.powi(s.re as i32) } else { a0.powc(s) };
        self.scale(&result, lead)
    }

    /// Partial derivative ∂^β at the expansion point.
    pub fn derivative(&self, a: &Jet, beta: &MultiIndex) -> Complex64 {
        match self.lookup.get(beta) {
            Some(&i) => a.0[i] * multi_index_factorial(beta),
            None => Complex64::new(0.0, 0.0),
        }
    }

    /// Jet in x of a trigonometric polynomial at x0 (exact Taylor coefficients).
    pub fn fourier(&self, g: &TorusFourierSeries, x0: &[f64]) -> Jet {
        let mut out = vec![Complex64::new(0.0, 0.0); self.len()];
        for (gamma, c) in g.coeffs() {
            let phase: f64 = (0..self.n).map(|i| gamma[i] as f64 * x0[i]).sum();
            let base = c * Complex64::from_polar(1.0, 2.0 * PI * phase);
            for (k, beta) in self.indices.iter().enumerate() {
                let mut v = base;
                for i in 0..self.n {
                    let w = Complex64::new(0.0, 2.0 * PI * gamma[i] as f64);
                    v *= w.powi(beta[i] as i32) / crate::quad::factorial(beta[i] as u32);
                }
                out[k] += v;
            }
        }
        Jet(out)
    }

    /// Jet in x at x0 of a homogeneous symbol with ξ held fixed.
    pub fn symbol_in_x(&self, h: &HomogeneousSymbol, x0: &[f64], xi: &[f64]) -> Jet {
        let r = xi[..self.n].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut acc = self.constant(Complex64::new(0.0, 0.0));
        for (a, g) in h.terms() {
            let mono: f64 = (0..self.n).map(|i| xi[i].powi(a[i] as i32)).product();
            let w = crate::symcore::radial_power(r, h.radial_exponent(a)) * mono;
            acc = self.add(&acc, &self.scale(&self.fourier(g, x0), w));
        }
        acc
    }

    /// Jet in ξ at ξ0 of a homogeneous symbol with x held fixed.
    pub fn symbol_in_xi(&self, h: &HomogeneousSymbol, x: &[f64], xi0: &[f64]) -> Jet {
        let vars: Vec<Jet> = (0..self.n).map(|i| self.variable(i, xi0[i])).collect();
        let mut r2 = self.constant(Complex64::new(0.0, 0.0));
        for v in &vars {
            r2 = self.add(&r2, &self.mul(v, v));
        }
        let mut acc = self.constant(Complex64::new(0.0, 0.0));
        for (a, g) in h.terms() {
            let mut term = self.constant(g.eval(x));
            for (i, v) in vars.iter().enumerate() {
                for _ in 0..a[i] {
                    term = self.mul(&term, v);
                }
            }
            let s = h.radial_exponent(a);
            if s != Complex64::new(0.0, 0.0) {
                term = self.mul(&term, &self.pow(&r2, s / 2.0));
            }
            acc = self.add(&acc, &term);
        }
        acc
    }
}

#[derive(Clone, Debug)]
pub struct Jet(pub Vec<Complex64>);

impl Jet {
    pub fn value(&self) -> Complex64 {
        self.0[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pow_matches_closed_form_derivatives() {
        // f(h) = (2 + h)^{-1/2}: f'' = 3/4 (2+h)^{-5/2}
        let sp = JetSpace::new(1, 4);
        let x = sp.variable(0, 2.0);
        let f = sp.pow(&x, Complex64::new(-0.5, 0.0));
        let d2 = sp.derivative(&f, &[2, 0, 0]);
        assert!((d2.re - 0.75 * 2f64.powf(-2.5)).abs() < 1e-14);
    }

    #[test]
    fn symbol_jets_match_symbolic_derivatives() {
        let n = 2;
        let h = HomogeneousSymbol::radial_with(n, Complex64::new(-0.7, 0.0), TorusFourierSeries::cos(n, [1, 1, 0], 1.3))
            .add(&HomogeneousSymbol::monomial(
                n,
                Complex64::new(-0.7, 0.0),
                [1, 0, 0],
                TorusFourierSeries::sin(n, [0, 1, 0], 0.4),
            ))
            .unwrap();
        let sp = JetSpace::new(n, 3);
        let x = [0.21, 0.77];
        let xi = [0.6, -1.1];
        let jx = sp.symbol_in_x(&h, &x, &xi);
        let jxi = sp.symbol_in_xi(&h, &x, &xi);
        for k in 0..=3 {
            for a in multi_indices_of_order(n, k) {
                let sx = h.dx_multi(&a).eval(&x, &xi);
                let sxi = h.dxi_multi(&a).eval(&x, &xi);
                assert!((sp.derivative(&jx, &a) - sx).norm() < 1e-10 * (1.0 + sx.norm()));
                assert!((sp.derivative(&jxi, &a) - sxi).norm() < 1e-12 * (1.0 + sxi.norm()));
            }
        }
    }
}
