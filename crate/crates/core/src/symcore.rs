//! Homogeneous and poly-homogeneous symbols on T^n × R^n.
//!
//! A homogeneous symbol of degree d is a finite sum Σ_α g_α(x) ξ^α |ξ|^{d−|α|}
//! with trigonometric polynomials g_α. The representation is kept in a unique
//! normal form in which the exponent of the last axis is at most one (using
//! ξ_n² = |ξ|² − Σ_{i<n} ξ_i²), so symbolic equality is structural equality.

use crate::quad::{gamma_half_integer, GaussLegendre, Neumaier, NeumaierComplex};
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

pub type Freq = [i32; 3];
pub type MultiIndex = [u8; 3];

const DEGREE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("degree mismatch: {0} vs {1}")]
    DegreeMismatch(Complex64, Complex64),
    #[error("unsupported dimension {0}; only n = 2 and n = 3 are supported")]
    UnsupportedDimension(usize),
    #[error("ellipticity violated at x = {x:?}, ξ = {xi:?}: principal symbol value {value}")]
    Ellipticity { x: Vec<f64>, xi: Vec<f64>, value: f64 },
    #[error("invalid symbol: {0}")]
    Invalid(String),
}

pub(crate) fn degrees_equal(a: Complex64, b: Complex64) -> bool {
    (a - b).norm() <= DEGREE_TOL * (1.0 + a.norm().max(b.norm()))
}

pub(crate) fn check_dim(n: usize) -> Result<(), SymbolError> {
    if n == 2 || n == 3 {
        Ok(())
    } else {
        Err(SymbolError::UnsupportedDimension(n))
    }
}

pub fn multi_index_order(a: &MultiIndex) -> u32 {
    a.iter().map(|&v| v as u32).sum()
}

pub fn multi_index_factorial(a: &MultiIndex) -> f64 {
    a.iter().map(|&v| crate::quad::factorial(v as u32)).product()
}

/// All multi-indices of total order k in n variables, in lexicographic order.
pub fn multi_indices_of_order(n: usize, k: u32) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut cur = [0u8; 3];
    fn rec(n: usize, axis: usize, left: u32, cur: &mut MultiIndex, out: &mut Vec<MultiIndex>) {
        if axis == n - 1 {
            cur[axis] = left as u8;
            out.push(*cur);
            cur[axis] = 0;
            return;
        }
        for v in (0..=left).rev() {
            cur[axis] = v as u8;
            rec(n, axis + 1, left - v, cur, out);
        }
        cur[axis] = 0;
    }
    rec(n, 0, k, &mut cur, &mut out);
    out
}

/// Trigonometric polynomial Σ_γ ĝ(γ) e^{2πiγ·x} on T^n.
#[derive(Clone, Debug, PartialEq)]
pub struct TorusFourierSeries {
    dim: usize,
    coeffs: BTreeMap<Freq, Complex64>,
}

impl TorusFourierSeries {
    pub fn zero(dim: usize) -> Self {
        TorusFourierSeries { dim, coeffs: BTreeMap::new() }
    }

    pub fn constant(dim: usize, c: Complex64) -> Self {
        let mut s = Self::zero(dim);
        s.add_at([0; 3], c);
        s
    }

    pub fn from_coeffs<I: IntoIterator<Item = (Freq, Complex64)>>(dim: usize, it: I) -> Self {
        let mut s = Self::zero(dim);
        for (g, c) in it {
            s.add_at(g, c);
        }
        s
    }

    /// amp · cos(2π γ·x)
    pub fn cos(dim: usize, gamma: Freq, amp: f64) -> Self {
        let neg = [-gamma[0], -gamma[1], -gamma[2]];
        Self::from_coeffs(dim, [(gamma, Complex64::new(amp / 2.0, 0.0)), (neg, Complex64::new(amp / 2.0, 0.0))])
    }

    /// amp · sin(2π γ·x)
    pub fn sin(dim: usize, gamma: Freq, amp: f64) -> Self {
        let neg = [-gamma[0], -gamma[1], -gamma[2]];
        Self::from_coeffs(dim, [(gamma, Complex64::new(0.0, -amp / 2.0)), (neg, Complex64::new(0.0, amp / 2.0))])
    }

    pub fn add_at(&mut self, gamma: Freq, c: Complex64) {
        debug_assert!(gamma[self.dim..].iter().all(|&v| v == 0));
        let e = self.coeffs.entry(gamma).or_insert(Complex64::new(0.0, 0.0));
        *e += c;
        if *e == Complex64::new(0.0, 0.0) {
            self.coeffs.remove(&gamma);
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeffs(&self) -> &BTreeMap<Freq, Complex64> {
        &self.coeffs
    }

    pub fn get(&self, gamma: &Freq) -> Complex64 {
        self.coeffs.get(gamma).copied().unwrap_or_default()
    }

    /// Mean over the unit torus, ĝ(0).
    pub fn mean(&self) -> Complex64 {
        self.get(&[0; 3])
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs.keys().all(|g| *g == [0; 3])
    }

    pub fn max_abs_freq(&self) -> i32 {
        self.coeffs.keys().flat_map(|g| g.iter().map(|v| v.abs())).max().unwrap_or(0)
    }

    /// Σ |ĝ(γ)|, an upper bound for sup |g|.
    pub fn l1_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).sum()
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut s = self.clone();
        for (g, c) in &other.coeffs {
            s.add_at(*g, *c);
        }
        s
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(Complex64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self::from_coeffs(self.dim, self.coeffs.iter().map(|(g, v)| (*g, v * c)))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut s = Self::zero(self.dim);
        for (g1, c1) in &self.coeffs {
            for (g2, c2) in &other.coeffs {
                s.add_at([g1[0] + g2[0], g1[1] + g2[1], g1[2] + g2[2]], c1 * c2);
            }
        }
        s
    }

    pub fn dx(&self, axis: usize) -> Self {
        Self::from_coeffs(
            self.dim,
            self.coeffs
                .iter()
                .map(|(g, c)| (*g, c * Complex64::new(0.0, 2.0 * PI * g[axis] as f64))),
        )
    }

    /// Pointwise complex conjugate: ĝ(γ) ↦ conj ĝ(−γ).
    pub fn conj(&self) -> Self {
        Self::from_coeffs(self.dim, self.coeffs.iter().map(|(g, c)| ([-g[0], -g[1], -g[2]], c.conj())))
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.coeffs.iter().all(|(g, c)| (self.get(&[-g[0], -g[1], -g[2]]).conj() - c).norm() <= tol)
    }

    pub fn eval(&self, x: &[f64]) -> Complex64 {
        let mut acc = NeumaierComplex::default();
        for (g, c) in &self.coeffs {
            let phase: f64 = (0..self.dim).map(|i| g[i] as f64 * x[i]).sum();
            acc.add(c * Complex64::from_polar(1.0, 2.0 * PI * phase));
        }
        acc.sum()
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.sub(other).coeffs.values().all(|c| c.norm() <= tol)
    }

    /// Drops amplitudes with modulus ≤ tol.
    pub fn pruned(&self, tol: f64) -> Self {
        Self::from_coeffs(self.dim, self.coeffs.iter().filter(|(_, c)| c.norm() > tol).map(|(g, c)| (*g, *c)))
    }
}

/// |ξ|^s with the convention that non-negative even integer powers are polynomial
/// (and therefore finite at ξ = 0).
pub fn radial_power(r: f64, s: Complex64) -> Complex64 {
    if s.im == 0.0 && s.re >= 0.0 && s.re.fract() == 0.0 && (s.re as i64) % 2 == 0 {
        return Complex64::new((r * r).powi((s.re as i32) / 2), 0.0);
    }
    if s.im == 0.0 {
        return Complex64::new(r.powf(s.re), 0.0);
    }
    (s * r.ln()).exp()
}

fn monomial(xi: &[f64], alpha: &MultiIndex) -> f64 {
    xi.iter().zip(alpha).map(|(x, &a)| x.powi(a as i32)).product()
}

/// Σ_α g_α(x) ξ^α |ξ|^{d−|α|}, all terms of common degree d.
#[derive(Clone, Debug, PartialEq)]
pub struct HomogeneousSymbol {
    dim: usize,
    degree: Complex64,
    terms: BTreeMap<MultiIndex, TorusFourierSeries>,
}

impl HomogeneousSymbol {
    pub fn zero(dim: usize, degree: Complex64) -> Self {
        HomogeneousSymbol { dim, degree, terms: BTreeMap::new() }
    }

    pub fn from_terms<I: IntoIterator<Item = (MultiIndex, TorusFourierSeries)>>(
        dim: usize,
        degree: Complex64,
        it: I,
    ) -> Self {
        let mut h = Self::zero(dim, degree);
        for (a, g) in it {
            h.add_term(a, &g);
        }
        h.normalize();
        h
    }

    /// g(x) ξ^α |ξ|^{d−|α|}
    pub fn monomial(dim: usize, degree: Complex64, alpha: MultiIndex, g: TorusFourierSeries) -> Self {
        Self::from_terms(dim, degree, [(alpha, g)])
    }

    /// c · |ξ|^d
    pub fn radial(dim: usize, degree: f64, c: f64) -> Self {
        Self::monomial(dim, Complex64::new(degree, 0.0), [0; 3], TorusFourierSeries::constant(dim, Complex64::new(c, 0.0)))
    }

    /// g(x) · |ξ|^d
    pub fn radial_with(dim: usize, degree: Complex64, g: TorusFourierSeries) -> Self {
        Self::monomial(dim, degree, [0; 3], g)
    }

    fn add_term(&mut self, alpha: MultiIndex, g: &TorusFourierSeries) {
        if g.is_zero() {
            return;
        }
        let merged = match self.terms.get(&alpha) {
            Some(e) => e.add(g),
            None => g.clone(),
        };
        if merged.is_zero() {
            self.terms.remove(&alpha);
        } else {
            self.terms.insert(alpha, merged);
        }
    }

    fn normalize(&mut self) {
        let last = self.dim - 1;
        loop {
            let key = self.terms.keys().find(|a| a[last] >= 2).copied();
            let Some(alpha) = key else { break };
            let g = self.terms.remove(&alpha).expect("key exists");
            let mut beta = alpha;
            beta[last] -= 2;
            self.add_term(beta, &g);
            let neg = g.scale(Complex64::new(-1.0, 0.0));
            for i in 0..last {
                let mut b = beta;
                b[i] += 2;
                self.add_term(b, &neg);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> Complex64 {
        self.degree
    }

    pub fn terms(&self) -> &BTreeMap<MultiIndex, TorusFourierSeries> {
        &self.terms
    }

    /// Exponent s = d − |α| of the radial factor of the term with multi-index α.
    pub fn radial_exponent(&self, alpha: &MultiIndex) -> Complex64 {
        self.degree - multi_index_order(alpha) as f64
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_x_independent(&self) -> bool {
        self.terms.values().all(|g| g.is_constant())
    }

    /// True if every term is a polynomial in ξ (radial exponent in 2N₀).
    pub fn is_polynomial(&self) -> bool {
        self.terms.keys().all(|a| {
            let s = self.radial_exponent(a);
            s.im == 0.0 && s.re >= 0.0 && s.re.fract() == 0.0 && (s.re as i64) % 2 == 0
        })
    }

    pub fn is_real_valued(&self, tol: f64) -> bool {
        self.degree.im == 0.0 && self.terms.values().all(|g| g.is_real(tol))
    }

    pub fn max_abs_freq(&self) -> i32 {
        self.terms.values().map(|g| g.max_abs_freq()).max().unwrap_or(0)
    }

    /// Upper bound for sup over the unit sphere and the torus.
    pub fn sphere_bound(&self) -> f64 {
        self.terms.values().map(|g| g.l1_norm()).sum()
    }

    fn check_same(&self, other: &Self) -> Result<(), SymbolError> {
        if self.dim != other.dim {
            return Err(SymbolError::DimensionMismatch(self.dim, other.dim));
        }
        if !degrees_equal(self.degree, other.degree) {
            return Err(SymbolError::DegreeMismatch(self.degree, other.degree));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, SymbolError> {
        self.check_same(other)?;
        let mut h = self.clone();
        for (a, g) in &other.terms {
            h.add_term(*a, g);
        }
        Ok(h)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SymbolError> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        self.scale(Complex64::new(-1.0, 0.0))
    }

    pub fn scale(&self, c: Complex64) -> Self {
        if c == Complex64::new(0.0, 0.0) {
            return Self::zero(self.dim, self.degree);
        }
        let mut h = Self::zero(self.dim, self.degree);
        for (a, g) in &self.terms {
            h.add_term(*a, &g.scale(c));
        }
        h
    }

    pub fn mul(&self, other: &Self) -> Result<Self, SymbolError> {
        if self.dim != other.dim {
            return Err(SymbolError::DimensionMismatch(self.dim, other.dim));
        }
        let mut h = Self::zero(self.dim, self.degree + other.degree);
        for (a1, g1) in &self.terms {
            for (a2, g2) in &other.terms {
                let a = [a1[0] + a2[0], a1[1] + a2[1], a1[2] + a2[2]];
                h.add_term(a, &g1.mul(g2));
            }
        }
        h.normalize();
        Ok(h)
    }

    /// Multiplication by an x-only function.
    pub fn mul_series(&self, g: &TorusFourierSeries) -> Self {
        let mut h = Self::zero(self.dim, self.degree);
        for (a, s) in &self.terms {
            h.add_term(*a, &s.mul(g));
        }
        h
    }

    /// ∂_{ξ_j}(ξ^α|ξ|^s) = α_j ξ^{α−e_j}|ξ|^s + s ξ^{α+e_j}|ξ|^{s−2}
    pub fn dxi(&self, axis: usize) -> Self {
        let mut h = Self::zero(self.dim, self.degree - 1.0);
        for (a, g) in &self.terms {
            if a[axis] > 0 {
                let mut b = *a;
                b[axis] -= 1;
                h.add_term(b, &g.scale(Complex64::new(a[axis] as f64, 0.0)));
            }
            let s = self.radial_exponent(a);
            if s != Complex64::new(0.0, 0.0) {
                let mut b = *a;
                b[axis] += 1;
                h.add_term(b, &g.scale(s));
            }
        }
        h.normalize();
        h
    }

    pub fn dx(&self, axis: usize) -> Self {
        let mut h = Self::zero(self.dim, self.degree);
        for (a, g) in &self.terms {
            h.add_term(*a, &g.dx(axis));
        }
        h
    }

    pub fn dxi_multi(&self, alpha: &MultiIndex) -> Self {
        let mut h = self.clone();
        for axis in 0..self.dim {
            for _ in 0..alpha[axis] {
                h = h.dxi(axis);
            }
        }
        h
    }

    pub fn dx_multi(&self, alpha: &MultiIndex) -> Self {
        let mut h = self.clone();
        for axis in 0..self.dim {
            for _ in 0..alpha[axis] {
                h = h.dx(axis);
            }
        }
        h
    }

    pub fn conj(&self) -> Self {
        let mut h = Self::zero(self.dim, self.degree.conj());
        for (a, g) in &self.terms {
            h.add_term(*a, &g.conj());
        }
        h
    }

    /// Keeps only the x-mean of every coefficient.
    pub fn x_mean(&self) -> Self {
        let mut h = Self::zero(self.dim, self.degree);
        for (a, g) in &self.terms {
            h.add_term(*a, &TorusFourierSeries::constant(self.dim, g.mean()));
        }
        h
    }

    /// Coefficient of e^{2πiγ·x} as a homogeneous function of ξ.
    pub fn fourier_mode(&self, gamma: &Freq) -> Self {
        let mut h = Self::zero(self.dim, self.degree);
        for (a, g) in &self.terms {
            h.add_term(*a, &TorusFourierSeries::constant(self.dim, g.get(gamma)));
        }
        h
    }

    pub fn eval(&self, x: &[f64], xi: &[f64]) -> Complex64 {
        let r = xi[..self.dim].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut acc = NeumaierComplex::default();
        for (a, g) in &self.terms {
            let s = self.radial_exponent(a);
            acc.add(g.eval(x) * monomial(&xi[..self.dim], a) * radial_power(r, s));
        }
        acc.sum()
    }

    /// Value at ξ of the x-independent part, i.e. Σ_α ĝ_α(γ) ξ^α |ξ|^s for one mode γ.
    pub fn eval_mode(&self, gamma: &Freq, xi: &[f64]) -> Complex64 {
        let r = xi[..self.dim].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut acc = NeumaierComplex::default();
        for (a, g) in &self.terms {
            let c = g.get(gamma);
            if c != Complex64::new(0.0, 0.0) {
                acc.add(c * monomial(&xi[..self.dim], a) * radial_power(r, self.radial_exponent(a)));
            }
        }
        acc.sum()
    }

    /// Structural equality up to an absolute tolerance on every amplitude.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        if self.dim != other.dim || !degrees_equal(self.degree, other.degree) {
            return false;
        }
        let mut diff = self.clone();
        for (a, g) in &other.terms {
            diff.add_term(*a, &g.scale(Complex64::new(-1.0, 0.0)));
        }
        diff.terms.values().all(|g| g.coeffs().values().all(|c| c.norm() <= tol))
    }

    pub fn pruned(&self, tol: f64) -> Self {
        let mut h = Self::zero(self.dim, self.degree);
        for (a, g) in &self.terms {
            h.add_term(*a, &g.pruned(tol));
        }
        h
    }

    /// Largest amplitude modulus.
    pub fn max_amplitude(&self) -> f64 {
        self.terms
            .values()
            .flat_map(|g| g.coeffs().values().map(|c| c.norm()))
            .fold(0.0, f64::max)
    }
}

/// ∫_{S^{n−1}} ξ^α dς in closed form.
pub fn sphere_moment(alpha: &MultiIndex, n: usize) -> f64 {
    if alpha[..n].iter().any(|a| a % 2 == 1) {
        return 0.0;
    }
    let num: f64 = alpha[..n].iter().map(|&a| gamma_half_integer(a as u32 + 1)).product();
    let total = multi_index_order(alpha) + n as u32;
    2.0 * num / gamma_half_integer(total)
}

/// ∫_{T^n} ∫_{S^{n−1}} g(x, ω) dς(ω) dx (the torus has unit volume).
pub fn sphere_torus_integral(g: &HomogeneousSymbol) -> Complex64 {
    sphere_torus_integral_with(g, sphere_moment)
}

/// Same integral with a caller-supplied moment table.
pub fn sphere_torus_integral_with<M: Fn(&MultiIndex, usize) -> f64>(g: &HomogeneousSymbol, moment: M) -> Complex64 {
    let mut acc = NeumaierComplex::default();
    for (a, s) in g.terms() {
        acc.add(s.mean() * moment(a, g.dim()));
    }
    acc.sum()
}

/// Product quadrature on S^{n−1} together with a uniform torus grid.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    dim: usize,
    nodes: Vec<[f64; 3]>,
    weights: Vec<f64>,
    torus_res: usize,
}

impl SphereGrid {
    /// `sphere_res` azimuthal points (n = 2: the whole rule; n = 3: combined with
    /// `sphere_res / 2` Gauss–Legendre nodes in cos θ). `torus_res` points per axis.
    pub fn new(dim: usize, sphere_res: usize, torus_res: usize) -> Result<Self, SymbolError> {
        check_dim(dim)?;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let na = sphere_res.max(4);
        if dim == 2 {
            for k in 0..na {
                let th = 2.0 * PI * k as f64 / na as f64;
                nodes.push([th.cos(), th.sin(), 0.0]);
                weights.push(2.0 * PI / na as f64);
            }
        } else {
            let gl = GaussLegendre::new((na / 2).max(2));
            for (z, wz) in gl.nodes.iter().zip(&gl.weights) {
                let rho = (1.0 - z * z).sqrt();
                for k in 0..na {
                    let ph = 2.0 * PI * k as f64 / na as f64;
                    nodes.push([rho * ph.cos(), rho * ph.sin(), *z]);
                    weights.push(wz * 2.0 * PI / na as f64);
                }
            }
        }
        Ok(SphereGrid { dim, nodes, weights, torus_res: torus_res.max(1) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sphere_nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn sphere_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn torus_res(&self) -> usize {
        self.torus_res
    }

    /// Uniform torus grid points; each carries weight 1 / torus_res^n. Exact for
    /// trigonometric polynomials with all |γ_i| < torus_res.
    pub fn torus_nodes(&self) -> Vec<[f64; 3]> {
        let r = self.torus_res;
        let total = r.pow(self.dim as u32);
        (0..total)
            .map(|mut idx| {
                let mut p = [0.0; 3];
                for v in p.iter_mut().take(self.dim) {
                    *v = (idx % r) as f64 / r as f64;
                    idx /= r;
                }
                p
            })
            .collect()
    }

    pub fn integrate_sphere<F: FnMut(&[f64; 3]) -> Complex64>(&self, mut f: F) -> Complex64 {
        let mut acc = NeumaierComplex::default();
        for (p, w) in self.nodes.iter().zip(&self.weights) {
            acc.add(f(p) * *w);
        }
        acc.sum()
    }

    /// Quadrature of g over T^n × S^{n−1}.
    pub fn integrate_symbol(&self, g: &HomogeneousSymbol) -> Complex64 {
        let xs = self.torus_nodes();
        let wx = 1.0 / xs.len() as f64;
        let mut acc = NeumaierComplex::default();
        for x in &xs {
            acc.add(self.integrate_sphere(|w| g.eval(x, w)) * wx);
        }
        acc.sum()
    }
}

/// ψ₁(r) = B(2r−1) / (B(2r−1) + B(2−2r)), B(u) = exp(−1/u) for u > 0.
pub fn psi1(r: f64) -> f64 {
    if r <= 0.5 {
        return 0.0;
    }
    if r >= 1.0 {
        return 1.0;
    }
    let b = |u: f64| if u > 0.0 { (-1.0 / u).exp() } else { 0.0 };
    let p = b(2.0 * r - 1.0);
    let q = b(2.0 - 2.0 * r);
    p / (p + q)
}

/// Low-frequency cutoff ξ ↦ ψ₁(t|ξ|): vanishes for |ξ| ≤ 1/(2t), equals 1 for |ξ| ≥ 1/t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutoffSpec {
    t: f64,
}

impl CutoffSpec {
    pub fn new(t: f64) -> Result<Self, SymbolError> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(SymbolError::Invalid(format!("cutoff scale must be positive, got {t}")));
        }
        Ok(CutoffSpec { t })
    }

    pub fn unit() -> Self {
        CutoffSpec { t: 1.0 }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// Radius beyond which the cutoff is identically one.
    pub fn radius(&self) -> f64 {
        1.0 / self.t
    }

    pub fn eval(&self, xi_norm: f64) -> f64 {
        psi1(self.t * xi_norm)
    }
}

/// A homogeneous component with its cutoff. `cutoff = None` is permitted only for
/// polynomial components, which are smooth at ξ = 0 without one.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub symbol: HomogeneousSymbol,
    pub cutoff: Option<CutoffSpec>,
}

impl Component {
    pub fn weight(&self, xi_norm: f64) -> f64 {
        match &self.cutoff {
            Some(c) => c.eval(xi_norm),
            None => 1.0,
        }
    }
}

/// Finite classical symbol Σ_j h_{m−j}(x, ξ) ψ₁(t_j|ξ|).
#[derive(Clone, Debug, PartialEq)]
pub struct PolyHomogeneousSymbol {
    dim: usize,
    order: Complex64,
    components: Vec<Component>,
}

impl PolyHomogeneousSymbol {
    pub fn new(dim: usize, order: Complex64, components: Vec<Component>) -> Result<Self, SymbolError> {
        check_dim(dim)?;
        for (j, c) in components.iter().enumerate() {
            if c.symbol.dim() != dim {
                return Err(SymbolError::DimensionMismatch(dim, c.symbol.dim()));
            }
            let want = order - j as f64;
            if !degrees_equal(c.symbol.degree(), want) {
                return Err(SymbolError::DegreeMismatch(want, c.symbol.degree()));
            }
            if c.cutoff.is_none() && !c.symbol.is_polynomial() {
                return Err(SymbolError::Invalid(format!(
                    "component {j} is not polynomial in ξ and needs a cutoff"
                )));
            }
        }
        Ok(PolyHomogeneousSymbol { dim, order, components })
    }

    /// Single component with the unit cutoff.
    pub fn single(h: HomogeneousSymbol) -> Self {
        let cutoff = if h.is_polynomial() { None } else { Some(CutoffSpec::unit()) };
        PolyHomogeneousSymbol { dim: h.dim(), order: h.degree(), components: vec![Component { symbol: h, cutoff }] }
    }

    /// Components from a list of homogeneous symbols, all with the given cutoff
    /// (polynomial components get none).
    pub fn with_cutoff(
        dim: usize,
        order: Complex64,
        parts: Vec<HomogeneousSymbol>,
        cutoff: CutoffSpec,
    ) -> Result<Self, SymbolError> {
        let comps = parts
            .into_iter()
            .map(|h| {
                let cutoff = if h.is_polynomial() { None } else { Some(cutoff) };
                Component { symbol: h, cutoff }
            })
            .collect();
        Self::new(dim, order, comps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> Complex64 {
        self.order
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Homogeneous component of degree m − j (zero beyond the stored list).
    pub fn homogeneous(&self, j: usize) -> HomogeneousSymbol {
        self.components
            .get(j)
            .map(|c| c.symbol.clone())
            .unwrap_or_else(|| HomogeneousSymbol::zero(self.dim, self.order - j as f64))
    }

    pub fn is_x_independent(&self) -> bool {
        self.components.iter().all(|c| c.symbol.is_x_independent())
    }

    pub fn is_real_valued(&self, tol: f64) -> bool {
        self.components.iter().all(|c| c.symbol.is_real_valued(tol))
    }

    pub fn max_abs_freq(&self) -> i32 {
        self.components.iter().map(|c| c.symbol.max_abs_freq()).max().unwrap_or(0)
    }

    /// All x-frequencies present in any component.
    pub fn frequencies(&self) -> Vec<Freq> {
        let mut set = std::collections::BTreeSet::new();
        for c in &self.components {
            for g in c.symbol.terms().values() {
                set.extend(g.coeffs().keys().copied());
            }
        }
        set.into_iter().collect()
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let components = self
            .components
            .iter()
            .map(|k| Component { symbol: k.symbol.scale(c), cutoff: k.cutoff })
            .collect();
        PolyHomogeneousSymbol { dim: self.dim, order: self.order, components }
    }

    /// Same components with every cutoff scale multiplied by `factor`.
    pub fn rescale_cutoffs(&self, factor: f64) -> Self {
        let components = self
            .components
            .iter()
            .map(|k| Component { symbol: k.symbol.clone(), cutoff: k.cutoff.map(|c| CutoffSpec { t: c.t * factor }) })
            .collect();
        PolyHomogeneousSymbol { dim: self.dim, order: self.order, components }
    }

    /// Realized symbol a(x, ξ).
    pub fn eval(&self, x: &[f64], xi: &[f64]) -> Complex64 {
        let r = xi[..self.dim].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut acc = NeumaierComplex::default();
        for c in &self.components {
            let w = c.weight(r);
            if w != 0.0 {
                acc.add(c.symbol.eval(x, xi) * w);
            }
        }
        acc.sum()
    }

    /// Fourier coefficient in x at frequency γ of the realized symbol at ξ.
    pub fn eval_mode(&self, gamma: &Freq, xi: &[f64]) -> Complex64 {
        let r = xi[..self.dim].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut acc = NeumaierComplex::default();
        for c in &self.components {
            let w = c.weight(r);
            if w != 0.0 {
                acc.add(c.symbol.eval_mode(gamma, xi) * w);
            }
        }
        acc.sum()
    }

    /// x-mean of the realized symbol at ξ.
    pub fn mean_at(&self, xi: &[f64]) -> Complex64 {
        self.eval_mode(&[0; 3], xi)
    }
}

/// Self-adjoint elliptic operator data: real classical symbol of real order m0 > 0.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipticOperatorSpec {
    symbol: PolyHomogeneousSymbol,
    m0: f64,
    c0: f64,
    c1: f64,
}

impl EllipticOperatorSpec {
    /// Validates ℓ_{m0} ≥ c0 on a sphere × torus grid. `c1` is a lower-bound shift
    /// for the realized symbol: ℓ(x, ξ) ≥ c0|ξ|^{m0} − c1.
    pub fn new(symbol: PolyHomogeneousSymbol, c0: f64, c1: f64) -> Result<Self, SymbolError> {
        let m = symbol.order();
        if m.im != 0.0 || m.re <= 0.0 {
            return Err(SymbolError::Invalid(format!("operator order must be real and positive, got {m}")));
        }
        if !(c0 > 0.0) || c1 < 0.0 {
            return Err(SymbolError::Invalid("need c0 > 0 and c1 ≥ 0".into()));
        }
        if !symbol.is_real_valued(1e-14) {
            return Err(SymbolError::Invalid("operator symbol must be real-valued".into()));
        }
        let min = principal_minimum(&symbol.homogeneous(0))?;
        if min.0 < c0 {
            return Err(SymbolError::Ellipticity { x: min.1, xi: min.2, value: min.0 });
        }
        Ok(EllipticOperatorSpec { symbol, m0: m.re, c0, c1 })
    }

    /// Uses c0 = 0.99 · (sampled minimum of ℓ_{m0} on the sphere).
    pub fn with_sampled_constant(symbol: PolyHomogeneousSymbol, c1: f64) -> Result<Self, SymbolError> {
        let min = principal_minimum(&symbol.homogeneous(0))?;
        if !(min.0 > 0.0) {
            return Err(SymbolError::Ellipticity { x: min.1, xi: min.2, value: min.0 });
        }
        Self::new(symbol, 0.99 * min.0, c1)
    }

    pub fn symbol(&self) -> &PolyHomogeneousSymbol {
        &self.symbol
    }

    pub fn principal(&self) -> HomogeneousSymbol {
        self.symbol.homogeneous(0)
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn dim(&self) -> usize {
        self.symbol.dim()
    }

    /// Fourier multiplier (all components x-independent).
    pub fn is_multiplier(&self) -> bool {
        self.symbol.is_x_independent()
    }

    /// Realized symbol value ℓ(ξ) for a multiplier (x-mean otherwise).
    pub fn multiplier_value(&self, xi: &[f64]) -> f64 {
        self.symbol.mean_at(xi).re
    }

    /// Radius R with ℓ(x, ξ) > level for all |ξ| > R, from the lower bound.
    pub fn radius_above(&self, level: f64) -> f64 {
        ((level.max(0.0) + self.c1) / self.c0).powf(1.0 / self.m0)
    }
}

/// Minimum of a real homogeneous symbol over a sphere × torus grid, with the node.
fn principal_minimum(h: &HomogeneousSymbol) -> Result<(f64, Vec<f64>, Vec<f64>), SymbolError> {
    let n = h.dim();
    let tr = if h.is_x_independent() { 1 } else { (4 * h.max_abs_freq() as usize + 8).max(16) };
    let grid = SphereGrid::new(n, 128, tr)?;
    let mut best = (f64::INFINITY, vec![], vec![]);
    for x in grid.torus_nodes() {
        for w in grid.sphere_nodes() {
            let v = h.eval(&x, w).re;
            if v < best.0 {
                best = (v, x[..n].to_vec(), w[..n].to_vec());
            }
        }
    }
    Ok(best)
}

/// ∫_{T^n × S^{n−1}} g(x, ω) ℓ_{m0}(x, ω)^{−σ}, refined by doubling the grid until
/// successive estimates agree to a relative 1e−10.
pub fn weighted_coefficient_integral(
    g: &HomogeneousSymbol,
    ell: &EllipticOperatorSpec,
    sigma: Complex64,
) -> Result<Complex64, SymbolError> {
    let n = g.dim();
    if n != ell.dim() {
        return Err(SymbolError::DimensionMismatch(n, ell.dim()));
    }
    if g.is_zero() {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let principal = ell.principal();
    let x_free = principal.is_x_independent();
    let (g_eff, mut tres) = if x_free {
        (g.x_mean(), 1usize)
    } else {
        (g.clone(), (2 * (g.max_abs_freq() + principal.max_abs_freq()) as usize + 4).max(8))
    };
    let mut sres = 32usize;
    let mut prev: Option<Complex64> = None;
    loop {
        let (val, scale) = wci_on_grid(&g_eff, &principal, sigma, sres, tres)?;
        if let Some(p) = prev {
            let change = (val - p).norm();
            if change <= 1e-10 * val.norm().max(1e-3 * scale) || sres >= 1 << 13 {
                return Ok(val);
            }
        }
        prev = Some(val);
        sres *= 2;
        if !x_free {
            tres *= 2;
            if tres > 256 {
                tres = 256;
            }
        }
    }
}

fn wci_on_grid(
    g: &HomogeneousSymbol,
    ell: &HomogeneousSymbol,
    sigma: Complex64,
    sres: usize,
    tres: usize,
) -> Result<(Complex64, f64), SymbolError> {
    let n = g.dim();
    let grid = SphereGrid::new(n, sres, tres)?;
    let xs = grid.torus_nodes();
    let wx = 1.0 / xs.len() as f64;
    let sph = grid.sphere_nodes();
    let sw = grid.sphere_weights();
    let mono = |terms: &BTreeMap<MultiIndex, TorusFourierSeries>| -> Vec<Vec<f64>> {
        terms.keys().map(|a| sph.iter().map(|w| monomial(&w[..n], a)).collect()).collect()
    };
    let g_mono = mono(g.terms());
    let l_mono = mono(ell.terms());
    let mut acc = NeumaierComplex::default();
    let mut scale = Neumaier::default();
    for x in &xs {
        let gv: Vec<Complex64> = g.terms().values().map(|s| s.eval(x)).collect();
        let lv: Vec<Complex64> = ell.terms().values().map(|s| s.eval(x)).collect();
        for (i, w) in sph.iter().enumerate() {
            let mut l = 0.0;
            for (c, m) in lv.iter().zip(&l_mono) {
                l += c.re * m[i];
            }
            if !(l > 0.0) {
                return Err(SymbolError::Ellipticity { x: x[..n].to_vec(), xi: w[..n].to_vec(), value: l });
            }
            let mut gval = Complex64::new(0.0, 0.0);
            for (c, m) in gv.iter().zip(&g_mono) {
                gval += c * m[i];
            }
            let f = gval * (-sigma * l.ln()).exp();
            acc.add(f * (sw[i] * wx));
            scale.add(f.norm() * sw[i] * wx);
        }
    }
    Ok((acc.sum(), scale.sum()))
}
