//! Test functions, functional-calculus symbols and a numeric Helffer–Sjöstrand
//! engine.
//!
//! Conventions: for an almost analytic extension F of f we write
//! DF = (∂_x + i∂_y)F. Then f(λ) = (1/2π) ∫ DF(z) (λ − z)^{−1} dA(z) and
//! (−1)^j f^{(j)}(λ)/j! = (1/2π) ∫ DF(z) (λ − z)^{−1−j} dA(z).

use crate::parametrix::build_parametrix;
use crate::quad::{factorial, GaussLegendre};
use crate::symcore::{EllipticOperatorSpec, HomogeneousSymbol, SymbolError};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::f64::consts::PI;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FuncalcError {
    #[error("function must be compactly supported")]
    NotCompact,
    #[error("bandwidth too small: relative spectral tail {tail:.3e} exceeds {tol:.1e}")]
    Bandwidth { tail: f64, tol: f64 },
    #[error("matrix is not Hermitian (defect {0:.3e})")]
    NotHermitian(f64),
    #[error("derivative order {0} exceeds the supported maximum")]
    DerivativeOrder(usize),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
}

const MAX_BUMP_DERIVATIVE: usize = 24;

/// Expression tree of smooth test functions with exact derivatives.
#[derive(Clone, Debug, PartialEq)]
pub enum TestFunction {
    /// Σ c_k u^k
    Poly(Vec<f64>),
    /// e^{a u}
    Exp(f64),
    /// B₀(u) = exp(−1/(1 − u²)) on (−1, 1), zero elsewhere
    Bump,
    /// S(u) = ∫_{−1}^u B₀ / ∫_{−1}^1 B₀
    Step,
    /// f(scale·u + shift)
    Affine { inner: Box<TestFunction>, scale: f64, shift: f64 },
    Sum(Box<TestFunction>, Box<TestFunction>),
    Product(Box<TestFunction>, Box<TestFunction>),
}

/// Closed interval [lo, hi] (possibly infinite).
pub type Interval = (f64, f64);

fn bump_polynomials() -> &'static Vec<Vec<f64>> {
    static P: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    P.get_or_init(|| {
        // B₀^{(k)} = P_k(u) / (1−u²)^{2k} · B₀ with
        // P_{k+1} = P_k′ (1−u²)² + 4k u (1−u²) P_k − 2u P_k.
        let mut out = vec![vec![1.0]];
        for k in 0..MAX_BUMP_DERIVATIVE {
            let p = &out[k];
            let mut next = vec![0.0; p.len() + 4];
            for (i, &c) in p.iter().enumerate() {
                if i > 0 {
                    let d = c * i as f64;
                    // d u^{i−1} (1 − 2u² + u⁴)
                    next[i - 1] += d;
                    next[i + 1] -= 2.0 * d;
                    next[i + 3] += d;
                }
                // 4k u (1 − u²) c u^i − 2u c u^i
                next[i + 1] += 4.0 * k as f64 * c - 2.0 * c;
                next[i + 3] -= 4.0 * k as f64 * c;
            }
            while next.len() > 1 && *next.last().unwrap() == 0.0 {
                next.pop();
            }
            out.push(next);
        }
        out
    })
}

fn horner(c: &[f64], u: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * u + v)
}

fn bump_derivative(u: f64, k: usize) -> f64 {
    if u <= -1.0 || u >= 1.0 {
        return 0.0;
    }
    let w = 1.0 - u * u;
    let p = &bump_polynomials()[k];
    horner(p, u) * (-1.0 / w - 2.0 * k as f64 * w.ln()).exp()
}

fn bump_mass() -> f64 {
    2.0 * step_table().1[STEP_TABLE]
}

/// Running integral of B₀ on a uniform table over [−1, 0]; values in between
/// add one short Gauss panel.
fn step_table() -> &'static (GaussLegendre, Vec<f64>) {
    static T: OnceLock<(GaussLegendre, Vec<f64>)> = OnceLock::new();
    T.get_or_init(|| {
        let gl = GaussLegendre::new(12);
        let mut acc = vec![0.0];
        for i in 0..STEP_TABLE {
            let a = -1.0 + i as f64 / STEP_TABLE as f64;
            let b = a + 1.0 / STEP_TABLE as f64;
            let last = acc[i];
            acc.push(last + gl.integrate(a, b, 1, |s| bump_derivative(s, 0)));
        }
        (gl, acc)
    })
}

const STEP_TABLE: usize = 512;

fn step_value(u: f64) -> f64 {
    if u <= -1.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let (gl, table) = step_table();
    let v = -u.abs();
    let i = (((v + 1.0) * STEP_TABLE as f64).floor() as usize).min(STEP_TABLE - 1);
    let a = -1.0 + i as f64 / STEP_TABLE as f64;
    let part = (table[i] + gl.integrate(a, v, 1, |s| bump_derivative(s, 0))) / (2.0 * table[STEP_TABLE]);
    if u <= 0.0 {
        part
    } else {
        1.0 - part
    }
}

fn intersect(a: Option<Interval>, b: Option<Interval>) -> Option<Interval> {
    let (a, b) = (a?, b?);
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    (lo <= hi).then_some((lo, hi))
}

fn affine_preimage(iv: Option<Interval>, scale: f64, shift: f64) -> Option<Interval> {
    let (lo, hi) = iv?;
    let a = (lo - shift) / scale;
    let b = (hi - shift) / scale;
    Some((a.min(b), a.max(b)))
}

impl TestFunction {
    pub fn constant(c: f64) -> Self {
        TestFunction::Poly(vec![c])
    }

    /// Bump supported exactly on [a, b], peak e^{−1} at the midpoint.
    pub fn bump_on(a: f64, b: f64) -> Self {
        TestFunction::Bump.affine(2.0 / (b - a), -(a + b) / (b - a))
    }

    /// Smooth transition from 0 (u ≤ a) to 1 (u ≥ b).
    pub fn step_between(a: f64, b: f64) -> Self {
        TestFunction::Step.affine(2.0 / (b - a), -(a + b) / (b - a))
    }

    /// Equal to 1 for u ≤ c and to 0 for u ≥ d.
    pub fn cutoff(c: f64, d: f64) -> Self {
        // S(−v) = 1 − S(v)
        TestFunction::Step.affine(-2.0 / (d - c), (c + d) / (d - c))
    }

    /// The fixed even cutoff: 1 on [−1, 1], 0 outside [−2, 2].
    pub fn plateau() -> Self {
        TestFunction::step_between(-2.0, -1.0).mul(TestFunction::cutoff(1.0, 2.0))
    }

    pub fn affine(self, scale: f64, shift: f64) -> Self {
        TestFunction::Affine { inner: Box::new(self), scale, shift }
    }

    pub fn add(self, other: Self) -> Self {
        TestFunction::Sum(Box::new(self), Box::new(other))
    }

    pub fn mul(self, other: Self) -> Self {
        TestFunction::Product(Box::new(self), Box::new(other))
    }

    pub fn scaled(self, c: f64) -> Self {
        TestFunction::constant(c).mul(self)
    }

    /// Values of f, f′, …, f^{(k)} at u.
    pub fn derivatives(&self, u: f64, k: usize) -> Vec<f64> {
        match self {
            TestFunction::Poly(c) => {
                let mut cur = c.clone();
                let mut out = Vec::with_capacity(k + 1);
                for _ in 0..=k {
                    out.push(horner(&cur, u));
                    cur = cur.iter().enumerate().skip(1).map(|(i, v)| v * i as f64).collect();
                }
                out
            }
            TestFunction::Exp(a) => {
                let e = (a * u).exp();
                (0..=k).map(|j| a.powi(j as i32) * e).collect()
            }
            TestFunction::Bump => {
                assert!(k <= MAX_BUMP_DERIVATIVE, "bump derivative order {k} too large");
                (0..=k).map(|j| bump_derivative(u, j)).collect()
            }
            TestFunction::Step => {
                assert!(k <= MAX_BUMP_DERIVATIVE + 1, "step derivative order {k} too large");
                let z = bump_mass();
                (0..=k)
                    .map(|j| if j == 0 { step_value(u) } else { bump_derivative(u, j - 1) / z })
                    .collect()
            }
            TestFunction::Affine { inner, scale, shift } => {
                let d = inner.derivatives(scale * u + shift, k);
                d.iter().enumerate().map(|(j, v)| v * scale.powi(j as i32)).collect()
            }
            TestFunction::Sum(a, b) => {
                let (da, db) = (a.derivatives(u, k), b.derivatives(u, k));
                da.iter().zip(&db).map(|(x, y)| x + y).collect()
            }
            TestFunction::Product(a, b) => {
                let (da, db) = (a.derivatives(u, k), b.derivatives(u, k));
                (0..=k)
                    .map(|j| {
                        (0..=j)
                            .map(|i| crate::quad::binomial(j as u32, i as u32) * da[i] * db[j - i])
                            .sum()
                    })
                    .collect()
            }
        }
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.derivatives(u, 0)[0]
    }

    pub fn derivative(&self, u: f64, k: usize) -> f64 {
        self.derivatives(u, k)[k]
    }

    /// Interval containing the support; `None` for the zero function.
    pub fn support(&self) -> Option<Interval> {
        let all = Some((f64::NEG_INFINITY, f64::INFINITY));
        match self {
            TestFunction::Poly(c) => {
                if c.iter().all(|v| *v == 0.0) {
                    None
                } else {
                    all
                }
            }
            TestFunction::Exp(_) => all,
            TestFunction::Bump => Some((-1.0, 1.0)),
            TestFunction::Step => Some((-1.0, f64::INFINITY)),
            TestFunction::Affine { inner, scale, shift } => affine_preimage(inner.support(), *scale, *shift),
            TestFunction::Sum(a, b) => hull(a.support(), b.support()),
            TestFunction::Product(a, b) => intersect(a.support(), b.support()),
        }
    }

    /// Interval on which f ≡ 1, when one is known structurally.
    pub fn one_set(&self) -> Option<Interval> {
        let all = Some((f64::NEG_INFINITY, f64::INFINITY));
        match self {
            TestFunction::Poly(c) => (c.first() == Some(&1.0) && c[1..].iter().all(|v| *v == 0.0)).then_some(all?),
            TestFunction::Exp(a) => (*a == 0.0).then_some(all?),
            TestFunction::Bump => None,
            TestFunction::Step => Some((1.0, f64::INFINITY)),
            TestFunction::Affine { inner, scale, shift } => affine_preimage(inner.one_set(), *scale, *shift),
            TestFunction::Product(a, b) => intersect(a.one_set(), b.one_set()),
            TestFunction::Sum(a, b) => {
                let mut best: Option<Interval> = None;
                for (f, g) in [(a, b), (b, a)] {
                    for zero in zero_pieces(g.support()) {
                        if let Some(iv) = intersect(f.one_set(), Some(zero)) {
                            let better = match best {
                                None => true,
                                Some(bst) => (iv.0 <= 0.0 && 0.0 <= iv.1) && !(bst.0 <= 0.0 && 0.0 <= bst.1),
                            };
                            if better {
                                best = Some(iv);
                            }
                        }
                    }
                }
                best
            }
        }
    }

    pub fn is_compact(&self) -> bool {
        self.support().is_none_or(|(a, b)| a.is_finite() && b.is_finite())
    }

    /// supp f ⊂ (0, ∞) and compact.
    pub fn supported_in_positive(&self) -> bool {
        self.is_compact() && self.support().is_none_or(|(a, _)| a > 0.0)
    }

    /// Largest c with f ≡ 1 on [0, c] (the one-set must reach down to 0).
    pub fn flat_one_radius(&self) -> Option<f64> {
        let (lo, hi) = self.one_set()?;
        (lo <= 0.0 && hi > 0.0).then_some(hi)
    }

    /// Interval containing supp f^{(r)}.
    pub fn derivative_support(&self, r: usize) -> Option<Interval> {
        if r == 0 {
            return self.support();
        }
        let all = Some((f64::NEG_INFINITY, f64::INFINITY));
        match self {
            TestFunction::Poly(c) => c.iter().skip(r).any(|v| *v != 0.0).then_some(all?),
            TestFunction::Exp(a) => (*a != 0.0).then_some(all?),
            TestFunction::Bump => Some((-1.0, 1.0)),
            TestFunction::Step => Some((-1.0, 1.0)),
            TestFunction::Affine { inner, scale, shift } => affine_preimage(inner.derivative_support(r), *scale, *shift),
            TestFunction::Sum(a, b) => hull(a.derivative_support(r), b.derivative_support(r)),
            TestFunction::Product(a, b) => {
                // Leibniz: every term carries a derivative of at least one factor.
                let left = intersect(a.derivative_support(1), b.support());
                let right = intersect(a.support(), b.derivative_support(1));
                hull(left, right)
            }
        }
    }
}

fn hull(a: Option<Interval>, b: Option<Interval>) -> Option<Interval> {
    match (a, b) {
        (None, s) | (s, None) => s,
        (Some(x), Some(y)) => Some((x.0.min(y.0), x.1.max(y.1))),
    }
}

fn zero_pieces(support: Option<Interval>) -> Vec<Interval> {
    match support {
        None => vec![(f64::NEG_INFINITY, f64::INFINITY)],
        Some((a, b)) => {
            let mut v = Vec::new();
            if a > f64::NEG_INFINITY {
                v.push((f64::NEG_INFINITY, a));
            }
            if b < f64::INFINITY {
                v.push((b, f64::INFINITY));
            }
            v
        }
    }
}

/// ‖f‖_{ℳ^m,N} = max_{j ≤ N} sup_λ ⟨λ⟩^{j−m} |f^{(j)}(λ)|, by a dense grid over the
/// support (a window of [−100, 100] for non-compact functions) followed by local
/// golden-section refinement of the best grid point.
pub fn mellin_seminorm(f: &TestFunction, m: f64, order: usize) -> f64 {
    let Some((a, b)) = f.support() else { return 0.0 };
    let (a, b) = (a.max(-100.0), b.min(100.0));
    let weight = |l: f64, j: usize| (1.0 + l * l).sqrt().powf(j as f64 - m);
    let g = |l: f64| -> f64 {
        let d = f.derivatives(l, order);
        (0..=order).map(|j| weight(l, j) * d[j].abs()).fold(0.0, f64::max)
    };
    let n = 4000;
    let h = (b - a) / n as f64;
    let (mut best_x, mut best) = (a, g(a));
    for i in 1..=n {
        let x = a + h * i as f64;
        let v = g(x);
        if v > best {
            best = v;
            best_x = x;
        }
    }
    let (mut lo, mut hi) = ((best_x - h).max(a), (best_x + h).min(b));
    let r = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let x1 = hi - r * (hi - lo);
        let x2 = lo + r * (hi - lo);
        if g(x1) > g(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    best.max(g(0.5 * (lo + hi)))
}

/// One term d · (−1)^r/r! · f^{(r)}(ℓ_{m0}).
#[derive(Clone, Debug, PartialEq)]
pub struct FcTerm {
    pub d: HomogeneousSymbol,
    pub r: u32,
    pub coefficient: f64,
}

/// Homogeneous components of the symbol of f(L), order by order.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalSymbolExpansion {
    pub orders: Vec<Vec<FcTerm>>,
}

impl FunctionalSymbolExpansion {
    /// Σ_terms d(x, ξ) (−1)^r/r! f^{(r)}(ℓ_{m0}(x, ξ)) at order j.
    pub fn eval_order(&self, j: usize, f: &TestFunction, ell: &HomogeneousSymbol, x: &[f64], xi: &[f64]) -> Complex64 {
        let l = ell.eval(x, xi).re;
        let rmax = self.orders[j].iter().map(|t| t.r).max().unwrap_or(0) as usize;
        let der = f.derivatives(l, rmax);
        self.orders[j].iter().map(|t| t.d.eval(x, xi) * t.coefficient * der[t.r as usize]).sum()
    }
}

/// Transcribes the parametrix: power p of (ℓ_{m0} − z)^{−p} becomes the term with
/// r = p − 1 and scalar (−1)^r/r!.
pub fn fc_symbols(l: &EllipticOperatorSpec, order: usize) -> Result<FunctionalSymbolExpansion, FuncalcError> {
    let qs = build_parametrix(l, order)?;
    let orders = qs
        .iter()
        .map(|q| {
            q.powers()
                .iter()
                .map(|(p, d)| {
                    let r = p - 1;
                    let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
                    FcTerm { d: d.clone(), r, coefficient: sign / factorial(r) }
                })
                .collect()
        })
        .collect();
    Ok(FunctionalSymbolExpansion { orders })
}

/// Fourier-type almost analytic extension f̃(x, y) = ∫ e^{2πi(x+iy)ξ} χ(yξ) f̂(ξ) dξ,
/// discretised on a periodic grid (x-step P/N, ξ-step 1/P, |ξ| < Ξ = N/(2P)) and
/// multiplied by compactly supported cutoffs χ((x − c)/R) χ(y/Y).
#[derive(Clone, Debug)]
pub struct AlmostAnalyticExtension {
    f: TestFunction,
    n: usize,
    period: f64,
    x0: f64,
    fhat: Vec<Complex64>,
    center: f64,
    radius: f64,
    y_scale: f64,
    tail: f64,
    plateau: TestFunction,
}

/// Panel layout of the y-quadrature (in ln y).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsGrid {
    pub panel: f64,
    pub order: usize,
    pub strip_tol: f64,
}

impl Default for HsGrid {
    fn default() -> Self {
        HsGrid { panel: 0.125, order: 24, strip_tol: 1e-10 }
    }
}

/// One HS quadrature node: the point z and the weight (1/2π)·DF(z)·dA.
#[derive(Clone, Copy, Debug)]
pub struct HsNode {
    pub z: Complex64,
    pub weight: Complex64,
}

impl AlmostAnalyticExtension {
    /// `bandwidth` Ξ and ξ-`step` h = 1/P; the grid size is N = 2Ξ/h rounded up
    /// to a power of two. Fails if the spectral tail beyond 0.75Ξ exceeds 1e−12
    /// of the peak.
    pub fn new(f: &TestFunction, bandwidth: f64, step: f64) -> Result<Self, FuncalcError> {
        let (a, b) = f.support().ok_or(FuncalcError::NotCompact)?;
        if !(a.is_finite() && b.is_finite()) {
            return Err(FuncalcError::NotCompact);
        }
        let period = 1.0 / step;
        let n = ((2.0 * bandwidth * period).ceil() as usize).next_power_of_two();
        let center = 0.5 * (a + b);
        let radius = 0.5 * (b - a) + 0.5;
        let x0 = center - 0.5 * period;
        let dx = period / n as f64;
        let mut buf: Vec<Complex64> = (0..n).map(|j| Complex64::new(f.eval(x0 + dx * j as f64), 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let ext = AlmostAnalyticExtension {
            f: f.clone(),
            n,
            period,
            x0,
            fhat: buf,
            center,
            radius,
            y_scale: 0.1 * (b - a),
            tail: 0.0,
            plateau: TestFunction::plateau(),
        };
        let peak = ext.fhat.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let cut = 0.75 * ext.bandwidth();
        let tail = (0..n)
            .filter(|&k| ext.frequency(k).abs() > cut)
            .map(|k| ext.fhat[k].norm())
            .fold(0.0, f64::max)
            / peak.max(f64::MIN_POSITIVE);
        if tail > 1e-12 {
            return Err(FuncalcError::Bandwidth { tail, tol: 1e-12 });
        }
        if 4.0 * radius > period {
            return Err(FuncalcError::Bandwidth { tail: f64::INFINITY, tol: 1e-12 });
        }
        Ok(AlmostAnalyticExtension { tail, ..ext })
    }

    /// Doubles the bandwidth from 64 until the tail test passes.
    pub fn automatic(f: &TestFunction) -> Result<Self, FuncalcError> {
        let (a, b) = f.support().ok_or(FuncalcError::NotCompact)?;
        let period = (8.0 * (0.5 * (b - a) + 0.5)).max(8.0).log2().ceil().exp2();
        let mut bw = 64.0;
        loop {
            match Self::new(f, bw, 1.0 / period) {
                Err(FuncalcError::Bandwidth { .. }) if bw < 4096.0 => bw *= 2.0,
                other => return other,
            }
        }
    }

    /// Height Y of the y-cutoff χ(y/Y).
    pub fn with_y_scale(mut self, y: f64) -> Self {
        self.y_scale = y;
        self
    }

    pub fn bandwidth(&self) -> f64 {
        0.5 * self.n as f64 / self.period
    }

    pub fn tail(&self) -> f64 {
        self.tail
    }

    pub fn function(&self) -> &TestFunction {
        &self.f
    }

    pub fn dx(&self) -> f64 {
        self.period / self.n as f64
    }

    pub fn x_grid(&self, j: usize) -> f64 {
        self.x0 + self.dx() * j as f64
    }

    fn frequency(&self, k: usize) -> f64 {
        let kk = if k < self.n / 2 { k as f64 } else if k == self.n / 2 { 0.0 } else { k as f64 - self.n as f64 };
        kk / self.period
    }

    /// f̃(·, y) and (∂_x + i∂_y) f̃(·, y) on the x-grid (no cutoffs).
    pub fn row(&self, y: f64) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = self.n;
        let mut g = vec![Complex64::new(0.0, 0.0); n];
        let mut dg = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..n {
            if k == n / 2 {
                continue;
            }
            let xi = self.frequency(k);
            let u = y * xi;
            if u.abs() >= 2.0 {
                continue;
            }
            let d = self.plateau.derivatives(u, 1);
            let damp = (-2.0 * PI * y * xi).exp() / n as f64;
            g[k] = self.fhat[k] * d[0] * damp;
            dg[k] = self.fhat[k] * Complex64::new(0.0, d[1] * xi) * damp;
        }
        let ifft = FftPlanner::new().plan_fft_inverse(n);
        ifft.process(&mut g);
        ifft.process(&mut dg);
        (g, dg)
    }

    /// D of the compactly cut-off extension F = χ((x−c)/R) χ(y/Y) f̃ on the x-grid.
    pub fn compact_dbar_row(&self, y: f64) -> Vec<Complex64> {
        let (g, dg) = self.row(y);
        let cy = self.plateau.derivatives(y / self.y_scale, 1);
        (0..self.n)
            .map(|j| {
                let u = (self.x_grid(j) - self.center) / self.radius;
                if u.abs() >= 2.0 {
                    return Complex64::new(0.0, 0.0);
                }
                let cx = self.plateau.derivatives(u, 1);
                dg[j] * cx[0] * cy[0]
                    + g[j] * Complex64::new(cx[1] / self.radius * cy[0], cx[0] * cy[1] / self.y_scale)
            })
            .collect()
    }

    /// sup_x |(∂_x + i∂_y) f̃(x, y)| over the support window.
    pub fn sup_dbar(&self, y: f64) -> f64 {
        let (_, dg) = self.row(y);
        (0..self.n)
            .filter(|&j| ((self.x_grid(j) - self.center) / self.radius).abs() < 1.0)
            .map(|j| dg[j].norm())
            .fold(0.0, f64::max)
    }

    /// f̃(x, y) by direct summation (slow; used for spot checks).
    pub fn eval(&self, x: f64, y: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..self.n {
            if k == self.n / 2 {
                continue;
            }
            let xi = self.frequency(k);
            let u = y * xi;
            if u.abs() >= 2.0 {
                continue;
            }
            let phase = Complex64::from_polar(1.0, 2.0 * PI * (x - self.x0) * xi);
            acc += self.fhat[k] * phase * self.plateau.eval(u) * (-2.0 * PI * y * xi).exp();
        }
        acc / self.n as f64
    }

    /// Quadrature nodes for the upper half plane (the lower half follows by
    /// conjugation for real f). In s = ln y the range from the edge of the
    /// exact-zero strip |y| < 1/Ξ up to 2Y is cut into panels of width at most
    /// `grid.panel`, each carrying a `grid.order`-point Gauss rule; within a row
    /// the x-step is about y/16 (never below the FFT grid step).
    ///
    /// Nodes are then dropped, smallest first, while the accumulated bound
    /// Σ |w| / y³ stays below `grid.strip_tol`. Since ‖(H − z)^{−1}‖ ≤ 1/y, the
    /// dropped part changes any of the j ≤ 2 identities (and f(H) for any
    /// Hermitian H with spectrum inside the rectangle) by at most that bound;
    /// in practice it removes the strip near the real axis where DF vanishes.
    pub fn upper_nodes(&self, grid: &HsGrid) -> Vec<HsNode> {
        self.upper_nodes_with_bound(grid).1
    }

    /// Bound on the dropped contribution, and the retained nodes.
    pub fn upper_nodes_with_bound(&self, grid: &HsGrid) -> (f64, Vec<HsNode>) {
        let s0 = (1.0 / self.bandwidth()).ln();
        let s1 = (2.0 * self.y_scale).ln();
        let panels = ((s1 - s0) / grid.panel).ceil().max(1.0) as usize;
        let width = (s1 - s0) / panels as f64;
        let gl = GaussLegendre::new(grid.order);
        let dx = self.dx();
        let mut nodes = Vec::new();
        for p in 0..panels {
            let a = s0 + width * p as f64;
            for (u, wu) in gl.nodes.iter().zip(&gl.weights) {
                let y = (a + 0.5 * width * (u + 1.0)).exp();
                let stride = ((y / 16.0) / dx).floor().max(1.0) as usize;
                let row = self.compact_dbar_row(y);
                let w = dx * stride as f64 * y * 0.5 * width * wu / (2.0 * PI);
                for j in (0..self.n).step_by(stride) {
                    if row[j] != Complex64::new(0.0, 0.0) {
                        nodes.push(HsNode { z: Complex64::new(self.x_grid(j), y), weight: row[j] * w });
                    }
                }
            }
        }
        let bound = |nd: &HsNode| nd.weight.norm() / nd.z.im.powi(3);
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by(|&i, &j| bound(&nodes[i]).total_cmp(&bound(&nodes[j])));
        let mut keep = vec![true; nodes.len()];
        let mut dropped = 0.0;
        for i in order {
            let b = bound(&nodes[i]);
            if dropped + b > grid.strip_tol {
                break;
            }
            dropped += b;
            keep[i] = false;
        }
        let kept = nodes.into_iter().zip(keep).filter(|(_, k)| *k).map(|(nd, _)| nd).collect();
        (dropped, kept)
    }

    /// Quadrature estimate of ∫ |DF| ⟨z⟩^N / |y|^{N′} dA over the upper half plane.
    pub fn weighted_dbar_norm(&self, grid: &HsGrid, weight_power: i32, y_power: i32) -> f64 {
        self.upper_nodes(grid)
            .iter()
            .map(|nd| {
                let jap = (1.0 + nd.z.norm_sqr()).sqrt();
                nd.weight.norm() * 2.0 * PI * jap.powi(weight_power) / nd.z.im.powi(y_power)
            })
            .sum()
    }
}

/// (1/2π) ∫ DF(z) (λ − z)^{−1−j} dA minus (−1)^j f^{(j)}(λ)/j!.
pub fn cauchy_pompeiu_check(ext: &AlmostAnalyticExtension, lambda: f64, j: u32, grid: &HsGrid) -> f64 {
    cauchy_pompeiu_residual(ext, &ext.upper_nodes(grid), lambda, j)
}

/// As [`cauchy_pompeiu_check`] with precomputed upper half-plane nodes.
pub fn cauchy_pompeiu_residual(ext: &AlmostAnalyticExtension, nodes: &[HsNode], lambda: f64, j: u32) -> f64 {
    let p = -(1 + j as i32);
    let half: Complex64 = nodes.iter().map(|nd| nd.weight * (lambda - nd.z).powi(p)).sum();
    // Lower half plane contributes the complex conjugate.
    let quad = 2.0 * half.re;
    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
    let exact = sign * ext.function().derivative(lambda, j as usize) / factorial(j);
    (quad - exact).abs()
}

/// Taylor-type extension of order M: F(x, y) = Σ_{k ≤ M} f^{(k)}(x) (iy)^k / k!,
/// whose D vanishes exactly like |y|^M: DF = f^{(M+1)}(x) (iy)^M / M!.
pub fn taylor_extension_dbar(f: &TestFunction, order: usize, x: f64, y: f64) -> Complex64 {
    let d = f.derivative(x, order + 1);
    Complex64::new(0.0, y).powi(order as i32) * d / factorial(order as u32)
}

/// Least-squares slope of ln|g(y)| against ln y.
pub fn log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.1 > 0.0).map(|p| (p.0.ln(), p.1.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// f(H) by the Helffer–Sjöstrand integral. H is reduced to a real symmetric
/// tridiagonal T = Q* H Q once; each node then needs one tridiagonal inverse.
/// Nodes are processed in fixed chunks whose partial sums are added in order,
/// so the result does not depend on the thread count.
pub fn hs_matrix_function(
    h: &DMatrix<Complex64>,
    ext: &AlmostAnalyticExtension,
    grid: &HsGrid,
) -> Result<DMatrix<Complex64>, FuncalcError> {
    let n = h.nrows();
    let scale = h.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
    let defect = (h - h.adjoint()).iter().map(|c| c.norm()).fold(0.0, f64::max);
    if defect > 1e-12 * scale {
        return Err(FuncalcError::NotHermitian(defect));
    }
    let tri = nalgebra::SymmetricTridiagonal::new(h.clone());
    let (q, diag, off) = tri.unpack();
    let (d, e) = (diag.as_slice(), off.as_slice());
    let nodes = ext.upper_nodes(grid);
    let chunk = nodes.len().div_ceil(64).max(1);
    let partial: Vec<Vec<Complex64>> = nodes
        .par_chunks(chunk)
        .map(|part| {
            let mut acc = vec![Complex64::new(0.0, 0.0); n * n];
            let mut scratch = TridiagonalScratch::new(n);
            for nd in part {
                scratch.accumulate_inverse(d, e, nd.z, nd.weight, &mut acc);
            }
            acc
        })
        .collect();
    let mut acc = vec![Complex64::new(0.0, 0.0); n * n];
    for p in &partial {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    // Only the upper triangle was accumulated; (T − z)^{−1} is symmetric and the
    // lower half plane contributes the conjugate, leaving twice the real part.
    let real = DMatrix::<Complex64>::from_fn(n, n, |i, j| {
        let v = if i <= j { acc[i * n + j] } else { acc[j * n + i] };
        Complex64::new(2.0 * v.re, 0.0)
    });
    Ok(&q * real * q.adjoint())
}

struct TridiagonalScratch {
    fwd: Vec<Complex64>,
    bwd: Vec<Complex64>,
    ratio: Vec<Complex64>,
}

impl TridiagonalScratch {
    fn new(n: usize) -> Self {
        let z = Complex64::new(0.0, 0.0);
        TridiagonalScratch { fwd: vec![z; n], bwd: vec![z; n], ratio: vec![z; n] }
    }

    /// acc[i, j] += w · (T − z)^{−1}[i, j] for i ≤ j, with T = tridiag(e, d, e).
    /// Uses the Green's-function structure: the diagonal from forward and
    /// backward pivots, and G[i, j] = G[i, j−1] · (−e_{j−1} / b_j) for j > i.
    fn accumulate_inverse(&mut self, d: &[f64], e: &[f64], z: Complex64, w: Complex64, acc: &mut [Complex64]) {
        let n = d.len();
        assert!(z.im != 0.0, "resolvent node on the real axis");
        self.fwd[0] = d[0] - z;
        for i in 1..n {
            self.fwd[i] = d[i] - z - e[i - 1] * e[i - 1] / self.fwd[i - 1];
        }
        self.bwd[n - 1] = d[n - 1] - z;
        for i in (0..n - 1).rev() {
            self.bwd[i] = d[i] - z - e[i] * e[i] / self.bwd[i + 1];
        }
        for j in 1..n {
            self.ratio[j] = -e[j - 1] / self.bwd[j];
        }
        for i in 0..n {
            let pivot = self.fwd[i] + self.bwd[i] - (d[i] - z);
            assert!(pivot.norm() > 0.0, "singular resolvent factorization");
            let mut g = w / pivot;
            let row = &mut acc[i * n..(i + 1) * n];
            row[i] += g;
            for j in (i + 1)..n {
                g *= self.ratio[j];
                row[j] += g;
            }
        }
    }
}

/// f(H) by Hermitian eigendecomposition.
pub fn eig_matrix_function(h: &DMatrix<Complex64>, f: &TestFunction) -> DMatrix<Complex64> {
    let eig = nalgebra::SymmetricEigen::new(h.clone());
    let fd = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(f.eval(l), 0.0)));
    &eig.eigenvectors * fd * eig.eigenvectors.adjoint()
}

/// Spectral norm (largest singular value).
pub fn operator_norm(m: &DMatrix<Complex64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::compose_expansion;
    use crate::symcore::{CutoffSpec, PolyHomogeneousSymbol, TorusFourierSeries};
    use nalgebra::DVector;

    #[test]
    fn bump_derivatives_match_power_series() {
        // Taylor coefficients of exp(−1/(1 − (u+h)²)) in h by series arithmetic.
        const K: usize = 9;
        let mul = |a: &[f64], b: &[f64]| {
            let mut c = [0.0; K];
            for i in 0..K {
                for j in 0..K - i {
                    c[i + j] += a[i] * b[j];
                }
            }
            c
        };
        let f = TestFunction::Bump;
        for &u in &[-0.9, -0.3, 0.0, 0.41, 0.87] {
            let mut w = [0.0; K];
            w[0] = 1.0 - u * u;
            w[1] = -2.0 * u;
            w[2] = -1.0;
            // 1/w by Newton-free recursion.
            let mut inv = [0.0; K];
            inv[0] = 1.0 / w[0];
            for k in 1..K {
                let s: f64 = (1..=k.min(2)).map(|i| w[i] * inv[k - i]).sum();
                inv[k] = -s / w[0];
            }
            let g: Vec<f64> = inv.iter().map(|v| -v).collect();
            // exp(g) = e^{g0} Σ (g − g0)^k / k!
            let mut nil = [0.0; K];
            nil[1..].copy_from_slice(&g[1..]);
            let mut term = [0.0; K];
            term[0] = 1.0;
            let mut e = [0.0; K];
            for k in 0..K {
                for i in 0..K {
                    e[i] += term[i] / factorial(k as u32);
                }
                term = mul(&term, &nil);
            }
            let d = f.derivatives(u, K - 1);
            for k in 0..K {
                let want = e[k] * g[0].exp() * factorial(k as u32);
                assert!((d[k] - want).abs() < 1e-9 * (1.0 + want.abs()), "u={u} k={k}: {} vs {want}", d[k]);
            }
        }
        assert!((f.eval(0.0) - (-1f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn step_properties() {
        let s = TestFunction::Step;
        assert!((s.eval(0.0) - 0.5).abs() < 1e-15);
        assert!((bump_mass() - 0.443_993_816_168_079_4).abs() < 1e-14);
        // Reference by a much finer rule.
        let fine = GaussLegendre::new(60).integrate(-1.0, -0.3, 200, |u| bump_derivative(u, 0)) / bump_mass();
        assert!((s.eval(-0.3) - fine).abs() < 1e-14);
        assert!((s.eval(0.3) - (1.0 - fine)).abs() < 1e-14);
        let h = 1e-5;
        let fd = (s.eval(0.2 + h) - s.eval(0.2 - h)) / (2.0 * h);
        assert!((fd - s.derivative(0.2, 1)).abs() < 1e-9);
    }

    #[test]
    fn supports_and_one_sets() {
        let eta = TestFunction::bump_on(1.0, 2.0);
        assert_eq!(eta.support(), Some((1.0, 2.0)));
        assert!(eta.supported_in_positive());
        assert!((eta.eval(1.5) - (-1f64).exp()).abs() < 1e-15);
        let chi = TestFunction::cutoff(1.0, 2.0);
        assert_eq!(chi.flat_one_radius(), Some(1.0));
        assert!(!chi.supported_in_positive());
        assert_eq!(chi.derivative_support(1), Some((1.0, 2.0)));
        let plateau = TestFunction::plateau();
        assert_eq!(plateau.support(), Some((-2.0, 2.0)));
        assert_eq!(plateau.one_set(), Some((-1.0, 1.0)));
        for &u in &[-2.5, -1.5, -0.5, 0.7, 1.2, 3.0] {
            let v = plateau.eval(u);
            let want = if u.abs() <= 1.0 { 1.0 } else if u.abs() >= 2.0 { 0.0 } else { v };
            assert_eq!(v, want);
        }
        assert!((plateau.eval(1.5) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn seminorm_properties() {
        assert_eq!(mellin_seminorm(&TestFunction::constant(0.0), 0.0, 3), 0.0);
        let f = TestFunction::bump_on(1.0, 3.0);
        let a = mellin_seminorm(&f, -1.0, 2);
        let b = mellin_seminorm(&f.clone().scaled(-3.0), -1.0, 2);
        assert!((b - 3.0 * a).abs() < 1e-12 * b);
        assert!(mellin_seminorm(&f, -1.0, 3) >= a);
    }

    fn perturbed() -> EllipticOperatorSpec {
        let l0 = HomogeneousSymbol::radial(2, 2.0, 1.0);
        let l1 = HomogeneousSymbol::radial_with(2, Complex64::new(1.0, 0.0), TorusFourierSeries::cos(2, [1, 0, 0], 0.1));
        let sym = PolyHomogeneousSymbol::with_cutoff(2, Complex64::new(2.0, 0.0), vec![l0, l1], CutoffSpec::unit()).unwrap();
        EllipticOperatorSpec::new(sym, 0.5, 1.0).unwrap()
    }

    #[test]
    fn fc_symbols_transcribe_parametrix() {
        let l = perturbed();
        let fc = fc_symbols(&l, 1).unwrap();
        assert_eq!(fc.orders[0].len(), 1);
        assert_eq!(fc.orders[0][0].r, 0);
        assert_eq!(fc.orders[0][0].coefficient, 1.0);
        let t1: Vec<(u32, f64)> = fc.orders[1].iter().map(|t| (t.r, t.coefficient)).collect();
        assert_eq!(t1, vec![(1, -1.0)]);
        assert_eq!(fc.orders[1][0].d, l.symbol().homogeneous(1).neg());
    }

    #[test]
    fn identity_and_square_reproduce_operator_symbols() {
        let l = perturbed();
        let fc = fc_symbols(&l, 3).unwrap();
        let ell = l.principal();
        let id = TestFunction::Poly(vec![0.0, 1.0]);
        let sq = TestFunction::Poly(vec![0.0, 0.0, 1.0]);
        let ll = compose_expansion(l.symbol(), l.symbol(), Some(4)).unwrap();
        let (x, xi) = ([0.13, 0.71], [0.8, -0.35]);
        for j in 0..=3 {
            let got = fc.eval_order(j, &id, &ell, &x, &xi);
            let want = l.symbol().homogeneous(j).eval(&x, &xi);
            assert!((got - want).norm() < 1e-13, "f = λ, order {j}");
            let got = fc.eval_order(j, &sq, &ell, &x, &xi);
            let want = ll.homogeneous(j).eval(&x, &xi);
            assert!((got - want).norm() < 1e-12, "f = λ², order {j}: {got} vs {want}");
        }
    }

    #[test]
    fn multiplier_has_only_order_zero() {
        let l = EllipticOperatorSpec::new(PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, 2.0, 1.0)), 0.5, 0.0).unwrap();
        let fc = fc_symbols(&l, 3).unwrap();
        assert!(fc.orders[1..].iter().all(|o| o.is_empty()));
    }

    #[test]
    fn extension_restricts_to_f() {
        let f = TestFunction::bump_on(1.0, 2.0);
        let ext = AlmostAnalyticExtension::automatic(&f).unwrap();
        let (g, _) = ext.row(0.0);
        for j in (0..g.len()).step_by(37) {
            assert!((g[j].re - f.eval(ext.x_grid(j))).abs() < 1e-8 && g[j].im.abs() < 1e-8);
        }
        assert!((ext.eval(1.37, 0.0).re - f.eval(1.37)).abs() < 1e-8);
        // Compact variant vanishes outside the cutoff rectangle.
        let row = ext.compact_dbar_row(0.3);
        for (j, v) in row.iter().enumerate() {
            let x = ext.x_grid(j);
            if (x - 1.5).abs() > 2.0 * 1.0 + 1e-12 {
                assert_eq!(*v, Complex64::new(0.0, 0.0));
            }
        }
        assert!(ext.compact_dbar_row(2.5).iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn cauchy_pompeiu_identities() {
        let f = TestFunction::bump_on(1.0, 2.0);
        let ext = AlmostAnalyticExtension::automatic(&f).unwrap();
        assert!(cauchy_pompeiu_check(&ext, 3.0, 0, &HsGrid::default()) < 1e-8);
        assert!(cauchy_pompeiu_check(&ext, 1.5, 0, &HsGrid::default()) < 1e-7);
        assert!(cauchy_pompeiu_check(&ext, 1.3, 1, &HsGrid::default()) < 1e-6);
        assert!(cauchy_pompeiu_check(&ext, 1.6, 2, &HsGrid::default()) < 1e-6);
    }

    #[test]
    fn dbar_norm_is_linear_and_converges() {
        let f = TestFunction::bump_on(1.0, 2.0);
        let ext = AlmostAnalyticExtension::automatic(&f).unwrap();
        let ext3 = AlmostAnalyticExtension::automatic(&f.clone().scaled(3.0)).unwrap();
        let a = ext.weighted_dbar_norm(&HsGrid::default(), 2, 1);
        let b = ext3.weighted_dbar_norm(&HsGrid::default(), 2, 1);
        assert!((b - 3.0 * a).abs() < 1e-9 * b);
        let fine = ext.weighted_dbar_norm(&HsGrid { panel: 0.0625, order: 24, strip_tol: 1e-10 }, 2, 1);
        assert!(a.is_finite() && (a - fine).abs() < 1e-3 * fine, "{a} vs {fine}");
    }

    #[test]
    fn matrix_examples() {
        let f = TestFunction::bump_on(0.0, 2.0);
        let ext = AlmostAnalyticExtension::automatic(&f).unwrap();
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![
            Complex64::new(0.5, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(3.0, 0.0),
        ]));
        let fh = hs_matrix_function(&h, &ext, &HsGrid::default()).unwrap();
        for i in 0..3 {
            let want = f.eval(h[(i, i)].re);
            assert!((fh[(i, i)].re - want).abs() < 1e-6 * f.eval(1.0));
        }
        let far = DMatrix::from_diagonal(&DVector::from_vec(vec![Complex64::new(5.0, 0.0), Complex64::new(-2.0, 0.0)]));
        assert!(operator_norm(&hs_matrix_function(&far, &ext, &HsGrid::default()).unwrap()) < 1e-8);
        // Spectral projection onto the eigenvalue 1 of [[0,1],[1,0]].
        let g = TestFunction::bump_on(0.5, 1.5).scaled((1f64).exp());
        let ext = AlmostAnalyticExtension::automatic(&g).unwrap();
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]).map(|v| Complex64::new(v, 0.0));
        let p = hs_matrix_function(&swap, &ext, &HsGrid::default()).unwrap();
        let want = (DMatrix::<Complex64>::identity(2, 2) + &swap) * Complex64::new(0.5, 0.0);
        assert!(operator_norm(&(p - want)) < 1e-6);
        assert!(matches!(
            hs_matrix_function(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]).map(|v| Complex64::new(v, 0.0)), &ext, &HsGrid::default()),
            Err(FuncalcError::NotHermitian(_))
        ));
    }
}
