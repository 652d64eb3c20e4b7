//! Non-commutative residue, canonical trace (finite-part ξ-integral) and the
//! plain trace of symbols of order below −n.

use crate::quad::adaptive_complex;
use crate::symcore::{psi1, sphere_torus_integral, PolyHomogeneousSymbol};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace-class hypothesis violated: Re(order) = {0} is not below −n = −{1}")]
    NotTraceClass(f64, usize),
    #[error("canonical trace needs an order outside {{−n, −n+1, …}}; order {0} with n = {1} lies on it")]
    IntegerOrder(Complex64, usize),
    #[error("component {0} is not polynomial but carries no cutoff")]
    MissingCutoff(usize),
    #[error("component {0} has degree −n: its finite part needs a logarithm")]
    LogarithmicComponent(usize),
}

/// Whether m ∈ {−n, −n+1, −n+2, …} (to 1e−12).
pub fn in_integer_ladder(m: Complex64, n: usize) -> bool {
    m.im.abs() < 1e-12 && (m.re - m.re.round()).abs() < 1e-12 && m.re.round() >= -(n as f64)
}

/// ∫_{T^n} ∫_{S^{n−1}} a_{−n}; zero when no component can have degree −n.
pub fn residue_density_integrated(a: &PolyHomogeneousSymbol) -> Complex64 {
    let n = a.dim();
    let m = a.order();
    if !in_integer_ladder(m, n) {
        return Complex64::new(0.0, 0.0);
    }
    let j = (m.re.round() + n as f64) as usize;
    sphere_torus_integral(&a.homogeneous(j))
}

/// ∫_{1/2}^{κ} ψ₁(u) u^{s−1} du.
fn shell_integral(s: Complex64, kappa: f64) -> Complex64 {
    let f = |u: f64| psi1(u) * Complex64::new(u, 0.0).powc(s - 1.0);
    let scale = f(1.0).norm();
    let mut acc = adaptive_complex(0.5, 1.0, 1e-14, scale, f).0;
    if kappa > 1.0 {
        acc += adaptive_complex(1.0, kappa, 1e-14, scale, f).0;
    }
    acc
}

/// Finite part of ∫₀^∞ ψ₁(t r) r^{s−1} dr with the divergent power split off at
/// radius R = κ/t:  ∫₀^R ψ₁(t r) r^{s−1} dr − R^s/s. Independent of κ ≥ 1; for
/// Re s < 0 it is the convergent integral itself.
pub fn radial_finite_part(t: f64, s: Complex64, kappa: f64) -> Complex64 {
    assert!(s.norm() > 1e-12, "finite part with a vanishing power needs a logarithm");
    assert!(kappa >= 1.0);
    let k = Complex64::new(kappa, 0.0);
    Complex64::new(t, 0.0).powc(-s) * (shell_integral(s, kappa) - k.powc(s) / s)
}

fn trace_sum(a: &PolyHomogeneousSymbol, kappa: f64) -> Result<Complex64, TraceError> {
    let n = a.dim() as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, c) in a.components().iter().enumerate() {
        if c.symbol.is_zero() {
            continue;
        }
        let cutoff = c.cutoff.ok_or(TraceError::MissingCutoff(j))?;
        let moment = sphere_torus_integral(&c.symbol);
        if moment == Complex64::new(0.0, 0.0) {
            continue;
        }
        let s = c.symbol.degree() + n;
        if s.norm() < 1e-12 {
            return Err(TraceError::LogarithmicComponent(j));
        }
        acc += moment * radial_finite_part(cutoff.t(), s, kappa);
    }
    Ok(acc)
}

/// tr(A) = ∫∫ a(x, ξ) dξ dx for Re m < −n.
pub fn smoothing_trace(a: &PolyHomogeneousSymbol) -> Result<Complex64, TraceError> {
    let n = a.dim();
    if a.order().re >= -(n as f64) {
        return Err(TraceError::NotTraceClass(a.order().re, n));
    }
    trace_sum(a, 1.0)
}

/// TR(A) as the finite part of the ξ-integral, for m ∉ {−n, −n+1, …}.
pub fn canonical_trace(a: &PolyHomogeneousSymbol) -> Result<Complex64, TraceError> {
    canonical_trace_split(a, 1.0)
}

/// TR(A) with the divergent powers split off at radii κ/t_j instead of 1/t_j.
pub fn canonical_trace_split(a: &PolyHomogeneousSymbol, kappa: f64) -> Result<Complex64, TraceError> {
    let n = a.dim();
    if in_integer_ladder(a.order(), n) {
        return Err(TraceError::IntegerOrder(a.order(), n));
    }
    trace_sum(a, kappa)
}

/// Σ_j moment(h_{m−j}) · FP_j without the order hypothesis; only components of
/// degree exactly −n are refused.
pub fn finite_part_integral(a: &PolyHomogeneousSymbol) -> Result<Complex64, TraceError> {
    trace_sum(a, 1.0)
}
