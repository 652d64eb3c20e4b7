//! Small-t expansions of tr(A f(tL)): functional term sums, Mellin moments, the
//! reduction of each term to a power of t, and assembled predictions.

use crate::calculus::{multi_indices_up_to, star_coefficient};
use crate::funcalc::{fc_symbols, FuncalcError, FunctionalSymbolExpansion, TestFunction};
use crate::oracle::least_squares_powers;
use crate::quad::adaptive_complex;
use crate::symcore::{
    multi_index_order, psi1, weighted_coefficient_integral, EllipticOperatorSpec, HomogeneousSymbol, MultiIndex,
    PolyHomogeneousSymbol, SphereGrid, SymbolError,
};
use crate::traces::{canonical_trace, in_integer_ladder, residue_density_integrated, TraceError};
use num_complex::Complex64;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpandError {
    #[error("test function must be compactly supported")]
    NotCompact,
    #[error("Mellin integral diverges at 0 for s = {0}")]
    Divergent(Complex64),
    #[error("Mellin continuation has a pole at s = 0")]
    MellinPole,
    #[error("test function support must lie in (0, ∞)")]
    SupportTouchesZero,
    #[error("test function must equal 1 on a neighbourhood of 0")]
    NotFlatNearZero,
    #[error("term with r = 0 and a test function not supported in (0, ∞) must be handled by the canonical-trace route")]
    ZeroOrderCutoffTerm,
    #[error("t⁰ coefficient {pipeline} disagrees with the residue route {residue}")]
    ResidueMismatch { pipeline: Complex64, residue: Complex64 },
    #[error("contribution expected to vanish does not: {0}")]
    VanishingViolated(String),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Funcalc(#[from] FuncalcError),
}

fn c64(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Σ t^p g(x, ξ) f^{(r)}(t ℓ_{m0}(x, ξ)), stored by (p, r, degree).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FunctionalTermSum {
    terms: BTreeMap<(u32, u32, DegreeKey), HomogeneousSymbol>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct DegreeKey(i64, i64);

impl DegreeKey {
    fn of(h: &HomogeneousSymbol) -> Self {
        let d = h.degree();
        DegreeKey((d.re * 1e9).round() as i64, (d.im * 1e9).round() as i64)
    }
}

impl FunctionalTermSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(p: u32, g: HomogeneousSymbol, r: u32) -> Self {
        let mut s = Self::new();
        s.push(p, g, r);
        s
    }

    /// Order-j functional symbol of f(tL): Σ t^r · (−1)^r/r! · d · f^{(r)}(tℓ).
    pub fn from_fc(fc: &FunctionalSymbolExpansion, j: usize) -> Self {
        let mut s = Self::new();
        for term in &fc.orders[j] {
            s.push(term.r, term.d.scale(c64(term.coefficient)), term.r);
        }
        s
    }

    pub fn push(&mut self, p: u32, g: HomogeneousSymbol, r: u32) {
        if g.is_zero() {
            return;
        }
        let key = (p, r, DegreeKey::of(&g));
        match self.terms.get_mut(&key) {
            Some(h) => {
                *h = h.add(&g).expect("equal degree keys");
                if h.is_zero() {
                    self.terms.remove(&key);
                }
            }
            None => {
                self.terms.insert(key, g);
            }
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (u32, &HomogeneousSymbol, u32)> {
        self.terms.iter().map(|((p, r, _), g)| (*p, g, *r))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// ∂_{x_axis}: (p, g, r) ↦ (p, ∂_x g, r) + (p+1, g ∂_x ℓ_{m0}, r+1).
    pub fn dx(&self, ell: &HomogeneousSymbol, axis: usize) -> Result<Self, SymbolError> {
        let dl = ell.dx(axis);
        let mut out = Self::new();
        for (p, g, r) in self.terms() {
            out.push(p, g.dx(axis), r);
            if !dl.is_zero() {
                out.push(p + 1, g.mul(&dl)?, r + 1);
            }
        }
        Ok(out)
    }

    /// ∂_{ξ_axis}, same chain rule with ∂_ξ.
    pub fn dxi(&self, ell: &HomogeneousSymbol, axis: usize) -> Result<Self, SymbolError> {
        let dl = ell.dxi(axis);
        let mut out = Self::new();
        for (p, g, r) in self.terms() {
            out.push(p, g.dxi(axis), r);
            if !dl.is_zero() {
                out.push(p + 1, g.mul(&dl)?, r + 1);
            }
        }
        Ok(out)
    }

    pub fn dx_multi(&self, ell: &HomogeneousSymbol, alpha: &MultiIndex) -> Result<Self, SymbolError> {
        let mut cur = self.clone();
        for (axis, &k) in alpha.iter().enumerate() {
            for _ in 0..k {
                cur = cur.dx(ell, axis)?;
            }
        }
        Ok(cur)
    }

    pub fn eval(&self, f: &TestFunction, ell: &HomogeneousSymbol, t: f64, x: &[f64], xi: &[f64]) -> Complex64 {
        let l = ell.eval(x, xi).re;
        let rmax = self.terms().map(|(_, _, r)| r).max().unwrap_or(0) as usize;
        let d = f.derivatives(t * l, rmax);
        self.terms().map(|(p, g, r)| g.eval(x, xi) * t.powi(p as i32) * d[r as usize]).sum()
    }
}

/// ∫₀^∞ f^{(r)}(u) u^{s−1} du by adaptive quadrature over supp f^{(r)} ∩ [0, ∞).
/// Near 0 the integral is split off in closed form when f ≡ 1 there (r = 0), or
/// computed after the substitution u = v^{1/Re s} when Re s > 0.
pub fn mellin_moment(f: &TestFunction, s: Complex64, r: usize) -> Result<Complex64, ExpandError> {
    let Some((a, b)) = f.derivative_support(r) else { return Ok(c64(0.0)) };
    if !b.is_finite() {
        return Err(ExpandError::NotCompact);
    }
    if b <= 0.0 {
        return Ok(c64(0.0));
    }
    let g = |u: f64| f.derivative(u, r) * Complex64::new(u, 0.0).powc(s - 1.0);
    if a > 0.0 {
        return Ok(integrate(a, b, g));
    }
    if s.re <= 0.0 {
        return Err(ExpandError::Divergent(s));
    }
    if r == 0 {
        if let Some(c) = f.flat_one_radius().filter(|c| *c > 0.0 && *c < b) {
            return Ok(c64(c).powc(s) / s + integrate(c, b, g));
        }
    }
    let k = 1.0 / s.re;
    let w = Complex64::new(0.0, s.im / s.re);
    let h = |v: f64| {
        if v <= 0.0 {
            return c64(0.0);
        }
        f.derivative(v.powf(k), r) * Complex64::new(v, 0.0).powc(w) * k
    };
    Ok(integrate(0.0, b.powf(s.re), h))
}

fn integrate<F: Fn(f64) -> Complex64>(a: f64, b: f64, f: F) -> Complex64 {
    let scale = (0..=64).map(|i| f(a + (b - a) * i as f64 / 64.0).norm()).fold(0.0, f64::max) * (b - a);
    adaptive_complex(a, b, 1e-13, scale.max(f64::MIN_POSITIVE), f).0
}

/// M[f, s], continued to Re s ≤ 0 through M[f, s] = −M[f′, s+1]/s when f ≡ 1
/// near 0 (f′ is then supported away from 0).
pub fn mellin_continued(f: &TestFunction, s: Complex64) -> Result<Complex64, ExpandError> {
    if f.supported_in_positive() || s.re > 0.0 {
        return mellin_moment(f, s, 0);
    }
    if f.flat_one_radius().is_none() {
        return Err(ExpandError::NotFlatNearZero);
    }
    if s.norm() < 1e-14 {
        return Err(ExpandError::MellinPole);
    }
    Ok(-mellin_moment(f, s + 1.0, 1)? / s)
}

/// Relative defect of M[f^{(r)}, s] = (−1)^r (s−1)(s−2)⋯(s−r) M[f, s−r].
pub fn mellin_reduction_defect(f: &TestFunction, s: Complex64, r: usize) -> Result<f64, ExpandError> {
    let lhs = mellin_moment(f, s, r)?;
    let mut factor = c64(if r % 2 == 0 { 1.0 } else { -1.0 });
    for i in 1..=r {
        factor *= s - i as f64;
    }
    let rhs = factor * mellin_continued(f, s - r as f64)?;
    let scale = lhs.norm().max(rhs.norm());
    Ok(if scale == 0.0 { 0.0 } else { (lhs - rhs).norm() / scale.max(1e-300) })
}

/// (exponent, coefficient) of ∫∫ t^p g f^{(r)}(tℓ_{m0}) dξ dx ≈ coefficient · t^{exponent}.
pub fn trace_term_reduce(
    p: u32,
    g: &HomogeneousSymbol,
    r: u32,
    l: &EllipticOperatorSpec,
    f: &TestFunction,
) -> Result<(Complex64, Complex64), ExpandError> {
    let m0 = l.m0();
    let sigma = (g.degree() + g.dim() as f64) / m0;
    let exponent = p as f64 - sigma;
    let positive = f.supported_in_positive()
        || (r >= 1 && f.derivative_support(r as usize).is_none_or(|(a, _)| a > 0.0));
    if !positive {
        return Err(ExpandError::ZeroOrderCutoffTerm);
    }
    if g.is_zero() {
        return Ok((exponent, c64(0.0)));
    }
    let m = mellin_moment(f, sigma, r as usize)?;
    let w = weighted_coefficient_integral(g, l, sigma)?;
    Ok((exponent, m * w / m0))
}

/// One power t^{exponent} with its coefficient and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTerm {
    pub exponent: Complex64,
    pub coefficient: Complex64,
    pub provenance: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExpansionPrediction {
    /// Powers of t other than the constant, sorted by real part.
    pub terms: Vec<PredictedTerm>,
    /// The t⁰ coefficient when one is predicted.
    pub constant: Option<PredictedTerm>,
    /// Coefficients dropped as negligible (< 1e−12 of the largest).
    pub pruned: Vec<String>,
    /// Largest relative defect of the Mellin reduction identity over the (s, r)
    /// pairs used.
    pub mellin_identity_defect: f64,
}

impl ExpansionPrediction {
    /// All terms, the constant included, sorted by real exponent.
    pub fn all_terms(&self) -> Vec<PredictedTerm> {
        let mut v = self.terms.clone();
        if let Some(c) = &self.constant {
            v.push(c.clone());
        }
        v.sort_by(|a, b| a.exponent.re.total_cmp(&b.exponent.re));
        v
    }

    pub fn exponents(&self) -> Vec<Complex64> {
        self.all_terms().iter().map(|t| t.exponent).collect()
    }

    pub fn coefficient_at(&self, exponent: f64) -> Option<Complex64> {
        self.all_terms()
            .iter()
            .find(|t| (t.exponent - exponent).norm() < 1e-9)
            .map(|t| t.coefficient)
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        self.all_terms().iter().map(|term| term.coefficient * c64(t).powc(term.exponent)).sum()
    }

    fn push_merged(&mut self, exponent: Complex64, coefficient: Complex64, tag: String) {
        if let Some(t) = self.terms.iter_mut().find(|t| (t.exponent - exponent).norm() < 1e-9) {
            t.coefficient += coefficient;
            t.provenance.push(tag);
        } else {
            self.terms.push(PredictedTerm { exponent, coefficient, provenance: vec![tag] });
        }
    }

    fn finish(&mut self) {
        let largest = self
            .all_terms()
            .iter()
            .map(|t| t.coefficient.norm())
            .fold(0.0, f64::max);
        let mut kept = Vec::new();
        for t in self.terms.drain(..) {
            if t.coefficient.norm() < 1e-12 * largest {
                self.pruned.push(format!(
                    "exponent {} dropped: |c| = {:.3e} ({})",
                    fmt_complex(t.exponent),
                    t.coefficient.norm(),
                    t.provenance.join("; ")
                ));
            } else {
                kept.push(t);
            }
        }
        kept.sort_by(|a, b| a.exponent.re.total_cmp(&b.exponent.re));
        self.terms = kept;
    }
}

pub(crate) fn fmt_complex(z: Complex64) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else {
        format!("{}{:+}i", z.re, z.im)
    }
}

impl fmt::Display for ExpansionPrediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in self.all_terms() {
            writeln!(f, "t^{}: {}  [{}]", fmt_complex(t.exponent), fmt_complex(t.coefficient), t.provenance.join("; "))?;
        }
        Ok(())
    }
}

/// Grouping key of a pipeline contribution: ladder index j′, derivative order r,
/// and whether the term is the plain a_{m−j′} f(tℓ) product (j = 0, α = 0).
type GroupKey = (usize, u32, bool);

struct Group {
    h: HomogeneousSymbol,
    tags: Vec<String>,
}

/// Collects Σ c_α ∂_ξ^α a_{m−j1} · ∂_x^α (order-j functional symbol of f(tL)) for
/// j1 + |α| + j = j′ < count, grouped by (j′, r).
fn pipeline_groups(
    a: &PolyHomogeneousSymbol,
    l: &EllipticOperatorSpec,
    count: usize,
) -> Result<BTreeMap<GroupKey, Group>, ExpandError> {
    let n = a.dim();
    if count == 0 {
        return Ok(BTreeMap::new());
    }
    let fc = fc_symbols(l, count - 1)?;
    let ell = l.principal();
    let mut groups: BTreeMap<GroupKey, Group> = BTreeMap::new();
    for jp in 0..count {
        for j1 in 0..=jp {
            let aj = a.homogeneous(j1);
            if aj.is_zero() {
                continue;
            }
            for alpha in multi_indices_up_to(n, (jp - j1) as u32) {
                let j = jp - j1 - multi_index_order(&alpha) as usize;
                let da = aj.dxi_multi(&alpha);
                if da.is_zero() || fc.orders[j].is_empty() {
                    continue;
                }
                let b = FunctionalTermSum::from_fc(&fc, j).dx_multi(&ell, &alpha)?;
                let ca = star_coefficient(&alpha);
                for (p, g, r) in b.terms() {
                    debug_assert_eq!(p, r);
                    let h = da.mul(g)?.scale(ca);
                    if h.is_zero() {
                        continue;
                    }
                    let key = (jp, r, j == 0 && multi_index_order(&alpha) == 0);
                    let tag = format!("j1={j1} alpha={:?} j={j} r={r}", &alpha[..n]);
                    match groups.get_mut(&key) {
                        Some(gr) => {
                            gr.h = gr.h.add(&h)?;
                            gr.tags.push(tag);
                        }
                        None => {
                            groups.insert(key, Group { h, tags: vec![tag] });
                        }
                    }
                }
            }
        }
    }
    Ok(groups)
}

fn ladder_sigma(a: &PolyHomogeneousSymbol, l: &EllipticOperatorSpec, jp: usize) -> Complex64 {
    (a.order() - jp as f64 + a.dim() as f64) / l.m0()
}

/// Exponent −(m + n − j)/m₀ of ladder rung j.
pub fn ladder_exponent(order: Complex64, n: usize, m0: f64, j: usize) -> Complex64 {
    -(order + n as f64 - j as f64) / m0
}

/// Expansion of tr(A η(tL)) for η supported in (0, ∞), over the ladder
/// t^{−(m+n−j′)/m0}, j′ < count.
pub fn predict_expansion_res(
    a: &PolyHomogeneousSymbol,
    l: &EllipticOperatorSpec,
    eta: &TestFunction,
    count: usize,
) -> Result<ExpansionPrediction, ExpandError> {
    if !eta.supported_in_positive() {
        return Err(ExpandError::SupportTouchesZero);
    }
    let n = a.dim();
    let m0 = l.m0();
    let groups = pipeline_groups(a, l, count)?;
    let mut pred = ExpansionPrediction::default();
    let residue_rung = in_integer_ladder(a.order(), n).then(|| (a.order().re.round() + n as f64) as usize);
    let mut zero_rung: Vec<(GroupKey, Complex64, Vec<String>)> = Vec::new();
    for (&(jp, r, direct), gr) in &groups {
        let sigma = ladder_sigma(a, l, jp) + r as f64;
        let (exponent, coefficient) = trace_term_reduce(r, &gr.h, r, l, eta)?;
        if r >= 1 {
            pred.mellin_identity_defect = pred.mellin_identity_defect.max(mellin_reduction_defect(eta, sigma, r as usize)?);
        }
        let tag = format!("j'={jp} r={r}: {}", gr.tags.join(", "));
        if Some(jp) == residue_rung {
            zero_rung.push(((jp, r, direct), coefficient, gr.tags.clone()));
            continue;
        }
        pred.push_merged(exponent, coefficient, tag);
    }
    if let Some(jp) = residue_rung.filter(|jp| *jp < count) {
        let residue = residue_density_integrated(a) * mellin_moment(eta, c64(0.0), 0)? / m0;
        let scale = residue.norm().max(pred.terms.iter().map(|t| t.coefficient.norm()).fold(0.0, f64::max));
        let mut pipeline = c64(0.0);
        for ((_, r, direct), c, tags) in &zero_rung {
            if *r == 0 && *direct {
                pipeline += c;
            } else if c.norm() > 1e-9 * scale.max(1e-300) {
                return Err(ExpandError::VanishingViolated(format!("t⁰ rung, r={r}: {} from {}", fmt_complex(*c), tags.join(", "))));
            }
        }
        if (pipeline - residue).norm() > 1e-8 * scale.max(1e-300) {
            return Err(ExpandError::ResidueMismatch { pipeline, residue });
        }
        pred.constant = Some(PredictedTerm {
            exponent: c64(0.0),
            coefficient: residue,
            provenance: vec![format!("res(A)·(1/m0)·∫η du/u (pipeline j'={jp} agrees: {})", fmt_complex(pipeline))],
        });
    }
    pred.finish();
    Ok(pred)
}

/// Expansion of tr(A χ(tL)) for χ ≡ 1 near 0: constant TR(A) plus the ladder
/// t^{−(m+n−j′)/m0}, j′ < count.
pub fn predict_expansion_tr(
    a: &PolyHomogeneousSymbol,
    l: &EllipticOperatorSpec,
    chi: &TestFunction,
    count: usize,
) -> Result<ExpansionPrediction, ExpandError> {
    let n = a.dim();
    if in_integer_ladder(a.order(), n) {
        return Err(TraceError::IntegerOrder(a.order(), n).into());
    }
    if chi.flat_one_radius().is_none() {
        return Err(ExpandError::NotFlatNearZero);
    }
    let m0 = l.m0();
    let groups = pipeline_groups(a, l, count)?;
    let mut pred = ExpansionPrediction::default();
    for (&(jp, r, direct), gr) in &groups {
        let sigma = ladder_sigma(a, l, jp) + r as f64;
        let tag = format!("j'={jp} r={r}: {}", gr.tags.join(", "));
        let (exponent, coefficient) = if r == 0 {
            if !direct {
                return Err(ExpandError::VanishingViolated(format!("r = 0 term outside the plain product: {tag}")));
            }
            let w = weighted_coefficient_integral(&gr.h, l, sigma)?;
            (-sigma, mellin_continued(chi, sigma)? * w / m0)
        } else {
            pred.mellin_identity_defect = pred.mellin_identity_defect.max(mellin_reduction_defect(chi, sigma, r as usize)?);
            trace_term_reduce(r, &gr.h, r, l, chi)?
        };
        pred.push_merged(exponent, coefficient, tag);
    }
    pred.constant = Some(PredictedTerm {
        exponent: c64(0.0),
        coefficient: canonical_trace(a)?,
        provenance: vec!["TR(A), finite-part integral".into()],
    });
    pred.finish();
    Ok(pred)
}

/// Multiplier L only: Σ_{j′} (1/m0) M[f, σ_{j′}] ∫ a_{m−j′} ℓ^{−σ_{j′}}, directly from
/// the components of A without the composition machinery.
pub fn predict_direct_multiplier(
    a: &PolyHomogeneousSymbol,
    l: &EllipticOperatorSpec,
    eta: &TestFunction,
    count: usize,
) -> Result<Vec<(Complex64, Complex64)>, ExpandError> {
    assert!(l.is_multiplier(), "direct route needs an x-independent L");
    let mut out = Vec::new();
    for jp in 0..count {
        let h = a.homogeneous(jp);
        if h.is_zero() {
            continue;
        }
        let sigma = ladder_sigma(a, l, jp);
        let c = mellin_moment(eta, sigma, 0)? * weighted_coefficient_integral(&h, l, sigma)? / l.m0();
        out.push((-sigma, c));
    }
    Ok(out)
}

/// Radial profile ∫ ρ^{s−1} w(ρ) χ(t ρ^{m0} ℓ) dρ with w = ψ₁(t_j ρ) − 1 (for
/// Re s > 0) or w = ψ₁(t_j ρ) (for Re s < 0).
#[allow(clippy::too_many_arguments)]
fn et_radial(s: Complex64, tj: f64, ell: f64, t: f64, m0: f64, chi: &TestFunction, flat: f64, top: f64) -> Complex64 {
    let subtract = s.re > 0.0;
    let r_half = 0.5 / tj;
    let r_one = 1.0 / tj;
    let rho_c = (flat / (t * ell)).powf(1.0 / m0);
    let rho_d = (top / (t * ell)).powf(1.0 / m0);
    let (lo, hi) = if subtract { (0.0, r_one.min(rho_d)) } else { (r_half, rho_d) };
    if hi <= lo {
        return c64(0.0);
    }
    let mut cuts = vec![lo, hi];
    for p in [r_half, r_one, rho_c] {
        if p > lo && p < hi {
            cuts.push(p);
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let w = |rho: f64| if subtract { psi1(tj * rho) - 1.0 } else { psi1(tj * rho) };
    let mut acc = c64(0.0);
    for pair in cuts.windows(2) {
        let (p, q) = (pair[0], pair[1]);
        let w_const = if q <= r_half {
            Some(if subtract { -1.0 } else { 0.0 })
        } else if p >= r_one {
            Some(if subtract { 0.0 } else { 1.0 })
        } else {
            None
        };
        match w_const {
            Some(0.0) => {}
            Some(wc) if q <= rho_c => {
                let pp = if p == 0.0 { c64(0.0) } else { c64(p).powc(s) };
                acc += (c64(q).powc(s) - pp) * wc / s;
            }
            _ => {
                acc += integrate(p, q, |rho| {
                    c64(rho).powc(s - 1.0) * w(rho) * chi.eval(t * rho.powf(m0) * ell)
                });
            }
        }
    }
    acc
}

/// E_t = Σ_j ∫∫ (a_{m−j} ψ₁(t_j|ξ|) − a_{m−j}) χ(tℓ_{m0}) dξ dx, where the
/// subtraction is made only for components with Re(m − j) > −n (the others are
/// integrable at ξ = 0 as they stand). Tends to TR(A) as t → 0.
pub fn tr_integral_et(
    a: &PolyHomogeneousSymbol,
    l: &EllipticOperatorSpec,
    chi: &TestFunction,
    t: f64,
) -> Result<Complex64, ExpandError> {
    let n = a.dim();
    if in_integer_ladder(a.order(), n) {
        return Err(TraceError::IntegerOrder(a.order(), n).into());
    }
    let flat = chi.flat_one_radius().ok_or(ExpandError::NotFlatNearZero)?;
    let (_, top) = chi.support().ok_or(ExpandError::NotCompact)?;
    if !top.is_finite() {
        return Err(ExpandError::NotCompact);
    }
    let ell = l.principal();
    let x_free = ell.is_x_independent();
    let mut total = c64(0.0);
    for (j, c) in a.components().iter().enumerate() {
        if c.symbol.is_zero() {
            continue;
        }
        let tj = c.cutoff.ok_or(TraceError::MissingCutoff(j))?.t();
        let s = c.symbol.degree() + n as f64;
        let h = if x_free { c.symbol.x_mean() } else { c.symbol.clone() };
        let mut tres = if x_free { 1 } else { (2 * (h.max_abs_freq() + ell.max_abs_freq()) as usize + 4).max(8) };
        let mut sres = 32;
        let mut prev: Option<Complex64> = None;
        loop {
            let grid = SphereGrid::new(n, sres, tres)?;
            let xs = grid.torus_nodes();
            let wx = 1.0 / xs.len() as f64;
            let mut acc = c64(0.0);
            for x in &xs {
                acc += grid.integrate_sphere(|w| {
                    let hv = h.eval(&x[..n], &w[..n]);
                    if hv == c64(0.0) {
                        return hv;
                    }
                    let lv = ell.eval(&x[..n], &w[..n]).re;
                    hv * et_radial(s, tj, lv, t, l.m0(), chi, flat, top)
                }) * wx;
            }
            if let Some(p) = prev {
                if (acc - p).norm() <= 1e-11 * acc.norm().max(1e-12) || sres >= 1024 {
                    total += acc;
                    break;
                }
            }
            prev = Some(acc);
            sres *= 2;
            if !x_free {
                tres = (tres * 2).min(128);
            }
        }
    }
    Ok(total)
}

/// Generalized Richardson extrapolation of E_t over the given t values, using the
/// exact decay exponents −(m − j + n)/m0 of the integrable components.
#[derive(Clone, Debug, PartialEq)]
pub struct EtExtrapolation {
    pub value: Complex64,
    pub samples: Vec<(f64, Complex64)>,
    pub decay_exponents: Vec<f64>,
    /// Least-squares slope of ln|E_t − value| against ln t (None when E_t is
    /// constant to rounding).
    pub measured_rate: Option<f64>,
}

pub fn extrapolate_et(
    a: &PolyHomogeneousSymbol,
    l: &EllipticOperatorSpec,
    chi: &TestFunction,
    ts: &[f64],
) -> Result<EtExtrapolation, ExpandError> {
    let n = a.dim() as f64;
    let mut samples = Vec::with_capacity(ts.len());
    for &t in ts {
        samples.push((t, tr_integral_et(a, l, chi, t)?));
    }
    let mut decay = Vec::new();
    for (j, c) in a.components().iter().enumerate() {
        let s = a.order().re - j as f64 + n;
        if !c.symbol.is_zero() && s < 0.0 {
            decay.push(-s / l.m0());
        }
    }
    decay.dedup_by(|x, y| (*x - *y).abs() < 1e-9);
    let tv: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let re: Vec<f64> = samples.iter().map(|s| s.1.re).collect();
    let im: Vec<f64> = samples.iter().map(|s| s.1.im).collect();
    let fit_re = least_squares_powers(&tv, &re, &decay, true);
    let fit_im = least_squares_powers(&tv, &im, &decay, true);
    let k = decay.len();
    let value = Complex64::new(fit_re.coefficients[k], fit_im.coefficients[k]);
    let diffs: Vec<(f64, f64)> = samples.iter().map(|(t, v)| (*t, (v - value).norm())).collect();
    let scale = value.norm().max(1e-300);
    let measured_rate = if diffs.iter().all(|d| d.1 <= 1e-12 * scale) {
        None
    } else {
        Some(crate::funcalc::log_slope(&diffs.iter().filter(|d| d.1 > 1e-12 * scale).copied().collect::<Vec<_>>()))
    };
    Ok(EtExtrapolation { value, samples, decay_exponents: decay, measured_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::GaussLegendre;
    use crate::quad::sphere_area;
    use crate::symcore::{CutoffSpec, TorusFourierSeries};
    use crate::traces::smoothing_trace;
    use std::f64::consts::PI;

    fn laplacian() -> EllipticOperatorSpec {
        EllipticOperatorSpec::new(PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, 2.0, 1.0)), 0.5, 0.0).unwrap()
    }

    fn perturbed(eps: f64) -> EllipticOperatorSpec {
        let l0 = HomogeneousSymbol::radial(2, 2.0, 1.0);
        let l1 = HomogeneousSymbol::radial_with(2, c64(1.0), TorusFourierSeries::cos(2, [1, 0, 0], eps));
        let sym = PolyHomogeneousSymbol::with_cutoff(2, c64(2.0), vec![l0, l1], CutoffSpec::unit()).unwrap();
        EllipticOperatorSpec::new(sym, 0.5, 1.0).unwrap()
    }

    fn eta() -> TestFunction {
        TestFunction::bump_on(1.0, 2.0)
    }

    fn plain(f: &TestFunction, s: f64, a: f64, b: f64) -> f64 {
        GaussLegendre::new(40).integrate(a, b, 200, |u| f.eval(u) * u.powf(s - 1.0))
    }

    #[test]
    fn ft_dx_examples() {
        let one = HomogeneousSymbol::radial(2, 0.0, 1.0);
        let s = FunctionalTermSum::single(0, one.clone(), 0);
        assert!(s.dx(&laplacian().principal(), 0).unwrap().is_empty());
        let ell = HomogeneousSymbol::radial(2, 2.0, 1.0)
            .add(&HomogeneousSymbol::radial_with(2, c64(2.0), TorusFourierSeries::cos(2, [1, 0, 0], 0.1)))
            .unwrap();
        let d = s.dx(&ell, 0).unwrap();
        let terms: Vec<_> = d.terms().collect();
        assert_eq!(terms.len(), 1);
        assert_eq!((terms[0].0, terms[0].2), (1, 1));
        let want = HomogeneousSymbol::radial_with(2, c64(2.0), TorusFourierSeries::sin(2, [1, 0, 0], -0.2 * PI));
        assert!(terms[0].1.approx_eq(&want, 1e-14));
    }

    #[test]
    fn ft_dx_matches_finite_differences() {
        let ell = perturbed(0.1).principal().add(&HomogeneousSymbol::radial_with(2, c64(2.0), TorusFourierSeries::sin(2, [0, 1, 0], 0.2))).unwrap();
        let g = HomogeneousSymbol::monomial(2, c64(1.0), [1, 0, 0], TorusFourierSeries::cos(2, [1, 1, 0], 1.0));
        let s = FunctionalTermSum::single(1, g, 2);
        let f = eta();
        let t = 0.3;
        let (x, xi) = ([0.17, 0.62], [1.3, 0.9]);
        for axis in 0..2 {
            let d = s.dx(&ell, axis).unwrap();
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[axis] += h;
            xm[axis] -= h;
            let fd = (s.eval(&f, &ell, t, &xp, &xi) - s.eval(&f, &ell, t, &xm, &xi)) / (2.0 * h);
            let got = d.eval(&f, &ell, t, &x, &xi);
            assert!((fd - got).norm() < 1e-8 * (1.0 + got.norm()), "axis {axis}: {fd} vs {got}");
            let d = s.dxi(&ell, axis).unwrap();
            let mut kp = xi;
            let mut km = xi;
            kp[axis] += h;
            km[axis] -= h;
            let fd = (s.eval(&f, &ell, t, &x, &kp) - s.eval(&f, &ell, t, &x, &km)) / (2.0 * h);
            let got = d.eval(&f, &ell, t, &x, &xi);
            assert!((fd - got).norm() < 1e-8 * (1.0 + got.norm()));
        }
    }

    #[test]
    fn mellin_examples() {
        let f = eta();
        assert!(mellin_moment(&f, c64(1.0), 1).unwrap().norm() < 1e-14);
        let v = mellin_moment(&f, c64(1.0), 0).unwrap();
        assert!(v.re > 0.0 && (v.re - plain(&f, 1.0, 1.0, 2.0)).abs() < 1e-13);
        assert!(mellin_reduction_defect(&f, c64(3.5), 2).unwrap() < 1e-10);
        assert!(mellin_reduction_defect(&f, Complex64::new(-0.7, 0.4), 3).unwrap() < 1e-10);
        let chi = TestFunction::cutoff(1.0, 2.0);
        // Direct integral, closed form on [0, 1] plus quadrature.
        let want = 1.0 / 0.5 + plain(&chi, 0.5, 1.0, 2.0);
        assert!((mellin_moment(&chi, c64(0.5), 0).unwrap().re - want).abs() < 1e-12);
        assert!((mellin_continued(&chi, c64(0.5)).unwrap() - mellin_moment(&chi, c64(0.5), 0).unwrap()).norm() < 1e-12);
        assert!(mellin_reduction_defect(&chi, c64(2.5), 2).unwrap() < 1e-10);
        assert!(mellin_reduction_defect(&chi, c64(1.25), 2).unwrap() < 1e-10);
        assert!(matches!(mellin_moment(&chi, c64(-0.5), 0), Err(ExpandError::Divergent(_))));
        // Non-flat function touching 0: substitution route.
        let g = TestFunction::bump_on(-1.0, 1.0);
        let want = GaussLegendre::new(40).integrate(0.0, 1.0, 100, |w| 2.0 * g.eval(w * w) * w * w);
        assert!((mellin_moment(&g, c64(1.5), 0).unwrap().re - want).abs() < 1e-12);
        // Continuation of a flat cutoff: ∫₀^∞ (χ − 1) u^{s−1} du for −1 < Re s < 0.
        let s = -0.3;
        let want = plain(&TestFunction::constant(-1.0).add(chi.clone()), s, 1.0, 2.0) + 2f64.powf(s) / s;
        assert!((mellin_continued(&chi, c64(s)).unwrap().re - want).abs() < 1e-12);
    }

    #[test]
    fn reduce_examples() {
        let l = laplacian();
        let g = HomogeneousSymbol::radial(2, -2.0, 1.0);
        let (e, c) = trace_term_reduce(0, &g, 0, &l, &eta()).unwrap();
        assert!(e.norm() < 1e-15);
        let want = sphere_area(2) / 2.0 * plain(&eta(), 0.0, 1.0, 2.0);
        assert!((c.re - want).abs() < 1e-12 * want);
        let g = HomogeneousSymbol::radial(2, -1.0, 1.0);
        let (e, _) = trace_term_reduce(0, &g, 0, &l, &eta()).unwrap();
        assert!((e.re + 0.5).abs() < 1e-15);
        let (_, c) = trace_term_reduce(0, &HomogeneousSymbol::zero(2, c64(-1.0)), 0, &l, &eta()).unwrap();
        assert_eq!(c, c64(0.0));
        assert!(matches!(
            trace_term_reduce(0, &g, 0, &l, &TestFunction::cutoff(1.0, 2.0)),
            Err(ExpandError::ZeroOrderCutoffTerm)
        ));
    }

    fn a_two(m: f64) -> PolyHomogeneousSymbol {
        let g = TorusFourierSeries::constant(2, c64(1.0)).add(&TorusFourierSeries::cos(2, [1, 0, 0], 1.0));
        let parts = vec![
            HomogeneousSymbol::radial_with(2, c64(m), g.clone()),
            HomogeneousSymbol::monomial(2, c64(m - 1.0), [1, 0, 0], TorusFourierSeries::constant(2, c64(0.7))).add(
                &HomogeneousSymbol::radial_with(2, c64(m - 1.0), g.scale(c64(0.3))),
            ).unwrap(),
        ];
        PolyHomogeneousSymbol::with_cutoff(2, c64(m), parts, CutoffSpec::unit()).unwrap()
    }

    #[test]
    fn residue_prediction_for_multiplier() {
        let a = PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, -2.0, 1.0));
        let p = predict_expansion_res(&a, &laplacian(), &eta(), 3).unwrap();
        assert!(p.terms.is_empty());
        let want = 2.0 * PI / 2.0 * plain(&eta(), 0.0, 1.0, 2.0);
        assert!((p.constant.unwrap().coefficient.re - want).abs() < 1e-12 * want);
        // Ladder and direct route agreement.
        let a = a_two(-1.0);
        let p = predict_expansion_res(&a, &laplacian(), &eta(), 3).unwrap();
        let exps: Vec<f64> = p.exponents().iter().map(|e| e.re).collect();
        assert_eq!(exps.len(), 2);
        assert!((exps[0] + 0.5).abs() < 1e-12 && exps[1].abs() < 1e-12);
        let direct = predict_direct_multiplier(&a, &laplacian(), &eta(), 3).unwrap();
        for (e, c) in direct {
            assert!((p.coefficient_at(e.re).unwrap() - c).norm() < 1e-14 * c.norm());
        }
        assert!(p.mellin_identity_defect < 1e-10);
    }

    #[test]
    fn leading_coefficient_two_routes() {
        let l = perturbed(0.1);
        let a = a_two(-1.0);
        let p = predict_expansion_res(&a, &l, &eta(), 2).unwrap();
        let sigma = c64(0.5);
        let want = mellin_moment(&eta(), sigma, 0).unwrap() * weighted_coefficient_integral(&a.homogeneous(0), &l, sigma).unwrap() / 2.0;
        assert!((p.coefficient_at(-0.5).unwrap() - want).norm() < 1e-12 * want.norm());
        // With L x-dependent the ψ₁-free A = 1 has a vanishing j′ = 1 rung.
        let one = PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, 0.0, 1.0));
        let p = predict_expansion_res(&one, &l, &eta(), 2).unwrap();
        assert_eq!(p.terms.len(), 1);
        assert!(p.pruned.iter().any(|s| s.contains("-0.5")) || p.coefficient_at(-0.5).is_none());
    }

    #[test]
    fn tr_prediction_examples() {
        let chi = TestFunction::cutoff(1.0, 2.0);
        let l = laplacian();
        let a = PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, -1.5, 1.0));
        let p = predict_expansion_tr(&a, &l, &chi, 4).unwrap();
        assert_eq!(p.terms.len(), 1);
        let want = PI * plain(&chi, 0.25, 1.0, 2.0) + PI / 0.25;
        assert!((p.terms[0].coefficient.re - want).abs() < 1e-11 * want);
        assert!((p.terms[0].exponent.re + 0.25).abs() < 1e-15);
        assert_eq!(p.constant.as_ref().unwrap().coefficient, canonical_trace(&a).unwrap());
        // Re m < −n: only decaying powers besides the plain trace.
        let a = a_two(-2.5);
        let p = predict_expansion_tr(&a, &l, &chi, 3).unwrap();
        assert!(p.terms.iter().all(|t| t.exponent.re > 0.0));
        assert!((p.constant.unwrap().coefficient - smoothing_trace(&a).unwrap()).norm() < 1e-13);
        // Rescaling χ leaves the constant alone.
        let wide = TestFunction::cutoff(2.0, 4.0);
        let a = a_two(-0.5);
        let p1 = predict_expansion_tr(&a, &l, &chi, 3).unwrap();
        let p2 = predict_expansion_tr(&a, &l, &wide, 3).unwrap();
        assert_eq!(p1.constant.unwrap().coefficient, p2.constant.unwrap().coefficient);
        assert!(predict_expansion_tr(&a_two(-1.0), &l, &chi, 3).is_err());
    }

    #[test]
    fn et_converges_to_canonical_trace() {
        let chi = TestFunction::cutoff(1.0, 2.0);
        let l = laplacian();
        for m in [-1.5, -0.5] {
            let a = a_two(m);
            let tr = canonical_trace(&a).unwrap();
            let ts = [1e-3, 5e-4, 2.5e-4, 1.25e-4];
            let ex = extrapolate_et(&a, &l, &chi, &ts).unwrap();
            assert!((ex.value - tr).norm() < 1e-6 * tr.norm().max(1.0), "m={m}: {} vs {tr}", ex.value);
        }
    }
}
