//! Resolvent parametrix of L − z in z-free form.
//!
//! A [`ResolventSymbol`] stands for Σ_p d_p(x, ξ) (ℓ_{m0}(x, ξ) − z)^{−p}. The
//! whole symbol is homogeneous of a fixed total degree D (counting ℓ_{m0} − z as
//! degree m0), so the coefficient at power p has degree D + p·m0.

use crate::calculus::{multi_indices_up_to, star_coefficient};
use crate::jet::{Jet, JetSpace};
use crate::symcore::{
    degrees_equal, multi_index_order, EllipticOperatorSpec, HomogeneousSymbol, MultiIndex, SymbolError,
};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

/// Factor tag (k′, x-derivative order bound, ξ-derivative order bound) of a
/// ∂_x^α ∂_ξ^β ℓ_{m0−k′} factor contributing to a coefficient.
pub type Provenance = (u32, u32, u32);

#[derive(Clone, Debug, PartialEq)]
pub struct ResolventSymbol {
    dim: usize,
    m0: f64,
    total_degree: Complex64,
    powers: BTreeMap<u32, HomogeneousSymbol>,
    provenance: BTreeMap<u32, BTreeSet<Provenance>>,
}

impl ResolventSymbol {
    pub fn zero(dim: usize, m0: f64, total_degree: Complex64) -> Self {
        ResolventSymbol { dim, m0, total_degree, powers: BTreeMap::new(), provenance: BTreeMap::new() }
    }

    /// (ℓ_{m0} − z)^{−1}
    pub fn resolvent(dim: usize, m0: f64) -> Self {
        let mut q = Self::zero(dim, m0, Complex64::new(-m0, 0.0));
        q.powers.insert(1, HomogeneousSymbol::radial(dim, 0.0, 1.0));
        q.provenance.insert(1, BTreeSet::new());
        q
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_degree(&self) -> Complex64 {
        self.total_degree
    }

    /// j for a symbol of total degree −m0 − j.
    pub fn order_tag(&self) -> f64 {
        -self.total_degree.re - self.m0
    }

    pub fn powers(&self) -> &BTreeMap<u32, HomogeneousSymbol> {
        &self.powers
    }

    pub fn provenance(&self) -> &BTreeMap<u32, BTreeSet<Provenance>> {
        &self.provenance
    }

    pub fn coefficient(&self, p: u32) -> Option<&HomogeneousSymbol> {
        self.powers.get(&p)
    }

    pub fn is_zero(&self) -> bool {
        self.powers.is_empty()
    }

    fn expected_degree(&self, p: u32) -> Complex64 {
        self.total_degree + p as f64 * self.m0
    }

    /// Adds d at power p, enforcing the degree bookkeeping.
    pub fn add_power(&mut self, p: u32, d: &HomogeneousSymbol, tags: &BTreeSet<Provenance>) -> Result<(), SymbolError> {
        if !degrees_equal(d.degree(), self.expected_degree(p)) {
            return Err(SymbolError::DegreeMismatch(self.expected_degree(p), d.degree()));
        }
        if d.is_zero() {
            return Ok(());
        }
        let merged = match self.powers.get(&p) {
            Some(e) => e.add(d)?,
            None => d.clone(),
        };
        if merged.is_zero() {
            self.powers.remove(&p);
            self.provenance.remove(&p);
        } else {
            self.powers.insert(p, merged);
            self.provenance.entry(p).or_default().extend(tags.iter().copied());
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, SymbolError> {
        if !degrees_equal(self.total_degree, other.total_degree) {
            return Err(SymbolError::DegreeMismatch(self.total_degree, other.total_degree));
        }
        let mut out = self.clone();
        for (p, d) in &other.powers {
            out.add_power(*p, d, &other.provenance[p])?;
        }
        Ok(out)
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = Self::zero(self.dim, self.m0, self.total_degree);
        for (p, d) in &self.powers {
            let s = d.scale(c);
            if !s.is_zero() {
                out.powers.insert(*p, s);
                out.provenance.insert(*p, self.provenance[p].clone());
            }
        }
        out
    }

    /// Multiplies every coefficient by g.
    pub fn mul_hs(&self, g: &HomogeneousSymbol, tag: Option<Provenance>) -> Result<Self, SymbolError> {
        let mut out = Self::zero(self.dim, self.m0, self.total_degree + g.degree());
        for (p, d) in &self.powers {
            let mut tags = self.provenance[p].clone();
            tags.extend(tag);
            out.add_power(*p, &d.mul(g)?, &tags)?;
        }
        Ok(out)
    }

    fn differentiate<F: Fn(&HomogeneousSymbol) -> HomogeneousSymbol>(
        &self,
        ell: &HomogeneousSymbol,
        d: F,
        degree_drop: f64,
        bump: impl Fn(Provenance) -> Provenance,
        chain_tag: Provenance,
    ) -> Result<Self, SymbolError> {
        let mut out = Self::zero(self.dim, self.m0, self.total_degree - degree_drop);
        let dl = d(ell);
        for (p, coef) in &self.powers {
            let tags: BTreeSet<Provenance> = self.provenance[p].iter().map(|t| bump(*t)).collect();
            out.add_power(*p, &d(coef), &tags)?;
            if !dl.is_zero() {
                let mut chain = tags.clone();
                chain.insert(chain_tag);
                let term = coef.mul(&dl)?.scale(Complex64::new(-(*p as f64), 0.0));
                out.add_power(p + 1, &term, &chain)?;
            }
        }
        Ok(out)
    }

    /// ∂_{ξ_axis}, with ∂(ℓ_{m0} − z)^{−p} = −p ∂ℓ_{m0} (ℓ_{m0} − z)^{−p−1}.
    pub fn dxi(&self, axis: usize, ell: &HomogeneousSymbol) -> Result<Self, SymbolError> {
        self.differentiate(ell, |h| h.dxi(axis), 1.0, |(k, a, b)| (k, a, b + 1), (0, 0, 1))
    }

    /// ∂_{x_axis}, chain rule as for [`Self::dxi`].
    pub fn dx(&self, axis: usize, ell: &HomogeneousSymbol) -> Result<Self, SymbolError> {
        self.differentiate(ell, |h| h.dx(axis), 0.0, |(k, a, b)| (k, a + 1, b), (0, 1, 0))
    }

    pub fn dx_multi(&self, alpha: &MultiIndex, ell: &HomogeneousSymbol) -> Result<Self, SymbolError> {
        let mut q = self.clone();
        for axis in 0..self.dim {
            for _ in 0..alpha[axis] {
                q = q.dx(axis, ell)?;
            }
        }
        Ok(q)
    }

    /// Division by (ℓ_{m0} − z): every power index moves up by one.
    pub fn shift(&self) -> Self {
        let mut out = Self::zero(self.dim, self.m0, self.total_degree - self.m0);
        for (p, d) in &self.powers {
            out.powers.insert(p + 1, d.clone());
            out.provenance.insert(p + 1, self.provenance[p].clone());
        }
        out
    }

    /// Multiplication by (ℓ_{m0} − z); power p becomes p − 1 (power 0 is a plain symbol).
    pub fn unshift(&self) -> Self {
        assert!(!self.powers.contains_key(&0), "cannot multiply a z-free term by (ℓ − z)");
        let mut out = Self::zero(self.dim, self.m0, self.total_degree + self.m0);
        for (p, d) in &self.powers {
            out.powers.insert(p - 1, d.clone());
            out.provenance.insert(p - 1, self.provenance[p].clone());
        }
        out
    }

    pub fn eval(&self, x: &[f64], xi: &[f64], z: Complex64, ell: &HomogeneousSymbol) -> Complex64 {
        let l = ell.eval(x, xi);
        self.powers.iter().map(|(p, d)| d.eval(x, xi) * (l - z).powi(-(*p as i32))).sum()
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        if !degrees_equal(self.total_degree, other.total_degree) {
            return false;
        }
        let keys: BTreeSet<u32> = self.powers.keys().chain(other.powers.keys()).copied().collect();
        keys.into_iter().all(|p| match (self.powers.get(&p), other.powers.get(&p)) {
            (Some(a), Some(b)) => a.approx_eq(b, tol),
            (Some(a), None) | (None, Some(a)) => a.max_amplitude() <= tol,
            (None, None) => true,
        })
    }

    pub fn max_amplitude(&self) -> f64 {
        self.powers.values().map(|d| d.max_amplitude()).fold(0.0, f64::max)
    }

    /// Smallest and largest power present.
    pub fn power_range(&self) -> Option<(u32, u32)> {
        Some((*self.powers.keys().next()?, *self.powers.keys().next_back()?))
    }
}

/// Σ_{j1+|α|+j2 = j, j2 < j} (2πi)^{−|α|}/α! ∂_ξ^α ℓ_{m0−j1} · ∂_x^α q_{j2}.
fn star_residual(l: &EllipticOperatorSpec, qs: &[ResolventSymbol], j: usize) -> Result<ResolventSymbol, SymbolError> {
    let n = l.dim();
    let ell = l.principal();
    let mut tuples = Vec::new();
    for j2 in 0..j.min(qs.len()) {
        for alpha in multi_indices_up_to(n, (j - j2) as u32) {
            let j1 = j - j2 - multi_index_order(&alpha) as usize;
            tuples.push((j1, alpha, j2));
        }
    }
    let parts: Vec<Result<ResolventSymbol, SymbolError>> = tuples
        .par_iter()
        .map(|(j1, alpha, j2)| {
            let lj = l.symbol().homogeneous(*j1).dxi_multi(alpha);
            let tag = (*j1 as u32, 0, multi_index_order(alpha));
            let dq = qs[*j2].dx_multi(alpha, &ell)?;
            Ok(dq.mul_hs(&lj, Some(tag))?.scale(star_coefficient(alpha)))
        })
        .collect();
    let mut sum = ResolventSymbol::zero(n, l.m0(), Complex64::new(-(j as f64), 0.0));
    for p in parts {
        sum = sum.add(&p?)?;
    }
    Ok(sum)
}

/// q_0, …, q_J with q_0 = (ℓ_{m0} − z)^{−1} and q_j = −(ℓ_{m0} − z)^{−1} R_j.
pub fn build_parametrix(l: &EllipticOperatorSpec, order: usize) -> Result<Vec<ResolventSymbol>, SymbolError> {
    let mut qs = vec![ResolventSymbol::resolvent(l.dim(), l.m0())];
    for j in 1..=order {
        let r = star_residual(l, &qs, j)?;
        qs.push(r.shift().scale(Complex64::new(-1.0, 0.0)));
    }
    Ok(qs)
}

#[derive(Clone, Debug)]
pub struct ParametrixReport {
    /// Components 0..=J of (ℓ − z) # Σ q_j; component 0 should be {0: 1}.
    pub components: Vec<ResolventSymbol>,
    pub symbolic_ok: bool,
    /// First dropped component (order J + 1), which equals −(ℓ − z) q_{J+1}.
    pub leftover: ResolventSymbol,
    pub max_numeric_residual: f64,
    pub samples: usize,
}

/// Assembles the composition symbolically and evaluates the truncated
/// composition at random (x, ξ, z) (|ξ| = 1, 1 ≤ |Im z| ≤ 5) through
/// independently computed Taylor jets.
pub fn verify_parametrix(
    l: &EllipticOperatorSpec,
    qs: &[ResolventSymbol],
    samples: usize,
    seed: u64,
) -> Result<ParametrixReport, SymbolError> {
    let n = l.dim();
    let order = qs.len() - 1;
    let mut components = Vec::new();
    let mut symbolic_ok = true;
    for j in 0..=order {
        let mut comp = qs[j].unshift();
        if j > 0 {
            comp = comp.add(&star_residual(l, qs, j)?)?;
        }
        let ok = if j == 0 {
            let mut unit = ResolventSymbol::zero(n, l.m0(), Complex64::new(0.0, 0.0));
            unit.add_power(0, &HomogeneousSymbol::radial(n, 0.0, 1.0), &BTreeSet::new())?;
            comp.approx_eq(&unit, 1e-12)
        } else {
            comp.max_amplitude() <= 1e-12 * (1.0 + qs[j].max_amplitude())
        };
        symbolic_ok &= ok;
        components.push(comp);
    }
    let leftover = star_residual(l, qs, order + 1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<(Vec<f64>, Vec<f64>, Complex64)> = (0..samples)
        .map(|_| {
            let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let mut xi: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let r = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
            xi.iter_mut().for_each(|v| *v /= r);
            let im = rng.gen_range(1.0..5.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            (x, xi, Complex64::new(rng.gen_range(-5.0..5.0), im))
        })
        .collect();
    let space = JetSpace::new(n, order as u32);
    let residuals: Vec<f64> = points
        .par_iter()
        .map(|(x, xi, z)| numeric_residual(&space, l, qs, x, xi, *z))
        .collect();
    let max_numeric_residual = residuals.into_iter().fold(0.0, f64::max);
    Ok(ParametrixReport { components, symbolic_ok, leftover, max_numeric_residual, samples })
}

/// |Σ_{j1+|α|+j2 ≤ J} c_α ∂_ξ^α ℓ_{m0−j1} ∂_x^α q_{j2} − z Σ q_{j2} − 1| at one point.
fn numeric_residual(
    space: &JetSpace,
    l: &EllipticOperatorSpec,
    qs: &[ResolventSymbol],
    x: &[f64],
    xi: &[f64],
    z: Complex64,
) -> f64 {
    let n = l.dim();
    let order = qs.len() - 1;
    let ell = l.principal();
    let ell_x = space.symbol_in_x(&ell, x, xi);
    let shifted = space.add(&ell_x, &space.constant(-z));
    let q_jets: Vec<Jet> = qs
        .iter()
        .map(|q| {
            let mut acc = space.constant(Complex64::new(0.0, 0.0));
            for (p, d) in q.powers() {
                let factor = space.pow(&shifted, Complex64::new(-(*p as f64), 0.0));
                acc = space.add(&acc, &space.mul(&space.symbol_in_x(d, x, xi), &factor));
            }
            acc
        })
        .collect();
    let l_jets: Vec<Jet> = (0..=order).map(|j| space.symbol_in_xi(&l.symbol().homogeneous(j), x, xi)).collect();
    let mut total = Complex64::new(-1.0, 0.0);
    for (j2, qj) in q_jets.iter().enumerate() {
        total -= z * qj.value();
        for alpha in multi_indices_up_to(n, (order - j2) as u32) {
            let c = star_coefficient(&alpha);
            for lj in l_jets.iter().take(order - j2 - multi_index_order(&alpha) as usize + 1) {
                total += c * space.derivative(lj, &alpha) * space.derivative(qj, &alpha);
            }
        }
    }
    total.norm()
}
