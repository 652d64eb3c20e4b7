//! Asymptotic composition and adjoint expansions of classical symbols.

use crate::symcore::{
    check_dim, multi_index_factorial, multi_index_order, multi_indices_of_order, Component, CutoffSpec,
    HomogeneousSymbol, MultiIndex, PolyHomogeneousSymbol, SymbolError,
};
use num_complex::Complex64;
use std::f64::consts::PI;

/// (2πi)^{−|α|} / α!
pub fn star_coefficient(alpha: &MultiIndex) -> Complex64 {
    let k = multi_index_order(alpha) as i32;
    Complex64::new(0.0, 2.0 * PI).powi(-k) / multi_index_factorial(alpha)
}

/// All multi-indices with |α| ≤ k.
pub fn multi_indices_up_to(n: usize, k: u32) -> Vec<MultiIndex> {
    (0..=k).flat_map(|j| multi_indices_of_order(n, j)).collect()
}

/// Number of components needed for the dropped remainder to have order < −n − 1.
pub fn default_component_count(order: Complex64, n: usize) -> usize {
    let v = (order.re + n as f64 + 1.0).floor() + 1.0;
    if v < 1.0 {
        1
    } else {
        v as usize
    }
}

fn merge_cutoff(acc: &mut Option<CutoffSpec>, c: Option<CutoffSpec>) {
    if let Some(c) = c {
        match acc {
            Some(a) if a.t() <= c.t() => {}
            _ => *acc = Some(c),
        }
    }
}

fn finish_component(symbol: HomogeneousSymbol, cutoff: Option<CutoffSpec>) -> Component {
    let cutoff = match cutoff {
        None if !symbol.is_polynomial() => Some(CutoffSpec::unit()),
        c => c,
    };
    Component { symbol, cutoff }
}

/// Symbol of Op(a)Op(b) up to `count` homogeneous components (default: enough for
/// a remainder of order < −n − 1). Each component is assigned the largest
/// participating cutoff radius.
pub fn compose_expansion(
    a: &PolyHomogeneousSymbol,
    b: &PolyHomogeneousSymbol,
    count: Option<usize>,
) -> Result<PolyHomogeneousSymbol, SymbolError> {
    let n = a.dim();
    if n != b.dim() {
        return Err(SymbolError::DimensionMismatch(n, b.dim()));
    }
    check_dim(n)?;
    let order = a.order() + b.order();
    let count = count.unwrap_or_else(|| default_component_count(order, n));
    let mut comps = Vec::with_capacity(count);
    for jp in 0..count {
        let mut sum = HomogeneousSymbol::zero(n, order - jp as f64);
        let mut cutoff = None;
        for j1 in 0..=jp.min(a.components().len().saturating_sub(1)) {
            let Some(ca) = a.components().get(j1) else { continue };
            for alpha in multi_indices_up_to(n, (jp - j1) as u32) {
                let j2 = jp - j1 - multi_index_order(&alpha) as usize;
                let Some(cb) = b.components().get(j2) else { continue };
                let da = ca.symbol.dxi_multi(&alpha);
                if da.is_zero() {
                    continue;
                }
                let db = cb.symbol.dx_multi(&alpha);
                if db.is_zero() {
                    continue;
                }
                let term = da.mul(&db)?.scale(star_coefficient(&alpha));
                if term.is_zero() {
                    continue;
                }
                sum = sum.add(&term)?;
                merge_cutoff(&mut cutoff, ca.cutoff);
                merge_cutoff(&mut cutoff, cb.cutoff);
            }
        }
        comps.push(finish_component(sum, cutoff));
    }
    PolyHomogeneousSymbol::new(n, order, comps)
}

/// Symbol of the formal adjoint: component m̄ − j′ is
/// Σ_{j+|α|=j′} (2πi)^{−|α|}/α! ∂_ξ^α ∂_x^α conj(a_{m−j}).
pub fn adjoint_expansion(a: &PolyHomogeneousSymbol, count: Option<usize>) -> Result<PolyHomogeneousSymbol, SymbolError> {
    let n = a.dim();
    let order = a.order().conj();
    let count = count.unwrap_or_else(|| default_component_count(order, n));
    let mut comps = Vec::with_capacity(count);
    for jp in 0..count {
        let mut sum = HomogeneousSymbol::zero(n, order - jp as f64);
        let mut cutoff = None;
        for j in 0..=jp {
            let Some(c) = a.components().get(j) else { continue };
            let conj = c.symbol.conj();
            for alpha in multi_indices_of_order(n, (jp - j) as u32) {
                let term = conj.dx_multi(&alpha).dxi_multi(&alpha);
                if term.is_zero() {
                    continue;
                }
                sum = sum.add(&term.scale(star_coefficient(&alpha)))?;
                merge_cutoff(&mut cutoff, c.cutoff);
            }
        }
        comps.push(finish_component(sum, cutoff));
    }
    PolyHomogeneousSymbol::new(n, order, comps)
}
