//! Ground-truth traces on the torus (lattice sums for multipliers, truncated
//! eigendecompositions otherwise) and power-law fitting of sampled traces.

use crate::expand::{fmt_complex, ExpansionPrediction};
use crate::funcalc::{log_slope, TestFunction};
use crate::quad::{square_lattice_zeta, NeumaierComplex};
use crate::symcore::{EllipticOperatorSpec, Freq, PolyHomogeneousSymbol};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("lattice sums need an x-independent operator L")]
    NotMultiplier,
    #[error("test function must be compactly supported")]
    NotCompact,
    #[error("spectral margin {margin:.3} below the required {required} at t = {t}: raise K or t")]
    Margin { t: f64, margin: f64, required: f64 },
    #[error("truncated L deviates from self-adjointness by {0:.3e} (relative), above the threshold {1:.1e}")]
    SymmetryDefect(f64, f64),
    #[error("dimension mismatch between A and L")]
    Dimension,
    #[error("t values must be positive and strictly decreasing")]
    TGrid,
}

/// One oracle evaluation of tr(A f(tL)).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSample {
    pub t: f64,
    pub value: Complex64,
    /// Lattice points summed or matrix dimension.
    pub modes: usize,
    /// t · (smallest L-value on the truncation boundary) / sup supp f; infinite for
    /// exact lattice sums.
    pub margin: f64,
    /// Relative ‖M_L − M_L*‖_max / ‖M_L‖_max of the truncated L (0 for multipliers).
    pub symmetry_defect: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct OracleSeries {
    pub samples: Vec<OracleSample>,
}

impl OracleSeries {
    pub fn ts(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn values(&self) -> Vec<Complex64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    /// Samples restricted to t in [lo, hi].
    pub fn window(&self, lo: f64, hi: f64) -> OracleSeries {
        OracleSeries { samples: self.samples.iter().filter(|s| s.t >= lo && s.t <= hi).copied().collect() }
    }
}

/// `count` geometric values from t_max down to t_min.
pub fn geometric_grid(t_min: f64, t_max: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![t_max];
    }
    let r = (t_min / t_max).ln() / (count - 1) as f64;
    (0..count).map(|i| t_max * (r * i as f64).exp()).collect()
}

fn check_grid(ts: &[f64]) -> Result<(), OracleError> {
    if ts.iter().any(|t| !(*t > 0.0)) || ts.windows(2).any(|w| w[1] >= w[0]) {
        return Err(OracleError::TGrid);
    }
    Ok(())
}

fn lattice_points(n: usize, radius: f64) -> Vec<[i64; 3]> {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut pts = Vec::new();
    for k0 in -r..=r {
        let rem0 = r2 - (k0 * k0) as f64;
        if rem0 < 0.0 {
            continue;
        }
        let r1 = rem0.sqrt().floor() as i64;
        for k1 in -r1..=r1 {
            let rem1 = rem0 - (k1 * k1) as f64;
            if n == 2 {
                pts.push([k0, k1, 0]);
                continue;
            }
            let r_2 = rem1.max(0.0).sqrt().floor() as i64;
            for k2 in -r_2..=r_2 {
                pts.push([k0, k1, k2]);
            }
        }
    }
    pts.sort_by_key(|k| (k[0] * k[0] + k[1] * k[1] + k[2] * k[2], *k));
    pts
}

/// tr(A f(tL)) = Σ_k â₀(k) f(tℓ(k)) for a multiplier L, summed over lattice points
/// in ascending |k|² (then lexicographic) order with compensated accumulation.
pub fn multiplier_trace(
    a: &PolyHomogeneousSymbol,
    l: &EllipticOperatorSpec,
    f: &TestFunction,
    t: f64,
) -> Result<OracleSample, OracleError> {
    if !l.is_multiplier() {
        return Err(OracleError::NotMultiplier);
    }
    if a.dim() != l.dim() {
        return Err(OracleError::Dimension);
    }
    let Some((_, top)) = f.support() else {
        return Ok(OracleSample { t, value: Complex64::new(0.0, 0.0), modes: 0, margin: f64::INFINITY, symmetry_defect: 0.0 });
    };
    if !top.is_finite() {
        return Err(OracleError::NotCompact);
    }
    let n = a.dim();
    let pts = lattice_points(n, l.radius_above(top / t) + 1.0);
    let terms: Vec<Complex64> = pts
        .par_iter()
        .map(|k| {
            let xi = [k[0] as f64, k[1] as f64, k[2] as f64];
            let fv = f.eval(t * l.multiplier_value(&xi[..n]));
            if fv == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                a.mean_at(&xi[..n]) * fv
            }
        })
        .collect();
    let mut acc = NeumaierComplex::default();
    let mut modes = 0;
    for v in terms {
        if v != Complex64::new(0.0, 0.0) {
            modes += 1;
            acc.add(v);
        }
    }
    Ok(OracleSample { t, value: acc.sum(), modes, margin: f64::INFINITY, symmetry_defect: 0.0 })
}

pub fn multiplier_series(
    a: &PolyHomogeneousSymbol,
    l: &EllipticOperatorSpec,
    f: &TestFunction,
    ts: &[f64],
) -> Result<OracleSeries, OracleError> {
    check_grid(ts)?;
    let samples = ts.iter().map(|&t| multiplier_trace(a, l, f, t)).collect::<Result<_, _>>()?;
    Ok(OracleSeries { samples })
}

/// Σ_{k ∈ Z² ∖ 0} a(k) for a 2-dimensional symbol whose components have radial
/// x-means c_j |ξ|^{μ_j} with Re μ_j < −2, via the square-lattice zeta function.
/// None when some x-mean is not radial.
pub fn lattice_trace_radial(a: &PolyHomogeneousSymbol) -> Option<Complex64> {
    if a.dim() != 2 || a.order().re >= -2.0 {
        return None;
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for c in a.components() {
        let h = c.symbol.x_mean();
        if h.is_zero() {
            continue;
        }
        if h.terms().len() != 1 || !h.terms().contains_key(&[0, 0, 0]) || h.degree().im != 0.0 {
            return None;
        }
        let coef = h.terms()[&[0, 0, 0]].mean();
        let mu = h.degree().re;
        acc += coef * square_lattice_zeta(-mu / 2.0);
        // Lattice points inside the cutoff transition.
        if let Some(cut) = c.cutoff {
            for k in lattice_points(2, cut.radius()) {
                let r = ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt();
                if r > 0.0 {
                    acc -= coef * (1.0 - cut.eval(r)) * r.powf(mu);
                }
            }
        }
    }
    Some(acc)
}

/// Fourier truncation of A and L to {|k|_∞ ≤ K}, with the symmetrized L split into
/// its invariant blocks and diagonalized once for reuse across t.
pub struct MatrixOracle {
    n: usize,
    modes: Vec<[i64; 3]>,
    /// Per block: eigenvalues of the block of H and diag(V* A_block V).
    blocks: Vec<(Vec<f64>, Vec<Complex64>)>,
    boundary_min: f64,
    symmetry_defect: f64,
}

fn mode_index(k: &[i64; 3], kk: i64, n: usize) -> usize {
    let w = (2 * kk + 1) as usize;
    let mut idx = 0;
    for i in 0..n {
        idx = idx * w + (k[i] + kk) as usize;
    }
    idx
}

/// Toroidal quantization entries σ̂_{k−k′}(k′) over the given modes, as a sparse
/// row list.
fn truncated_entries(sym: &PolyHomogeneousSymbol, modes: &[[i64; 3]], kk: i64) -> Vec<Vec<(usize, Complex64)>> {
    let n = sym.dim();
    let freqs: Vec<Freq> = {
        let mut f = sym.frequencies();
        if !f.contains(&[0, 0, 0]) {
            f.push([0, 0, 0]);
        }
        f
    };
    modes
        .par_iter()
        .map(|k| {
            let mut row = Vec::new();
            for g in &freqs {
                let kp = [k[0] - g[0] as i64, k[1] - g[1] as i64, k[2] - g[2] as i64];
                if (0..n).any(|i| kp[i].abs() > kk) {
                    continue;
                }
                let xi = [kp[0] as f64, kp[1] as f64, kp[2] as f64];
                let v = sym.eval_mode(g, &xi[..n]);
                if v != Complex64::new(0.0, 0.0) {
                    row.push((mode_index(&kp, kk, n), v));
                }
            }
            row
        })
        .collect()
}

/// Modes {|k|_∞ ≤ K} in index order.
pub fn truncation_modes(n: usize, kk: usize) -> Vec<[i64; 3]> {
    let kk = kk as i64;
    let w = (2 * kk + 1) as usize;
    (0..w.pow(n as u32))
        .map(|mut idx| {
            let mut k = [0i64; 3];
            for i in (0..n).rev() {
                k[i] = (idx % w) as i64 - kk;
                idx /= w;
            }
            k
        })
        .collect()
}

/// Dense matrix of the toroidal quantization of `sym` on {|k|_∞ ≤ K}.
pub fn truncated_operator(sym: &PolyHomogeneousSymbol, kk: usize) -> (Vec<[i64; 3]>, DMatrix<Complex64>) {
    let modes = truncation_modes(sym.dim(), kk);
    let rows = truncated_entries(sym, &modes, kk as i64);
    let mut m = DMatrix::<Complex64>::zeros(modes.len(), modes.len());
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            m[(i, j)] = v;
        }
    }
    (modes, m)
}

impl MatrixOracle {
    pub fn new(
        a: &PolyHomogeneousSymbol,
        l: &EllipticOperatorSpec,
        kk: usize,
        defect_threshold: f64,
    ) -> Result<Self, OracleError> {
        let n = a.dim();
        if n != l.dim() {
            return Err(OracleError::Dimension);
        }
        let modes = truncation_modes(n, kk);
        let total = modes.len();
        let kk = kk as i64;
        let rows_l = truncated_entries(l.symbol(), &modes, kk);
        let rows_a = truncated_entries(a, &modes, kk);
        let mut ml: BTreeMap<(usize, usize), Complex64> = BTreeMap::new();
        for (i, row) in rows_l.iter().enumerate() {
            for &(j, v) in row {
                ml.insert((i, j), v);
            }
        }
        let mut defect: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (&(i, j), v) in &ml {
            let vt = ml.get(&(j, i)).copied().unwrap_or_default().conj();
            defect = defect.max((v - vt).norm());
            scale = scale.max(v.norm());
        }
        let symmetry_defect = if scale > 0.0 { defect / scale } else { 0.0 };
        if symmetry_defect > defect_threshold {
            return Err(OracleError::SymmetryDefect(symmetry_defect, defect_threshold));
        }
        // Connected components of the coupling graph of H.
        let mut parent: Vec<usize> = (0..total).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for &(i, j) in ml.keys() {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..total {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = groups.into_values().collect();
        let blocks = groups
            .par_iter()
            .map(|idx| {
                let m = idx.len();
                let pos: BTreeMap<usize, usize> = idx.iter().enumerate().map(|(p, &i)| (i, p)).collect();
                let mut h = DMatrix::<Complex64>::zeros(m, m);
                let mut am = DMatrix::<Complex64>::zeros(m, m);
                for (p, &i) in idx.iter().enumerate() {
                    for &(j, v) in &rows_l[i] {
                        let q = pos[&j];
                        h[(p, q)] += v * 0.5;
                        h[(q, p)] += v.conj() * 0.5;
                    }
                    for &(j, v) in &rows_a[i] {
                        if let Some(&q) = pos.get(&j) {
                            am[(p, q)] = v;
                        }
                    }
                }
                let eig = h.symmetric_eigen();
                let v = &eig.eigenvectors;
                let weights = (0..m)
                    .map(|c| {
                        let col = v.column(c);
                        (col.adjoint() * &am * col)[(0, 0)]
                    })
                    .collect();
                (eig.eigenvalues.iter().copied().collect(), weights)
            })
            .collect();
        let boundary_min = modes
            .iter()
            .filter(|k| (0..n).any(|i| k[i].abs() == kk))
            .map(|k| {
                let xi = [k[0] as f64, k[1] as f64, k[2] as f64];
                l.symbol().mean_at(&xi[..n]).re
            })
            .fold(f64::INFINITY, f64::min);
        Ok(MatrixOracle { n, modes, blocks, boundary_min, symmetry_defect })
    }

    pub fn dimension(&self) -> usize {
        self.modes.len()
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn symmetry_defect(&self) -> f64 {
        self.symmetry_defect
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Smallest t for which the margin requirement holds.
    pub fn t_floor(&self, f: &TestFunction, required: f64) -> f64 {
        let top = f.support().map(|s| s.1).unwrap_or(0.0);
        required * top / self.boundary_min
    }

    /// tr(M_A f(tH)), refused when t · min_boundary ℓ < required · sup supp f.
    pub fn trace(&self, f: &TestFunction, t: f64, required: f64) -> Result<OracleSample, OracleError> {
        let (_, top) = f.support().ok_or(OracleError::NotCompact)?;
        if !top.is_finite() {
            return Err(OracleError::NotCompact);
        }
        let margin = t * self.boundary_min / top;
        if margin < required {
            return Err(OracleError::Margin { t, margin, required });
        }
        let mut acc = NeumaierComplex::default();
        for (eigs, weights) in &self.blocks {
            for (lam, w) in eigs.iter().zip(weights) {
                let fv = f.eval(t * lam);
                if fv != 0.0 {
                    acc.add(w * fv);
                }
            }
        }
        Ok(OracleSample { t, value: acc.sum(), modes: self.modes.len(), margin, symmetry_defect: self.symmetry_defect })
    }

    pub fn series(&self, f: &TestFunction, ts: &[f64], required: f64) -> Result<OracleSeries, OracleError> {
        check_grid(ts)?;
        let samples = ts.iter().map(|&t| self.trace(f, t, required)).collect::<Result<_, _>>()?;
        Ok(OracleSeries { samples })
    }
}

/// Real least squares y ≈ Σ c_j t^{e_j} (+ c₀).
#[derive(Clone, Debug, PartialEq)]
pub struct RealFit {
    /// Coefficients for the exponents in order, then the constant if requested.
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
    pub condition: f64,
}

/// Solves the weighted least-squares problem with column-normalized design
/// matrix by SVD.
pub fn weighted_least_squares(ts: &[f64], ys: &[f64], exponents: &[f64], with_constant: bool, weights: &[f64]) -> RealFit {
    let mut cols: Vec<f64> = exponents.to_vec();
    if with_constant {
        cols.push(0.0);
    }
    let (rows, k) = (ts.len(), cols.len());
    if k == 0 {
        let r = ys.iter().map(|y| y * y).sum::<f64>().sqrt();
        return RealFit { coefficients: vec![], residual_norm: r, condition: 1.0 };
    }
    let mut a = DMatrix::<f64>::zeros(rows, k);
    let mut b = DVector::<f64>::zeros(rows);
    for i in 0..rows {
        for (j, e) in cols.iter().enumerate() {
            a[(i, j)] = weights[i] * ts[i].powf(*e);
        }
        b[i] = weights[i] * ys[i];
    }
    let norms: Vec<f64> = (0..k).map(|j| a.column(j).norm().max(f64::MIN_POSITIVE)).collect();
    for j in 0..k {
        let nj = norms[j];
        a.column_mut(j).scale_mut(1.0 / nj);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let x = svd.solve(&b, smax * 1e-15).unwrap_or_else(|_| DVector::zeros(k));
    let residual_norm = (&a * &x - &b).norm();
    let coefficients = (0..k).map(|j| x[j] / norms[j]).collect();
    RealFit { coefficients, residual_norm, condition }
}

/// Unweighted least squares (see [`weighted_least_squares`]).
pub fn least_squares_powers(ts: &[f64], ys: &[f64], exponents: &[f64], with_constant: bool) -> RealFit {
    weighted_least_squares(ts, ys, exponents, with_constant, &vec![1.0; ts.len()])
}

/// Row weighting of a fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitWeighting {
    Uniform,
    /// Each row divided by |y_i|: minimizes relative misfit.
    Relative,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerFit {
    pub exponents: Vec<f64>,
    pub coefficients: Vec<Complex64>,
    pub residual_norm: f64,
    pub condition: f64,
    pub usable: bool,
}

impl PowerFit {
    pub fn coefficient_at(&self, e: f64) -> Option<Complex64> {
        self.exponents.iter().position(|x| (x - e).abs() < 1e-9).map(|i| self.coefficients[i])
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        self.exponents.iter().zip(&self.coefficients).map(|(e, c)| c * t.powf(*e)).sum()
    }
}

pub const CONDITION_LIMIT: f64 = 1e8;

/// Merges exponents within 1e−9, appends 0 when a constant is requested, and
/// fits real and imaginary parts with the same design.
pub fn fit_powers(series: &OracleSeries, exponents: &[f64], with_constant: bool, weighting: FitWeighting) -> PowerFit {
    let mut exps: Vec<f64> = Vec::new();
    for &e in exponents {
        if !exps.iter().any(|x| (x - e).abs() < 1e-9) {
            exps.push(e);
        }
    }
    if with_constant && !exps.iter().any(|x| x.abs() < 1e-9) {
        exps.push(0.0);
    }
    exps.sort_by(f64::total_cmp);
    let ts = series.ts();
    let vs = series.values();
    let weights: Vec<f64> = match weighting {
        FitWeighting::Uniform => vec![1.0; ts.len()],
        FitWeighting::Relative => vs.iter().map(|v| if v.norm() > 0.0 { 1.0 / v.norm() } else { 1.0 }).collect(),
    };
    let re: Vec<f64> = vs.iter().map(|v| v.re).collect();
    let im: Vec<f64> = vs.iter().map(|v| v.im).collect();
    let fr = weighted_least_squares(&ts, &re, &exps, false, &weights);
    let fi = weighted_least_squares(&ts, &im, &exps, false, &weights);
    let coefficients = fr.coefficients.iter().zip(&fi.coefficients).map(|(a, b)| Complex64::new(*a, *b)).collect();
    let enough = ts.len() >= 2 * exps.len().max(1);
    PowerFit {
        usable: fr.condition <= CONDITION_LIMIT && enough,
        exponents: exps,
        coefficients,
        residual_norm: fr.residual_norm.hypot(fi.residual_norm),
        condition: fr.condition,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Fit basis; defaults to the predicted exponents.
    pub fit_exponents: Option<Vec<f64>>,
    pub with_constant: bool,
    pub rel_tol: f64,
    /// Predicted coefficients below this magnitude are not compared.
    pub magnitude_floor: f64,
    /// Exponent the residual after subtracting the prediction must decay with.
    pub next_exponent: Option<f64>,
    pub slope_slack: f64,
    /// Residuals below this multiple of ε·|trace| count as rounding noise.
    pub noise_factor: f64,
    pub weighting: FitWeighting,
    /// When false the t⁰ coefficient is fitted and reported but not compared, and
    /// the residual uses the fitted constant (lattice traces differ from the
    /// chart-integral constant by a periodization offset).
    pub compare_constant: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            fit_exponents: None,
            with_constant: false,
            rel_tol: 0.01,
            magnitude_floor: 1e-8,
            next_exponent: None,
            slope_slack: 0.05,
            noise_factor: 1e3,
            weighting: FitWeighting::Relative,
            compare_constant: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientCheck {
    pub exponent: f64,
    pub predicted: Complex64,
    pub fitted: Complex64,
    /// Relative error when the prediction is above the magnitude floor.
    pub rel_error: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub fit: PowerFit,
    pub checks: Vec<CoefficientCheck>,
    /// (t, |trace − prediction|) per sample.
    pub residuals: Vec<(f64, f64)>,
    /// Samples whose residual sits above the rounding floor.
    pub residuals_above_noise: usize,
    pub residual_slope: Option<f64>,
    pub slope_pass: bool,
    pub pass: bool,
    pub notes: Vec<String>,
}

impl VerificationReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "t^{}: predicted {} fitted {} rel err {} {}\n",
                c.exponent,
                fmt_complex(c.predicted),
                fmt_complex(c.fitted),
                c.rel_error.map(|e| format!("{e:.3e}")).unwrap_or_else(|| "n/a".into()),
                if c.pass { "ok" } else { "MISMATCH" }
            ));
        }
        s.push_str(&format!(
            "fit condition {:.3e} ({}), residual slope {}, {}\n",
            self.fit.condition,
            if self.fit.usable { "usable" } else { "UNUSABLE" },
            self.residual_slope.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into()),
            if self.pass { "PASS" } else { "FAIL" }
        ));
        for n in &self.notes {
            s.push_str(n);
            s.push('\n');
        }
        s
    }
}

/// Fits the series on the prediction's exponents, compares coefficient by
/// coefficient and measures the decay of trace − prediction.
pub fn verify_expansion(prediction: &ExpansionPrediction, series: &OracleSeries, opts: &VerifyOptions) -> VerificationReport {
    let mut notes = Vec::new();
    let predicted = prediction.all_terms();
    if predicted.iter().any(|t| t.exponent.im.abs() > 1e-12) {
        notes.push("complex exponents present: real least squares cannot separate them; fit uses real parts".into());
    }
    let basis = opts
        .fit_exponents
        .clone()
        .unwrap_or_else(|| predicted.iter().map(|t| t.exponent.re).collect());
    let fit = fit_powers(series, &basis, opts.with_constant, opts.weighting);
    if !fit.usable {
        notes.push(format!("fit flagged unusable (condition {:.3e}, {} samples)", fit.condition, series.samples.len()));
    }
    let mut checks = Vec::new();
    for (e, fitted) in fit.exponents.iter().zip(&fit.coefficients) {
        let p = prediction.coefficient_at(*e).unwrap_or_default();
        let (rel_error, pass) = if !opts.compare_constant && e.abs() < 1e-9 {
            notes.push(format!("t⁰: fitted − predicted = {} (reported, not compared)", fmt_complex(fitted - p)));
            (None, true)
        } else if p.norm() > opts.magnitude_floor {
            let r = (fitted - p).norm() / p.norm();
            (Some(r), r <= opts.rel_tol)
        } else {
            (None, true)
        };
        checks.push(CoefficientCheck { exponent: *e, predicted: p, fitted: *fitted, rel_error, pass });
    }
    for t in &predicted {
        if !fit.exponents.iter().any(|e| (e - t.exponent.re).abs() < 1e-9) {
            notes.push(format!("predicted t^{} not in the fit basis", fmt_complex(t.exponent)));
        }
    }
    let offset = if opts.compare_constant {
        Complex64::new(0.0, 0.0)
    } else {
        fit.coefficient_at(0.0).unwrap_or_default() - prediction.coefficient_at(0.0).unwrap_or_default()
    };
    let residuals: Vec<(f64, f64)> =
        series.samples.iter().map(|s| (s.t, (s.value - prediction.eval(s.t) - offset).norm())).collect();
    let above: Vec<(f64, f64)> = series
        .samples
        .iter()
        .zip(&residuals)
        .filter(|(s, r)| r.1 > opts.noise_factor * f64::EPSILON * s.value.norm())
        .map(|(_, r)| *r)
        .collect();
    let residual_slope = (above.len() >= 3).then(|| log_slope(&above));
    let slope_pass = match (opts.next_exponent, residual_slope) {
        (None, _) => true,
        (Some(_), None) => {
            notes.push(format!(
                "residual at the rounding floor for {} of {} samples: no power decay left to measure",
                residuals.len() - above.len(),
                residuals.len()
            ));
            true
        }
        (Some(next), Some(s)) => s >= next - opts.slope_slack,
    };
    let pass = fit.usable && slope_pass && checks.iter().all(|c| c.pass);
    VerificationReport { fit, checks, residuals_above_noise: above.len(), residuals, residual_slope, slope_pass, pass, notes }
}

/// How much of the oracle is explained by the leading ladder term alone versus
/// the terms with ladder index j ≤ 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionStudy {
    pub leading_exponent: f64,
    pub correction_exponent: f64,
    pub correction_coefficient: Complex64,
    /// (t, |oracle − leading|, |oracle − leading − correction|)
    pub residuals: Vec<(f64, f64, f64)>,
    pub leading_slope: f64,
    /// ‖oracle − leading‖₂ / ‖oracle − leading − correction‖₂
    pub reduction: f64,
    pub slope_pass: bool,
    pub reduction_pass: bool,
}

/// `leading` and `correction` are the ladder exponents for j = 0 and j = 1; the
/// slope must fall within `slope_rel` of the correction exponent and the
/// correction must shrink the residual by `min_reduction`.
pub fn correction_study(
    prediction: &ExpansionPrediction,
    series: &OracleSeries,
    leading: f64,
    correction: f64,
    slope_rel: f64,
    min_reduction: f64,
) -> CorrectionStudy {
    let c0 = prediction.coefficient_at(leading).unwrap_or_default();
    let c1 = prediction.coefficient_at(correction).unwrap_or_default();
    let residuals: Vec<(f64, f64, f64)> = series
        .samples
        .iter()
        .map(|s| {
            let r0 = s.value - c0 * s.t.powf(leading);
            let r1 = r0 - c1 * s.t.powf(correction);
            (s.t, r0.norm(), r1.norm())
        })
        .collect();
    let leading_slope = log_slope(&residuals.iter().map(|r| (r.0, r.1)).collect::<Vec<_>>());
    let n0 = residuals.iter().map(|r| r.1 * r.1).sum::<f64>().sqrt();
    let n1 = residuals.iter().map(|r| r.2 * r.2).sum::<f64>().sqrt();
    let reduction = if n1 > 0.0 { n0 / n1 } else { f64::INFINITY };
    CorrectionStudy {
        leading_exponent: leading,
        correction_exponent: correction,
        correction_coefficient: c1,
        slope_pass: (leading_slope - correction).abs() <= slope_rel * correction.abs(),
        reduction_pass: reduction >= min_reduction,
        residuals,
        leading_slope,
        reduction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expand::PredictedTerm;
    use crate::symcore::{CutoffSpec, HomogeneousSymbol, TorusFourierSeries};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn laplacian() -> EllipticOperatorSpec {
        EllipticOperatorSpec::new(PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, 2.0, 1.0)), 0.5, 0.0).unwrap()
    }

    fn psi_one() -> PolyHomogeneousSymbol {
        PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, 0.0, 1.0).add(&HomogeneousSymbol::zero(2, c(0.0))).unwrap())
            .rescale_cutoffs(1.0)
    }

    #[test]
    fn multiplier_trace_examples() {
        let a = PolyHomogeneousSymbol::with_cutoff(2, c(0.0), vec![HomogeneousSymbol::radial(2, 0.0, 1.0)], CutoffSpec::unit()).unwrap();
        let eta = TestFunction::bump_on(1.0, 2.0);
        let t = 1.0 / 400.0;
        let got = multiplier_trace(&a, &laplacian(), &eta, t).unwrap();
        let mut want = 0.0;
        for k0 in -30i64..=30 {
            for k1 in -30i64..=30 {
                let r2 = (k0 * k0 + k1 * k1) as f64;
                if (400.0..=800.0).contains(&r2) {
                    want += eta.eval(t * r2);
                }
            }
        }
        assert!((got.value.re - want).abs() < 1e-12 * want);
        let zero = TestFunction::constant(0.0);
        assert_eq!(multiplier_trace(&a, &laplacian(), &zero, t).unwrap().value, c(0.0));
        assert_eq!(multiplier_trace(&a, &laplacian(), &eta, 3.0).unwrap().value, c(0.0));
        let again = multiplier_trace(&a, &laplacian(), &eta, t).unwrap();
        assert_eq!(again.value, got.value);
        let _ = psi_one();
    }

    #[test]
    fn matrix_oracle_consistency() {
        let eta = TestFunction::bump_on(1.0, 2.0);
        let a = PolyHomogeneousSymbol::with_cutoff(2, c(0.0), vec![HomogeneousSymbol::radial(2, 0.0, 1.0)], CutoffSpec::unit()).unwrap();
        let m = MatrixOracle::new(&a, &laplacian(), 16, 1e-2).unwrap();
        assert_eq!(m.block_count(), m.dimension());
        for t in [0.04, 0.02] {
            let x = m.trace(&eta, t, 2.0).unwrap();
            let y = multiplier_trace(&a, &laplacian(), &eta, t).unwrap();
            assert!((x.value - y.value).norm() < 1e-12 * y.value.norm());
        }
        assert!(matches!(m.trace(&eta, 1e-3, 2.0), Err(OracleError::Margin { .. })));
        // Identity A with a variable L: trace is Σ f(t λ_i).
        let l1 = HomogeneousSymbol::radial_with(2, c(1.0), TorusFourierSeries::cos(2, [1, 0, 0], 0.1));
        let sym = PolyHomogeneousSymbol::with_cutoff(2, c(2.0), vec![HomogeneousSymbol::radial(2, 2.0, 1.0), l1], CutoffSpec::unit()).unwrap();
        let l = EllipticOperatorSpec::new(sym, 0.5, 1.0).unwrap();
        let one = PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, 0.0, 1.0));
        let m = MatrixOracle::new(&one, &l, 12, 1e-2).unwrap();
        assert_eq!(m.block_count(), 25);
        let mut s = 0.0;
        for (eigs, w) in &m.blocks {
            for (lam, wi) in eigs.iter().zip(w) {
                assert!((wi - c(1.0)).norm() < 1e-12);
                s += eta.eval(0.05 * lam);
            }
        }
        assert!((m.trace(&eta, 0.05, 2.0).unwrap().value.re - s).abs() < 1e-12 * s.max(1.0));
    }

    #[test]
    fn matrix_oracle_converges_in_k() {
        let eta = TestFunction::bump_on(1.0, 2.0);
        let l1 = HomogeneousSymbol::radial_with(2, c(1.0), TorusFourierSeries::cos(2, [1, 0, 0], 0.1));
        let sym = PolyHomogeneousSymbol::with_cutoff(2, c(2.0), vec![HomogeneousSymbol::radial(2, 2.0, 1.0), l1], CutoffSpec::unit()).unwrap();
        let l = EllipticOperatorSpec::new(sym, 0.5, 1.0).unwrap();
        let a = PolyHomogeneousSymbol::with_cutoff(2, c(0.0), vec![HomogeneousSymbol::radial(2, 0.0, 1.0)], CutoffSpec::unit()).unwrap();
        let coarse = MatrixOracle::new(&a, &l, 32, 1e-2).unwrap();
        let fine = MatrixOracle::new(&a, &l, 64, 1e-2).unwrap();
        let t = 0.01;
        let x = coarse.trace(&eta, t, 2.0).unwrap().value;
        let y = fine.trace(&eta, t, 2.0).unwrap().value;
        assert!((x - y).norm() < 1e-8, "{x} vs {y}");
    }

    #[test]
    fn fit_examples() {
        let ts = geometric_grid(1e-3, 1e-1, 12);
        let series = OracleSeries {
            samples: ts.iter().map(|&t| OracleSample { t, value: c(3.0 / t + 5.0), modes: 0, margin: 0.0, symmetry_defect: 0.0 }).collect(),
        };
        let fit = fit_powers(&series, &[-1.0], true, FitWeighting::Uniform);
        assert!((fit.coefficients[0].re - 3.0).abs() < 1e-10 && (fit.coefficients[1].re - 5.0).abs() < 1e-10);
        assert!(fit.usable);
        let noise = OracleSeries {
            samples: ts
                .iter()
                .enumerate()
                .map(|(i, &t)| OracleSample { t, value: c(if i % 2 == 0 { 1e-12 } else { -1e-12 }), modes: 0, margin: 0.0, symmetry_defect: 0.0 })
                .collect(),
        };
        let fit = fit_powers(&noise, &[-0.5], true, FitWeighting::Uniform);
        assert!(fit.coefficients.iter().all(|c| c.norm() <= 1e-10));
        let fit = fit_powers(&series, &[-1.0, -1.0 + 1e-12, 0.0], true, FitWeighting::Uniform);
        assert_eq!(fit.exponents.len(), 2);
    }

    #[test]
    fn verify_detects_wrong_coefficient() {
        let ts = geometric_grid(1e-3, 1e-1, 12);
        let series = OracleSeries {
            samples: ts.iter().map(|&t| OracleSample { t, value: c(3.0 / t + 5.0 + t), modes: 0, margin: 0.0, symmetry_defect: 0.0 }).collect(),
        };
        let term = |e: f64, c0: f64| PredictedTerm { exponent: c(e), coefficient: c(c0), provenance: vec![] };
        let good = ExpansionPrediction { terms: vec![term(-1.0, 3.0), term(1.0, 1.0)], constant: Some(term(0.0, 5.0)), ..Default::default() };
        let opts = VerifyOptions { next_exponent: Some(2.0), ..Default::default() };
        let r = verify_expansion(&good, &series, &opts);
        assert!(r.pass, "{}", r.summary());
        let mut bad = good.clone();
        bad.terms[0].coefficient = c(6.0);
        assert!(!verify_expansion(&bad, &series, &opts).pass);
        // Missing t¹ term: residual decays like t, not t².
        let short = ExpansionPrediction { terms: vec![term(-1.0, 3.0)], constant: Some(term(0.0, 5.0)), ..Default::default() };
        let r = verify_expansion(&short, &series, &VerifyOptions { next_exponent: Some(2.0), ..Default::default() });
        assert!(!r.slope_pass);
        assert!((r.residual_slope.unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lattice_zeta_trace() {
        let a = PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, -3.0, 1.0));
        let z = lattice_trace_radial(&a).unwrap();
        // Direct partial sum plus the integral tail beyond radius R.
        let r = 400.0;
        let mut s = 0.0;
        for k in lattice_points(2, r) {
            let q = ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt();
            if q > 0.0 && q <= r {
                s += q.powi(-3);
            }
        }
        s += 2.0 * std::f64::consts::PI / r;
        assert!((z.re - s).abs() < 1e-4, "{z} vs {s}");
    }
}
