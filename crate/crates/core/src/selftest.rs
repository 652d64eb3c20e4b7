//! Randomized invariant suites: homogeneity, Leibniz rule, sphere vanishing,
//! Mellin reduction, exact composition and adjoint on truncated matrices,
//! parametrix residual and finite-part split independence.

use crate::calculus::{adjoint_expansion, compose_expansion};
use crate::expand::mellin_reduction_defect;
use crate::funcalc::{
    cauchy_pompeiu_residual, eig_matrix_function, hs_matrix_function, log_slope, operator_norm, taylor_extension_dbar,
    AlmostAnalyticExtension, HsGrid, TestFunction,
};
use nalgebra::{DMatrix, DVector};
use crate::oracle::truncated_operator;
use crate::parametrix::{build_parametrix, verify_parametrix};
use crate::symcore::{
    multi_indices_of_order, sphere_moment, sphere_torus_integral_with, CutoffSpec, EllipticOperatorSpec,
    HomogeneousSymbol, MultiIndex, PolyHomogeneousSymbol, TorusFourierSeries,
};
use crate::traces::{canonical_trace, canonical_trace_split};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Deliberate corruption used to check that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Scales the second-order sphere moments by 1 + 1e−3.
    Moments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seconds: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<24} cases {:>4}  max error {:.3e}  tol {:.1e}  {:.2}s{}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance,
            self.seconds,
            if self.detail.is_empty() { String::new() } else { format!("  ({})", self.detail) }
        )
    }
}

fn c64(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn random_series(rng: &mut ChaCha8Rng, n: usize, modes: usize) -> TorusFourierSeries {
    let mut g = TorusFourierSeries::constant(n, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    for _ in 0..modes {
        let mut gamma = [0i32; 3];
        for v in gamma.iter_mut().take(n) {
            *v = rng.gen_range(-2..=2);
        }
        g.add_at(gamma, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    }
    g
}

/// Random homogeneous symbol of the given degree: a few ξ^α |ξ|^{d−|α|} terms with
/// random trigonometric coefficients.
pub fn random_symbol(rng: &mut ChaCha8Rng, n: usize, degree: Complex64, max_alpha: u32) -> HomogeneousSymbol {
    let mut h = HomogeneousSymbol::zero(n, degree);
    for _ in 0..rng.gen_range(1..=3) {
        let k = rng.gen_range(0..=max_alpha);
        let all = multi_indices_of_order(n, k);
        let alpha = all[rng.gen_range(0..all.len())];
        let g = random_series(rng, n, 2);
        h = h.add(&HomogeneousSymbol::monomial(n, degree, alpha, g)).expect("same degree");
    }
    h
}

fn random_point(rng: &mut ChaCha8Rng, n: usize) -> ([f64; 3], [f64; 3]) {
    let mut x = [0.0; 3];
    let mut xi = [0.0; 3];
    for i in 0..n {
        x[i] = rng.gen_range(0.0..1.0);
        xi[i] = rng.gen_range(-2.0..2.0);
    }
    (x, xi)
}

fn timed<F: FnOnce() -> (usize, f64, String)>(name: &'static str, tolerance: f64, f: F) -> CheckResult {
    let start = Instant::now();
    let (cases, max_error, detail) = f();
    CheckResult {
        name,
        cases,
        max_error,
        tolerance,
        pass: max_error <= tolerance,
        seconds: start.elapsed().as_secs_f64(),
        detail,
    }
}

pub fn check_homogeneity(rng: &mut ChaCha8Rng) -> CheckResult {
    timed("homogeneity", 1e-10, || {
        let mut worst: f64 = 0.0;
        for i in 0..100 {
            let n = 2 + i % 2;
            let d = Complex64::new(rng.gen_range(-3.0..2.0), if i % 3 == 0 { rng.gen_range(-1.0..1.0) } else { 0.0 });
            let h = random_symbol(rng, n, d, 3);
            let (x, xi) = random_point(rng, n);
            let lam: f64 = rng.gen_range(0.1..10.0);
            let scaled: Vec<f64> = xi.iter().map(|v| v * lam).collect();
            let want = c64(lam).powc(d) * h.eval(&x, &xi);
            let got = h.eval(&x, &scaled);
            if want.norm() > 0.0 {
                worst = worst.max((got - want).norm() / want.norm());
            }
        }
        (100, worst, String::new())
    })
}

pub fn check_leibniz(rng: &mut ChaCha8Rng) -> CheckResult {
    timed("leibniz", 1e-12, || {
        let mut worst: f64 = 0.0;
        for i in 0..50 {
            let n = 2 + i % 2;
            let (da, db) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let a = random_symbol(rng, n, c64(da), 2);
            let b = random_symbol(rng, n, c64(db), 2);
            let ab = a.mul(&b).expect("dims");
            for axis in 0..n {
                let lhs = ab.dxi(axis);
                let rhs = a.dxi(axis).mul(&b).unwrap().add(&a.mul(&b.dxi(axis)).unwrap()).unwrap();
                let diff = lhs.sub(&rhs).unwrap();
                let scale = lhs.max_amplitude().max(rhs.max_amplitude()).max(1.0);
                worst = worst.max(diff.max_amplitude() / scale);
                let lhs = ab.dx(axis);
                let rhs = a.dx(axis).mul(&b).unwrap().add(&a.mul(&b.dx(axis)).unwrap()).unwrap();
                let scale = lhs.max_amplitude().max(1.0);
                worst = worst.max(lhs.sub(&rhs).unwrap().max_amplitude() / scale);
            }
        }
        (50, worst, String::new())
    })
}

/// ∫∫ ∂_ξ^α b = 0 whenever |α| ≥ 1 and deg ∂_ξ^α b = −n, evaluated with the given
/// moment table; the sanity case b = ξ₁, α = (1, 0) must give 2π.
pub fn check_sphere_vanishing(rng: &mut ChaCha8Rng, fault: Fault) -> CheckResult {
    let moment = move |a: &MultiIndex, n: usize| {
        let v = sphere_moment(a, n);
        if fault == Fault::Moments && crate::symcore::multi_index_order(a) == 2 {
            v * (1.0 + 1e-3)
        } else {
            v
        }
    };
    timed("sphere-vanishing", 1e-10, || {
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let n = 2 + i % 2;
            let k = 1 + (i % 3) as u32;
            let all = multi_indices_of_order(n, k);
            let alpha = all[rng.gen_range(0..all.len())];
            let b = random_symbol(rng, n, c64(k as f64 - n as f64), 3);
            let d = b.dxi_multi(&alpha);
            let v = sphere_torus_integral_with(&d, moment);
            worst = worst.max(v.norm() / d.max_amplitude().max(1.0));
        }
        let b = HomogeneousSymbol::monomial(2, c64(1.0), [1, 0, 0], TorusFourierSeries::constant(2, c64(1.0)));
        let sanity = sphere_torus_integral_with(&b.dxi(0), moment);
        let ok = (sanity - c64(2.0 * std::f64::consts::PI)).norm() < 1e-12;
        if !ok {
            worst = worst.max(1.0);
        }
        (21, worst, format!("sanity ∫∂ξ₁ξ₁ = {:.12}", sanity.re))
    })
}

pub fn check_mellin_reduction(rng: &mut ChaCha8Rng) -> CheckResult {
    timed("mellin-reduction", 1e-10, || {
        let fs = [TestFunction::bump_on(1.0, 2.0), TestFunction::bump_on(0.5, 3.0).mul(TestFunction::Exp(-0.5)), TestFunction::cutoff(1.0, 2.0)];
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        for (i, f) in fs.iter().enumerate() {
            for _ in 0..4 {
                let r = rng.gen_range(1..=3);
                let mut s = Complex64::new(rng.gen_range(-2.0..4.0), rng.gen_range(-1.0..1.0));
                if i == 2 {
                    // χ ≡ 1 near 0: the reduced side needs Re s > r or the continuation.
                    s.re = s.re.abs() + 0.3;
                }
                let d = mellin_reduction_defect(f, s, r).expect("computable");
                worst = worst.max(d);
                cases += 1;
            }
        }
        (cases, worst, String::new())
    })
}

fn interior_rows(modes: &[[i64; 3]], n: usize, kk: i64, span: i64) -> Vec<usize> {
    (0..modes.len()).filter(|&i| (0..n).all(|a| modes[i][a].abs() <= kk - span)).collect()
}

/// Differential left factor: Op(a)Op(b) and Op(a#b) coincide on interior modes.
pub fn check_composition_exactness(rng: &mut ChaCha8Rng) -> CheckResult {
    timed("composition-case0", 1e-10, || {
        let n = 2;
        let kk = 10usize;
        let mut worst: f64 = 0.0;
        for _ in 0..3 {
            let a = PolyHomogeneousSymbol::new(
                n,
                c64(2.0),
                vec![
                    comp(random_polynomial(rng, 2)),
                    comp(random_polynomial(rng, 1)),
                    comp(HomogeneousSymbol::monomial(n, c64(0.0), [0; 3], random_series(rng, n, 2))),
                ],
            )
            .unwrap();
            let b = PolyHomogeneousSymbol::with_cutoff(
                n,
                c64(-1.0),
                vec![random_symbol(rng, n, c64(-1.0), 2), random_symbol(rng, n, c64(-2.0), 2)],
                CutoffSpec::new(0.5).unwrap(),
            )
            .unwrap();
            let ab = compose_expansion(&a, &b, Some(5)).unwrap();
            let (modes, ma) = truncated_operator(&a, kk);
            let (_, mb) = truncated_operator(&b, kk);
            let (_, mab) = truncated_operator(&ab, kk);
            let prod = &ma * &mb;
            let scale = mab.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for i in interior_rows(&modes, n, kk as i64, a.max_abs_freq() as i64) {
                for j in 0..modes.len() {
                    worst = worst.max((prod[(i, j)] - mab[(i, j)]).norm() / scale);
                }
            }
        }
        (3, worst, "K = 10".into())
    })
}

fn comp(h: HomogeneousSymbol) -> crate::symcore::Component {
    crate::symcore::Component { symbol: h, cutoff: None }
}

fn random_polynomial(rng: &mut ChaCha8Rng, degree: u32) -> HomogeneousSymbol {
    let n = 2;
    let mut h = HomogeneousSymbol::zero(n, c64(degree as f64));
    for alpha in multi_indices_of_order(n, degree) {
        h = h.add(&HomogeneousSymbol::monomial(n, c64(degree as f64), alpha, random_series(rng, n, 2))).unwrap();
    }
    h
}

/// For a differential operator the adjoint expansion is exact: its truncated
/// matrix is the conjugate transpose on interior modes.
pub fn check_adjoint_matrix(rng: &mut ChaCha8Rng) -> CheckResult {
    timed("adjoint-matrix", 1e-8, || {
        let n = 2;
        let kk = 10usize;
        let mut worst: f64 = 0.0;
        for _ in 0..3 {
            let a = PolyHomogeneousSymbol::new(
                n,
                c64(2.0),
                vec![
                    comp(random_polynomial(rng, 2)),
                    comp(random_polynomial(rng, 1)),
                    comp(HomogeneousSymbol::monomial(n, c64(0.0), [0; 3], random_series(rng, n, 2))),
                ],
            )
            .unwrap();
            let adj = adjoint_expansion(&a, Some(3)).unwrap();
            let (modes, ma) = truncated_operator(&a, kk);
            let (_, madj) = truncated_operator(&adj, kk);
            let ct = ma.adjoint();
            let scale = ma.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let span = a.max_abs_freq() as i64;
            let inner = interior_rows(&modes, n, kk as i64, span);
            for &i in &inner {
                for &j in &inner {
                    worst = worst.max((madj[(i, j)] - ct[(i, j)]).norm() / scale);
                }
            }
        }
        (3, worst, "K = 10".into())
    })
}

/// The operator of the variable-coefficient acceptance problem:
/// ℓ = |ξ|² + 0.1 cos(2πx₁) |ξ|.
pub fn perturbed_laplacian(eps: f64) -> EllipticOperatorSpec {
    let l0 = HomogeneousSymbol::radial(2, 2.0, 1.0);
    let l1 = HomogeneousSymbol::radial_with(2, c64(1.0), TorusFourierSeries::cos(2, [1, 0, 0], eps));
    let sym = PolyHomogeneousSymbol::with_cutoff(2, c64(2.0), vec![l0, l1], CutoffSpec::unit()).unwrap();
    EllipticOperatorSpec::new(sym, 0.5, 1.0).unwrap()
}

pub fn check_parametrix(seed: u64) -> CheckResult {
    timed("parametrix-residual", 1e-10, || {
        let l = perturbed_laplacian(0.1);
        let qs = build_parametrix(&l, 3).unwrap();
        let rep = verify_parametrix(&l, &qs, 100, seed).unwrap();
        let err = if rep.symbolic_ok { rep.max_numeric_residual } else { f64::INFINITY };
        (rep.samples, err, format!("symbolic {}", if rep.symbolic_ok { "ok" } else { "MISMATCH" }))
    })
}

pub fn check_fp_split(rng: &mut ChaCha8Rng) -> CheckResult {
    timed("finite-part-split", 1e-10, || {
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let m = Complex64::new(rng.gen_range(-1.9..-0.1), rng.gen_range(-0.5..0.5));
            let a = PolyHomogeneousSymbol::with_cutoff(
                2,
                m,
                vec![random_symbol(rng, 2, m, 2), random_symbol(rng, 2, m - 1.0, 2)],
                CutoffSpec::new(rng.gen_range(0.5..2.0)).unwrap(),
            )
            .unwrap();
            let one = canonical_trace(&a).unwrap();
            let two = canonical_trace_split(&a, 2.0).unwrap();
            worst = worst.max((one - two).norm() / one.norm().max(1.0));
        }
        (5, worst, String::new())
    })
}

/// Random Hermitian matrix Q diag(λ) Q* with λ uniform in [lo, hi] and Q from the
/// QR factorization of a complex Gaussian matrix.
pub fn random_hermitian(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> DMatrix<Complex64> {
    let normal = rand_distr_normal;
    let g = DMatrix::<Complex64>::from_fn(dim, dim, |_, _| Complex64::new(normal(rng), normal(rng)));
    let q = g.qr().q();
    let d = DMatrix::<Complex64>::from_diagonal(&DVector::from_fn(dim, |_, _| c64(rng.gen_range(lo..hi))));
    let h = &q * d * q.adjoint();
    (&h + h.adjoint()) * c64(0.5)
}

fn rand_distr_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; one variate per call keeps the stream simple.
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let v: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Helffer–Sjöstrand engine checks: matrix function against eigendecomposition,
/// scalar Cauchy–Pompeiu identities and the |y|^M vanishing of D on Taylor-type
/// extensions.
pub fn hs_engine_check(seed: u64, grid: &HsGrid) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = TestFunction::bump_on(2.0, 9.0);
    let ext = AlmostAnalyticExtension::automatic(&f).expect("bump is compact");
    let h = random_hermitian(&mut rng, 50, 1.0, 10.0);
    let matrix = timed("hs-matrix-function", 1e-6, || {
        let exact = eig_matrix_function(&h, &f);
        let hs = hs_matrix_function(&h, &ext, grid).expect("hermitian");
        let err = operator_norm(&(&hs - &exact)) / operator_norm(&exact);
        (1, err, format!("50x50, spectrum in [1, 10], f = bump on [2, 9], bandwidth {}", ext.bandwidth()))
    });
    let cp = timed("cauchy-pompeiu", 1e-6, || {
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        let nodes = ext.upper_nodes(grid);
        for lambda in [2.7, 5.5, 8.1] {
            for j in 0..=2 {
                worst = worst.max(cauchy_pompeiu_residual(&ext, &nodes, lambda, j));
                cases += 1;
            }
        }
        (cases, worst, "j = 0, 1, 2".into())
    });
    let slopes = timed("dbar-vanishing-order", 0.15, || {
        let ys: Vec<f64> = (0..10).map(|i| 1e-3 * 10f64.powf(i as f64 / 4.5)).collect();
        let mut worst: f64 = 0.0;
        let mut parts = Vec::new();
        for m in 1..=4usize {
            let pts: Vec<(f64, f64)> = ys.iter().map(|&y| (y, taylor_extension_dbar(&f, m, 4.2, y).norm())).collect();
            let s = log_slope(&pts);
            worst = worst.max((s - m as f64).abs() / m as f64);
            parts.push(format!("M={m}: {s:.3}"));
        }
        let fourier: Vec<(f64, f64)> = ys.iter().map(|&y| (y, ext.sup_dbar(y))).filter(|p| p.1 > 0.0).collect();
        if fourier.len() >= 3 {
            parts.push(format!("Fourier extension slope {:.2}", log_slope(&fourier)));
        } else {
            parts.push("Fourier extension: D vanishes to rounding on y ≤ 0.1".into());
        }
        (4, worst, parts.join(", "))
    });
    vec![matrix, cp, slopes]
}

/// All suites in a fixed order.
pub fn run_selftest(seed: u64, fault: Fault) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_homogeneity(&mut rng),
        check_leibniz(&mut rng),
        check_sphere_vanishing(&mut rng, fault),
        check_mellin_reduction(&mut rng),
        check_composition_exactness(&mut rng),
        check_adjoint_matrix(&mut rng),
        check_parametrix(seed),
        check_fp_split(&mut rng),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(check_sphere_vanishing(&mut rng, Fault::None).pass);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(!check_sphere_vanishing(&mut rng, Fault::Moments).pass);
    }
}
