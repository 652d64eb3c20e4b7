use num_complex::Complex64;
use proptest::prelude::*;
use psido::expand::{predict_direct_multiplier, predict_expansion_res};
use psido::funcalc::TestFunction;
use psido::oracle::multiplier_trace;
use psido::selftest::{check_adjoint_matrix, check_composition_exactness, random_symbol};
use psido::symcore::{
    multi_indices_of_order, sphere_torus_integral, CutoffSpec, EllipticOperatorSpec, HomogeneousSymbol, PolyHomogeneousSymbol,
    TorusFourierSeries,
};
use psido::traces::{canonical_trace, canonical_trace_split, residue_density_integrated};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn laplacian() -> EllipticOperatorSpec {
    EllipticOperatorSpec::new(PolyHomogeneousSymbol::single(HomogeneousSymbol::radial(2, 2.0, 1.0)), 0.99, 0.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn homogeneous_in_xi(seed in any::<u64>(), n in 2usize..=3, deg in -4.0f64..3.0, lambda in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_symbol(&mut rng, n, c(deg), 3);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let xi: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let scaled: Vec<f64> = xi.iter().map(|v| v * lambda).collect();
        let want = h.eval(&x, &xi) * lambda.powf(deg);
        prop_assert!((h.eval(&x, &scaled) - want).norm() <= 1e-10 * want.norm().max(1e-300));
    }

    #[test]
    fn leibniz_rule(seed in any::<u64>(), axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_symbol(&mut rng, 2, c(-1.5), 2);
        let b = random_symbol(&mut rng, 2, c(0.5), 2);
        let lhs = a.mul(&b).unwrap().dxi(axis);
        let rhs = a.dxi(axis).mul(&b).unwrap().add(&a.mul(&b.dxi(axis)).unwrap()).unwrap();
        prop_assert!(lhs.approx_eq(&rhs, 1e-13));
    }

    #[test]
    fn xi_derivatives_integrate_to_zero(seed in any::<u64>(), n in 2usize..=3, k in 1u32..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all = multi_indices_of_order(n, k);
        let alpha = all[rng.gen_range(0..all.len())];
        let b = random_symbol(&mut rng, n, c(k as f64 - n as f64), 3);
        let d = b.dxi_multi(&alpha);
        prop_assert!(sphere_torus_integral(&d).norm() <= 1e-10 * b.max_amplitude().max(1.0));
        let a = PolyHomogeneousSymbol::with_cutoff(n, d.degree(), vec![d], CutoffSpec::unit()).unwrap();
        prop_assert!(residue_density_integrated(&a).norm() <= 1e-10 * b.max_amplitude().max(1.0));
    }

    #[test]
    fn finite_part_ignores_the_split_radius(seed in any::<u64>(), m in -1.95f64..-0.05, kappa in 1.0f64..6.0) {
        prop_assume!((m + 1.0).abs() > 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = vec![random_symbol(&mut rng, 2, c(m), 2), random_symbol(&mut rng, 2, c(m - 1.0), 2)];
        let a = PolyHomogeneousSymbol::with_cutoff(2, c(m), parts, CutoffSpec::new(rng.gen_range(0.3..1.5)).unwrap()).unwrap();
        let one = canonical_trace(&a).unwrap();
        let other = canonical_trace_split(&a, kappa).unwrap();
        prop_assert!((one - other).norm() <= 1e-10 * one.norm().max(1.0));
    }

    #[test]
    fn multiplier_routes_agree(seed in any::<u64>(), m in -2.5f64..-0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts = vec![random_symbol(&mut rng, 2, c(m), 2), random_symbol(&mut rng, 2, c(m - 1.0), 2)];
        let a = PolyHomogeneousSymbol::with_cutoff(2, c(m), parts, CutoffSpec::unit()).unwrap();
        let eta = TestFunction::bump_on(1.0, 2.0);
        let pred = predict_expansion_res(&a, &laplacian(), &eta, 3).unwrap();
        for (e, v) in predict_direct_multiplier(&a, &laplacian(), &eta, 3).unwrap() {
            // Every exponent sits on the ladder −(m + 2 − j)/2.
            let j = 2.0 * e.re + m + 2.0;
            prop_assert!((j - j.round()).abs() < 1e-9 && j.round() >= 0.0);
            let p = pred.coefficient_at(e.re).unwrap_or_default();
            prop_assert!((p - v).norm() <= 1e-10 * v.norm().max(1.0), "t^{}: {} vs {}", e.re, p, v);
        }
    }
}

#[test]
fn derivative_condition_matters() {
    // ∂_{ξ₁} ξ₁ = 1 has degree 0 ≠ −n and integrates to 2π.
    let b = HomogeneousSymbol::monomial(2, c(1.0), [1, 0, 0], TorusFourierSeries::constant(2, c(1.0)));
    assert!((sphere_torus_integral(&b.dxi(0)) - c(2.0 * PI)).norm() < 1e-13);
}

#[test]
fn truncated_matrix_checks() {
    for seed in [1, 2, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case0 = check_composition_exactness(&mut rng);
        assert!(case0.pass, "{}", case0.line());
        let adj = check_adjoint_matrix(&mut rng);
        assert!(adj.pass, "{}", adj.line());
    }
}

#[test]
fn lattice_traces_are_deterministic() {
    let g = TorusFourierSeries::constant(2, c(1.0)).add(&TorusFourierSeries::cos(2, [1, 0, 0], 1.0));
    let a = PolyHomogeneousSymbol::with_cutoff(2, c(-1.0), vec![HomogeneousSymbol::radial_with(2, c(-1.0), g)], CutoffSpec::unit()).unwrap();
    let eta = TestFunction::bump_on(1.0, 2.0);
    let first = multiplier_trace(&a, &laplacian(), &eta, 3e-4).unwrap().value;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let again = pool.install(|| multiplier_trace(&a, &laplacian(), &eta, 3e-4).unwrap().value);
    assert_eq!(first.re.to_bits(), again.re.to_bits());
    assert_eq!(first.im.to_bits(), again.im.to_bits());
}
