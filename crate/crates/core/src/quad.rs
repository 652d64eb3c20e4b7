//! Quadrature rules, compensated summation and a few special values.

use num_complex::Complex64;
use std::f64::consts::PI;

/// Gauss–Legendre rule on [-1, 1].
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes by Newton iteration on the three-term recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Composite rule over `panels` equal sub-intervals of [a, b].
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, panels: usize, mut f: F) -> f64 {
        let h = (b - a) / panels as f64;
        let mut acc = Neumaier::default();
        for p in 0..panels {
            let lo = a + h * p as f64;
            let c = lo + 0.5 * h;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                acc.add(0.5 * h * w * f(c + 0.5 * h * x));
            }
        }
        acc.sum()
    }

    pub fn integrate_complex<F: FnMut(f64) -> Complex64>(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: F,
    ) -> Complex64 {
        let h = (b - a) / panels as f64;
        let mut acc = NeumaierComplex::default();
        for p in 0..panels {
            let lo = a + h * p as f64;
            let c = lo + 0.5 * h;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                acc.add(f(c + 0.5 * h * x) * (0.5 * h * w));
            }
        }
        acc.sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Integrates `f` over [a, b] with a 20-point composite rule, doubling the panel
/// count until successive estimates agree to `rel_tol` (relative to `scale` when
/// the integral itself is tiny). Returns the estimate and the last change.
pub fn adaptive_complex<F: Fn(f64) -> Complex64>(
    a: f64,
    b: f64,
    rel_tol: f64,
    scale: f64,
    f: F,
) -> (Complex64, f64) {
    let gl = GaussLegendre::new(20);
    let mut panels = 2;
    let mut prev = gl.integrate_complex(a, b, panels, &f);
    loop {
        panels *= 2;
        let cur = gl.integrate_complex(a, b, panels, &f);
        let change = (cur - prev).norm();
        if change <= rel_tol * cur.norm().max(scale) || panels >= 1 << 14 {
            return (cur, change);
        }
        prev = cur;
    }
}

pub fn adaptive_real<F: Fn(f64) -> f64>(a: f64, b: f64, rel_tol: f64, scale: f64, f: F) -> f64 {
    adaptive_complex(a, b, rel_tol, scale, |x| Complex64::new(f(x), 0.0)).0.re
}

/// Neumaier (improved Kahan) summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierComplex {
    re: Neumaier,
    im: Neumaier,
}

impl NeumaierComplex {
    pub fn add(&mut self, z: Complex64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }

    pub fn sum(&self) -> Complex64 {
        Complex64::new(self.re.sum(), self.im.sum())
    }
}

pub fn neumaier_sum<I: IntoIterator<Item = Complex64>>(it: I) -> Complex64 {
    let mut acc = NeumaierComplex::default();
    for z in it {
        acc.add(z);
    }
    acc.sum()
}

/// Γ(k/2) for positive integer k, exact up to rounding.
pub fn gamma_half_integer(k: u32) -> f64 {
    assert!(k >= 1);
    if k % 2 == 0 {
        (1..k / 2).map(|i| i as f64).product()
    } else {
        let mut g = PI.sqrt();
        let mut x = 0.5;
        while x < k as f64 / 2.0 - 0.25 {
            g *= x;
            x += 1.0;
        }
        g
    }
}

/// Surface measure of the unit sphere S^{n-1}.
pub fn sphere_area(n: usize) -> f64 {
    2.0 * PI.powf(n as f64 / 2.0) / gamma_half_integer(n as u32)
}

pub fn factorial(k: u32) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

pub fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Bernoulli numbers B_2, B_4, ..., B_{2k}.
fn bernoulli_even(k: usize) -> Vec<f64> {
    // Akiyama–Tanigawa on exact rationals would be overkill; the standard
    // recurrence in f64 is accurate for the first ~15 values used here.
    let n = 2 * k;
    let mut b = vec![0.0; n + 1];
    b[0] = 1.0;
    for m in 1..=n {
        let mut s = 0.0;
        for j in 0..m {
            s += binomial(m as u32 + 1, j as u32) * b[j];
        }
        b[m] = -s / (m as f64 + 1.0);
    }
    (1..=k).map(|i| b[2 * i]).collect()
}

/// Hurwitz zeta ζ(s, a) = Σ_{k≥0} (k+a)^{-s} for real s ≠ 1, a > 0, by
/// Euler–Maclaurin summation; valid (as the analytic continuation) for all s ≠ 1.
pub fn hurwitz_zeta(s: f64, a: f64) -> f64 {
    assert!((s - 1.0).abs() > 1e-12, "pole at s = 1");
    let n = 40usize;
    let bern = bernoulli_even(12);
    let mut acc = Neumaier::default();
    for k in 0..n {
        acc.add((k as f64 + a).powf(-s));
    }
    let x = n as f64 + a;
    acc.add(x.powf(1.0 - s) / (s - 1.0));
    acc.add(0.5 * x.powf(-s));
    // Tail: Σ B_{2j}/(2j)! · s(s+1)...(s+2j-2) x^{-s-2j+1}
    let mut rising = s;
    let mut fact = 2.0;
    for (j, b) in bern.iter().enumerate() {
        let jj = j + 1;
        let term = b / fact * rising * x.powf(-s - 2.0 * jj as f64 + 1.0);
        acc.add(term);
        let k2 = 2.0 * jj as f64;
        rising *= (s + k2 - 1.0) * (s + k2);
        fact *= (k2 + 1.0) * (k2 + 2.0);
    }
    acc.sum()
}

/// Epstein zeta of the square lattice: Σ_{k ∈ Z² ∖ 0} |k|^{-2s} = 4 ζ(s) β(s),
/// analytically continued (s ≠ 1).
pub fn square_lattice_zeta(s: f64) -> f64 {
    let zeta = hurwitz_zeta(s, 1.0);
    let beta = 4f64.powf(-s) * (hurwitz_zeta(s, 0.25) - hurwitz_zeta(s, 0.75));
    4.0 * zeta * beta
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let gl = GaussLegendre::new(10);
        for k in 0..20u32 {
            let exact = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
            let got = gl.integrate(-1.0, 1.0, 1, |x| x.powi(k as i32));
            assert!((got - exact).abs() < 1e-14, "k={k} got={got}");
        }
    }

    #[test]
    fn gamma_at_half_integers() {
        assert!((gamma_half_integer(1) - PI.sqrt()).abs() < 1e-15);
        assert_eq!(gamma_half_integer(2), 1.0);
        assert!((gamma_half_integer(5) - 0.75 * PI.sqrt()).abs() < 1e-15);
        assert_eq!(gamma_half_integer(8), 6.0);
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-14);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-14);
    }

    #[test]
    fn zeta_values() {
        assert!((hurwitz_zeta(2.0, 1.0) - PI * PI / 6.0).abs() < 1e-13);
        assert!((hurwitz_zeta(0.0, 1.0) + 0.5).abs() < 1e-13);
        assert!((hurwitz_zeta(-1.0, 1.0) + 1.0 / 12.0).abs() < 1e-13);
        // Catalan's constant.
        let beta2 = (hurwitz_zeta(2.0, 0.25) - hurwitz_zeta(2.0, 0.75)) / 16.0;
        assert!((beta2 - 0.915_965_594_177_219).abs() < 1e-13);
        // Σ_{k≠0} |k|^{-4} over Z² = 4 ζ(2) β(2)
        let direct: f64 = {
            let r = 400i64;
            let mut acc = Neumaier::default();
            for a in -r..=r {
                for b in -r..=r {
                    if a != 0 || b != 0 {
                        acc.add(((a * a + b * b) as f64).powi(-2));
                    }
                }
            }
            acc.sum()
        };
        assert!((direct - square_lattice_zeta(2.0)).abs() < 1e-4);
    }

    #[test]
    fn neumaier_recovers_cancellation() {
        let mut acc = Neumaier::default();
        for x in [1.0, 1e100, 1.0, -1e100] {
            acc.add(x);
        }
        assert_eq!(acc.sum(), 2.0);
    }
}
