//! One-dimensional quadrature: adaptive Gauss-Kronrod (7/15) and fixed
//! Gauss-Legendre rules.

use crate::scalar::Scalar;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Integral<T> {
    pub value: T,
    pub error: T,
    pub evaluations: usize,
}

fn kronrod15<T: Scalar, F: Fn(T) -> T>(f: &F, a: T, b: T) -> (T, T) {
    let half = (b - a) * T::c(0.5);
    let center = (a + b) * T::c(0.5);
    let fc = f(center);
    let mut kronrod = fc * T::c(WGK[7]);
    let mut gauss = fc * T::c(WG[3]);
    for j in 0..7 {
        let dx = half * T::c(XGK[j]);
        let pair = f(center - dx) + f(center + dx);
        kronrod = kronrod + pair * T::c(WGK[j]);
        if j % 2 == 1 {
            gauss = gauss + pair * T::c(WG[j / 2]);
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    (value, error)
}

/// Adaptive Gauss-Kronrod integration of `f` over `[a, b]`.
///
/// The interval is first cut into `initial_panels` pieces so that narrow
/// features are not skipped by the first estimate. Panels are bisected, worst
/// error first, until the summed error estimate drops below
/// `max(abs_tol, rel_tol * |value|)` or the panel budget is exhausted.
pub fn integrate<T: Scalar, F: Fn(T) -> T>(
    f: F,
    a: T,
    b: T,
    abs_tol: T,
    rel_tol: T,
    initial_panels: usize,
) -> Integral<T> {
    const MAX_PANELS: usize = 4000;
    if a == b {
        return Integral {
            value: T::zero(),
            error: T::zero(),
            evaluations: 0,
        };
    }
    let n0 = initial_panels.max(1);
    let width = (b - a) / T::from_usize_(n0);
    let mut panels: Vec<(T, T, T, T)> = (0..n0)
        .map(|i| {
            let lo = a + width * T::from_usize_(i);
            let hi = if i + 1 == n0 { b } else { lo + width };
            let (v, e) = kronrod15(&f, lo, hi);
            (lo, hi, v, e)
        })
        .collect();
    let mut evaluations = 15 * n0;
    loop {
        let value = panels.iter().fold(T::zero(), |s, p| s + p.2);
        let error = panels.iter().fold(T::zero(), |s, p| s + p.3);
        let tol = abs_tol.max(rel_tol * value.abs());
        if error <= tol || panels.len() >= MAX_PANELS {
            return Integral {
                value,
                error,
                evaluations,
            };
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, p)| {
                if p.3 > best.1 {
                    (i, p.3)
                } else {
                    best
                }
            });
        let (lo, hi, _, _) = panels.swap_remove(idx);
        let mid = (lo + hi) * T::c(0.5);
        if mid <= lo || mid >= hi {
            // Panel can no longer be split at this precision.
            let (v, _) = kronrod15(&f, lo, hi);
            panels.push((lo, hi, v, T::zero()));
            continue;
        }
        let (v1, e1) = kronrod15(&f, lo, mid);
        let (v2, e2) = kronrod15(&f, mid, hi);
        evaluations += 30;
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton iteration on the
/// Legendre recurrence; accurate to machine precision for `n` up to a few
/// hundred).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Legendre order must be positive");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss-Legendre rule: `panels` equal panels of order `order`.
pub fn composite_gauss_legendre<T: Scalar, F: Fn(T) -> T>(
    f: F,
    a: T,
    b: T,
    panels: usize,
    order: usize,
) -> T {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / T::from_usize_(panels);
    let mut sum = T::zero();
    for p in 0..panels {
        let lo = a + h * T::from_usize_(p);
        let half = h * T::c(0.5);
        let mid = lo + half;
        let mut s = T::zero();
        for (xi, wi) in x.iter().zip(&w) {
            s = s + T::c(*wi) * f(mid + half * T::c(*xi));
        }
        sum = sum + s * half;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kronrod_integrates_gaussian_tail() {
        let r = integrate(|x: f64| (-x * x / 2.0).exp(), 0.0, 10.0, 1e-14, 1e-14, 4);
        assert_relative_eq!(r.value, (std::f64::consts::PI / 2.0).sqrt(), max_relative = 1e-13);
    }

    #[test]
    fn adaptive_finds_narrow_peak_with_enough_panels() {
        let w = 1e-3;
        let r = integrate(
            |x: f64| (-(x - 0.3) * (x - 0.3) / (2.0 * w * w)).exp(),
            -1.0,
            1.0,
            1e-15,
            1e-12,
            200,
        );
        let exact = w * (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(r.value, exact, max_relative = 1e-10);
    }

    #[test]
    fn legendre_rule_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(10);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
        // degree 19 is the limit for n = 10
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert_relative_eq!(s, 2.0 / 19.0, epsilon = 1e-14);
        let comp = composite_gauss_legendre(|t: f64| t.sin(), 0.0, std::f64::consts::PI, 4, 12);
        assert_relative_eq!(comp, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn odd_order_has_center_node() {
        let (x, _) = gauss_legendre(7);
        assert!(x[3].abs() < 1e-15);
    }
}
