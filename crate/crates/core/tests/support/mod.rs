//! Independent numerical oracles for tests: quadrature, finite differences
//! and reference special functions. Nothing here calls into the library's
//! own numerics.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

/// ln B(a, b) from an independent log-gamma implementation.
pub fn ref_log_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Tanh-sinh quadrature over (0, 1). The integrand receives
/// `(x, ln x, ln(1 − x))` computed without cancellation near either end,
/// and must return `g(x) · x · (1 − x)`; the substitution's remaining
/// Jacobian factor is supplied here. Handles integrable endpoint
/// singularities such as x^(a−1) with small a.
pub fn tanh_sinh_unit<F: Fn(f64, f64, f64) -> f64>(f: F, step: f64, t_max: f64) -> f64 {
    let n = (t_max / step).ceil() as i64;
    let mut total = 0.0;
    for i in -n..=n {
        let t = i as f64 * step;
        let s = std::f64::consts::PI * t.sinh();
        // x = 1 / (1 + e^{−s}), so ln x = −softplus(−s), ln(1−x) = −softplus(s).
        let lx = -softplus(-s);
        let l1x = -softplus(s);
        let x = lx.exp();
        total += f(x, lx, l1x) * std::f64::consts::PI * t.cosh();
    }
    total * step
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// KL(p‖q) + KL(q‖p) for Beta shapes by quadrature of (p − q)(ln p − ln q).
pub fn sym_kl_quadrature(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (lbp, lbq) = (ref_log_beta(p.0, p.1), ref_log_beta(q.0, q.1));
    tanh_sinh_unit(
        |_, lx, l1x| {
            // Densities times x(1 − x), kept in log space until the end.
            let lp = p.0 * lx + p.1 * l1x - lbp;
            let lq = q.0 * lx + q.1 * l1x - lbq;
            let diff_log = (p.0 - q.0) * lx + (p.1 - q.1) * l1x - lbp + lbq;
            (lp.exp() - lq.exp()) * diff_log
        },
        1.0 / 256.0,
        12.0,
    )
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[j] += h;
        minus[j] -= h;
        let col = (f(&plus) - f(&minus)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// ln |det| of a central-difference Jacobian.
pub fn fd_log_abs_det<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, x: &DVector<f64>, h: f64) -> f64 {
    fd_jacobian(f, x, h).determinant().abs().ln()
}

/// Derivative of a scalar function by Richardson-extrapolated central
/// differences (fourth order).
pub fn richardson_derivative<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

/// Composite midpoint rule for a function on [lo, hi].
pub fn midpoint_1d<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    (0..n).map(|i| f(lo + (i as f64 + 0.5) * h)).sum::<f64>() * h
}

/// Composite midpoint rule on the rectangle [lo, hi] in two dimensions.
pub fn midpoint_2d<F: Fn(f64, f64) -> f64>(f: F, lo: (f64, f64), hi: (f64, f64), n: usize) -> f64 {
    let (hx, hy) = ((hi.0 - lo.0) / n as f64, (hi.1 - lo.1) / n as f64);
    let mut total = 0.0;
    for i in 0..n {
        let x = lo.0 + (i as f64 + 0.5) * hx;
        for j in 0..n {
            total += f(x, lo.1 + (j as f64 + 0.5) * hy);
        }
    }
    total * hx * hy
}

/// Naive single-layer sigmoid map σ(W x + b), written out element by element.
pub fn naive_sigmoid_layer(w: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(w.nrows(), |i, _| {
        let mut z = b[i];
        for j in 0..w.ncols() {
            z += w[(i, j)] * x[j];
        }
        1.0 / (1.0 + (-z).exp())
    })
}

#[test]
fn oracles_self_check() {
    // ∫₀¹ 1 dx, passed in the x(1−x)-weighted form the quadrature expects.
    let v = tanh_sinh_unit(|x, _, _| x * (1.0 - x) * 1.0, 1.0 / 64.0, 6.0);
    assert!((v - 1.0).abs() < 1e-12, "{v}");
    assert!(sym_kl_quadrature((2.0, 3.0), (2.0, 3.0)).abs() < 1e-14);
    assert!((ref_log_beta(1.0, 1.0)).abs() < 1e-14);
    let d = richardson_derivative(f64::sin, 0.3, 1e-2);
    assert!((d - 0.3f64.cos()).abs() < 1e-9);
    assert!((midpoint_2d(|x, y| x * y, (0.0, 0.0), (1.0, 2.0), 100) - 1.0).abs() < 1e-12);
}
