//! Special functions used by the Dirichlet and Gamma code paths.

pub use statrs::function::gamma::{digamma, ln_gamma};
use statrs::function::gamma::{gamma_lr, gamma_ur};

/// Derivative of the digamma function.
pub fn trigamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / x;
    let r2 = r * r;
    acc + r
        + 0.5 * r2
        + r * r2 * (1.0 / 6.0 - r2 * (1.0 / 30.0 - r2 * (1.0 / 42.0 - r2 * (1.0 / 30.0 - r2 * 5.0 / 66.0))))
}

const TINY_LN_X: f64 = -700.0;

/// Regularized lower incomplete gamma function `P(shape, x)`.
pub fn gamma_cdf(shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_lr(shape, x)
    }
}

/// Regularized upper incomplete gamma function `Q(shape, x) = 1 - P(shape, x)`.
pub fn gamma_ccdf(shape: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma_ur(shape, x)
    }
}

/// Log density of `Gamma(shape, 1)` at `x > 0`.
pub fn gamma_ln_pdf(shape: f64, x: f64) -> f64 {
    (shape - 1.0) * x.ln() - x - ln_gamma(shape)
}

/// Inverse CDF of `Gamma(shape, 1)` for `u` in `(0, 1)`.
pub fn gamma_inv_cdf(shape: f64, u: f64) -> f64 {
    gamma_inv_cdf_ln(shape, u).exp()
}

/// Logarithm of the inverse CDF of `Gamma(shape, 1)`, solved in log space by
/// safeguarded Newton iteration. Stays finite where the variate itself
/// underflows.
pub fn gamma_inv_cdf_ln(shape: f64, u: f64) -> f64 {
    debug_assert!(shape > 0.0 && u > 0.0 && u < 1.0);
    let upper = u > 0.5;
    let target = if upper { 1.0 - u } else { u };
    // residual(t) is increasing in t = ln x
    let residual = |t: f64| {
        let x = t.exp();
        if upper {
            target - gamma_ccdf(shape, x)
        } else {
            gamma_cdf(shape, x) - target
        }
    };

    let mut t = if shape < 1.0 || u < 0.05 {
        // small-x expansion P(a, x) ~ x^a / (a Gamma(a))
        (u.ln() + shape.ln() + ln_gamma(shape)) / shape
    } else {
        shape.ln()
    };
    if !t.is_finite() {
        t = 0.0;
    }
    if t < TINY_LN_X {
        // x^a / Gamma(a + 1) is exact to double precision this far out
        return (u.ln() + ln_gamma(shape + 1.0)) / shape;
    }
    t = t.min(700.0);

    let mut lo = t - 1.0;
    let mut hi = t + 1.0;
    let mut step = 1.0;
    while residual(lo) > 0.0 && lo > -745.0 {
        step *= 2.0;
        lo = (t - step).max(-745.0);
    }
    step = 1.0;
    while residual(hi) < 0.0 && hi < 700.0 {
        step *= 2.0;
        hi = (t + step).min(700.0);
    }
    if t <= lo || t >= hi {
        t = 0.5 * (lo + hi);
    }

    for _ in 0..200 {
        let f = residual(t);
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        // d residual / dt = pdf(x) * x
        let slope = (shape * t - t.exp() - ln_gamma(shape)).exp();
        let mut next = t - f / slope;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 1e-15 * t.abs().max(1.0) {
            t = next;
            break;
        }
        t = next;
        if hi - lo <= 1e-15 * t.abs().max(1.0) {
            break;
        }
    }
    t
}

/// Partial derivative of `P(shape, x)` with respect to `shape`, by forward
/// differences with step halving until successive Richardson estimates agree
/// within `tol` (relative).
pub fn gamma_cdf_dshape(shape: f64, x: f64, tol: f64) -> f64 {
    // differentiate whichever tail is small for accuracy; dQ/da = -dP/da
    let use_upper = gamma_cdf(shape, x) > 0.5;
    let f = |a: f64| {
        if use_upper {
            -gamma_ccdf(a, x)
        } else {
            gamma_cdf(a, x)
        }
    };
    let f0 = f(shape);
    let fd = |h: f64| (f(shape + h) - f0) / h;

    let mut h = 1e-3 * shape.max(1e-3);
    let mut prev_d = fd(h);
    let mut prev_rich = f64::NAN;
    for _ in 0..30 {
        let half = h * 0.5;
        let d = fd(half);
        let rich = 2.0 * d - prev_d;
        if prev_rich.is_finite() {
            let scale = rich.abs().max(prev_rich.abs()).max(f64::MIN_POSITIVE);
            if (rich - prev_rich).abs() <= tol * scale {
                return rich;
            }
        }
        prev_rich = rich;
        prev_d = d;
        h = half;
        if h < 1e-9 * shape.max(1e-3) {
            break;
        }
    }
    prev_rich
}

/// Implicit reparameterization derivative `dx/dshape` of a `Gamma(shape, 1)`
/// variate held at a fixed CDF level.
pub fn gamma_sample_dshape(shape: f64, x: f64) -> f64 {
    x * gamma_sample_dshape_ln(shape, x.ln())
}

/// `d ln(x) / d shape` for a Gamma variate `x = exp(ln_x)` at a fixed CDF level:
/// `-(dF/dshape) / (pdf(x) * x)`.
pub fn gamma_sample_dshape_ln(shape: f64, ln_x: f64) -> f64 {
    if ln_x < TINY_LN_X {
        // from ln x = (ln u + ln Gamma(a + 1)) / a
        return (digamma(shape + 1.0) - ln_x) / shape;
    }
    let dcdf = gamma_cdf_dshape(shape, ln_x.exp(), 1e-6);
    // ln(pdf(x) * x) = shape * ln x - x - ln Gamma(shape)
    let ln_density = shape * ln_x - ln_x.exp() - ln_gamma(shape);
    -dcdf * (-ln_density).exp()
}
