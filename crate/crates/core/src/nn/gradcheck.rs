//! Central finite-difference checks for hand-written reverse passes.

use ndarray::Array2;

use super::{GatedCell, Mlp, Parameterized};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Agreement between an analytic gradient and a numerical one.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    /// `||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)`
    pub rel_norm: f64,
    /// Largest `|a - n| / max(|a| + |n|, floor)` over entries.
    pub max_elementwise: f64,
    pub entries: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_norm <= tol && self.max_elementwise <= 10.0 * tol
    }
}

/// Compare `analytic` against central differences of `f` around `x`.
pub fn compare<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> GradReport {
    assert_eq!(x.len(), analytic.len());
    let mut work = x.to_vec();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let a = f(&work);
            work[i] = x[i] - eps;
            let b = f(&work);
            work[i] = x[i];
            (a - b) / (2.0 * eps)
        })
        .collect();
    report(analytic, &numeric)
}

pub fn report(analytic: &[f64], numeric: &[f64]) -> GradReport {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let na = norm(&mut analytic.iter().copied());
    let nn = norm(&mut numeric.iter().copied());
    // entries this small relative to the whole gradient are dominated by rounding
    let floor = 1e-6 * (na + nn) + 1e-10;
    let max_elementwise = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max);
    GradReport {
        rel_norm: diff / (na + nn).max(1e-12),
        max_elementwise,
        entries: analytic.len(),
    }
}

fn weighted(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (out * w).sum()
}

/// Checks parameter and input gradients of `sum(w * net(x))`.
pub fn check_mlp(net: &Mlp, x: &Array2<f64>, w: &Array2<f64>) -> GradReport {
    let (_, cache) = net.forward(x.view()).expect("forward");
    let mut grads = net.zero_grad();
    let gx = net.backward(&cache, w.view(), &mut grads).expect("backward");
    let mut probe = net.clone();
    let p = net.params().to_vec();
    let rp = compare(
        |q| {
            probe.params_mut().copy_from_slice(q);
            weighted(&probe.predict(x.view()).unwrap(), w)
        },
        &p,
        &grads,
        DEFAULT_EPS,
    );
    let shape = x.raw_dim();
    let rx = compare(
        |q| {
            let xi = Array2::from_shape_vec(shape, q.to_vec()).unwrap();
            weighted(&net.predict(xi.view()).unwrap(), w)
        },
        x.as_slice().expect("standard layout"),
        gx.as_slice().expect("standard layout"),
        DEFAULT_EPS,
    );
    worst(rp, rx)
}

/// Checks parameter, input and state gradients of `sum(w * cell(x, h))`.
pub fn check_gated_cell(cell: &GatedCell, x: &Array2<f64>, h: &Array2<f64>, w: &Array2<f64>) -> GradReport {
    let (_, cache) = cell.forward(x.view(), h.view()).expect("forward");
    let mut grads = cell.zero_grad();
    let (gx, gh) = cell.backward(&cache, w.view(), &mut grads).expect("backward");
    let eval = |c: &GatedCell, x: &Array2<f64>, h: &Array2<f64>| weighted(&c.forward(x.view(), h.view()).unwrap().0, w);
    let mut probe = cell.clone();
    let p = cell.params().to_vec();
    let rp = compare(
        |q| {
            probe.params_mut().copy_from_slice(q);
            eval(&probe, x, h)
        },
        &p,
        &grads,
        DEFAULT_EPS,
    );
    let rx = compare(
        |q| eval(cell, &Array2::from_shape_vec(x.raw_dim(), q.to_vec()).unwrap(), h),
        x.as_slice().unwrap(),
        gx.as_slice().unwrap(),
        DEFAULT_EPS,
    );
    let rh = compare(
        |q| eval(cell, x, &Array2::from_shape_vec(h.raw_dim(), q.to_vec()).unwrap()),
        h.as_slice().unwrap(),
        gh.as_slice().unwrap(),
        DEFAULT_EPS,
    );
    worst(worst(rp, rx), rh)
}

pub fn worst(a: GradReport, b: GradReport) -> GradReport {
    GradReport {
        rel_norm: a.rel_norm.max(b.rel_norm),
        max_elementwise: a.max_elementwise.max(b.max_elementwise),
        entries: a.entries + b.entries,
    }
}
