use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, NnError, Parameterized, Result};
use crate::distributions::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentCellConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Gated recurrent cell with an update gate and a tanh candidate:
///
/// `u = sigmoid(Wu [x, h] + bu)`, `c = tanh(Wc [x, h] + bc)`,
/// `h' = (1 - u) * h + u * c`.
#[derive(Debug, Clone)]
pub struct GatedCell {
    config: RecurrentCellConfig,
    params: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GatedCellCache {
    xh: Array2<f64>,
    h: Array2<f64>,
    u: Array2<f64>,
    c: Array2<f64>,
}

impl GatedCell {
    pub fn new<R: Rng + ?Sized>(config: RecurrentCellConfig, rng: &mut R) -> Self {
        let mut cell = Self::zeros(config);
        let bound = 1.0 / (config.hidden_dim as f64).sqrt();
        for p in &mut cell.params {
            *p = rng.random_range(-bound..bound);
        }
        cell
    }

    pub fn zeros(config: RecurrentCellConfig) -> Self {
        assert!(config.hidden_dim >= 1, "hidden_dim must be >= 1");
        let n = 2 * (config.hidden_dim * (config.input_dim + config.hidden_dim) + config.hidden_dim);
        Self {
            config,
            params: vec![0.0; n],
        }
    }

    pub fn config(&self) -> RecurrentCellConfig {
        self.config
    }

    fn block(&self) -> usize {
        self.config.hidden_dim * (self.config.input_dim + self.config.hidden_dim) + self.config.hidden_dim
    }

    fn weight(&self, gate: usize) -> ArrayView2<'_, f64> {
        let h = self.config.hidden_dim;
        let cols = self.config.input_dim + h;
        let start = gate * self.block();
        ArrayView2::from_shape((h, cols), &self.params[start..start + h * cols]).expect("layout")
    }

    fn bias(&self, gate: usize) -> ArrayView1<'_, f64> {
        let h = self.config.hidden_dim;
        let start = gate * self.block() + h * (self.config.input_dim + h);
        ArrayView1::from(&self.params[start..start + h])
    }

    /// Batched step. Rows of `x` and `h` are independent sequences.
    pub fn forward(&self, x: ArrayView2<f64>, h: ArrayView2<f64>) -> Result<(Array2<f64>, GatedCellCache)> {
        let RecurrentCellConfig { input_dim, hidden_dim } = self.config;
        if x.ncols() != input_dim || h.ncols() != hidden_dim || x.nrows() != h.nrows() {
            return Err(NnError::ShapeMismatch {
                expected: format!("(n, {input_dim}) and (n, {hidden_dim})"),
                got: format!("{:?} and {:?}", x.dim(), h.dim()),
            });
        }
        check_finite(&x, "recurrent input")?;
        check_finite(&h, "recurrent state")?;
        let xh = concatenate(Axis(1), &[x, h]).expect("same row count");
        let mut u = super::mlp::standard(xh.dot(&self.weight(0).t()));
        u += &self.bias(0);
        u.mapv_inplace(sigmoid);
        let mut c = super::mlp::standard(xh.dot(&self.weight(1).t()));
        c += &self.bias(1);
        c.mapv_inplace(f64::tanh);
        let next = &h * &u.mapv(|v| 1.0 - v) + &u * &c;
        Ok((
            next,
            GatedCellCache {
                xh,
                h: h.to_owned(),
                u,
                c,
            },
        ))
    }

    /// Reverse pass; returns `(grad_x, grad_h)`.
    pub fn backward(
        &self,
        cache: &GatedCellCache,
        grad_next: ArrayView2<f64>,
        grads: &mut [f64],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if grad_next.dim() != cache.h.dim() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", cache.h.dim()),
                got: format!("{:?}", grad_next.dim()),
            });
        }
        if grads.len() != self.params.len() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} gradient entries", self.params.len()),
                got: format!("{}", grads.len()),
            });
        }
        let (u, c, h) = (&cache.u, &cache.c, &cache.h);
        // pre-activation gradients of both gates
        let gu = &grad_next * &(c - h) * &u.mapv(|v| v * (1.0 - v));
        let gc = &grad_next * u * &c.mapv(|v| 1.0 - v * v);
        let mut gh = &grad_next * &u.mapv(|v| 1.0 - v);
        let mut gxh = Array2::<f64>::zeros(cache.xh.raw_dim());
        let hd = self.config.hidden_dim;
        let cols = self.config.input_dim + hd;
        for (gate, g) in [(0usize, &gu), (1, &gc)] {
            let start = gate * self.block();
            let (gw, rest) = grads[start..].split_at_mut(hd * cols);
            let mut gw = ndarray::ArrayViewMut2::from_shape((hd, cols), gw).expect("layout");
            gw += &g.t().dot(&cache.xh);
            let mut gb = ndarray::ArrayViewMut1::from(&mut rest[..hd]);
            gb += &g.sum_axis(Axis(0));
            gxh += &g.dot(&self.weight(gate));
        }
        let gx = gxh.slice(s![.., ..self.config.input_dim]).to_owned();
        gh += &gxh.slice(s![.., self.config.input_dim..]);
        Ok((gx, gh))
    }
}

impl Parameterized for GatedCell {
    fn shape(&self) -> Vec<usize> {
        vec![self.config.input_dim, self.config.hidden_dim]
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}
