//! Small differentiable function approximators with hand-written reverse
//! passes.
//!
//! Networks keep their parameters in one flat vector. `forward` returns a
//! cache that `backward` consumes, so a network can be applied several times
//! inside one loss and each application is differentiated separately.
//! Gradients are accumulated into caller-owned buffers of the same length as
//! the parameters.

mod adam;
pub mod gradcheck;
mod gru;
mod mlp;
mod store;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::Adam;
pub use gru::{GatedCell, GatedCellCache, RecurrentCellConfig};
pub use mlp::{Mlp, MlpCache, MlpConfig, Network};
pub use store::{Checkpoint, ParamEntry, ParamStore, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("backward called without a preceding forward")]
    NoForward,
    #[error("duplicate parameter group `{0}`")]
    DuplicateName(String),
    #[error("missing parameter group `{0}`")]
    MissingName(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Anything owning a flat parameter vector.
pub trait Parameterized {
    /// Layer dimensions, used as shape metadata in checkpoints.
    fn shape(&self) -> Vec<usize>;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn zero_grad(&self) -> Vec<f64> {
        vec![0.0; self.num_params()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Output transformation applied row-wise after the last linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    #[default]
    Linear,
    /// `[mean.., log_var..] -> [mean.., exp(log_var) + 1e-6..]`
    MeanLogVariance,
    /// Softmax over the row.
    Logits,
    /// `softplus(x) + 1e-4`
    PositiveConcentration,
}

const LOG_VAR_CLAMP: f64 = 20.0;

impl OutputHead {
    pub fn apply(self, raw: &[f64]) -> Vec<f64> {
        match self {
            OutputHead::Linear => raw.to_vec(),
            OutputHead::MeanLogVariance => {
                let d = raw.len() / 2;
                raw.iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        if i < d {
                            x
                        } else {
                            x.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).exp() + crate::distributions::VARIANCE_FLOOR
                        }
                    })
                    .collect()
            }
            OutputHead::Logits => {
                let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = raw.iter().map(|x| (x - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
            OutputHead::PositiveConcentration => raw
                .iter()
                .map(|&x| softplus(x) + crate::distributions::CONCENTRATION_FLOOR)
                .collect(),
        }
    }

    /// Gradient on the raw outputs given the gradient on the head output.
    pub fn backward(self, raw: &[f64], out: &[f64], grad_out: &[f64]) -> Vec<f64> {
        match self {
            OutputHead::Linear => grad_out.to_vec(),
            OutputHead::MeanLogVariance => {
                let d = raw.len() / 2;
                (0..raw.len())
                    .map(|i| {
                        if i < d {
                            grad_out[i]
                        } else if raw[i].abs() > LOG_VAR_CLAMP {
                            0.0
                        } else {
                            grad_out[i] * (out[i] - crate::distributions::VARIANCE_FLOOR)
                        }
                    })
                    .collect()
            }
            OutputHead::Logits => {
                let dot: f64 = out.iter().zip(grad_out).map(|(a, b)| a * b).sum();
                out.iter().zip(grad_out).map(|(y, g)| y * (g - dot)).collect()
            }
            OutputHead::PositiveConcentration => raw
                .iter()
                .zip(grad_out)
                .map(|(&x, g)| g * crate::distributions::sigmoid(x))
                .collect(),
        }
    }

    pub(crate) fn apply_rows(self, raw: &Array2<f64>) -> Array2<f64> {
        if self == OutputHead::Linear {
            return raw.clone();
        }
        let mut out = raw.clone();
        for (mut o, r) in out.rows_mut().into_iter().zip(raw.rows()) {
            let v = self.apply(r.as_slice().expect("standard layout"));
            o.assign(&ndarray::ArrayView1::from(&v));
        }
        out
    }

    pub(crate) fn backward_rows(self, raw: &Array2<f64>, out: &Array2<f64>, grad_out: ArrayView2<f64>) -> Array2<f64> {
        if self == OutputHead::Linear {
            return grad_out.to_owned();
        }
        let mut g = Array2::zeros(raw.raw_dim());
        for (((mut gr, r), o), go) in g
            .rows_mut()
            .into_iter()
            .zip(raw.rows())
            .zip(out.rows())
            .zip(grad_out.rows())
        {
            let go = go.to_vec();
            let v = self.backward(
                r.as_slice().expect("standard layout"),
                o.as_slice().expect("standard layout"),
                &go,
            );
            gr.assign(&ndarray::ArrayView1::from(&v));
        }
        g
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn check_finite(a: &ArrayView2<f64>, what: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_backward_match_finite_differences() {
        let raw = [0.3, -1.2, 0.8, 2.0];
        let w = [0.5, -1.0, 2.0, 0.7];
        for head in [
            OutputHead::Linear,
            OutputHead::MeanLogVariance,
            OutputHead::Logits,
            OutputHead::PositiveConcentration,
        ] {
            let out = head.apply(&raw);
            let g = head.backward(&raw, &out, &w);
            for k in 0..raw.len() {
                let h = 1e-6;
                let mut a = raw;
                a[k] += h;
                let mut b = raw;
                b[k] -= h;
                let f = |x: &[f64]| -> f64 { head.apply(x).iter().zip(&w).map(|(p, q)| p * q).sum() };
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7, "{head:?} {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn concentration_head_respects_floor() {
        let out = OutputHead::PositiveConcentration.apply(&[-100.0, 0.0]);
        assert!(out[0] >= 1e-4 && out[0] < 1.1e-4);
        assert!((out[1] - (2f64.ln() + 1e-4)).abs() < 1e-12);
    }
}
