use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, Activation, NnError, OutputHead, Parameterized, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub head: OutputHead,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden: hidden.to_vec(),
            activation: Activation::Relu,
            head: OutputHead::Linear,
        }
    }

    pub fn with_head(mut self, head: OutputHead) -> Self {
        self.head = head;
        self
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.output_dim);
        d
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Fully connected network with a configurable output head.
#[derive(Debug, Clone)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to every layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    raw: Array2<f64>,
    out: Array2<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }
}

impl Mlp {
    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Self {
        let mut net = Self::zeros(config);
        for layer in net.layers.clone() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            let n = layer.fan_in * layer.fan_out;
            for p in &mut net.params[layer.w..layer.w + n] {
                *p = rng.random_range(-bound..bound);
            }
            for p in &mut net.params[layer.b..layer.b + layer.fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn zeros(config: MlpConfig) -> Self {
        assert!(config.dims().iter().all(|&d| d >= 1), "all MLP dimensions must be >= 1");
        let dims = config.dims();
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layers.push(Layer {
                fan_in,
                fan_out,
                w: offset,
                b: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        Self {
            config,
            layers,
            params: vec![0.0; offset],
        }
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn weight(&self, l: &Layer) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.fan_out, l.fan_in), &self.params[l.w..l.w + l.fan_in * l.fan_out])
            .expect("layer layout")
    }

    fn bias(&self, l: &Layer) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[l.b..l.b + l.fan_out])
    }

    /// Batched forward pass; rows are samples.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if input.ncols() != self.config.input_dim {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} input columns", self.config.input_dim),
                got: format!("{}", input.ncols()),
            });
        }
        check_finite(&input, "mlp input")?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut x = input.to_owned();
        let mut raw = None;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = standard(x.dot(&self.weight(l).t()));
            z += &self.bias(l);
            inputs.push(x);
            if i == last {
                raw = Some(z);
                break;
            }
            let act = self.config.activation;
            x = z.mapv(|v| act.apply(v));
            pre.push(z);
        }
        let raw = raw.expect("at least one layer");
        let out = self.config.head.apply_rows(&raw);
        Ok((out.clone(), MlpCache { inputs, pre, raw, out }))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward(input).map(|(o, _)| o)
    }

    /// Reverse pass. Parameter gradients are added into `grads`; the input
    /// gradient is returned.
    pub fn backward(&self, cache: &MlpCache, grad_out: ArrayView2<f64>, grads: &mut [f64]) -> Result<Array2<f64>> {
        if grad_out.dim() != cache.out.dim() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", cache.out.dim()),
                got: format!("{:?}", grad_out.dim()),
            });
        }
        if grads.len() != self.params.len() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} gradient entries", self.params.len()),
                got: format!("{}", grads.len()),
            });
        }
        let mut g = self.config.head.backward_rows(&cache.raw, &cache.out, grad_out);
        for (i, l) in self.layers.iter().enumerate().rev() {
            {
                let (gw_slice, rest) = grads[l.w..].split_at_mut(l.fan_in * l.fan_out);
                let mut gw = ndarray::ArrayViewMut2::from_shape((l.fan_out, l.fan_in), gw_slice).expect("layer layout");
                gw += &g.t().dot(&cache.inputs[i]);
                let mut gb = ndarray::ArrayViewMut1::from(&mut rest[..l.fan_out]);
                gb += &g.sum_axis(Axis(0));
            }
            let gx = g.dot(&self.weight(l));
            if i == 0 {
                return Ok(gx);
            }
            let act = self.config.activation;
            g = gx;
            g.zip_mut_with(&cache.pre[i - 1], |gv, &p| *gv *= act.derivative(p));
        }
        unreachable!("network has at least one layer")
    }

    /// `target <- (1 - tau) * target + tau * self`
    pub fn polyak_into(&self, target: &mut Mlp, tau: f64) {
        for (t, s) in target.params.iter_mut().zip(&self.params) {
            *t = (1.0 - tau) * *t + tau * s;
        }
    }
}

impl Parameterized for Mlp {
    fn shape(&self) -> Vec<usize> {
        self.config.dims()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Row-major copy when a product came back column-major.
pub(crate) fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Stateful wrapper retaining the last forward pass, for callers that apply
/// a network once per backward.
#[derive(Debug, Clone)]
pub struct Network {
    pub mlp: Mlp,
    last: Option<MlpCache>,
}

impl Network {
    pub fn new(mlp: Mlp) -> Self {
        Self { mlp, last: None }
    }

    pub fn forward(&mut self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (out, cache) = self.mlp.forward(input)?;
        self.last = Some(cache);
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: ArrayView2<f64>, grads: &mut [f64]) -> Result<Array2<f64>> {
        let cache = self.last.take().ok_or(NnError::NoForward)?;
        self.mlp.backward(&cache, grad_out, grads)
    }
}
