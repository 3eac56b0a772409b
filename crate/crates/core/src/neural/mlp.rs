use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DneError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::None => x,
        }
    }

    fn slope(self, pre: f64) -> f64 {
        match self {
            Activation::Relu if pre > 0.0 => 1.0,
            Activation::Relu => 0.0,
            Activation::None => 1.0,
        }
    }
}

/// `y = act(W x + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(DneError::shape("dense bias", weight.nrows(), bias.len()));
        }
        Ok(Dense {
            weight,
            bias,
            activation,
        })
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_simple_fn((outputs, inputs), || rng.gen_range(-limit..limit)),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_batch`]: the input of every layer
/// and every layer's pre-activation, one row per batch item.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl MlpTape {
    /// Hash of the ReLU on/off pattern; changes when a probe crosses a kink.
    pub fn pattern_key(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.pre {
            for &x in p {
                h = (h ^ (x > 0.0) as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn output(&self, mlp: &Mlp) -> Array2<f64> {
        let last = mlp.layers.last().expect("non-empty");
        self.pre.last().expect("non-empty").mapv(|x| last.activation.apply(x))
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DneError::Config("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(DneError::shape("MLP layer chain", pair[0].out_dim(), pair[1].in_dim()));
            }
        }
        Ok(Mlp { layers })
    }

    /// ReLU hidden layers, linear output; `dims = [in, hidden.., out]`.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(DneError::Config("MLP needs input and output widths".into()));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let act = if i == last { Activation::None } else { Activation::Relu };
                Dense::glorot(d[0], d[1], act, rng)
            })
            .collect();
        Mlp::new(layers)
    }

    /// Same shapes, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (out, _) = self.forward_batch(ArrayView2::from_shape((1, x.len()), x).expect("row vector"))?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Row-wise forward pass over a batch.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, MlpTape)> {
        if x.ncols() != self.in_dim() {
            return Err(DneError::shape("MLP input", self.in_dim(), x.ncols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let next = z.mapv(|v| layer.activation.apply(v));
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok((h, MlpTape { inputs, pre }))
    }

    /// Parameter and input gradients of `sum(upstream * output)`.
    pub fn backward(&self, tape: &MlpTape, upstream: ArrayView2<'_, f64>) -> Result<(Mlp, Array2<f64>)> {
        let mut grads = self.zeros_like();
        let d_in = self.backward_into(tape, upstream, &mut grads)?;
        Ok((grads, d_in))
    }

    /// As [`Mlp::backward`], accumulating parameter gradients into `grads`.
    pub fn backward_into(&self, tape: &MlpTape, upstream: ArrayView2<'_, f64>, grads: &mut Mlp) -> Result<Array2<f64>> {
        let rows = tape.inputs[0].nrows();
        if upstream.dim() != (rows, self.out_dim()) {
            return Err(DneError::shape(
                "MLP upstream gradient",
                format!("{rows}x{}", self.out_dim()),
                format!("{}x{}", upstream.nrows(), upstream.ncols()),
            ));
        }
        let mut d = upstream.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d.zip_mut_with(&tape.pre[i], |g, &z| *g *= layer.activation.slope(z));
            let g = &mut grads.layers[i];
            g.weight += &d.t().dot(&tape.inputs[i]);
            g.bias += &d.sum_axis(Axis(0));
            d = d.dot(&layer.weight);
        }
        Ok(d)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `(name, values, shape)` for every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{i}.weight"), l.weight.as_slice().expect("standard layout"), l.weight.shape().to_vec()));
            out.push((format!("{i}.bias"), l.bias.as_slice().expect("standard layout"), vec![l.bias.len()]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}
