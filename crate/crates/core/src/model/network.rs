//! Feed-forward network with rectified-linear hidden layers and a linear output head.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scale applied to the output layer's initial weights so fresh models emit near-uniform masks.
const OUTPUT_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `inputs x outputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Layer inputs recorded by a forward pass; entry `i` is the input to layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    /// Gradient with respect to the network input, `batch x inputs`.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&g| g == 0.0))
    }
}

impl Mlp {
    /// Builds a network from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.outputs() {
                return Err(Error::shape(l.outputs(), l.bias.len()));
            }
        }
        let net = Self { layers };
        if net
            .parameters()
            .iter()
            .any(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("network parameter".into()));
        }
        Ok(net)
    }

    /// Uniform initialization sized to fan-in: `sqrt(6 / fan_in)` for hidden layers,
    /// scaled down for the output layer. Biases start at zero.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "network dimensions {dims:?} must list at least input and output sizes, all positive"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let mut bound = (6.0 / d[0] as f64).sqrt();
                if i == last {
                    bound *= OUTPUT_INIT_GAIN;
                }
                Dense {
                    weights: Array2::from_shape_simple_fn((d[0], d[1]), || {
                        rng.gen_range(-bound..=bound)
                    }),
                    bias: Array1::zeros(d[1]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").outputs()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::outputs))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Weight and bias buffers of every layer, in order.
    pub fn parameters(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Forward pass over a `batch x inputs` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("{} input features", self.input_dim()),
                x.ncols(),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights);
            z += &layer.bias;
            if i + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut current, z));
        }
        Ok((current, ForwardCache { inputs }))
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, ForwardCache)> {
        let (out, cache) = self.forward_batch(x.insert_axis(Axis(0)))?;
        Ok((out.index_axis_move(Axis(0), 0), cache))
    }

    /// Backpropagates `grad_logits` (`batch x outputs`) through a matching forward cache.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: ArrayView2<f64>,
    ) -> Result<Gradients> {
        if cache.inputs.len() != self.layers.len()
            || grad_logits.dim() != (cache.batch_size(), self.output_dim())
        {
            return Err(Error::shape(
                format!("{} x {}", cache.batch_size(), self.output_dim()),
                format!("{:?}", grad_logits.dim()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let weights = input.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            let mut upstream = delta.dot(&layer.weights.t());
            if i > 0 {
                // the input to layer i is the rectified output of layer i-1
                upstream.zip_mut_with(input, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            grads.push(Dense { weights, bias });
            delta = upstream;
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: delta,
        })
    }
}
