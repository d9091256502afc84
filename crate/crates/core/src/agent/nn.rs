//! Fully connected layers with hand-written backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// He-uniform weights scaled by `gain`, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, gain: f64, rng: &mut R) -> Self {
        let limit = gain * (6.0 / input.max(1) as f64).sqrt();
        let weights = Array2::from_shape_fn((output, input), |_| rng.random_range(-limit..=limit));
        Dense {
            weights,
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Dense {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
}

/// Layer inputs and pre-activations saved by [`DenseNet::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Gradients shaped like a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl DenseGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        DenseGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        for (w, b) in &self.layers {
            f(w.as_slice().expect("contiguous"));
            f(b.as_slice().expect("contiguous"));
        }
    }
}

impl DenseNet {
    /// `dims = [in, h1, ..., out]`. Hidden layers use ReLU, the last layer
    /// `out_activation` with its init scaled by `out_gain`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], out_activation: Activation, out_gain: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "a net needs at least one layer");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i == last {
                    Dense::new(w[0], w[1], out_activation, out_gain, rng)
                } else {
                    Dense::new(w[0], w[1], Activation::Relu, 1.0, rng)
                }
            })
            .collect();
        DenseNet { layers }
    }

    pub fn zeros(dims: &[usize], out_activation: Activation) -> Self {
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { out_activation } else { Activation::Relu };
                Dense::zeros(w[0], w[1], act)
            })
            .collect();
        DenseNet { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    fn affine(layer: &Dense, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weights.t());
        z += &layer.bias;
        z
    }

    fn activate(act: Activation, z: &Array2<f64>) -> Array2<f64> {
        match act {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::None => z.clone(),
        }
    }

    /// Batch-major forward pass, `x` is `batch x in`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.clone();
        for layer in &self.layers {
            let z = Self::affine(layer, &a);
            a = match layer.activation {
                Activation::Relu => z.mapv_into(|v| v.max(0.0)),
                Activation::None => z,
            };
        }
        a
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x;
        for layer in &self.layers {
            let z = Self::affine(layer, &a);
            let next = Self::activate(layer.activation, &z);
            cache.inputs.push(a);
            cache.pre.push(z);
            a = next;
        }
        (a, cache)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: Array2<f64>, grads: &mut DenseGrads) -> Array2<f64> {
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                g.zip_mut_with(&cache.pre[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let (dw, db) = &mut grads.layers[i];
            *dw += &g.t().dot(&cache.inputs[i]);
            *db += &g.sum_axis(Axis(0));
            g = g.dot(&layer.weights);
        }
        g
    }

    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        for l in &self.layers {
            f(l.weights.as_slice().expect("contiguous"));
            f(l.bias.as_slice().expect("contiguous"));
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weights.as_slice_mut().expect("contiguous"));
            f(l.bias.as_slice_mut().expect("contiguous"));
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent, `p -= lr * g`.
    #[default]
    Sgd,
}

/// Adam or plain gradient descent over a flat parameter sequence.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `grads` and the chunks handed to `params` must come in the same order.
    pub fn step(&mut self, lr: f64, grads: &[f64], params: impl FnOnce(&mut dyn FnMut(&mut [f64]))) {
        if self.kind == OptimizerKind::Adam && self.m.len() != grads.len() {
            self.m = vec![0.0; grads.len()];
            self.v = vec![0.0; grads.len()];
            self.t = 0;
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let kind = self.kind;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut at = 0;
        params(&mut |chunk: &mut [f64]| {
            for p in chunk.iter_mut() {
                let g = grads[at];
                match kind {
                    OptimizerKind::Sgd => *p -= lr * g,
                    OptimizerKind::Adam => {
                        m[at] = b1 * m[at] + (1.0 - b1) * g;
                        v[at] = b2 * v[at] + (1.0 - b2) * g * g;
                        *p -= lr * (m[at] / c1) / ((v[at] / c2).sqrt() + eps);
                    }
                }
                at += 1;
            }
        });
        debug_assert_eq!(at, grads.len());
    }
}
