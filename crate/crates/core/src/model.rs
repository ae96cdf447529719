//! Fully connected rectifier network used as a client's local classifier.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed;

/// One affine layer, `y = x W + b`, with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, rng: &mut seed::Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
        let b = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..bound));
        Dense { w, b }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// MLP `d_in -> hidden^depth -> classes` with rectifier activations.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModelParams {
    layers: Vec<Dense>,
}

/// Allowed numbers of hidden layers.
pub const DEPTHS: [usize; 3] = [2, 3, 4];

impl LocalModelParams {
    pub fn init(d_in: usize, hidden: usize, depth: usize, classes: usize, seed: u64) -> Result<Self> {
        if !DEPTHS.contains(&depth) {
            return Err(Error::InvalidInput(format!("depth must be one of {DEPTHS:?}, got {depth}")));
        }
        if d_in == 0 || hidden == 0 || classes < 2 {
            return Err(Error::InvalidInput(format!(
                "bad model shape d_in={d_in}, hidden={hidden}, classes={classes}"
            )));
        }
        let mut rng = seed::rng(seed);
        let mut layers = Vec::with_capacity(depth + 1);
        let mut fan_in = d_in;
        for _ in 0..depth {
            layers.push(Dense::init(fan_in, hidden, &mut rng));
            fan_in = hidden;
        }
        layers.push(Dense::init(fan_in, classes, &mut rng));
        Ok(LocalModelParams { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::InvalidInput("need at least one hidden layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].w.ncols() != pair[1].w.nrows() {
                return Err(Error::Shape("consecutive layer widths disagree".into()));
            }
        }
        for l in &layers {
            if l.w.ncols() != l.b.len() {
                return Err(Error::Shape("bias length differs from layer width".into()));
            }
        }
        Ok(LocalModelParams { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        LocalModelParams {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Logits for every row of `x`.
    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.w) + &l.b;
            if i < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    /// Forward pass keeping every layer input for the backward pass.
    pub(crate) fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.dot(&l.w) + &l.b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(h);
            h = z;
        }
        (inputs, h)
    }

    /// Gradient of the loss given its derivative w.r.t. the logits.
    pub(crate) fn backward(&self, inputs: &[Array2<f64>], dlogits: Array2<f64>) -> LocalModelParams {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dlogits;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &inputs[i];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense { w: gw, b: gb });
            if i > 0 {
                let mut back = delta.dot(&l.w.t());
                // inputs[i] is the rectified output of layer i-1
                ndarray::Zip::from(&mut back).and(input).for_each(|d, a| {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        LocalModelParams { layers: grads }
    }

    /// `self -= lr * grad`.
    pub(crate) fn apply(&mut self, grad: &LocalModelParams, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.w.scaled_add(-lr, &g.w);
            l.b.scaled_add(-lr, &g.b);
        }
    }
}
