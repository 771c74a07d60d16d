use ndarray::{s, Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::VelocityField;
use crate::ndcore::RandomSource;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

/// Shape of the velocity MLP: `[x; t] -> hidden... -> v`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(d: usize, hidden_widths: Vec<usize>) -> Result<Self> {
        let spec = Self { input_dim: d + 1, hidden_widths, output_dim: d, activation: Activation::Relu };
        spec.validate()?;
        Ok(spec)
    }

    /// Three hidden layers of width 512.
    pub fn paper_scale(d: usize) -> Self {
        Self::new(d, vec![512; 3]).unwrap()
    }

    /// Three hidden layers of width 128.
    pub fn desk_scale(d: usize) -> Self {
        Self::new(d, vec![128; 3]).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidInput("hidden_widths must be nonempty and positive".into()));
        }
        if self.output_dim == 0 || self.output_dim + 1 != self.input_dim {
            return Err(Error::InvalidInput(format!(
                "output_dim ({}) must equal input_dim ({}) - 1",
                self.output_dim, self.input_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every linear layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_widths);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn describe(&self) -> String {
        let w: Vec<String> = self.hidden_widths.iter().map(|w| w.to_string()).collect();
        format!("d={} layers={}", self.output_dim, w.join(","))
    }
}

/// Affine layer; `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Learned parameters of the velocity MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

/// Parameter gradient, shaped like [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter())).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied()).collect()
    }
}

struct Trace {
    /// Input of every layer; entry 0 is `[x; t]`, entry `l > 0` the ReLU
    /// output of hidden layer `l - 1`.
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ModelParams {
    /// All-zero parameters: the field is identically zero.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Layer { weight: Array2::zeros((o, i)), bias: Array1::zeros(o) })
            .collect();
        Self { spec: spec.clone(), layers }
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(spec: &ModelSpec, rng: &mut RandomSource) -> Self {
        let mut p = Self::zeros(spec);
        for l in &mut p.layers {
            let (o, i) = l.weight.dim();
            let limit = (6.0 / (i + o) as f64).sqrt();
            l.weight.mapv_inplace(|_| limit * (2.0 * rng.uniform() - 1.0));
        }
        p
    }

    pub fn from_layers(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::InvalidInput(format!("expected {} layers, got {}", shapes.len(), layers.len())));
        }
        for (k, ((i, o), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weight.dim() != (*o, *i) || l.bias.len() != *o {
                return Err(Error::InvalidInput(format!(
                    "layer {k}: expected weight {o}x{i} and bias {o}, got {:?} and {}",
                    l.weight.dim(),
                    l.bias.len()
                )));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Every parameter buffer in checkpoint order (weight then bias, layer by
    /// layer).
    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for b in self.buffers() {
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for b in self.buffers_mut() {
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range")
    }

    fn assemble_input(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        let d = self.spec.output_dim;
        assert_eq!(x.ncols(), d, "point dimension mismatch");
        let mut input = Array2::from_elem((x.nrows(), d + 1), t);
        input.slice_mut(s![.., ..d]).assign(x);
        input
    }

    fn affine(layer: &Layer, a: &Array2<f64>) -> Array2<f64> {
        let mut z = a.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    fn trace_input(&self, input: Array2<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(input);
        let (last, hidden) = self.layers.split_last().unwrap();
        for layer in hidden {
            let mut z = Self::affine(layer, inputs.last().unwrap());
            // ReLU; the subgradient at 0 is taken as 0.
            z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            inputs.push(z);
        }
        let output = Self::affine(last, inputs.last().unwrap());
        Trace { inputs, output }
    }

    /// Per-example times (one per row of `x`).
    fn trace_times(&self, t: &[f64], x: &Array2<f64>) -> Trace {
        let d = self.spec.output_dim;
        assert_eq!(t.len(), x.nrows());
        let mut input = Array2::zeros((x.nrows(), d + 1));
        input.slice_mut(s![.., ..d]).assign(x);
        input.column_mut(d).assign(&ndarray::ArrayView1::from(t));
        self.trace_input(input)
    }

    /// Batch forward pass with one time per row.
    pub fn forward_times(&self, t: &[f64], x: &Array2<f64>) -> Array2<f64> {
        self.trace_times(t, x).output
    }

    /// Single-point forward pass with input validation.
    pub fn forward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, 1]")));
        }
        if x.len() != self.spec.output_dim {
            return Err(Error::InvalidInput(format!("expected a {}-dimensional point", self.spec.output_dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input".into()));
        }
        let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        Ok(self.velocity(t, &xa).into_raw_vec_and_offset().0)
    }

    /// Mean over the batch of `||v(t_i, x_i) - target_i||^2` and its gradient.
    pub fn loss_and_gradient(&self, t: &[f64], x: &Array2<f64>, target: &Array2<f64>) -> (f64, Gradients) {
        assert!(x.nrows() > 0, "empty batch");
        assert_eq!(target.dim(), x.dim());
        let trace = self.trace_times(t, x);
        let b = x.nrows() as f64;
        let residual = &trace.output - target;
        let loss = residual.iter().map(|r| r * r).sum::<f64>() / b;

        let mut upstream = residual * (2.0 / b);
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let a = &trace.inputs[l];
            let weight = upstream.t().dot(a);
            let bias = upstream.sum_axis(Axis(0));
            grads.push(Layer { weight, bias });
            if l > 0 {
                let mut next = upstream.dot(&layer.weight);
                Zip::from(&mut next).and(a).for_each(|g, &act| {
                    if act <= 0.0 {
                        *g = 0.0;
                    }
                });
                upstream = next;
            }
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }

    /// Gradient of the mean squared residual over `(t_i, x_i, target_i)`.
    pub fn param_gradient(&self, t: &[f64], x: &Array2<f64>, target: &Array2<f64>) -> Result<Gradients> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if t.len() != x.nrows() || target.dim() != x.dim() || x.ncols() != self.spec.output_dim {
            return Err(Error::InvalidInput("batch shapes disagree".into()));
        }
        Ok(self.loss_and_gradient(t, x, target).1)
    }

    pub fn mean_squared_residual(&self, t: &[f64], x: &Array2<f64>, target: &Array2<f64>) -> f64 {
        let out = self.forward_times(t, x);
        (&out - target).iter().map(|r| r * r).sum::<f64>() / x.nrows() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Smallest |pre-activation| over all hidden units at the given inputs;
    /// used to keep finite-difference probes away from ReLU kinks.
    pub fn min_preactivation_margin(&self, t: &[f64], x: &Array2<f64>) -> f64 {
        let d = self.spec.output_dim;
        let mut a = Array2::zeros((x.nrows(), d + 1));
        a.slice_mut(s![.., ..d]).assign(x);
        a.column_mut(d).assign(&ndarray::ArrayView1::from(t));
        let mut margin = f64::INFINITY;
        for layer in &self.layers[..self.layers.len() - 1] {
            let z = Self::affine(layer, &a);
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.mapv(|v| v.max(0.0));
        }
        margin
    }
}

impl VelocityField for ModelParams {
    fn dim(&self) -> usize {
        self.spec.output_dim
    }

    fn velocity(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        self.trace_input(self.assemble_input(t, x)).output
    }

    fn velocity_jvps(&self, t: f64, x: &Array2<f64>, tangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        let trace = self.trace_input(self.assemble_input(t, x));
        let d = self.spec.output_dim;
        let (last, hidden) = self.layers.split_last().unwrap();
        let outs = tangents
            .iter()
            .map(|tan| {
                assert_eq!(tan.dim(), x.dim());
                // dt = 0: only the spatial columns of the first weight matter.
                let mut g = tan.dot(&hidden.first().unwrap_or(last).weight.slice(s![.., ..d]).t());
                for (l, layer) in hidden.iter().enumerate() {
                    if l > 0 {
                        g = g.dot(&layer.weight.t());
                    }
                    Zip::from(&mut g).and(&trace.inputs[l + 1]).for_each(|v, &act| {
                        if act <= 0.0 {
                            *v = 0.0;
                        }
                    });
                }
                if hidden.is_empty() {
                    g
                } else {
                    g.dot(&last.weight.t())
                }
            })
            .collect();
        (trace.output, outs)
    }

    fn velocity_vjps(&self, t: f64, x: &Array2<f64>, cotangents: &[Array2<f64>]) -> (Array2<f64>, Vec<Array2<f64>>) {
        let trace = self.trace_input(self.assemble_input(t, x));
        let d = self.spec.output_dim;
        let outs = cotangents
            .iter()
            .map(|cot| {
                assert_eq!(cot.dim(), x.dim());
                let mut g = cot.clone();
                for l in (1..self.layers.len()).rev() {
                    g = g.dot(&self.layers[l].weight);
                    Zip::from(&mut g).and(&trace.inputs[l]).for_each(|v, &act| {
                        if act <= 0.0 {
                            *v = 0.0;
                        }
                    });
                }
                g.dot(&self.layers[0].weight.slice(s![.., ..d]))
            })
            .collect();
        (trace.output, outs)
    }
}
