//! Per-agent neural observable `g(y, θ)` with manual backpropagation.
//!
//! The final layer maps its pre-activation `z` to `tanh(z) / √r` elementwise, so
//! every output has Euclidean norm at most one regardless of parameters.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DdklError, Result};
use crate::scalar::Real;

const CHECKPOINT_MAGIC: &str = "ddkl-observable-net";
const CHECKPOINT_VERSION: u32 = 2;

/// Elementwise layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    /// `tanh(z) / √width`, the norm-bounding output stage.
    BoundedTanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::BoundedTanh => "bounded-tanh",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            "bounded-tanh" => Ok(Activation::BoundedTanh),
            other => Err(DdklError::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// Scale of the bounded output stage. Slightly below `1/√width` so that the
/// rounded norm never exceeds one.
fn bound_scale<T: Real>(width: usize) -> T {
    let w = T::from_count(width);
    (T::one() - T::lit(4.0) * w * T::machine_eps()) / w.sqrt()
}

/// Feed-forward observable network with a flat parameter vector.
///
/// Layer `l` stores its weight matrix (column-major, `out x in`) followed by its
/// bias vector. Inputs pass through a fixed affine standardization
/// `(y − shift) / scale` before the first layer; it is not part of `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableNet<T: Real> {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    theta: Vec<T>,
    shift: Vec<T>,
    scale: Vec<T>,
    version: u64,
}

/// Gradient accumulator aligned with the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer<T: Real> {
    pub values: Vec<T>,
    /// Number of samples that contributed.
    pub samples: usize,
}

impl<T: Real> GradientBuffer<T> {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![T::zero(); len], samples: 0 }
    }

    pub fn zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = T::zero());
        self.samples = 0;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    /// Layer inputs `a_0 .. a_L` (`a_0` is the network input).
    activations: Vec<DMatrix<T>>,
    /// Pre-activations `z_1 .. z_L`.
    pre: Vec<DMatrix<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Network output for every input column.
    pub fn output(&self) -> &DMatrix<T> {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl<T: Real> ObservableNet<T> {
    /// Network with `hidden` activation on every hidden layer and the bounded
    /// output stage, parameters set to zero.
    pub fn zeros(input: usize, hidden: &[usize], output: usize, hidden_act: Activation) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(DdklError::InvalidInput("layer widths must be positive".into()));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut activations = vec![hidden_act; hidden.len()];
        activations.push(Activation::BoundedTanh);
        let count = param_count(&widths);
        Ok(Self {
            widths,
            activations,
            theta: vec![T::zero(); count],
            shift: vec![T::zero(); input],
            scale: vec![T::one(); input],
            version: 0,
        })
    }

    /// ReLU network with Glorot-uniform weights and biases drawn from
    /// `U(±1/√fan_in)`. Zero biases would make the hidden map positively
    /// homogeneous, which collapses the lifts of scalar observations onto two
    /// directions.
    pub fn glorot(input: usize, hidden: &[usize], output: usize, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(input, hidden, output, Activation::Relu)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for l in 0..net.layers() {
            let (fan_in, fan_out) = (net.widths[l], net.widths[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut net.theta[offset..offset + fan_in * fan_out] {
                *w = T::lit(rng.random_range(-limit..=limit));
            }
            offset += fan_in * fan_out;
            let bias_limit = 1.0 / (fan_in as f64).sqrt();
            for b in &mut net.theta[offset..offset + fan_out] {
                *b = T::lit(rng.random_range(-bias_limit..=bias_limit));
            }
            offset += fan_out;
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// `(shift, scale)` of the input standardization.
    pub fn input_standardization(&self) -> (&[T], &[T]) {
        (&self.shift, &self.scale)
    }

    pub fn set_input_standardization(&mut self, shift: Vec<T>, scale: Vec<T>) -> Result<()> {
        if shift.len() != self.input_dim() || scale.len() != self.input_dim() {
            return Err(DdklError::dims("input standardization", self.input_dim(), shift.len().max(scale.len())));
        }
        if scale.iter().chain(&shift).any(|v| !v.is_finite()) || scale.iter().any(|v| *v <= T::zero()) {
            return Err(DdklError::InvalidInput("standardization needs finite shifts and positive scales".into()));
        }
        self.shift = shift;
        self.scale = scale;
        self.version += 1;
        Ok(())
    }

    /// Standardizes each input coordinate to zero mean and unit variance over
    /// the columns of `samples`. Constant coordinates keep unit scale.
    pub fn standardize_to(&mut self, samples: &DMatrix<T>) -> Result<()> {
        if samples.nrows() != self.input_dim() || samples.ncols() == 0 {
            return Err(DdklError::dims("standardization samples", self.input_dim(), samples.nrows()));
        }
        let count = T::from_count(samples.ncols());
        let (mut shift, mut scale) = (Vec::new(), Vec::new());
        for row in samples.row_iter() {
            let mean = row.sum() / count;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / count;
            let sd = var.sqrt();
            shift.push(mean);
            scale.push(if sd > T::lit(1e-12) * (T::one() + mean.abs()) { sd } else { T::one() });
        }
        self.set_input_standardization(shift, scale)
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    /// Monotone counter bumped on every parameter change.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_theta(&mut self, theta: Vec<T>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(DdklError::dims("parameter vector", self.theta.len(), theta.len()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(DdklError::InvalidInput("parameters must be finite".into()));
        }
        self.theta = theta;
        self.version += 1;
        Ok(())
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.widths[..=layer])
    }

    fn weight(&self, layer: usize) -> DMatrixView<'_, T> {
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer);
        DMatrixView::from_slice(&self.theta[off..off + fan_in * fan_out], fan_out, fan_in)
    }

    fn bias(&self, layer: usize) -> &[T] {
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer) + fan_in * fan_out;
        &self.theta[off..off + fan_out]
    }

    /// `g(y, θ)` for a single input.
    pub fn forward(&self, y: &DVector<T>) -> Result<DVector<T>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    /// `g` applied to every column of `inputs`.
    pub fn forward_batch(&self, inputs: &DMatrix<T>) -> Result<DMatrix<T>> {
        let cache = self.forward_cached(inputs)?;
        Ok(cache.activations.into_iter().last().expect("non-empty"))
    }

    /// Forward pass retaining intermediate values.
    pub fn forward_cached(&self, inputs: &DMatrix<T>) -> Result<ForwardCache<T>> {
        if inputs.nrows() != self.input_dim() {
            return Err(DdklError::dims("observable input", self.input_dim(), inputs.nrows()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(DdklError::InvalidInput("observable input contains non-finite entries".into()));
        }
        let mut activations = Vec::with_capacity(self.layers() + 1);
        let mut pre = Vec::with_capacity(self.layers());
        let mut standardized = inputs.clone();
        for (mut row, (&c, &d)) in standardized.row_iter_mut().zip(self.shift.iter().zip(&self.scale)) {
            row.iter_mut().for_each(|v| *v = (*v - c) / d);
        }
        activations.push(standardized);
        for l in 0..self.layers() {
            let mut z = self.weight(l) * &activations[l];
            let b = self.bias(l);
            for mut col in z.column_iter_mut() {
                col.iter_mut().zip(b).for_each(|(v, &bi)| *v += bi);
            }
            let a = self.apply(l, &z);
            pre.push(z);
            activations.push(a);
        }
        Ok(ForwardCache { activations, pre })
    }

    fn apply(&self, layer: usize, z: &DMatrix<T>) -> DMatrix<T> {
        match self.activations[layer] {
            Activation::Relu => z.map(|v| v.max(T::zero())),
            Activation::Identity => z.clone(),
            Activation::BoundedTanh => {
                let s = bound_scale::<T>(self.widths[layer + 1]);
                z.map(|v| v.tanh() * s)
            }
        }
    }

    fn derivative(&self, layer: usize, z: &DMatrix<T>) -> DMatrix<T> {
        match self.activations[layer] {
            Activation::Relu => z.map(|v| if v > T::zero() { T::one() } else { T::zero() }),
            Activation::Identity => z.map(|_| T::one()),
            Activation::BoundedTanh => {
                let s = bound_scale::<T>(self.widths[layer + 1]);
                z.map(|v| {
                    let t = v.tanh();
                    (T::one() - t * t) * s
                })
            }
        }
    }

    /// Gradient of a scalar objective with respect to θ given `upstream`, the
    /// derivative of the objective with respect to every output column.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &DMatrix<T>) -> Result<GradientBuffer<T>> {
        let out = cache.output();
        if upstream.shape() != out.shape() {
            return Err(DdklError::dims(
                "upstream gradient",
                format!("{}x{}", out.nrows(), out.ncols()),
                format!("{}x{}", upstream.nrows(), upstream.ncols()),
            ));
        }
        let mut grad = GradientBuffer::zeros(self.param_count());
        grad.samples = upstream.ncols();
        let mut delta = upstream.component_mul(&self.derivative(self.layers() - 1, &cache.pre[self.layers() - 1]));
        for l in (0..self.layers()).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let off = self.layer_offset(l);
            let dw = &delta * cache.activations[l].transpose();
            grad.values[off..off + fan_in * fan_out].copy_from_slice(dw.as_slice());
            for (row, g) in grad.values[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
                .iter_mut()
                .enumerate()
            {
                *g = delta.row(row).iter().fold(T::zero(), |acc, &v| acc + v);
            }
            if l > 0 {
                let back = self.weight(l).transpose() * &delta;
                delta = back.component_mul(&self.derivative(l - 1, &cache.pre[l - 1]));
            }
        }
        Ok(grad)
    }

    /// Serializes architecture and parameters as versioned text.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let widths: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "widths {}", widths.join(" "));
        let acts: Vec<&str> = self.activations.iter().map(|a| a.tag()).collect();
        let _ = writeln!(out, "activations {}", acts.join(" "));
        let join = |v: &[T]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "shift {}", join(&self.shift));
        let _ = writeln!(out, "scale {}", join(&self.scale));
        let _ = writeln!(out, "parameters {}", self.theta.len());
        for v in &self.theta {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| DdklError::Parse(format!("missing `{key}` line")))?;
            let mut fields = line.split_whitespace();
            if fields.next() != Some(key) {
                return Err(DdklError::Parse(format!("expected `{key}`, found `{line}`")));
            }
            Ok(fields.map(str::to_string).collect())
        };
        let version = header(CHECKPOINT_MAGIC)?;
        if version != [CHECKPOINT_VERSION.to_string()] {
            return Err(DdklError::Parse(format!("unsupported checkpoint version {version:?}")));
        }
        let widths = header("widths")?
            .iter()
            .map(|w| w.parse::<usize>().map_err(|e| DdklError::Parse(format!("width `{w}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let activations = header("activations")?
            .iter()
            .map(|a| Activation::from_tag(a))
            .collect::<Result<Vec<_>>>()?;
        let floats = |fields: Vec<String>| -> Result<Vec<T>> {
            fields
                .iter()
                .map(|f| f.parse::<T>().map_err(|_| DdklError::Parse(format!("bad standardization value `{f}`"))))
                .collect()
        };
        let shift = floats(header("shift")?)?;
        let scale = floats(header("scale")?)?;
        let count: usize = header("parameters")?
            .first()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| DdklError::Parse("bad parameter count".into()))?;
        if widths.len() < 2 || activations.len() != widths.len() - 1 || widths.contains(&0) {
            return Err(DdklError::Parse("inconsistent architecture header".into()));
        }
        if activations.last() != Some(&Activation::BoundedTanh) {
            return Err(DdklError::Parse("final layer must be bounded-tanh".into()));
        }
        if count != param_count(&widths) {
            return Err(DdklError::Parse(format!(
                "parameter count {count} does not match architecture ({})",
                param_count(&widths)
            )));
        }
        let theta = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<T>().map_err(|_| DdklError::Parse(format!("bad parameter `{l}`"))))
            .collect::<Result<Vec<T>>>()?;
        if theta.len() != count {
            return Err(DdklError::Parse(format!("expected {count} parameters, found {}", theta.len())));
        }
        let input = widths[0];
        let mut net = Self {
            widths,
            activations,
            theta: vec![T::zero(); count],
            shift: vec![T::zero(); input],
            scale: vec![T::one(); input],
            version: 0,
        };
        net.set_input_standardization(shift, scale)?;
        net.set_theta(theta)?;
        net.version = 0;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `θ ← θ − α·grad`.
pub fn sgd_step<T: Real>(net: &mut ObservableNet<T>, grad: &GradientBuffer<T>, alpha: T) -> Result<()> {
    check_grad(net, grad)?;
    net.theta.iter_mut().zip(&grad.values).for_each(|(t, &g)| *t -= alpha * g);
    net.version += 1;
    Ok(())
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
pub fn adam_step<T: Real>(
    net: &mut ObservableNet<T>,
    grad: &GradientBuffer<T>,
    params: &AdamParams,
    state: &mut AdamState<T>,
) -> Result<()> {
    check_grad(net, grad)?;
    if state.m.len() != net.param_count() {
        return Err(DdklError::dims("adam state", net.param_count(), state.m.len()));
    }
    state.t += 1;
    let (b1, b2) = (T::lit(params.beta1), T::lit(params.beta2));
    let lr = T::lit(params.lr);
    let decay = T::one() - lr * T::lit(params.weight_decay);
    let c1 = T::one() - T::lit(params.beta1.powi(state.t as i32));
    let c2 = T::one() - T::lit(params.beta2.powi(state.t as i32));
    let eps = T::lit(params.eps);
    for (((theta, &g), m), v) in net
        .theta
        .iter_mut()
        .zip(&grad.values)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *theta = *theta * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    net.version += 1;
    Ok(())
}

fn check_grad<T: Real>(net: &ObservableNet<T>, grad: &GradientBuffer<T>) -> Result<()> {
    if grad.len() != net.param_count() {
        return Err(DdklError::dims("gradient", net.param_count(), grad.len()));
    }
    Ok(())
}

/// Parameter update rule.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T: Real> {
    /// Constant-step gradient descent.
    Gd { alpha: T },
    Adam { params: AdamParams, state: AdamState<T> },
}

impl<T: Real> Optimizer<T> {
    pub fn adam(params: AdamParams, len: usize) -> Self {
        Optimizer::Adam { params, state: AdamState::new(len) }
    }

    pub fn step(&mut self, net: &mut ObservableNet<T>, grad: &GradientBuffer<T>) -> Result<()> {
        match self {
            Optimizer::Gd { alpha } => sgd_step(net, grad, *alpha),
            Optimizer::Adam { params, state } => adam_step(net, grad, params, state),
        }
    }
}
