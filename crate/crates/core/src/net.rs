//! Dense feed-forward networks with exact reverse-mode gradients and ADAM.
//!
//! Parameters live in one flat buffer. Layer `k` occupies
//! `[W_k (out × in, row-major), b_k (out)]`, laid out in layer order; the
//! same layout is used for [`Gradients`] and the ADAM moments.

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative; the relu kink at exactly zero gets 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// One affine layer with identity activation: `f(x) = w·x + b`.
pub fn linear(input_dim: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::new(input_dim, 1, Activation::Identity)]
}

/// Three dense layers, two hidden relu layers of width `hidden`.
pub fn relu_mlp(input_dim: usize, hidden: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(input_dim, hidden, Activation::Relu),
        LayerSpec::new(hidden, hidden, Activation::Relu),
        LayerSpec::new(hidden, 1, Activation::Identity),
    ]
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Dimension("network needs at least one layer".into()));
    }
    for (k, layer) in specs.iter().enumerate() {
        if layer.input_dim == 0 || layer.output_dim == 0 {
            return Err(Error::Dimension(format!("layer {k} has a zero dimension")));
        }
    }
    for (k, pair) in specs.windows(2).enumerate() {
        if pair[0].output_dim != pair[1].input_dim {
            return Err(Error::Dimension(format!(
                "layer {k} outputs {} values but layer {} expects {}",
                pair[0].output_dim,
                k + 1,
                pair[1].input_dim
            )));
        }
    }
    let last = specs[specs.len() - 1];
    if last.output_dim != 1 {
        return Err(Error::Dimension(format!(
            "final layer must have a single output, got {}",
            last.output_dim
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<LayerSpec>,
    params: Vec<f64>,
}

/// Shape-congruent with [`Mlp`]'s parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(Vec<f64>);

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Gradients(vec![0.0; model.params.len()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }
}

/// Per-layer forward caches reused across samples.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Workspace {
    /// Pre-activations of the last [`Mlp::forward_train`] call, per layer.
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

impl Mlp {
    /// Builds a network with weights uniform in `[-1/√fan_in, 1/√fan_in]`
    /// and zero biases, drawn from the `Init` stream of `seed`.
    pub fn new(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut params = Vec::with_capacity(specs.iter().map(LayerSpec::param_count).sum());
        for layer in specs {
            let limit = 1.0 / (layer.input_dim as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            params.extend((0..layer.input_dim * layer.output_dim).map(|_| dist.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, layer.output_dim));
        }
        Ok(Self {
            layers: specs.to_vec(),
            params,
        })
    }

    /// Builds a network from explicit parameters in the flat layout.
    pub fn from_params(specs: &[LayerSpec], params: Vec<f64>) -> Result<Self> {
        validate_specs(specs)?;
        let expected: usize = specs.iter().map(LayerSpec::param_count).sum();
        if params.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Data("non-finite parameter".into()));
        }
        Ok(Self {
            layers: specs.to_vec(),
            params,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        self.layers[..layer]
            .iter()
            .map(LayerSpec::param_count)
            .sum()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let start = self.offset(layer);
        let spec = self.layers[layer];
        &self.params[start..start + spec.input_dim * spec.output_dim]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let spec = self.layers[layer];
        let start = self.offset(layer) + spec.input_dim * spec.output_dim;
        &self.params[start..start + spec.output_dim]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        let mut offset = 0;
        for layer in &self.layers {
            let (w, b) = self.layer_params(offset, layer);
            next.clear();
            for o in 0..layer.output_dim {
                let row = &w[o * layer.input_dim..(o + 1) * layer.input_dim];
                let z = dot(row, &current) + b[o];
                next.push(layer.activation.apply(z));
            }
            std::mem::swap(&mut current, &mut next);
            offset += layer.param_count();
        }
        Ok(current[0])
    }

    /// Forward pass that keeps the per-layer caches for [`Mlp::backward_into`].
    pub fn forward_train(&self, x: &[f64], ws: &mut Workspace) -> Result<f64> {
        self.check_input(x)?;
        let depth = self.layers.len();
        ws.pre.resize(depth, Vec::new());
        ws.post.resize(depth, Vec::new());
        ws.input.clear();
        ws.input.extend_from_slice(x);
        let mut offset = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            let (w, b) = self.layer_params(offset, layer);
            let (before, after) = ws.post.split_at_mut(k);
            let input: &[f64] = if k == 0 { &ws.input } else { &before[k - 1] };
            let pre = &mut ws.pre[k];
            let post = &mut after[0];
            pre.clear();
            post.clear();
            for o in 0..layer.output_dim {
                let row = &w[o * layer.input_dim..(o + 1) * layer.input_dim];
                let z = dot(row, input) + b[o];
                pre.push(z);
                post.push(layer.activation.apply(z));
            }
            offset += layer.param_count();
        }
        Ok(ws.post[depth - 1][0])
    }

    /// Adds `upstream · ∂f/∂θ` at the sample cached in `ws` to `grads`.
    pub fn backward_into(&self, ws: &mut Workspace, upstream: f64, grads: &mut Gradients) {
        debug_assert_eq!(grads.len(), self.params.len());
        let depth = self.layers.len();
        let mut offset = self.params.len();
        ws.delta.clear();
        let last = self.layers[depth - 1];
        ws.delta.extend(
            ws.pre[depth - 1]
                .iter()
                .map(|&z| upstream * last.activation.derivative(z)),
        );

        for k in (0..depth).rev() {
            let layer = self.layers[k];
            offset -= layer.param_count();
            let n_w = layer.input_dim * layer.output_dim;
            let input: &[f64] = if k == 0 { &ws.input } else { &ws.post[k - 1] };
            {
                let g = &mut grads.0[offset..offset + layer.param_count()];
                let (gw, gb) = g.split_at_mut(n_w);
                for (o, &d) in ws.delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * layer.input_dim..(o + 1) * layer.input_dim];
                    for (gi, &a) in row.iter_mut().zip(input) {
                        *gi += d * a;
                    }
                    gb[o] += d;
                }
            }
            if k > 0 {
                let w = &self.params[offset..offset + n_w];
                let below = self.layers[k - 1].activation;
                ws.delta_next.clear();
                ws.delta_next.resize(layer.input_dim, 0.0);
                for (o, &d) in ws.delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &w[o * layer.input_dim..(o + 1) * layer.input_dim];
                    for (acc, &wi) in ws.delta_next.iter_mut().zip(row) {
                        *acc += wi * d;
                    }
                }
                for (acc, &z) in ws.delta_next.iter_mut().zip(&ws.pre[k - 1]) {
                    *acc *= below.derivative(z);
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_next);
            }
        }
    }

    /// `upstream · ∂f(x)/∂θ` as a fresh gradient buffer.
    pub fn backward(&self, x: &[f64], upstream: f64) -> Result<Gradients> {
        let mut ws = Workspace::default();
        let mut grads = Gradients::zeros_like(self);
        self.forward_train(x, &mut ws)?;
        self.backward_into(&mut ws, upstream, &mut grads);
        Ok(grads)
    }

    fn layer_params(&self, offset: usize, layer: &LayerSpec) -> (&[f64], &[f64]) {
        let n_w = layer.input_dim * layer.output_dim;
        let w = &self.params[offset..offset + n_w];
        let b = &self.params[offset + n_w..offset + layer.param_count()];
        (w, b)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// ADAM moments for one model.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &Mlp, config: AdamConfig) -> Self {
        Self::for_len(model.param_count(), config)
    }

    pub fn for_len(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected ADAM update. Non-finite gradients are rejected
    /// before anything is touched.
    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        self.step_params(&mut model.params, grads.as_slice())
    }

    pub fn step_params(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "adam state has {} entries, parameters {}, gradients {}",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(w: f64, b: f64) -> Mlp {
        Mlp::from_params(&linear(1), vec![w, b]).unwrap()
    }

    #[test]
    fn linear_model_shape() {
        let m = Mlp::new(&linear(1), 7).unwrap();
        assert_eq!(m.param_count(), 2);
        assert_eq!(m.biases(0), &[0.0]);
        assert!(m.weights(0)[0].abs() <= 1.0);
    }

    #[test]
    fn same_seed_same_model() {
        let specs = relu_mlp(1, 64);
        let a = Mlp::new(&specs, 11).unwrap();
        let b = Mlp::new(&specs, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Mlp::new(&specs, 12).unwrap());
    }

    #[test]
    fn three_layer_parameter_count() {
        // (1·64 + 64) + (64·64 + 64) + (64·1 + 1)
        let m = Mlp::new(&relu_mlp(1, 64), 0).unwrap();
        assert_eq!(m.param_count(), 128 + 4160 + 65);
        assert_eq!(m.param_count(), 4353);
    }

    #[test]
    fn init_within_fan_in_bounds() {
        let m = Mlp::new(&relu_mlp(3, 16), 5).unwrap();
        for k in 0..3 {
            let limit = 1.0 / (m.layers()[k].input_dim as f64).sqrt();
            assert!(m.weights(k).iter().all(|w| w.abs() <= limit));
            assert!(m.biases(k).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn rejects_broken_chains() {
        let specs = vec![
            LayerSpec::new(1, 4, Activation::Relu),
            LayerSpec::new(5, 1, Activation::Identity),
        ];
        assert!(matches!(Mlp::new(&specs, 0), Err(Error::Dimension(_))));
        assert!(Mlp::new(&[LayerSpec::new(0, 1, Activation::Identity)], 0).is_err());
        assert!(Mlp::new(&[LayerSpec::new(2, 2, Activation::Identity)], 0).is_err());
        assert!(Mlp::new(&[], 0).is_err());
    }

    #[test]
    fn affine_forward() {
        assert_eq!(affine(2.0, 1.0).forward(&[3.0]).unwrap(), 7.0);
    }

    #[test]
    fn wrong_input_length() {
        let m = affine(2.0, 1.0);
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(Error::Dimension(_))));
        assert!(m.backward(&[], 1.0).is_err());
    }

    #[test]
    fn relu_blocks_negative_preactivations() {
        // hidden units all see negative inputs, so the output is the bias alone
        let specs = vec![
            LayerSpec::new(1, 2, Activation::Relu),
            LayerSpec::new(2, 1, Activation::Identity),
        ];
        let m = Mlp::from_params(&specs, vec![1.0, 2.0, -0.5, -0.5, 3.0, 4.0, 0.25]).unwrap();
        assert_eq!(m.forward(&[0.1]).unwrap(), 0.25);
        let g = m.backward(&[0.1], 1.0).unwrap();
        // first layer gets nothing through the dead units
        assert!(g.as_slice()[..4].iter().all(|&v| v == 0.0));
        assert_eq!(&g.as_slice()[4..6], &[0.0, 0.0]);
        assert_eq!(g.as_slice()[6], 1.0);
    }

    #[test]
    fn relu_kink_derivative_is_zero() {
        let specs = vec![
            LayerSpec::new(1, 1, Activation::Relu),
            LayerSpec::new(1, 1, Activation::Identity),
        ];
        let m = Mlp::from_params(&specs, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let g = m.backward(&[0.0], 1.0).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_backward() {
        let g = affine(0.3, -1.0).backward(&[3.0], 1.0).unwrap();
        assert_eq!(g.as_slice(), &[3.0, 1.0]);
        let zero = affine(0.3, -1.0).backward(&[3.0], 0.0).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut m = affine(1.5, -2.0);
        let mut state = AdamState::new(&m, AdamConfig::default());
        let zero = Gradients::zeros_like(&m);
        state.step(&mut m, &zero).unwrap();
        assert_eq!(m.params(), &[1.5, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let lr = 0.01;
        for g in [3.0, -0.2, 1e-3] {
            let mut params = [0.0];
            let mut state = AdamState::for_len(1, AdamConfig::with_learning_rate(lr));
            state.step_params(&mut params, &[g]).unwrap();
            let expected = -f64::signum(g) * lr / (1.0 + 1e-8 / g.abs());
            assert!(
                (params[0] - expected).abs() < 1e-15,
                "{} vs {}",
                params[0],
                expected
            );
        }
    }

    #[test]
    fn adam_solves_scalar_quadratic() {
        let mut theta = [0.0];
        let mut state = AdamState::for_len(1, AdamConfig::with_learning_rate(0.1));
        for _ in 0..2000 {
            let g = 2.0 * (theta[0] - 5.0);
            state.step_params(&mut theta, &[g]).unwrap();
        }
        assert!((theta[0] - 5.0).abs() < 1e-3, "theta = {}", theta[0]);
    }

    #[test]
    fn adam_rejects_non_finite_and_leaves_model() {
        let mut m = affine(1.0, 1.0);
        let mut state = AdamState::new(&m, AdamConfig::default());
        let mut g = Gradients::zeros_like(&m);
        g.as_mut_slice()[1] = f64::NAN;
        assert!(matches!(
            state.step(&mut m, &g),
            Err(Error::NonFiniteGradient { index: 1 })
        ));
        assert_eq!(m.params(), &[1.0, 1.0]);
        assert_eq!(state.step_count(), 0);
    }
}
