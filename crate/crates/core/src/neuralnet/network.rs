use crate::error::{Error, Result};
use crate::tensor::RngStream;

use super::layers::{Layer, LayerSpec, Param, RefNorm, Shape};

/// Sequential network over fixed-shape inputs.
#[derive(Debug, Clone)]
pub struct Network {
    input: Shape,
    pub(crate) layers: Vec<Layer>,
    cached_batch: Option<usize>,
}

impl Network {
    pub fn new(input: Shape, specs: &[LayerSpec], rng: &mut RngStream) -> Result<Self> {
        let mut shape = input;
        let mut layers = Vec::with_capacity(specs.len());
        for &spec in specs {
            let layer = Layer::build(shape, spec, rng)?;
            shape = layer.output_shape();
            layers.push(layer);
        }
        Ok(Self { input, layers, cached_batch: None })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.layers.last().map_or(self.input, Layer::output_shape)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    fn check_input(&self, x: &[f64], n: usize) -> Result<()> {
        if n == 0 || x.len() != n * self.input.len() {
            return Err(Error::dim(format!(
                "network expects {n} samples of {} values ({}), got {} values",
                self.input.len(),
                self.input,
                x.len()
            )));
        }
        Ok(())
    }

    /// Inference on a batch of `n` samples; does not mutate the network.
    pub fn infer(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        self.check_input(x, n)?;
        let mut h = x.to_vec();
        for l in &self.layers {
            h = l.infer(&h, n);
        }
        Ok(h)
    }

    /// Training-mode forward pass that caches activations for
    /// [`Network::backward`].
    pub fn forward(&mut self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        self.run_forward(x, n, false)
    }

    /// Forward pass that recomputes every normalization layer's reference
    /// statistics from this batch before applying it.
    pub fn calibrate(&mut self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        self.run_forward(x, n, true)
    }

    fn run_forward(&mut self, x: &[f64], n: usize, calibrate: bool) -> Result<Vec<f64>> {
        self.check_input(x, n)?;
        let mut h = x.to_vec();
        for l in self.layers.iter_mut() {
            h = l.forward(&h, n, calibrate);
        }
        self.cached_batch = Some(n);
        Ok(h)
    }

    /// Backpropagates `dy` (gradient w.r.t. the last forward output),
    /// accumulating parameter gradients and returning the input gradient.
    pub fn backward(&mut self, dy: &[f64]) -> Result<Vec<f64>> {
        let n = match self.cached_batch {
            Some(n) if self.layers.iter().all(Layer::has_cache) => n,
            _ => return Err(Error::State("backward called without a cached training forward pass".into())),
        };
        if dy.len() != n * self.output_shape().len() {
            return Err(Error::dim(format!(
                "upstream gradient has {} values, expected {}",
                dy.len(),
                n * self.output_shape().len()
            )));
        }
        let mut g = dy.to_vec();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g, n);
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
        self.cached_batch = None;
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    pub(crate) fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }

    pub(crate) fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }

    pub(crate) fn visit_norms<'a>(&'a self, f: &mut dyn FnMut(&'a RefNorm)) {
        self.layers.iter().for_each(|l| l.visit_norms(f));
    }

    pub(crate) fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut RefNorm)) {
        self.layers.iter_mut().for_each(|l| l.visit_norms_mut(f));
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::dim(format!("network has {} parameters, got {}", self.param_count(), values.len())));
        }
        let mut pos = 0;
        self.visit_params_mut(&mut |p| {
            let n = p.value.len();
            p.value.copy_from_slice(&values[pos..pos + n]);
            pos += n;
        });
        Ok(())
    }

    /// Whether every normalization layer carries reference statistics.
    pub fn is_calibrated(&self) -> bool {
        let mut ok = true;
        self.visit_norms(&mut |r| ok &= r.calibrated);
        ok
    }

    pub fn has_norm_layers(&self) -> bool {
        let mut any = false;
        self.visit_norms(&mut |_| any = true);
        any
    }

    pub fn max_abs_param(&self) -> f64 {
        let mut m: f64 = 0.0;
        self.visit_params(&mut |p| m = p.value.iter().fold(m, |a, v| a.max(v.abs())));
        m
    }

    /// Rounds parameters and normalization statistics to the nearest `f32`,
    /// the precision of the model file.
    pub fn quantize_f32(&mut self) {
        let q = |v: &mut f64| *v = *v as f32 as f64;
        self.visit_params_mut(&mut |p| p.value.iter_mut().for_each(q));
        self.visit_norms_mut(&mut |r| {
            r.mean.iter_mut().for_each(q);
            r.var.iter_mut().for_each(q);
        });
    }
}

/// Clips every parameter to `[-c_clip, c_clip]`.
pub fn clip_weights(net: &mut Network, c_clip: f64) -> Result<()> {
    if !(c_clip > 0.0) {
        return Err(Error::param(format!("clip bound must be positive, got {c_clip}")));
    }
    net.visit_params_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = v.clamp(-c_clip, c_clip)));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction over the parameters of one or more networks,
/// visited in a fixed order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update using the gradients currently stored in `nets`.
    pub fn step(&mut self, nets: &mut [&mut Network]) {
        let total: usize = nets.iter().map(|n| n.param_count()).sum();
        if self.m.len() != total {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
            self.step = 0;
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut pos = 0;
        for net in nets.iter_mut() {
            net.visit_params_mut(&mut |p| {
                for (w, &g) in p.value.iter_mut().zip(&p.grad) {
                    let mi = &mut m[pos];
                    let vi = &mut v[pos];
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    pos += 1;
                }
            });
        }
    }
}
