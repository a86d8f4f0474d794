//! Layer implementations. Activations are stored per sample in
//! channel-major `C × H × W` order; a batch is `n` such blocks back to back.

use crate::error::{Error, Result};
use crate::gemm::{gemm, mat};
use crate::tensor::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// How a bottleneck residual unit changes its input dimensionality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BottleneckMode {
    /// Same spatial size and channels.
    Same,
    /// Halved spatial size, doubled channels.
    Half,
    /// Halved spatial size, same channels.
    Quarter,
}

impl BottleneckMode {
    pub(crate) fn code(self) -> u32 {
        match self {
            BottleneckMode::Same => 0,
            BottleneckMode::Half => 1,
            BottleneckMode::Quarter => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(BottleneckMode::Same),
            1 => Some(BottleneckMode::Half),
            2 => Some(BottleneckMode::Quarter),
            _ => None,
        }
    }
}

/// Declarative layer description.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// `w × w` convolution with `c` output channels and stride `s`,
    /// "same" padding: output size `ceil(in / s)`.
    Conv {
        window: usize,
        channels: usize,
        stride: usize,
    },
    /// Transposed convolution, the exact adjoint of the matching `Conv`;
    /// output size `in · s`.
    Dconv {
        window: usize,
        channels: usize,
        stride: usize,
    },
    /// Fully connected layer over the flattened input.
    Dense {
        out: usize,
    },
    /// Per-channel fully connected map over the spatial positions.
    ChannelwiseDense,
    Elu,
    /// Per-channel normalization with frozen reference statistics.
    RefNorm,
    Bottleneck {
        channels: usize,
        mode: BottleneckMode,
    },
}

pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self { value, grad: vec![0.0; n] }
    }

    fn gaussian(n: usize, std: f64, rng: &mut RngStream) -> Self {
        Self::new((0..n).map(|_| std * rng.next_normal()).collect())
    }

    fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }
}

/// Geometry of a "same"-padded strided convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub input: Shape,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub s: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, out_channels: usize, k: usize, s: usize) -> Self {
        let out_h = input.height.div_ceil(s);
        let out_w = input.width.div_ceil(s);
        let pad_h = ((out_h - 1) * s + k).saturating_sub(input.height);
        let pad_w = ((out_w - 1) * s + k).saturating_sub(input.width);
        Self { input, out_channels, out_h, out_w, k, s, pad_t: pad_h / 2, pad_l: pad_w / 2 }
    }

    pub fn patch_len(&self) -> usize {
        self.input.channels * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.out_channels, self.out_h, self.out_w)
    }

    /// Unfolds one sample into a `patch_len × positions` matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (h, w) = (self.input.height as isize, self.input.width as isize);
        let p = self.positions();
        for ci in 0..self.input.channels {
            let plane = &x[ci * self.input.spatial()..(ci + 1) * self.input.spatial()];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.s + ky) as isize - self.pad_t as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= h {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.s + kx) as isize - self.pad_l as isize;
                            *v = if ix < 0 || ix >= w { 0.0 } else { plane[(iy * w + ix) as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates `cols` into `x`.
    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let (h, w) = (self.input.height as isize, self.input.width as isize);
        let p = self.positions();
        for ci in 0..self.input.channels {
            let plane = &mut x[ci * self.input.spatial()..(ci + 1) * self.input.spatial()];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.s + ky) as isize - self.pad_t as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.s + kx) as isize - self.pad_l as isize;
                            if ix >= 0 && ix < w {
                                plane[(iy * w + ix) as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub geom: ConvGeom,
    /// `out_channels × patch_len`
    pub weight: Param,
    pub bias: Param,
    cache: Vec<f64>,
}

impl Conv {
    fn new(input: Shape, channels: usize, k: usize, s: usize, rng: &mut RngStream) -> Self {
        let geom = ConvGeom::new(input, channels, k, s);
        let fan_in = geom.patch_len();
        Self {
            geom,
            weight: Param::gaussian(channels * fan_in, (1.0 / fan_in as f64).sqrt(), rng),
            bias: Param::zeros(channels),
            cache: Vec::new(),
        }
    }

    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let g = &self.geom;
        let (kl, p, co) = (g.patch_len(), g.positions(), g.out_channels);
        let (il, ol) = (g.input.len(), co * p);
        let mut cols = vec![0.0; kl * p];
        let mut out = vec![0.0; n * ol];
        for i in 0..n {
            g.im2col(&x[i * il..(i + 1) * il], &mut cols);
            let y = &mut out[i * ol..(i + 1) * ol];
            for (c, chunk) in y.chunks_exact_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[c]);
            }
            gemm(co, kl, p, mat(&self.weight.value, kl, 1), mat(&cols, p, 1), 1.0, y, p);
        }
        out
    }

    fn backward(&mut self, dy: &[f64], n: usize) -> Vec<f64> {
        let g = self.geom;
        let (kl, p, co) = (g.patch_len(), g.positions(), g.out_channels);
        let (il, ol) = (g.input.len(), co * p);
        let mut cols = vec![0.0; kl * p];
        let mut dcols = vec![0.0; kl * p];
        let mut dx = vec![0.0; n * il];
        for i in 0..n {
            let dyi = &dy[i * ol..(i + 1) * ol];
            for (c, chunk) in dyi.chunks_exact(p).enumerate() {
                self.bias.grad[c] += chunk.iter().sum::<f64>();
            }
            g.im2col(&self.cache[i * il..(i + 1) * il], &mut cols);
            // dW += dY · colsᵀ
            gemm(co, p, kl, mat(dyi, p, 1), mat(&cols, 1, p), 1.0, &mut self.weight.grad, kl);
            // dcols = Wᵀ · dY
            gemm(kl, co, p, mat(&self.weight.value, 1, kl), mat(dyi, p, 1), 0.0, &mut dcols, p);
            g.col2im(&dcols, &mut dx[i * il..(i + 1) * il]);
        }
        dx
    }
}

/// Transposed convolution stored as the weight matrix of its adjoint
/// convolution (`in_channels × out_channels·k·k`).
#[derive(Debug, Clone)]
pub(crate) struct Dconv {
    /// Geometry of the adjoint convolution (output image → input image).
    pub geom: ConvGeom,
    pub input: Shape,
    pub weight: Param,
    pub bias: Param,
    cache: Vec<f64>,
}

impl Dconv {
    fn new(input: Shape, channels: usize, k: usize, s: usize, rng: &mut RngStream) -> Self {
        let out = Shape::new(channels, input.height * s, input.width * s);
        let geom = ConvGeom::new(out, input.channels, k, s);
        debug_assert_eq!((geom.out_h, geom.out_w), (input.height, input.width));
        let fan_in = (input.channels * k * k) as f64 / (s * s) as f64;
        Self {
            geom,
            input,
            weight: Param::gaussian(input.channels * geom.patch_len(), (1.0 / fan_in.max(1.0)).sqrt(), rng),
            bias: Param::zeros(channels),
            cache: Vec::new(),
        }
    }

    fn output(&self) -> Shape {
        self.geom.input
    }

    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let g = &self.geom;
        let (kl, p, ci) = (g.patch_len(), g.positions(), self.input.channels);
        let (il, ol) = (self.input.len(), g.input.len());
        let sp = g.input.spatial();
        let mut cols = vec![0.0; kl * p];
        let mut out = vec![0.0; n * ol];
        for i in 0..n {
            // cols = Wᵀ · x
            gemm(kl, ci, p, mat(&self.weight.value, 1, kl), mat(&x[i * il..(i + 1) * il], p, 1), 0.0, &mut cols, p);
            let y = &mut out[i * ol..(i + 1) * ol];
            for (c, chunk) in y.chunks_exact_mut(sp).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[c]);
            }
            g.col2im(&cols, y);
        }
        out
    }

    fn backward(&mut self, dy: &[f64], n: usize) -> Vec<f64> {
        let g = self.geom;
        let (kl, p, ci) = (g.patch_len(), g.positions(), self.input.channels);
        let (il, ol) = (self.input.len(), g.input.len());
        let sp = g.input.spatial();
        let mut dcols = vec![0.0; kl * p];
        let mut dx = vec![0.0; n * il];
        for i in 0..n {
            let dyi = &dy[i * ol..(i + 1) * ol];
            for (c, chunk) in dyi.chunks_exact(sp).enumerate() {
                self.bias.grad[c] += chunk.iter().sum::<f64>();
            }
            g.im2col(dyi, &mut dcols);
            // dx = W · dcols
            gemm(ci, kl, p, mat(&self.weight.value, kl, 1), mat(&dcols, p, 1), 0.0, &mut dx[i * il..(i + 1) * il], p);
            // dW += x · dcolsᵀ
            gemm(
                ci,
                p,
                kl,
                mat(&self.cache[i * il..(i + 1) * il], p, 1),
                mat(&dcols, 1, p),
                1.0,
                &mut self.weight.grad,
                kl,
            );
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`
    pub weight: Param,
    pub bias: Param,
    cache: Vec<f64>,
}

impl Dense {
    fn new(inputs: usize, outputs: usize, rng: &mut RngStream) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::gaussian(inputs * outputs, (1.0 / inputs as f64).sqrt(), rng),
            bias: Param::zeros(outputs),
            cache: Vec::new(),
        }
    }

    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.bias.value.iter().copied()).collect();
        gemm(
            n,
            self.inputs,
            self.outputs,
            mat(x, self.inputs, 1),
            mat(&self.weight.value, 1, self.inputs),
            1.0,
            &mut out,
            self.outputs,
        );
        out
    }

    fn backward(&mut self, dy: &[f64], n: usize) -> Vec<f64> {
        for row in dy.chunks_exact(self.outputs) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        // dW += dYᵀ · X
        gemm(
            self.outputs,
            n,
            self.inputs,
            mat(dy, 1, self.outputs),
            mat(&self.cache, self.inputs, 1),
            1.0,
            &mut self.weight.grad,
            self.inputs,
        );
        let mut dx = vec![0.0; n * self.inputs];
        gemm(
            n,
            self.outputs,
            self.inputs,
            mat(dy, self.outputs, 1),
            mat(&self.weight.value, self.inputs, 1),
            0.0,
            &mut dx,
            self.inputs,
        );
        dx
    }
}

/// Channel-wise fully connected layer: each channel's `H·W` plane goes
/// through its own dense map; channels do not mix.
#[derive(Debug, Clone)]
pub(crate) struct ChannelwiseDense {
    pub shape: Shape,
    /// `channels × P × P` with `P = H·W`
    pub weight: Param,
    /// `channels × P`
    pub bias: Param,
    cache: Vec<f64>,
}

impl ChannelwiseDense {
    fn new(shape: Shape, rng: &mut RngStream) -> Self {
        let p = shape.spatial();
        // identity plus small noise so the layer starts out passing context through
        let std = 0.01 / (p as f64).sqrt();
        let mut w = Param::gaussian(shape.channels * p * p, std, rng);
        for c in 0..shape.channels {
            for i in 0..p {
                w.value[c * p * p + i * p + i] += 1.0;
            }
        }
        Self { shape, weight: w, bias: Param::zeros(shape.channels * p), cache: Vec::new() }
    }

    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (c, p) = (self.shape.channels, self.shape.spatial());
        let len = c * p;
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&self.bias.value);
        }
        let mut tmp = vec![0.0; p * n];
        for ch in 0..c {
            let w = &self.weight.value[ch * p * p..(ch + 1) * p * p];
            // tmp (P × n) = W_c · X_c
            gemm(p, p, n, mat(w, p, 1), mat(&x[ch * p..], 1, len), 0.0, &mut tmp, n);
            for i in 0..n {
                for q in 0..p {
                    out[i * len + ch * p + q] += tmp[q * n + i];
                }
            }
        }
        out
    }

    fn backward(&mut self, dy: &[f64], n: usize) -> Vec<f64> {
        let (c, p) = (self.shape.channels, self.shape.spatial());
        let len = c * p;
        for row in dy.chunks_exact(len) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![0.0; n * len];
        let mut tmp = vec![0.0; p * n];
        for ch in 0..c {
            let dyc = mat(&dy[ch * p..], 1, len);
            // dW_c += dY_c · X_cᵀ
            gemm(
                p,
                n,
                p,
                dyc,
                mat(&self.cache[ch * p..], len, 1),
                1.0,
                &mut self.weight.grad[ch * p * p..(ch + 1) * p * p],
                p,
            );
            // dX_c = W_cᵀ · dY_c
            gemm(p, p, n, mat(&self.weight.value[ch * p * p..(ch + 1) * p * p], 1, p), dyc, 0.0, &mut tmp, n);
            for i in 0..n {
                for q in 0..p {
                    dx[i * len + ch * p + q] = tmp[q * n + i];
                }
            }
        }
        dx
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RefNorm {
    pub shape: Shape,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub calibrated: bool,
}

impl RefNorm {
    fn new(shape: Shape) -> Self {
        Self { shape, mean: vec![0.0; shape.channels], var: vec![1.0; shape.channels], calibrated: false }
    }

    fn calibrate(&mut self, x: &[f64], n: usize) {
        let (c, p) = (self.shape.channels, self.shape.spatial());
        let count = (n * p) as f64;
        for ch in 0..c {
            let plane = || (0..n).flat_map(move |i| x[i * c * p + ch * p..i * c * p + (ch + 1) * p].iter());
            let mean = plane().sum::<f64>() / count;
            let var = plane().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            self.mean[ch] = mean;
            self.var[ch] = var;
        }
        self.calibrated = true;
    }

    fn inv_std(&self, ch: usize) -> f64 {
        1.0 / (self.var[ch] + NORM_EPS).sqrt()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let p = self.shape.spatial();
        let c = self.shape.channels;
        x.chunks_exact(p)
            .enumerate()
            .flat_map(|(j, plane)| {
                let ch = j % c;
                let (m, s) = (self.mean[ch], self.inv_std(ch));
                plane.iter().map(move |v| (v - m) * s)
            })
            .collect()
    }

    fn backward(&self, dy: &[f64]) -> Vec<f64> {
        let p = self.shape.spatial();
        let c = self.shape.channels;
        dy.chunks_exact(p)
            .enumerate()
            .flat_map(|(j, plane)| {
                let s = self.inv_std(j % c);
                plane.iter().map(move |v| v * s)
            })
            .collect()
    }
}

/// Pre-activation bottleneck residual unit:
/// `norm-elu-conv1×1 → norm-elu-conv3×3/s → norm-elu-conv1×1`, added to an
/// identity or strided 1×1 projection shortcut.
#[derive(Debug, Clone)]
pub(crate) struct Bottleneck {
    pub channels: usize,
    pub mode: BottleneckMode,
    pub branch: Vec<Layer>,
    pub shortcut: Option<Conv>,
    pub output: Shape,
}

impl Bottleneck {
    fn new(input: Shape, channels: usize, mode: BottleneckMode, rng: &mut RngStream) -> Result<Self> {
        let expected = match mode {
            BottleneckMode::Same | BottleneckMode::Quarter => input.channels,
            BottleneckMode::Half => 2 * input.channels,
        };
        if channels != expected {
            return Err(Error::param(format!(
                "bottleneck({mode:?}) on {input} must output {expected} channels, got {channels}"
            )));
        }
        let stride = if mode == BottleneckMode::Same { 1 } else { 2 };
        let mid = (channels / 4).max(1);
        let specs = [
            LayerSpec::RefNorm,
            LayerSpec::Elu,
            LayerSpec::Conv { window: 1, channels: mid, stride: 1 },
            LayerSpec::RefNorm,
            LayerSpec::Elu,
            LayerSpec::Conv { window: 3, channels: mid, stride },
            LayerSpec::RefNorm,
            LayerSpec::Elu,
            LayerSpec::Conv { window: 1, channels, stride: 1 },
        ];
        let mut shape = input;
        let mut branch = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = Layer::build(shape, spec, rng)?;
            shape = layer.output_shape();
            branch.push(layer);
        }
        let shortcut = (mode != BottleneckMode::Same).then(|| Conv::new(input, channels, 1, stride, rng));
        Ok(Self { channels, mode, branch, shortcut, output: shape })
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Conv(Conv),
    Dconv(Dconv),
    Dense(Dense),
    ChannelwiseDense(ChannelwiseDense),
    Elu { shape: Shape, cache: Vec<f64> },
    RefNorm(RefNorm),
    Bottleneck(Box<Bottleneck>),
}

impl Layer {
    pub fn build(input: Shape, spec: LayerSpec, rng: &mut RngStream) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::param("layer input shape is empty"));
        }
        Ok(match spec {
            LayerSpec::Conv { window, channels, stride } => {
                check_window(window, channels, stride)?;
                Layer::Conv(Conv::new(input, channels, window, stride, rng))
            }
            LayerSpec::Dconv { window, channels, stride } => {
                check_window(window, channels, stride)?;
                if window < stride {
                    return Err(Error::param(format!("dconv window {window} smaller than stride {stride}")));
                }
                Layer::Dconv(Dconv::new(input, channels, window, stride, rng))
            }
            LayerSpec::Dense { out } => {
                if out == 0 {
                    return Err(Error::param("dense layer needs at least one output"));
                }
                Layer::Dense(Dense::new(input.len(), out, rng))
            }
            LayerSpec::ChannelwiseDense => Layer::ChannelwiseDense(ChannelwiseDense::new(input, rng)),
            LayerSpec::Elu => Layer::Elu { shape: input, cache: Vec::new() },
            LayerSpec::RefNorm => Layer::RefNorm(RefNorm::new(input)),
            LayerSpec::Bottleneck { channels, mode } => {
                Layer::Bottleneck(Box::new(Bottleneck::new(input, channels, mode, rng)?))
            }
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv { window: c.geom.k, channels: c.geom.out_channels, stride: c.geom.s },
            Layer::Dconv(d) => LayerSpec::Dconv { window: d.geom.k, channels: d.geom.input.channels, stride: d.geom.s },
            Layer::Dense(d) => LayerSpec::Dense { out: d.outputs },
            Layer::ChannelwiseDense(_) => LayerSpec::ChannelwiseDense,
            Layer::Elu { .. } => LayerSpec::Elu,
            Layer::RefNorm(_) => LayerSpec::RefNorm,
            Layer::Bottleneck(b) => LayerSpec::Bottleneck { channels: b.channels, mode: b.mode },
        }
    }

    pub fn output_shape(&self) -> Shape {
        match self {
            Layer::Conv(c) => c.geom.output(),
            Layer::Dconv(d) => d.output(),
            Layer::Dense(d) => Shape::new(d.outputs, 1, 1),
            Layer::ChannelwiseDense(c) => c.shape,
            Layer::Elu { shape, .. } => *shape,
            Layer::RefNorm(r) => r.shape,
            Layer::Bottleneck(b) => b.output,
        }
    }

    /// Pure evaluation; never touches caches.
    pub fn infer(&self, x: &[f64], n: usize) -> Vec<f64> {
        match self {
            Layer::Conv(c) => c.forward(x, n),
            Layer::Dconv(d) => d.forward(x, n),
            Layer::Dense(d) => d.forward(x, n),
            Layer::ChannelwiseDense(c) => c.forward(x, n),
            Layer::Elu { .. } => x.iter().map(|&v| elu(v)).collect(),
            Layer::RefNorm(r) => r.forward(x),
            Layer::Bottleneck(b) => {
                let mut h = x.to_vec();
                for l in &b.branch {
                    h = l.infer(&h, n);
                }
                add_shortcut(&mut h, b.shortcut.as_ref().map(|s| s.forward(x, n)), x);
                h
            }
        }
    }

    /// Evaluation that caches what `backward` needs. When `calibrate` is
    /// set, normalization layers first refresh their statistics from `x`.
    pub fn forward(&mut self, x: &[f64], n: usize, calibrate: bool) -> Vec<f64> {
        match self {
            Layer::Conv(c) => {
                c.cache = x.to_vec();
                c.forward(x, n)
            }
            Layer::Dconv(d) => {
                d.cache = x.to_vec();
                d.forward(x, n)
            }
            Layer::Dense(d) => {
                d.cache = x.to_vec();
                d.forward(x, n)
            }
            Layer::ChannelwiseDense(c) => {
                c.cache = x.to_vec();
                c.forward(x, n)
            }
            Layer::Elu { cache, .. } => {
                *cache = x.to_vec();
                x.iter().map(|&v| elu(v)).collect()
            }
            Layer::RefNorm(r) => {
                if calibrate {
                    r.calibrate(x, n);
                }
                r.forward(x)
            }
            Layer::Bottleneck(b) => {
                let mut h = x.to_vec();
                for l in b.branch.iter_mut() {
                    h = l.forward(&h, n, calibrate);
                }
                let sc = b.shortcut.as_mut().map(|s| {
                    s.cache = x.to_vec();
                    s.forward(x, n)
                });
                add_shortcut(&mut h, sc, x);
                h
            }
        }
    }

    pub fn backward(&mut self, dy: &[f64], n: usize) -> Vec<f64> {
        match self {
            Layer::Conv(c) => c.backward(dy, n),
            Layer::Dconv(d) => d.backward(dy, n),
            Layer::Dense(d) => d.backward(dy, n),
            Layer::ChannelwiseDense(c) => c.backward(dy, n),
            Layer::Elu { cache, .. } => dy.iter().zip(cache.iter()).map(|(g, &v)| g * elu_derivative(v)).collect(),
            Layer::RefNorm(r) => r.backward(dy),
            Layer::Bottleneck(b) => {
                let mut g = dy.to_vec();
                for l in b.branch.iter_mut().rev() {
                    g = l.backward(&g, n);
                }
                match b.shortcut.as_mut() {
                    Some(s) => {
                        let gs = s.backward(dy, n);
                        g.iter_mut().zip(gs).for_each(|(a, b)| *a += b);
                    }
                    None => g.iter_mut().zip(dy).for_each(|(a, b)| *a += b),
                }
                g
            }
        }
    }

    pub fn has_cache(&self) -> bool {
        match self {
            Layer::Conv(c) => !c.cache.is_empty(),
            Layer::Dconv(d) => !d.cache.is_empty(),
            Layer::Dense(d) => !d.cache.is_empty(),
            Layer::ChannelwiseDense(c) => !c.cache.is_empty(),
            Layer::Elu { cache, .. } => !cache.is_empty(),
            Layer::RefNorm(_) => true,
            Layer::Bottleneck(b) => b.branch.iter().all(Layer::has_cache),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(c) => c.cache = Vec::new(),
            Layer::Dconv(d) => d.cache = Vec::new(),
            Layer::Dense(d) => d.cache = Vec::new(),
            Layer::ChannelwiseDense(c) => c.cache = Vec::new(),
            Layer::Elu { cache, .. } => *cache = Vec::new(),
            Layer::RefNorm(_) => {}
            Layer::Bottleneck(b) => {
                b.branch.iter_mut().for_each(Layer::clear_cache);
                if let Some(s) = b.shortcut.as_mut() {
                    s.cache = Vec::new();
                }
            }
        }
    }

    /// Visits parameters in canonical order (weights before biases, branch
    /// before shortcut).
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match self {
            Layer::Conv(c) => {
                f(&c.weight);
                f(&c.bias);
            }
            Layer::Dconv(d) => {
                f(&d.weight);
                f(&d.bias);
            }
            Layer::Dense(d) => {
                f(&d.weight);
                f(&d.bias);
            }
            Layer::ChannelwiseDense(c) => {
                f(&c.weight);
                f(&c.bias);
            }
            Layer::Elu { .. } | Layer::RefNorm(_) => {}
            Layer::Bottleneck(b) => {
                b.branch.iter().for_each(|l| l.visit_params(f));
                if let Some(s) = &b.shortcut {
                    f(&s.weight);
                    f(&s.bias);
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Layer::Conv(c) => {
                f(&mut c.weight);
                f(&mut c.bias);
            }
            Layer::Dconv(d) => {
                f(&mut d.weight);
                f(&mut d.bias);
            }
            Layer::Dense(d) => {
                f(&mut d.weight);
                f(&mut d.bias);
            }
            Layer::ChannelwiseDense(c) => {
                f(&mut c.weight);
                f(&mut c.bias);
            }
            Layer::Elu { .. } | Layer::RefNorm(_) => {}
            Layer::Bottleneck(b) => {
                b.branch.iter_mut().for_each(|l| l.visit_params_mut(f));
                if let Some(s) = b.shortcut.as_mut() {
                    f(&mut s.weight);
                    f(&mut s.bias);
                }
            }
        }
    }

    pub fn visit_norms<'a>(&'a self, f: &mut dyn FnMut(&'a RefNorm)) {
        match self {
            Layer::RefNorm(r) => f(r),
            Layer::Bottleneck(b) => b.branch.iter().for_each(|l| l.visit_norms(f)),
            _ => {}
        }
    }

    pub fn visit_norms_mut(&mut self, f: &mut dyn FnMut(&mut RefNorm)) {
        match self {
            Layer::RefNorm(r) => f(r),
            Layer::Bottleneck(b) => b.branch.iter_mut().for_each(|l| l.visit_norms_mut(f)),
            _ => {}
        }
    }
}

fn add_shortcut(h: &mut [f64], projected: Option<Vec<f64>>, x: &[f64]) {
    match projected {
        Some(p) => h.iter_mut().zip(p).for_each(|(a, b)| *a += b),
        None => h.iter_mut().zip(x).for_each(|(a, b)| *a += b),
    }
}

fn check_window(window: usize, channels: usize, stride: usize) -> Result<()> {
    if window == 0 || channels == 0 || stride == 0 {
        return Err(Error::param(format!(
            "window ({window}), channels ({channels}) and stride ({stride}) must all be at least 1"
        )));
    }
    Ok(())
}
