//! Desk-scale projector and classifier architectures.

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

use super::layers::{BottleneckMode, LayerSpec, Shape};
use super::network::Network;

/// Projector geometry: `conv(4,c0,1)ve → conv(4,c1,2)ve → cfc →
/// conv(2,c2,1)ve` to the latent, mirrored by `dconv(2,c1,1)ve →
/// dconv(4,c0,2)ve → dconv(4,C,1)` with a linear output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorArch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub widths: [usize; 3],
}

impl ProjectorArch {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, widths: [16, 32, 64] }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::param(format!(
                "projector needs even image dimensions, got {}x{}",
                self.height, self.width
            )));
        }
        if self.channels == 0 || self.widths.contains(&0) {
            return Err(Error::param("projector channel counts must be positive"));
        }
        Ok(())
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let [c0, c1, c2] = self.widths;
        vec![
            LayerSpec::Conv { window: 4, channels: c0, stride: 1 },
            LayerSpec::RefNorm,
            LayerSpec::Elu,
            LayerSpec::Conv { window: 4, channels: c1, stride: 2 },
            LayerSpec::RefNorm,
            LayerSpec::Elu,
            LayerSpec::ChannelwiseDense,
            LayerSpec::Conv { window: 2, channels: c2, stride: 1 },
            LayerSpec::RefNorm,
            LayerSpec::Elu,
        ]
    }

    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let [c0, c1, _] = self.widths;
        vec![
            LayerSpec::Dconv { window: 2, channels: c1, stride: 1 },
            LayerSpec::RefNorm,
            LayerSpec::Elu,
            LayerSpec::Dconv { window: 4, channels: c0, stride: 2 },
            LayerSpec::RefNorm,
            LayerSpec::Elu,
            LayerSpec::Dconv { window: 4, channels: self.channels, stride: 1 },
        ]
    }
}

/// Encoder/decoder pair; the projection is `P = decoder ∘ encoder`.
#[derive(Debug, Clone)]
pub struct ProjectionNetwork {
    pub encoder: Network,
    pub decoder: Network,
}

pub fn build_projector(arch: &ProjectorArch, seed: u64) -> Result<ProjectionNetwork> {
    arch.validate()?;
    let mut rng = RngStream::new(seed);
    let input = Shape::new(arch.channels, arch.height, arch.width);
    let encoder = Network::new(input, &arch.encoder_specs(), &mut rng)?;
    let decoder = Network::new(encoder.output_shape(), &arch.decoder_specs(), &mut rng)?;
    ProjectionNetwork::from_parts(encoder, decoder)
}

impl ProjectionNetwork {
    pub fn from_parts(encoder: Network, decoder: Network) -> Result<Self> {
        if decoder.input_shape() != encoder.output_shape() {
            return Err(Error::param(format!(
                "decoder input {} does not match encoder output {}",
                decoder.input_shape(),
                encoder.output_shape()
            )));
        }
        if decoder.output_shape() != encoder.input_shape() {
            return Err(Error::param(format!(
                "decoder output {} does not match encoder input {}",
                decoder.output_shape(),
                encoder.input_shape()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn image_shape(&self) -> Shape {
        self.encoder.input_shape()
    }

    pub fn latent_shape(&self) -> Shape {
        self.encoder.output_shape()
    }

    pub fn is_ready(&self) -> bool {
        self.encoder.is_calibrated() && self.decoder.is_calibrated()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn quantize_f32(&mut self) {
        self.encoder.quantize_f32();
        self.decoder.quantize_f32();
    }

    /// Unclamped `P` on `n` channel-major samples.
    pub fn infer_batch(&self, x: &[f64], n: usize) -> Result<Vec<f64>> {
        let latent = self.encoder.infer(x, n)?;
        self.decoder.infer(&latent, n)
    }

    /// `P(v)` for one image given as a flat `H × W × C` vector, clipped to
    /// `[-1, 1]`.
    pub fn project(&self, v: &Tensor) -> Result<Tensor> {
        if !self.is_ready() {
            return Err(Error::State("projector has no reference statistics; train it first".into()));
        }
        let shape = self.image_shape();
        if v.len() != shape.len() {
            return Err(Error::dim(format!(
                "projector takes {}x{}x{} images ({} values), got {}",
                shape.height,
                shape.width,
                shape.channels,
                shape.len(),
                v.len()
            )));
        }
        let chw = hwc_to_chw(v.data(), shape);
        let out = self.infer_batch(&chw, 1)?;
        let hwc = chw_to_hwc(&out, shape);
        Ok(Tensor::from_parts_unchecked(vec![shape.len()], hwc.into_iter().map(|p| p.clamp(-1.0, 1.0)).collect()))
    }
}

pub fn hwc_to_chw(x: &[f64], s: Shape) -> Vec<f64> {
    if s.channels == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for p in 0..s.spatial() {
        for c in 0..s.channels {
            out[c * s.spatial() + p] = x[p * s.channels + c];
        }
    }
    out
}

pub fn chw_to_hwc(x: &[f64], s: Shape) -> Vec<f64> {
    if s.channels == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for p in 0..s.spatial() {
        for c in 0..s.channels {
            out[p * s.channels + c] = x[c * s.spatial() + p];
        }
    }
    out
}

/// Residual classifier: optional stem convolution, bottleneck units, then
/// `refnorm → elu → dense(1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierArch {
    pub input: Shape,
    pub stem: Option<(usize, usize)>,
    pub blocks: Vec<(usize, BottleneckMode)>,
}

impl ClassifierArch {
    /// Image-space classifier: `conv(4,16,1)` then half/same/half units.
    pub fn image(input: Shape) -> Self {
        let c = 16;
        Self {
            input,
            stem: Some((4, c)),
            blocks: vec![(2 * c, BottleneckMode::Half), (2 * c, BottleneckMode::Same), (4 * c, BottleneckMode::Half)],
        }
    }

    /// Latent-space classifier: same/quarter/same units on the encoder
    /// output.
    pub fn latent(input: Shape) -> Self {
        let c = input.channels;
        Self {
            input,
            stem: None,
            blocks: vec![(c, BottleneckMode::Same), (c, BottleneckMode::Quarter), (c, BottleneckMode::Same)],
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        if let Some((window, channels)) = self.stem {
            specs.push(LayerSpec::Conv { window, channels, stride: 1 });
        }
        specs.extend(self.blocks.iter().map(|&(channels, mode)| LayerSpec::Bottleneck { channels, mode }));
        specs.extend([LayerSpec::RefNorm, LayerSpec::Elu, LayerSpec::Dense { out: 1 }]);
        specs
    }
}

pub fn build_classifier(arch: &ClassifierArch, seed: u64) -> Result<Network> {
    if arch.input.is_empty() {
        return Err(Error::param("classifier input shape is empty"));
    }
    Network::new(arch.input, &arch.specs(), &mut RngStream::new(seed))
}
