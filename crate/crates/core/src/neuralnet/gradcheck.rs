//! Central finite-difference checks of reverse-mode gradients.

use crate::error::Result;
use crate::tensor::{norm_slice, RngStream};

use super::layers::{BottleneckMode, LayerSpec, Shape};
use super::network::Network;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub param_rel_err: f64,
    pub input_rel_err: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.param_rel_err.max(self.input_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.worst() < FD_TOLERANCE
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm_slice(a).max(norm_slice(b));
    if scale == 0.0 {
        0.0
    } else {
        norm_slice(&diff) / scale
    }
}

fn probe_loss(y: &[f64], w: &[f64]) -> f64 {
    y.iter().zip(w).map(|(y, w)| w * y + 0.5 * y * y).sum()
}

/// Compares backprop against central differences of
/// `L(y) = Σ wᵢyᵢ + ½Σ yᵢ²` for the network at `x` (`n` samples). At most
/// `max_coords` parameter and input coordinates are probed, spread evenly.
pub fn check_network(
    net: &mut Network,
    x: &[f64],
    n: usize,
    max_coords: usize,
    rng: &mut RngStream,
) -> Result<GradCheck> {
    let out_len = n * net.output_shape().len();
    let w: Vec<f64> = (0..out_len).map(|_| rng.next_normal()).collect();

    net.zero_grads();
    let y = net.forward(x, n)?;
    let dy: Vec<f64> = y.iter().zip(&w).map(|(y, w)| w + y).collect();
    let dx = net.backward(&dy)?;
    net.clear_cache();
    let grads = net.grads_flat();

    let params = net.params_flat();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for idx in spread(params.len(), max_coords) {
        let mut p = params.clone();
        p[idx] = params[idx] + FD_STEP;
        net.set_params_flat(&p)?;
        let up = probe_loss(&net.infer(x, n)?, &w);
        p[idx] = params[idx] - FD_STEP;
        net.set_params_flat(&p)?;
        let down = probe_loss(&net.infer(x, n)?, &w);
        analytic.push(grads[idx]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    net.set_params_flat(&params)?;
    let param_rel_err = relative_error(&analytic, &numeric);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for idx in spread(x.len(), max_coords) {
        let mut xp = x.to_vec();
        xp[idx] = x[idx] + FD_STEP;
        let up = probe_loss(&net.infer(&xp, n)?, &w);
        xp[idx] = x[idx] - FD_STEP;
        let down = probe_loss(&net.infer(&xp, n)?, &w);
        analytic.push(dx[idx]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    let input_rel_err = relative_error(&analytic, &numeric);
    Ok(GradCheck { name: String::new(), param_rel_err, input_rel_err })
}

fn spread(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    (0..max).map(|i| i * len / max + (i * 7) % (len / max).max(1)).collect()
}

/// One small network per layer kind, each checked on a random batch of two
/// samples. Normalization layers are calibrated on the probe batch first.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let cases: Vec<(&str, Shape, Vec<LayerSpec>)> = vec![
        ("conv", Shape::new(2, 5, 5), vec![LayerSpec::Conv { window: 3, channels: 3, stride: 1 }]),
        ("conv_strided", Shape::new(2, 6, 7), vec![LayerSpec::Conv { window: 4, channels: 3, stride: 2 }]),
        ("dconv", Shape::new(3, 3, 4), vec![LayerSpec::Dconv { window: 4, channels: 2, stride: 2 }]),
        ("dconv_unit_stride", Shape::new(3, 4, 4), vec![LayerSpec::Dconv { window: 2, channels: 2, stride: 1 }]),
        ("dense", Shape::new(2, 3, 3), vec![LayerSpec::Dense { out: 4 }]),
        ("channelwise_dense", Shape::new(2, 3, 3), vec![LayerSpec::ChannelwiseDense]),
        ("elu", Shape::new(2, 4, 4), vec![LayerSpec::Conv { window: 3, channels: 2, stride: 1 }, LayerSpec::Elu]),
        (
            "refnorm",
            Shape::new(3, 4, 4),
            vec![LayerSpec::Conv { window: 3, channels: 3, stride: 1 }, LayerSpec::RefNorm],
        ),
        (
            "bottleneck_same",
            Shape::new(4, 4, 4),
            vec![LayerSpec::Bottleneck { channels: 4, mode: BottleneckMode::Same }],
        ),
        (
            "bottleneck_half",
            Shape::new(4, 6, 6),
            vec![LayerSpec::Bottleneck { channels: 8, mode: BottleneckMode::Half }],
        ),
        (
            "bottleneck_quarter",
            Shape::new(4, 5, 5),
            vec![LayerSpec::Bottleneck { channels: 4, mode: BottleneckMode::Quarter }],
        ),
    ];
    let mut rng = RngStream::new(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, shape, specs) in cases {
        let mut net = Network::new(shape, &specs, &mut rng)?;
        let n = 2;
        let x: Vec<f64> = (0..n * shape.len()).map(|_| rng.next_normal()).collect();
        if net.has_norm_layers() {
            net.calibrate(&x, n)?;
            net.clear_cache();
        }
        let mut r = check_network(&mut net, &x, n, 60, &mut rng)?;
        r.name = name.to_string();
        out.push(r);
    }
    Ok(out)
}
