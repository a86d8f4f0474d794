//! Proximal and projection operators for the x-update.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::imagery::{extract_patches, stitch_patches, Image};
use crate::neuralnet::ProjectionNetwork;
use crate::tensor::Tensor;
use crate::wavelets::{default_levels, haar_forward_raw, haar_inverse_raw};

/// Maps `v` to `argmin_x φ(x) + (ρ/2)‖x − v‖²` or a learned stand-in.
pub trait ProxOperator: Send + Sync {
    fn prox(&self, v: &Tensor, rho: f64) -> Result<Tensor>;
    fn name(&self) -> String;
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::param(format!("rho must be positive and finite, got {rho}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::param(format!("lambda must be non-negative and finite, got {lambda}")));
    }
    Ok(())
}

pub fn soft_threshold_scalar(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

pub fn soft_threshold(v: &Tensor, t: f64) -> Result<Tensor> {
    if !(t >= 0.0) {
        return Err(Error::param(format!("threshold must be non-negative, got {t}")));
    }
    Ok(v.map(|x| soft_threshold_scalar(x, t)))
}

/// `φ = 0`: the prox is the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProx;

impl ProxOperator for IdentityProx {
    fn prox(&self, v: &Tensor, rho: f64) -> Result<Tensor> {
        check_rho(rho)?;
        Ok(v.clone())
    }

    fn name(&self) -> String {
        "identity".into()
    }
}

/// `φ = λ‖x‖₁` in the pixel domain.
#[derive(Debug, Clone, Copy)]
pub struct PixelL1Prior {
    lambda: f64,
}

impl PixelL1Prior {
    pub fn new(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self { lambda })
    }
}

impl ProxOperator for PixelL1Prior {
    fn prox(&self, v: &Tensor, rho: f64) -> Result<Tensor> {
        check_rho(rho)?;
        soft_threshold(v, self.lambda / rho)
    }

    fn name(&self) -> String {
        format!("pixel_l1(lambda={})", self.lambda)
    }
}

/// `φ = λ‖Wx‖₁` with `W` the orthonormal Haar transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1WaveletPrior {
    pub lambda: f64,
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl L1WaveletPrior {
    /// `levels = None` picks the default depth for the geometry.
    pub fn new(lambda: f64, height: usize, width: usize, channels: usize, levels: Option<usize>) -> Result<Self> {
        check_lambda(lambda)?;
        let levels = levels.unwrap_or_else(|| default_levels(height, width));
        let prior = Self { lambda, levels, height, width, channels };
        haar_forward_raw(&vec![0.0; prior.len()], height, width, channels, levels)?;
        Ok(prior)
    }

    fn len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl ProxOperator for L1WaveletPrior {
    fn prox(&self, v: &Tensor, rho: f64) -> Result<Tensor> {
        check_rho(rho)?;
        if v.len() != self.len() {
            return Err(Error::dim(format!(
                "wavelet prior is set up for {}x{}x{} ({} values), got {}",
                self.height,
                self.width,
                self.channels,
                self.len(),
                v.len()
            )));
        }
        let t = self.lambda / rho;
        let coeffs = haar_forward_raw(v.data(), self.height, self.width, self.channels, self.levels)?;
        let shrunk = coeffs.map(|c| soft_threshold_scalar(c, t));
        Tensor::new(vec![v.len()], haar_inverse_raw(&shrunk)?)
    }

    fn name(&self) -> String {
        format!("l1_wavelet(lambda={}, levels={})", self.lambda, self.levels)
    }
}

/// `x ← P(v)`, clamped to `[-1, 1]`.
pub fn network_projector_prox(net: &ProjectionNetwork, v: &Tensor) -> Result<Tensor> {
    net.project(v)
}

/// Applies the projector to `patch × patch` tiles of `img` and stitches
/// the results; overlapping border tiles overwrite earlier ones.
pub fn patchwise_projector(net: &ProjectionNetwork, img: &Image, patch: usize) -> Result<Image> {
    let (patches, grid) = extract_patches(img, patch)?;
    let projected = patches
        .iter()
        .map(|p| {
            let out = net.project(&p.to_vector())?;
            Image::from_tensor(patch, patch, img.channels(), &out)
        })
        .collect::<Result<Vec<_>>>()?;
    stitch_patches(&projected, &grid)
}

/// Learned projector as a prox operator. Images larger than the network
/// input are processed patchwise. `ρ` is ignored.
#[derive(Debug, Clone)]
pub struct NetworkProjector {
    net: Arc<ProjectionNetwork>,
    height: usize,
    width: usize,
    channels: usize,
}

impl NetworkProjector {
    pub fn new(net: Arc<ProjectionNetwork>, height: usize, width: usize, channels: usize) -> Result<Self> {
        let s = net.image_shape();
        if s.channels != channels {
            return Err(Error::dim(format!("projector takes {} channels, images have {channels}", s.channels)));
        }
        let whole = s.height == height && s.width == width;
        if !whole && (s.height != s.width || height < s.height || width < s.width) {
            return Err(Error::dim(format!(
                "projector input {}x{} can neither cover nor tile a {height}x{width} image",
                s.height, s.width
            )));
        }
        Ok(Self { net, height, width, channels })
    }

    pub fn network(&self) -> &ProjectionNetwork {
        &self.net
    }

    fn is_patchwise(&self) -> bool {
        let s = self.net.image_shape();
        s.height != self.height || s.width != self.width
    }
}

impl ProxOperator for NetworkProjector {
    fn prox(&self, v: &Tensor, _rho: f64) -> Result<Tensor> {
        if !self.is_patchwise() {
            return network_projector_prox(&self.net, v);
        }
        if !self.net.is_ready() {
            return Err(Error::State("projector has no reference statistics; train it first".into()));
        }
        let img = Image::from_tensor(self.height, self.width, self.channels, v)?;
        let out = patchwise_projector(&self.net, &img, self.net.image_shape().height)?;
        Ok(out.to_vector())
    }

    fn name(&self) -> String {
        if self.is_patchwise() {
            format!("projector(patch={})", self.net.image_shape().height)
        } else {
            "projector".into()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::{build_projector, ProjectorArch};
    use crate::tensor::{l2_norm, RngStream};
    use crate::wavelets::WaveletCoeffs;
    use proptest::prelude::*;

    fn random(n: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed);
        Tensor::from_vec((0..n).map(|_| rng.next_normal()).collect()).unwrap()
    }

    #[test]
    fn soft_threshold_examples() {
        let v = Tensor::from_vec(vec![3.0, -0.5, 0.0, -4.0]).unwrap();
        let s = soft_threshold(&v, 1.0).unwrap();
        assert_eq!(s.data(), &[2.0, 0.0, 0.0, -3.0]);
        for t in [0.0, 0.3, 7.0] {
            assert_eq!(soft_threshold_scalar(0.0, t), 0.0);
        }
        assert!(matches!(soft_threshold(&v, -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn wavelet_prox_zero_lambda_is_identity() {
        let prior = L1WaveletPrior::new(0.0, 8, 8, 1, None).unwrap();
        let v = random(64, 1);
        let out = prior.prox(&v, 0.3).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wavelet_prox_keeps_constant_images() {
        let prior = L1WaveletPrior::new(0.05, 8, 8, 1, Some(2)).unwrap();
        let v = Tensor::filled(vec![64], 0.4);
        let out = prior.prox(&v, 0.3).unwrap();
        // two levels scale the approximation band by 4; only it is shrunk
        let expect = (4.0 * 0.4 - 0.05 / 0.3) / 4.0;
        for a in out.data() {
            assert!((a - expect).abs() < 1e-12);
        }
    }

    fn objective(x: &[f64], v: &[f64], t: f64, levels: usize) -> f64 {
        let w = haar_forward_raw(x, 8, 8, 1, levels).unwrap().to_vec();
        0.5 * x.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + t * w.iter().map(|c| c.abs()).sum::<f64>()
    }

    #[test]
    fn wavelet_prox_matches_per_coefficient_minimizer() {
        let (lambda, rho, levels) = (0.05, 0.1, 3);
        let t = lambda / rho;
        let prior = L1WaveletPrior::new(lambda, 8, 8, 1, Some(levels)).unwrap();
        let v = random(64, 2);
        let out = prior.prox(&v, rho).unwrap();

        // each coefficient minimizes ½(c − w)² + t|w| over the stationary
        // candidates {c − t, c + t, 0}
        let c = haar_forward_raw(v.data(), 8, 8, 1, levels).unwrap().to_vec();
        let best: Vec<f64> = c
            .iter()
            .map(|&c| {
                [c - t, c + t, 0.0]
                    .into_iter()
                    .min_by(|a, b| {
                        let fa = 0.5 * (c - a).powi(2) + t * a.abs();
                        let fb = 0.5 * (c - b).powi(2) + t * b.abs();
                        fa.partial_cmp(&fb).unwrap()
                    })
                    .unwrap()
            })
            .collect();
        let oracle = haar_inverse_raw(&WaveletCoeffs::from_vec(8, 8, 1, levels, &best).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }

        let f0 = objective(out.data(), v.data(), t, levels);
        let mut rng = RngStream::new(9);
        for _ in 0..50 {
            let x: Vec<f64> = out.data().iter().map(|a| a + 1e-3 * rng.next_normal()).collect();
            assert!(objective(&x, v.data(), t, levels) >= f0 - 1e-12);
        }
    }

    #[test]
    fn wavelet_prox_checks_geometry() {
        let prior = L1WaveletPrior::new(0.05, 8, 8, 1, None).unwrap();
        assert!(matches!(prior.prox(&random(63, 0), 0.3), Err(Error::Dimension(_))));
        assert!(L1WaveletPrior::new(-1.0, 8, 8, 1, None).is_err());
    }

    #[test]
    fn pixel_l1_and_identity() {
        let v = Tensor::from_vec(vec![1.0, -0.2]).unwrap();
        let p = PixelL1Prior::new(0.3).unwrap().prox(&v, 1.0).unwrap();
        assert!((p.data()[0] - 0.7).abs() < 1e-15 && p.data()[1] == 0.0);
        assert_eq!(IdentityProx.prox(&v, 2.0).unwrap(), v);
        assert!(IdentityProx.prox(&v, 0.0).is_err());
    }

    fn ready_projector(h: usize, w: usize) -> ProjectionNetwork {
        let mut net = build_projector(&ProjectorArch::new(h, w, 1), 3).unwrap();
        let mut rng = RngStream::new(4);
        let batch: Vec<f64> = (0..4 * h * w).map(|_| rng.next_uniform() * 2.0 - 1.0).collect();
        let latent = net.encoder.calibrate(&batch, 4).unwrap();
        net.decoder.calibrate(&latent, 4).unwrap();
        net.encoder.clear_cache();
        net.decoder.clear_cache();
        net
    }

    #[test]
    fn untrained_projector_is_a_state_error() {
        let net = build_projector(&ProjectorArch::new(8, 8, 1), 0).unwrap();
        assert!(matches!(network_projector_prox(&net, &random(64, 0)), Err(Error::State(_))));
    }

    #[test]
    fn projector_output_shape_range_and_determinism() {
        let net = Arc::new(ready_projector(8, 8));
        let p = NetworkProjector::new(net.clone(), 8, 8, 1).unwrap();
        let v = random(64, 5);
        let a = p.prox(&v, 0.3).unwrap();
        let b = p.prox(&v, 30.0).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(matches!(p.prox(&random(63, 0), 0.3), Err(Error::Dimension(_))));
    }

    #[test]
    fn patchwise_matches_single_calls() {
        let net = ready_projector(8, 8);
        let img = Image::from_tensor(8, 8, 1, &random(64, 6).map(|x| x.tanh())).unwrap();
        let whole = patchwise_projector(&net, &img, 8).unwrap();
        assert_eq!(whole.to_vector(), net.project(&img.to_vector()).unwrap());

        let big = Image::from_tensor(16, 16, 1, &random(256, 7).map(|x| x.tanh())).unwrap();
        let out = patchwise_projector(&net, &big, 8).unwrap();
        let (tiles, grid) = extract_patches(&big, 8).unwrap();
        for (tile, (r0, c0)) in tiles.iter().zip(grid.origins()) {
            let expect = net.project(&tile.to_vector()).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(out.get(r0 + y, c0 + x, 0), expect.data()[y * 8 + x]);
                }
            }
        }
    }

    #[test]
    fn patchwise_covers_non_divisible_images() {
        let net = Arc::new(ready_projector(8, 8));
        let p = NetworkProjector::new(net.clone(), 13, 11, 1).unwrap();
        let v = random(13 * 11, 8).map(|x| x.tanh());
        let out = p.prox(&v, 1.0).unwrap();
        let img = Image::from_tensor(13, 11, 1, &v).unwrap();
        let (tiles, grid) = extract_patches(&img, 8).unwrap();
        let origins: Vec<_> = grid.origins().collect();
        let projected: Vec<Tensor> = tiles.iter().map(|t| net.project(&t.to_vector()).unwrap()).collect();
        for y in 0..13 {
            for x in 0..11 {
                let last = origins
                    .iter()
                    .rposition(|&(r0, c0)| (r0..r0 + 8).contains(&y) && (c0..c0 + 8).contains(&x))
                    .expect("pixel not covered by any tile");
                let (r0, c0) = origins[last];
                assert_eq!(out.data()[y * 11 + x], projected[last].data()[(y - r0) * 8 + x - c0]);
            }
        }
        assert!(NetworkProjector::new(Arc::new(ready_projector(8, 8)), 6, 6, 1).is_err());
    }

    proptest! {
        #[test]
        fn soft_threshold_is_a_contraction(a in prop::collection::vec(-5.0f64..5.0, 16), b in prop::collection::vec(-5.0f64..5.0, 16), t in 0.0f64..3.0) {
            let (ta, tb) = (Tensor::from_vec(a).unwrap(), Tensor::from_vec(b).unwrap());
            let lhs = l2_norm(&soft_threshold(&ta, t).unwrap().sub(&soft_threshold(&tb, t).unwrap()).unwrap());
            prop_assert!(lhs <= l2_norm(&ta.sub(&tb).unwrap()) + 1e-12);
        }

        #[test]
        fn wavelet_prox_is_one_lipschitz(sa in 0u64..1000, sb in 0u64..1000, lambda in 0.0f64..1.0, rho in 0.05f64..5.0) {
            let prior = L1WaveletPrior::new(lambda, 8, 8, 1, None).unwrap();
            let (a, b) = (random(64, sa), random(64, sb + 1000));
            let lhs = l2_norm(&prior.prox(&a, rho).unwrap().sub(&prior.prox(&b, rho).unwrap()).unwrap());
            prop_assert!(lhs <= l2_norm(&a.sub(&b).unwrap()) + 1e-10);
        }
    }
}
