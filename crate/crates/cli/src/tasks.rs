//! Forward models and measurements for each restoration task.

use std::sync::Arc;

use learnprox::error::{Error, Result};
use learnprox::imagery::Image;
use learnprox::linops::{
    add_measurement_noise, box_downsample_op, gaussian_matrix_op, identity_op, mask_op, GaussianMatrixOp,
    LinearOperator, MaskSpec,
};
use learnprox::neuralnet::ProjectionNetwork;
use learnprox::priors::{L1WaveletPrior, NetworkProjector, ProxOperator};
use learnprox::tensor::{RngStream, Tensor};

use crate::config::{PriorConfig, PriorKind, TaskConfig, TaskKind};

const SHARED_TAG: u64 = 0x005E_ED0A;

/// Builds operators and measurements for one task on images of a fixed
/// geometry. Masks and noise are drawn per image index from the operator
/// seed; the compressive-sensing matrix is shared by all images.
#[derive(Clone)]
pub struct TaskSetup {
    pub task: TaskConfig,
    seed: u64,
    geometry: (usize, usize, usize),
    shared: Option<Arc<dyn LinearOperator>>,
    gaussian: Option<Arc<GaussianMatrixOp>>,
}

impl std::fmt::Debug for TaskSetup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TaskSetup")
            .field("task", &self.task)
            .field("seed", &self.seed)
            .field("geometry", &self.geometry)
            .finish()
    }
}

fn index_seed(seed: u64, index: usize, stream: u64) -> u64 {
    RngStream::derive(seed, 2 * index as u64 + stream).seed()
}

impl TaskSetup {
    pub fn new(task: &TaskConfig, operator_seed: u64, height: usize, width: usize, channels: usize) -> Result<Self> {
        if !(task.sigma >= 0.0) || !(task.denoise_sigma >= 0.0) {
            return Err(Error::Parameter("noise levels must be non-negative".into()));
        }
        let mut setup = Self {
            task: task.clone(),
            seed: operator_seed,
            geometry: (height, width, channels),
            shared: None,
            gaussian: None,
        };
        setup.shared = match task.kind {
            TaskKind::Cs => {
                let a = Arc::new(gaussian_matrix_op(
                    height * width * channels,
                    task.ratio,
                    RngStream::derive(operator_seed, SHARED_TAG).seed(),
                )?);
                setup.gaussian = Some(a.clone());
                Some(a)
            }
            TaskKind::BlockInpaint => Some(Arc::new(mask_op(
                &MaskSpec::CenteredBlock { fraction: task.block_fraction },
                height,
                width,
                channels,
            )?)),
            TaskKind::Superres => Some(Arc::new(box_downsample_op(height, width, channels, task.factor)?)),
            TaskKind::Denoise => Some(Arc::new(identity_op(height * width * channels))),
            TaskKind::PixelwiseInpaint | TaskKind::ScatteredInpaint => None,
        };
        if setup.shared.is_none() {
            setup.operator(0)?;
        }
        Ok(setup)
    }

    /// Same task with a `fraction` of the Gaussian matrix entries redrawn.
    pub fn with_resampled_matrix(&self, fraction: f64, seed: u64) -> Result<Self> {
        let a = self
            .gaussian
            .as_ref()
            .ok_or_else(|| Error::Parameter(format!("{} has no Gaussian matrix to resample", self.task.kind.name())))?;
        let b = Arc::new(a.resample_entries(fraction, seed)?);
        Ok(Self { shared: Some(b.clone()), gaussian: Some(b), ..self.clone() })
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        self.geometry
    }

    /// Standard deviation of the additive noise in image units.
    pub fn noise_sigma(&self) -> f64 {
        match self.task.kind {
            TaskKind::Denoise => 2.0 * self.task.denoise_sigma / 255.0,
            _ => self.task.sigma,
        }
    }

    pub fn operator(&self, index: usize) -> Result<Arc<dyn LinearOperator>> {
        if let Some(op) = &self.shared {
            return Ok(op.clone());
        }
        let (h, w, c) = self.geometry;
        let seed = index_seed(self.seed, index, 0);
        let spec = match self.task.kind {
            TaskKind::PixelwiseInpaint => MaskSpec::Pixelwise { drop_rate: self.task.drop_rate, seed },
            TaskKind::ScatteredInpaint => MaskSpec::Scattered {
                blocks: self.task.scattered_blocks,
                side_fraction: self.task.scattered_side,
                seed,
            },
            _ => unreachable!("shared operator present"),
        };
        Ok(Arc::new(mask_op(&spec, h, w, c)?))
    }

    /// Operator and noisy measurement `y = A x + n` for image `index`.
    pub fn measure(&self, index: usize, truth: &Image) -> Result<(Arc<dyn LinearOperator>, Tensor)> {
        let (h, w, c) = self.geometry;
        if (truth.height(), truth.width(), truth.channels()) != self.geometry {
            return Err(Error::Dimension(format!(
                "task set up for {h}x{w}x{c} images, got {}x{}x{}",
                truth.height(),
                truth.width(),
                truth.channels()
            )));
        }
        let op = self.operator(index)?;
        let clean = op.forward(&truth.to_vector())?;
        let y = add_measurement_noise(&clean, self.noise_sigma(), index_seed(self.seed, index, 1))?;
        Ok((op, y))
    }
}

/// The configured prior for images of the given geometry. The projector
/// needs a trained model.
pub fn build_prior(
    prior: &PriorConfig,
    kind: PriorKind,
    model: Option<&Arc<ProjectionNetwork>>,
    geometry: (usize, usize, usize),
) -> Result<Box<dyn ProxOperator>> {
    let (h, w, c) = geometry;
    Ok(match kind {
        PriorKind::L1Wavelet => Box::new(L1WaveletPrior::new(prior.lambda, h, w, c, prior.levels)?),
        PriorKind::Projector => {
            let net = model.ok_or_else(|| Error::State("projector prior needs a model file".into()))?;
            Box::new(NetworkProjector::new(net.clone(), h, w, c)?)
        }
    })
}
