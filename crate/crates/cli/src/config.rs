//! Experiment configuration, read from a sectioned TOML file. Every field
//! has a default except file paths.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use learnprox::error::{Error, Result};
use learnprox::neuralnet::AdamConfig;
use learnprox::solvers::{AdmmConfig, CgParams};
use learnprox::training::{LossWeights, PerturbationConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Cs,
    PixelwiseInpaint,
    ScatteredInpaint,
    BlockInpaint,
    Superres,
    Denoise,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Cs => "cs",
            TaskKind::PixelwiseInpaint => "pixelwise_inpaint",
            TaskKind::ScatteredInpaint => "scattered_inpaint",
            TaskKind::BlockInpaint => "block_inpaint",
            TaskKind::Superres => "superres",
            TaskKind::Denoise => "denoise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    L1Wavelet,
    Projector,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            PriorKind::L1Wavelet => "l1_wavelet",
            PriorKind::Projector => "projector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Measurement ratio m/d for compressive sensing.
    pub ratio: f64,
    /// Fraction of pixels removed by pixelwise inpainting.
    pub drop_rate: f64,
    /// Standard deviation of additive measurement noise, in image units.
    pub sigma: f64,
    /// Denoising noise level on the 0–255 scale.
    pub denoise_sigma: f64,
    /// Super-resolution box-averaging factor.
    pub factor: usize,
    pub scattered_blocks: usize,
    /// Scattered-hole side as a fraction of the shorter image side.
    pub scattered_side: f64,
    /// Centered hole extent as a fraction of each image side.
    pub block_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Cs,
            ratio: 0.3,
            drop_rate: 0.5,
            sigma: 0.0,
            denoise_sigma: 25.0,
            factor: 2,
            scattered_blocks: 10,
            scattered_side: 0.1,
            block_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub lambda: f64,
    /// Haar depth; the default depends on the image size.
    pub levels: Option<usize>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { kind: PriorKind::L1Wavelet, lambda: 0.05, levels: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmSection {
    /// Penalty; unset means 0.3, or 3σ/255 for denoising.
    pub rho: Option<f64>,
    pub max_iters: usize,
    pub stop_tol: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub early_stop_at: Option<usize>,
    pub clamp_output: bool,
}

impl Default for AdmmSection {
    fn default() -> Self {
        let d = AdmmConfig::default();
        Self {
            rho: None,
            max_iters: d.max_iters,
            stop_tol: d.stop_tol,
            cg_tol: d.cg.tol,
            cg_max_iters: d.cg.max_iters,
            early_stop_at: None,
            clamp_output: d.clamp_output,
        }
    }
}

impl AdmmSection {
    pub fn resolve(&self, task: &TaskConfig, rho_override: Option<f64>) -> AdmmConfig {
        let rho = rho_override.or(self.rho).unwrap_or(match task.kind {
            TaskKind::Denoise => AdmmConfig::denoise_rho(task.denoise_sigma),
            _ => AdmmConfig::default().rho,
        });
        AdmmConfig {
            rho,
            max_iters: self.max_iters,
            stop_tol: self.stop_tol,
            cg: CgParams { tol: self.cg_tol, max_iters: self.cg_max_iters },
            early_stop_at: self.early_stop_at,
            clamp_output: self.clamp_output,
            ..AdmmConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Dataset order, splits and synthetic images.
    pub data: u64,
    /// Operators and measurement noise.
    pub operator: u64,
    /// Network initialization, perturbations and batch order.
    pub training: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SeedSection {
    pub data: u64,
    pub operator: u64,
    pub training: u64,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// IDX image file or a directory of PNG/PGM files; synthetic shapes
    /// when unset.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            images: None,
            labels: None,
            synthetic_count: 1250,
            synthetic_size: 28,
            train_count: 1000,
            val_count: 200,
            test_count: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub c_clip: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub widths: [usize; 3],
    pub mask_weight_min: f64,
    pub mask_weight_max: f64,
    pub low_res_mask_side: usize,
    pub smoothing: bool,
    pub smoothing_ratio_min: f64,
    pub smoothing_ratio_max: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let p = PerturbationConfig::default();
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            patience: t.patience,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            c_clip: t.c_clip,
            lambda1: t.weights.l1,
            lambda2: t.weights.l2,
            lambda3: t.weights.l3,
            lambda4: t.weights.l4,
            lambda5: t.weights.l5,
            widths: t.widths,
            mask_weight_min: p.mask_weight_range.0,
            mask_weight_max: p.mask_weight_range.1,
            low_res_mask_side: p.low_res_mask_side,
            smoothing: p.smoothing_enabled,
            smoothing_ratio_min: p.smoothing_ratio_range.0,
            smoothing_ratio_max: p.smoothing_ratio_range.1,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            patience: self.patience,
            weights: LossWeights {
                l1: self.lambda1,
                l2: self.lambda2,
                l3: self.lambda3,
                l4: self.lambda4,
                l5: self.lambda5,
            },
            perturbation: PerturbationConfig {
                mask_weight_range: (self.mask_weight_min, self.mask_weight_max),
                low_res_mask_side: self.low_res_mask_side,
                smoothing_ratio_range: (self.smoothing_ratio_min, self.smoothing_ratio_max),
                smoothing_enabled: self.smoothing,
            },
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            c_clip: self.c_clip,
            widths: self.widths,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Projector model file.
    pub model: Option<PathBuf>,
    /// Ground-truth image for `solve`; measurements are synthesized from it.
    pub input: Option<PathBuf>,
    /// Measurement vector for `solve`, one value per line.
    pub measurement: Option<PathBuf>,
    /// Geometry of the unknown image when solving from a measurement file.
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub tasks: Vec<TaskKind>,
    pub priors: Vec<PriorKind>,
    /// Per-task penalty overrides keyed by task name.
    pub rho: BTreeMap<TaskKind, f64>,
    /// Per-task measurement noise overrides keyed by task name.
    pub sigma: BTreeMap<TaskKind, f64>,
}

impl BenchConfig {
    /// Task settings the benchmark uses for `kind`.
    pub fn task_config(&self, base: &TaskConfig, kind: TaskKind) -> TaskConfig {
        TaskConfig { kind, sigma: self.sigma.get(&kind).copied().unwrap_or(base.sigma), ..base.clone() }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::Cs, TaskKind::PixelwiseInpaint, TaskKind::BlockInpaint, TaskKind::Superres],
            priors: vec![PriorKind::L1Wavelet, PriorKind::Projector],
            rho: BTreeMap::new(),
            sigma: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub prior: PriorConfig,
    pub admm: AdmmSection,
    pub seeds: SeedSection,
    pub data: DataConfig,
    pub train: TrainSection,
    pub io: IoConfig,
    pub bench: BenchConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            offset: e.span().map_or(0, |s| s.start as u64),
            detail: e.message().to_string(),
        })
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Format { offset, detail } => {
                Error::Format { offset, detail: format!("{}: {detail}", path.display()) }
            }
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in
            [&mut cfg.data.images, &mut cfg.data.labels, &mut cfg.io.model, &mut cfg.io.input, &mut cfg.io.measurement]
                .into_iter()
                .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds { data: self.seeds.data, operator: self.seeds.operator, training: self.seeds.training }
    }

    /// SHA-256 of the canonical serialization, first 16 hex digits.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Comment line placed before every CSV header.
    pub fn csv_comment(&self) -> String {
        let s = self.seeds();
        format!(
            "# config_hash={} seed_data={} seed_operator={} seed_training={}\n",
            self.hash(),
            s.data,
            s.operator,
            s.training
        )
    }
}
