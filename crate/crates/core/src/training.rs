//! Adversarial training of the projection network.

use crate::error::{Error, Result};
use crate::imagery::{area_downsample, bicubic_upsample, nearest_resize, Image};
use crate::neuralnet::gradcheck::{relative_error, GradCheck, FD_STEP};
use crate::neuralnet::{
    build_classifier, build_projector, clip_weights, hwc_to_chw, Adam, AdamConfig, ClassifierArch, LayerSpec, Network,
    ProjectionNetwork, ProjectorArch, Shape,
};
use crate::solvers::format_float;
use crate::tensor::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    pub mask_weight_range: (f64, f64),
    pub low_res_mask_side: usize,
    pub smoothing_ratio_range: (f64, f64),
    pub smoothing_enabled: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            mask_weight_range: (0.05, 0.5),
            low_res_mask_side: 4,
            smoothing_ratio_range: (0.2, 0.95),
            smoothing_enabled: false,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mask_weight_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Range { lo, hi });
        }
        if self.low_res_mask_side < 2 {
            return Err(Error::param(format!("low_res_mask_side must be at least 2, got {}", self.low_res_mask_side)));
        }
        let (lo, hi) = self.smoothing_ratio_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Range { lo, hi });
        }
        Ok(())
    }
}

fn uniform_in(rng: &mut RngStream, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.next_uniform()
}

/// Draws `v ~ f(x)`: optional area-downsample/nearest-upsample smoothing,
/// then additive Gaussian noise whose standard deviation follows a
/// bicubic-upsampled low-resolution mask. The result is not clamped.
pub fn perturb(img: &Image, cfg: &PerturbationConfig, rng: &mut RngStream) -> Result<Image> {
    cfg.validate()?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut base = img.clone();
    if cfg.smoothing_enabled {
        let r = uniform_in(rng, cfg.smoothing_ratio_range);
        let th = ((r * h as f64).round() as usize).clamp(1, h);
        let tw = ((r * w as f64).round() as usize).clamp(1, w);
        if (th, tw) != (h, w) {
            base = nearest_resize(&area_downsample(img, th, tw)?, h, w)?;
        }
    }
    let side = cfg.low_res_mask_side;
    let low: Vec<f64> = (0..side * side).map(|_| uniform_in(rng, cfg.mask_weight_range)).collect();
    let mask = bicubic_upsample(&Image::new(side, side, 1, low)?, h.max(side), w.max(side))?;
    let mask = if (h, w) == (mask.height(), mask.width()) { mask } else { nearest_resize(&mask, h, w)? };
    let mut data = base.data().to_vec();
    for y in 0..h {
        for x in 0..w {
            let m = mask.get(y, x, 0);
            for ch in 0..c {
                data[(y * w + x) * c + ch] += m * rng.next_normal();
            }
        }
    }
    Image::new(h, w, c, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub l5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.01, l2: 1.0, l3: 0.005, l4: 0.0001, l5: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.l2, self.l3, self.l4, self.l5];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::param(format!("loss weights must be non-negative, got {all:?}")));
        }
        Ok(())
    }
}

/// `log(1 + eᶻ)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The five projector-loss terms, each averaged over the batch:
/// `‖x−P(x)‖²`, `‖x−P(v)‖²`, `‖v−P(v)‖²`, `−log σ(D_ℓ(E(v)))`,
/// `−log σ(D(P(v)))`, already multiplied by their weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms(pub [f64; 5]);

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Weighted sum of the three distance terms.
    pub fn reconstruction(&self) -> f64 {
        self.0[..3].iter().sum()
    }
}

/// Intermediate results of a projector-loss evaluation on `n` samples.
#[derive(Debug, Clone)]
pub struct ProjectorPass {
    pub terms: LossTerms,
    /// `E(x)` then `E(v)`, `2n` latent samples.
    pub latent: Vec<f64>,
    /// `P(v)`, `n` samples.
    pub projected_v: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn check_batch(x: &[f64], v: &[f64], n: usize, len: usize) -> Result<()> {
    if n == 0 || x.len() != n * len || v.len() != n * len {
        return Err(Error::dim(format!(
            "expected two batches of {n} samples with {len} values, got {} and {}",
            x.len(),
            v.len()
        )));
    }
    Ok(())
}

fn assemble_terms(
    x: &[f64],
    v: &[f64],
    p_all: &[f64],
    dl_logits: &[f64],
    d_logits: &[f64],
    n: usize,
    w: &LossWeights,
) -> LossTerms {
    let len = x.len() / n;
    let (px, pv) = p_all.split_at(n * len);
    let nf = n as f64;
    LossTerms([
        w.l1 * sq_dist(x, px) / nf,
        w.l2 * sq_dist(x, pv) / nf,
        w.l3 * sq_dist(v, pv) / nf,
        w.l4 * dl_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / nf,
        w.l5 * d_logits.iter().map(|&l| softplus(-l)).sum::<f64>() / nf,
    ])
}

/// Projector loss without gradients. `x` and `v` hold `n` channel-major
/// samples each.
pub fn projector_loss(
    p: &ProjectionNetwork,
    d: &Network,
    dl: &Network,
    x: &[f64],
    v: &[f64],
    n: usize,
    w: &LossWeights,
) -> Result<LossTerms> {
    let len = p.image_shape().len();
    check_batch(x, v, n, len)?;
    let xv = [x, v].concat();
    let latent = p.encoder.infer(&xv, 2 * n)?;
    let p_all = p.decoder.infer(&latent, 2 * n)?;
    let dl_logits = dl.infer(&latent[n * p.latent_shape().len()..], n)?;
    let d_logits = d.infer(&p_all[n * len..], n)?;
    Ok(assemble_terms(x, v, &p_all, &dl_logits, &d_logits, n, w))
}

/// Projector loss with reverse-mode gradients accumulated into the
/// encoder and decoder parameters. Classifier gradients are accumulated
/// too and should be zeroed before the classifier updates.
pub fn projector_loss_backward(
    p: &mut ProjectionNetwork,
    d: &mut Network,
    dl: &mut Network,
    x: &[f64],
    v: &[f64],
    n: usize,
    w: &LossWeights,
) -> Result<ProjectorPass> {
    let len = p.image_shape().len();
    let llen = p.latent_shape().len();
    check_batch(x, v, n, len)?;
    let xv = [x, v].concat();
    let latent = p.encoder.forward(&xv, 2 * n)?;
    let p_all = p.decoder.forward(&latent, 2 * n)?;
    let dl_logits = dl.forward(&latent[n * llen..], n)?;
    let d_logits = d.forward(&p_all[n * len..], n)?;
    let terms = assemble_terms(x, v, &p_all, &dl_logits, &d_logits, n, w);

    let nf = n as f64;
    // d/dl softplus(−l) = −σ(−l)
    let g_dl: Vec<f64> = dl_logits.iter().map(|&l| -w.l4 * sigmoid(-l) / nf).collect();
    let g_d: Vec<f64> = d_logits.iter().map(|&l| -w.l5 * sigmoid(-l) / nf).collect();
    let dlatent_adv = dl.backward(&g_dl)?;
    let dpv_adv = d.backward(&g_d)?;
    dl.clear_cache();
    d.clear_cache();

    let mut dp = vec![0.0; 2 * n * len];
    let (px, pv) = p_all.split_at(n * len);
    for i in 0..n * len {
        dp[i] = 2.0 * w.l1 * (px[i] - x[i]) / nf;
        dp[n * len + i] = 2.0 * w.l2 * (pv[i] - x[i]) / nf + 2.0 * w.l3 * (pv[i] - v[i]) / nf + dpv_adv[i];
    }
    let mut dlatent = p.decoder.backward(&dp)?;
    for (g, a) in dlatent[n * llen..].iter_mut().zip(&dlatent_adv) {
        *g += a;
    }
    p.encoder.backward(&dlatent)?;
    p.encoder.clear_cache();
    p.decoder.clear_cache();
    Ok(ProjectorPass { terms, latent, projected_v: pv.to_vec() })
}

/// `mean softplus(−l₊) + mean softplus(l₋)`, the binary cross-entropy of
/// positives against negatives.
pub fn classifier_loss(net: &Network, positives: &[f64], negatives: &[f64], n_pos: usize, n_neg: usize) -> Result<f64> {
    let lp = net.infer(positives, n_pos)?;
    let ln = net.infer(negatives, n_neg)?;
    Ok(bce_from_logits(&lp, &ln))
}

pub fn bce_from_logits(pos: &[f64], neg: &[f64]) -> f64 {
    pos.iter().map(|&l| softplus(-l)).sum::<f64>() / pos.len() as f64
        + neg.iter().map(|&l| softplus(l)).sum::<f64>() / neg.len() as f64
}

/// Classifier loss with parameter gradients accumulated into `net`.
pub fn classifier_loss_backward(net: &mut Network, positives: &[f64], negatives: &[f64], n: usize) -> Result<f64> {
    let batch = [positives, negatives].concat();
    let logits = net.forward(&batch, 2 * n)?;
    let (lp, ln) = logits.split_at(n);
    let nf = n as f64;
    let grad: Vec<f64> = lp.iter().map(|&l| -sigmoid(-l) / nf).chain(ln.iter().map(|&l| sigmoid(l) / nf)).collect();
    net.backward(&grad)?;
    net.clear_cache();
    Ok(bce_from_logits(lp, ln))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub weights: LossWeights,
    pub perturbation: PerturbationConfig,
    pub adam: AdamConfig,
    pub c_clip: f64,
    pub widths: [usize; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 32,
            eval_every: 50,
            patience: 5,
            weights: LossWeights::default(),
            perturbation: PerturbationConfig::default(),
            adam: AdamConfig::default(),
            c_clip: 0.05,
            widths: [16, 32, 64],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.perturbation.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::param("batch_size and eval_every must be positive"));
        }
        if !(self.c_clip > 0.0) {
            return Err(Error::param(format!("c_clip must be positive, got {}", self.c_clip)));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::param("invalid optimizer settings"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub iteration: usize,
    pub terms: LossTerms,
    pub projector_loss: f64,
    pub d_loss: f64,
    pub dl_loss: f64,
    pub val_loss: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "iteration,loss_x_px,loss_x_pv,loss_v_pv,loss_latent_adv,loss_image_adv,projector_loss,d_loss,dl_loss,val_loss";

pub fn metrics_to_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let mut row = vec![m.iteration.to_string()];
        row.extend(m.terms.0.iter().map(|&t| format_float(t)));
        row.extend([m.projector_loss, m.d_loss, m.dl_loss].map(format_float));
        row.push(m.val_loss.map(format_float).unwrap_or_default());
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Projector, both classifiers, their optimizers and the training RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub projector: ProjectionNetwork,
    pub image_classifier: Network,
    pub latent_classifier: Network,
    opt_p: Adam,
    opt_d: Adam,
    opt_dl: Adam,
    pub iteration: usize,
    pub val_history: Vec<f64>,
    rng: RngStream,
}

const TAG_PROJECTOR: u64 = 1;
const TAG_IMAGE_CLASSIFIER: u64 = 2;
const TAG_LATENT_CLASSIFIER: u64 = 3;
const TAG_STEPS: u64 = 4;
const TAG_REFERENCE: u64 = 5;
const TAG_VALIDATION: u64 = 6;
const TAG_ORDER: u64 = 7;

impl TrainState {
    pub fn new(shape: Shape, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let arch =
            ProjectorArch { height: shape.height, width: shape.width, channels: shape.channels, widths: cfg.widths };
        let projector = build_projector(&arch, RngStream::derive(cfg.seed, TAG_PROJECTOR).seed())?;
        let image_classifier =
            build_classifier(&ClassifierArch::image(shape), RngStream::derive(cfg.seed, TAG_IMAGE_CLASSIFIER).seed())?;
        let latent_classifier = build_classifier(
            &ClassifierArch::latent(projector.latent_shape()),
            RngStream::derive(cfg.seed, TAG_LATENT_CLASSIFIER).seed(),
        )?;
        Ok(Self::from_networks(projector, image_classifier, latent_classifier, cfg))
    }

    pub fn from_networks(
        projector: ProjectionNetwork,
        image_classifier: Network,
        latent_classifier: Network,
        cfg: &TrainConfig,
    ) -> Self {
        Self {
            projector,
            image_classifier,
            latent_classifier,
            opt_p: Adam::new(cfg.adam),
            opt_d: Adam::new(cfg.adam),
            opt_dl: Adam::new(cfg.adam),
            iteration: 0,
            val_history: Vec::new(),
            rng: RngStream::derive(cfg.seed, TAG_STEPS),
        }
    }

    /// Recomputes every normalization layer's statistics: `P` from
    /// `[x_ref; v_ref]`, `D` from `[x_ref; P(v_ref)]`, `D_ℓ` from
    /// `[E(x_ref); E(v_ref)]`.
    pub fn calibrate(&mut self, x_ref: &[f64], v_ref: &[f64], n: usize) -> Result<()> {
        let xv = [x_ref, v_ref].concat();
        let latent = self.projector.encoder.calibrate(&xv, 2 * n)?;
        let p_all = self.projector.decoder.calibrate(&latent, 2 * n)?;
        let len = self.projector.image_shape().len();
        let d_batch = [x_ref, &p_all[n * len..]].concat();
        self.image_classifier.calibrate(&d_batch, 2 * n)?;
        self.latent_classifier.calibrate(&latent, 2 * n)?;
        for net in [
            &mut self.projector.encoder,
            &mut self.projector.decoder,
            &mut self.image_classifier,
            &mut self.latent_classifier,
        ] {
            net.clear_cache();
        }
        Ok(())
    }

    pub fn classifier_max_abs_param(&self) -> f64 {
        self.image_classifier.max_abs_param().max(self.latent_classifier.max_abs_param())
    }
}

fn images_to_batch(images: &[&Image], shape: Shape) -> Vec<f64> {
    images.iter().flat_map(|im| hwc_to_chw(im.data(), shape)).collect()
}

/// One 1:1:1 update: perturb the batch, one Adam step on `P`, then one
/// step each on `D` and `D_ℓ` using the pre-update projector outputs,
/// then weight truncation of both classifiers.
pub fn train_step(state: &mut TrainState, batch: &[&Image], cfg: &TrainConfig) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::param("training batch is empty"));
    }
    let shape = state.projector.image_shape();
    let n = batch.len();
    let perturbed =
        batch.iter().map(|im| perturb(im, &cfg.perturbation, &mut state.rng)).collect::<Result<Vec<_>>>()?;
    let x = images_to_batch(batch, shape);
    let v = images_to_batch(&perturbed.iter().collect::<Vec<_>>(), shape);

    let iteration = state.iteration;
    let fail = |detail: String| Error::Training { iteration, detail };

    state.projector.encoder.zero_grads();
    state.projector.decoder.zero_grads();
    let pass = projector_loss_backward(
        &mut state.projector,
        &mut state.image_classifier,
        &mut state.latent_classifier,
        &x,
        &v,
        n,
        &cfg.weights,
    )?;
    let projector_loss = pass.terms.total();
    if !projector_loss.is_finite() {
        return Err(fail(format!("projector loss is {projector_loss}; terms {:?}", pass.terms.0)));
    }
    {
        let ProjectionNetwork { encoder, decoder } = &mut state.projector;
        state.opt_p.step(&mut [encoder, decoder]);
    }

    state.image_classifier.zero_grads();
    let d_loss = classifier_loss_backward(&mut state.image_classifier, &x, &pass.projected_v, n)?;
    state.latent_classifier.zero_grads();
    let llen = state.projector.latent_shape().len();
    let (ex, ev) = pass.latent.split_at(n * llen);
    let dl_loss = classifier_loss_backward(&mut state.latent_classifier, ex, ev, n)?;
    if !d_loss.is_finite() || !dl_loss.is_finite() {
        return Err(fail(format!("classifier loss is not finite (D {d_loss}, D_latent {dl_loss})")));
    }
    state.opt_d.step(&mut [&mut state.image_classifier]);
    state.opt_dl.step(&mut [&mut state.latent_classifier]);
    clip_weights(&mut state.image_classifier, cfg.c_clip)?;
    clip_weights(&mut state.latent_classifier, cfg.c_clip)?;

    state.iteration += 1;
    Ok(StepMetrics { iteration, terms: pass.terms, projector_loss, d_loss, dl_loss, val_loss: None })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation projector (the initial network when no step ran).
    pub projector: ProjectionNetwork,
    pub image_classifier: Network,
    pub latent_classifier: Network,
    pub metrics: Vec<StepMetrics>,
    pub best_iteration: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Validation loss: the weighted distance terms of the projector loss on
/// fixed perturbations of the validation images.
fn validation_loss(p: &ProjectionNetwork, x: &[f64], v: &[f64], n: usize, w: &LossWeights) -> Result<f64> {
    let len = p.image_shape().len();
    let mut total = 0.0;
    let chunk = 64;
    for start in (0..n).step_by(chunk) {
        let m = chunk.min(n - start);
        let xs = &x[start * len..(start + m) * len];
        let vs = &v[start * len..(start + m) * len];
        let xv = [xs, vs].concat();
        let p_all = p.infer_batch(&xv, 2 * m)?;
        let (px, pv) = p_all.split_at(m * len);
        total += w.l1 * sq_dist(xs, px) + w.l2 * sq_dist(xs, pv) + w.l3 * sq_dist(vs, pv);
    }
    Ok(total / n as f64)
}

/// Trains on `train_set`, evaluating on `val_set` every `eval_every`
/// iterations and after the last one. Stops once `patience` consecutive
/// evaluations fail to improve on the best validation loss and returns the
/// best-validation projector, quantized to `f32`.
pub fn train(train_set: &[Image], val_set: &[Image], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(train_set, val_set, cfg, &mut |_| {})
}

pub fn train_with_progress(
    train_set: &[Image],
    val_set: &[Image],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train_set.first().ok_or_else(|| Error::param("training set is empty"))?;
    if val_set.is_empty() {
        return Err(Error::param("validation set is empty"));
    }
    let shape = Shape::new(first.channels(), first.height(), first.width());
    if train_set.iter().chain(val_set).any(|im| !im.same_geometry(first)) {
        return Err(Error::dim("all training and validation images must share one geometry"));
    }
    let mut state = TrainState::new(shape, cfg)?;
    if cfg.iterations == 0 {
        return Ok(TrainOutcome {
            projector: state.projector,
            image_classifier: state.image_classifier,
            latent_classifier: state.latent_classifier,
            metrics: Vec::new(),
            best_iteration: None,
            best_val_loss: None,
            stopped_early: false,
        });
    }

    let mut ref_rng = RngStream::derive(cfg.seed, TAG_REFERENCE);
    let ref_idx: Vec<usize> = (0..cfg.batch_size).map(|_| ref_rng.next_below(train_set.len())).collect();
    let ref_imgs: Vec<&Image> = ref_idx.iter().map(|&i| &train_set[i]).collect();
    let ref_pert =
        ref_imgs.iter().map(|im| perturb(im, &cfg.perturbation, &mut ref_rng)).collect::<Result<Vec<_>>>()?;
    let x_ref = images_to_batch(&ref_imgs, shape);
    let v_ref = images_to_batch(&ref_pert.iter().collect::<Vec<_>>(), shape);

    let mut val_rng = RngStream::derive(cfg.seed, TAG_VALIDATION);
    let val_refs: Vec<&Image> = val_set.iter().collect();
    let val_pert = val_set.iter().map(|im| perturb(im, &cfg.perturbation, &mut val_rng)).collect::<Result<Vec<_>>>()?;
    let x_val = images_to_batch(&val_refs, shape);
    let v_val = images_to_batch(&val_pert.iter().collect::<Vec<_>>(), shape);

    let mut order_rng = RngStream::derive(cfg.seed, TAG_ORDER);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, ProjectionNetwork)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for it in 0..cfg.iterations {
        if cursor >= order.len() {
            order = order_rng.permutation(train_set.len());
            cursor = 0;
            state.calibrate(&x_ref, &v_ref, cfg.batch_size)?;
        }
        let take = cfg.batch_size.min(order.len() - cursor);
        let batch: Vec<&Image> = order[cursor..cursor + take].iter().map(|&i| &train_set[i]).collect();
        cursor += take;

        let mut m = train_step(&mut state, &batch, cfg)?;
        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations {
            let val = validation_loss(&state.projector, &x_val, &v_val, val_set.len(), &cfg.weights)?;
            if !val.is_finite() {
                return Err(Error::Training { iteration: it, detail: format!("validation loss is {val}") });
            }
            m.val_loss = Some(val);
            state.val_history.push(val);
            if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
                best = Some((val, it, state.projector.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        progress(&m);
        metrics.push(m);
        if since_best > cfg.patience {
            stopped_early = true;
            break;
        }
    }

    let (best_val, best_it, mut projector) = best.expect("at least one evaluation ran");
    projector.quantize_f32();
    state.image_classifier.quantize_f32();
    state.latent_classifier.quantize_f32();
    Ok(TrainOutcome {
        projector,
        image_classifier: state.image_classifier,
        latent_classifier: state.latent_classifier,
        metrics,
        best_iteration: Some(best_it),
        best_val_loss: Some(best_val),
        stopped_early,
    })
}

fn toy_nets(rng: &mut RngStream) -> Result<(ProjectionNetwork, Network, Network)> {
    let one = Shape::new(1, 1, 1);
    let encoder = Network::new(one, &[LayerSpec::Dense { out: 1 }, LayerSpec::Elu], rng)?;
    let decoder = Network::new(one, &[LayerSpec::Dense { out: 1 }], rng)?;
    let cls = [LayerSpec::Dense { out: 3 }, LayerSpec::Elu, LayerSpec::Dense { out: 1 }];
    let d = Network::new(one, &cls, rng)?;
    let dl = Network::new(one, &cls, rng)?;
    Ok((ProjectionNetwork::from_parts(encoder, decoder)?, d, dl))
}

/// Finite-difference check of the full projector loss with respect to the
/// projector parameters and of the classifier loss with respect to the
/// classifier parameters. Cases: a 4-parameter toy projector on 1×1
/// images, and the desk-scale architecture on 8×8 images. Adversarial
/// weights are raised so those terms are not swamped by the distance terms.
pub fn loss_gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = RngStream::new(seed);
    let w = LossWeights { l1: 0.3, l2: 1.0, l3: 0.2, l4: 0.5, l5: 0.7 };
    let mut out = Vec::new();

    let (toy, d, dl) = toy_nets(&mut rng)?;
    out.extend(check_losses("toy_projector", toy, d, dl, 3, &w, &mut rng, usize::MAX)?);

    let arch = ProjectorArch { height: 8, width: 8, channels: 1, widths: [4, 8, 8] };
    let mut p = build_projector(&arch, rng.next_below(1 << 30) as u64)?;
    let mut d = build_classifier(&ClassifierArch::image(p.image_shape()), 11)?;
    let mut dl = build_classifier(&ClassifierArch::latent(p.latent_shape()), 12)?;
    let n = 3;
    let x: Vec<f64> = (0..n * 64).map(|_| rng.next_uniform() * 2.0 - 1.0).collect();
    let v: Vec<f64> = x.iter().map(|a| a + 0.2 * rng.next_normal()).collect();
    let latent = p.encoder.calibrate(&[x.as_slice(), &v].concat(), 2 * n)?;
    let p_all = p.decoder.calibrate(&latent, 2 * n)?;
    d.calibrate(&[x.as_slice(), &p_all[n * 64..]].concat(), 2 * n)?;
    dl.calibrate(&latent, 2 * n)?;
    for net in [&mut p.encoder, &mut p.decoder, &mut d, &mut dl] {
        net.clear_cache();
    }
    out.extend(check_losses("desk_projector", p, d, dl, n, &w, &mut rng, 80)?);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn check_losses(
    name: &str,
    mut p: ProjectionNetwork,
    mut d: Network,
    mut dl: Network,
    n: usize,
    w: &LossWeights,
    rng: &mut RngStream,
    max_coords: usize,
) -> Result<Vec<GradCheck>> {
    let len = p.image_shape().len();
    let x: Vec<f64> = (0..n * len).map(|_| rng.next_uniform() * 2.0 - 1.0).collect();
    let v: Vec<f64> = x.iter().map(|a| a + 0.3 * rng.next_normal()).collect();

    p.encoder.zero_grads();
    p.decoder.zero_grads();
    projector_loss_backward(&mut p, &mut d, &mut dl, &x, &v, n, w)?;
    let grads = [p.encoder.grads_flat(), p.decoder.grads_flat()].concat();
    let params = [p.encoder.params_flat(), p.decoder.params_flat()].concat();
    let ne = p.encoder.param_count();
    let set = |p: &mut ProjectionNetwork, vals: &[f64]| -> Result<()> {
        p.encoder.set_params_flat(&vals[..ne])?;
        p.decoder.set_params_flat(&vals[ne..])
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for idx in coords(params.len(), max_coords) {
        let mut q = params.clone();
        q[idx] += FD_STEP;
        set(&mut p, &q)?;
        let up = projector_loss(&p, &d, &dl, &x, &v, n, w)?.total();
        q[idx] = params[idx] - FD_STEP;
        set(&mut p, &q)?;
        let down = projector_loss(&p, &d, &dl, &x, &v, n, w)?.total();
        analytic.push(grads[idx]);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    set(&mut p, &params)?;
    let projector = GradCheck {
        name: format!("{name}_loss"),
        param_rel_err: relative_error(&analytic, &numeric),
        input_rel_err: 0.0,
    };

    let xv = [x.as_slice(), &v].concat();
    let latent = p.encoder.infer(&xv, 2 * n)?;
    let pv = p.infer_batch(&v, n)?;
    let llen = p.latent_shape().len();
    let mut results = vec![projector];
    for (label, net, pos, neg) in [
        ("image_classifier", &mut d, x.clone(), pv),
        ("latent_classifier", &mut dl, latent[..n * llen].to_vec(), latent[n * llen..].to_vec()),
    ] {
        net.zero_grads();
        classifier_loss_backward(net, &pos, &neg, n)?;
        let grads = net.grads_flat();
        let params = net.params_flat();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for idx in coords(params.len(), max_coords) {
            let mut q = params.clone();
            q[idx] += FD_STEP;
            net.set_params_flat(&q)?;
            let up = classifier_loss(net, &pos, &neg, n, n)?;
            q[idx] = params[idx] - FD_STEP;
            net.set_params_flat(&q)?;
            let down = classifier_loss(net, &pos, &neg, n, n)?;
            analytic.push(grads[idx]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        net.set_params_flat(&params)?;
        results.push(GradCheck {
            name: format!("{name}_{label}_loss"),
            param_rel_err: relative_error(&analytic, &numeric),
            input_rel_err: 0.0,
        });
    }
    Ok(results)
}

fn coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * len / max + (i * 5) % (len / max).max(1)).collect()
    }
}

#[cfg(test)]
mod tests;
