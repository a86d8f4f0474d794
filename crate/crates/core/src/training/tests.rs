use super::*;
use crate::neuralnet::gradcheck::FD_TOLERANCE;

fn ramp(h: usize, w: usize) -> Image {
    let data = (0..h * w).map(|i| (i as f64 / (h * w) as f64) * 1.6 - 0.8).collect();
    Image::new(h, w, 1, data).unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: 6,
        batch_size: 4,
        eval_every: 2,
        patience: 10,
        widths: [4, 8, 8],
        seed,
        ..TrainConfig::default()
    }
}

fn tiny_set(count: usize, seed: u64) -> Vec<Image> {
    let mut rng = RngStream::new(seed);
    (0..count)
        .map(|_| {
            let (a, b) = (rng.next_uniform() - 0.5, rng.next_uniform() - 0.5);
            let data =
                (0..64).map(|i| (a * (i % 8) as f64 / 4.0 + b * (i / 8) as f64 / 4.0).clamp(-1.0, 1.0)).collect();
            Image::new(8, 8, 1, data).unwrap()
        })
        .collect()
}

#[test]
fn collapsed_mask_range_is_identity() {
    let img = ramp(8, 8);
    let cfg = PerturbationConfig { mask_weight_range: (0.0, 0.0), ..PerturbationConfig::default() };
    let v = perturb(&img, &cfg, &mut RngStream::new(1)).unwrap();
    assert_eq!(v, img);

    // a unit smoothing ratio keeps the source size
    let cfg = PerturbationConfig { smoothing_enabled: true, smoothing_ratio_range: (1.0, 1.0), ..cfg };
    assert_eq!(perturb(&img, &cfg, &mut RngStream::new(2)).unwrap(), img);
}

#[test]
fn smoothing_changes_the_image() {
    let img = ramp(16, 16);
    let cfg = PerturbationConfig {
        mask_weight_range: (0.0, 0.0),
        smoothing_enabled: true,
        smoothing_ratio_range: (0.5, 0.5),
        ..PerturbationConfig::default()
    };
    let v = perturb(&img, &cfg, &mut RngStream::new(3)).unwrap();
    assert_ne!(v, img);
    let min = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min >= img.data()[0] - 1e-12);
}

#[test]
fn per_pixel_noise_std_stays_in_mask_range() {
    let img = Image::filled(8, 8, 1, 0.0).unwrap();
    let cfg = PerturbationConfig::default();
    let mut rng = RngStream::new(4);
    let draws = 10_000;
    let mut sq = vec![0.0; 64];
    for _ in 0..draws {
        let v = perturb(&img, &cfg, &mut rng).unwrap();
        for (s, p) in sq.iter_mut().zip(v.data()) {
            *s += p * p;
        }
    }
    for s in sq {
        let std = (s / draws as f64).sqrt();
        // sampling error at 10⁴ draws is about 1 %
        assert!(std > 0.05 * 0.97 && std < 0.5 * 1.03, "std {std}");
    }
}

#[test]
fn perturbation_validation() {
    let img = ramp(8, 8);
    let mut rng = RngStream::new(0);
    let bad = PerturbationConfig { mask_weight_range: (0.5, 0.05), ..PerturbationConfig::default() };
    assert!(matches!(perturb(&img, &bad, &mut rng), Err(Error::Range { .. })));
    let bad = PerturbationConfig { low_res_mask_side: 1, ..PerturbationConfig::default() };
    assert!(perturb(&img, &bad, &mut rng).is_err());
}

fn identity_projector() -> ProjectionNetwork {
    let mut rng = RngStream::new(0);
    let one = Shape::new(1, 1, 1);
    let mut e = Network::new(one, &[LayerSpec::Dense { out: 1 }], &mut rng).unwrap();
    let mut d = Network::new(one, &[LayerSpec::Dense { out: 1 }], &mut rng).unwrap();
    e.set_params_flat(&[1.0, 0.0]).unwrap();
    d.set_params_flat(&[1.0, 0.0]).unwrap();
    ProjectionNetwork::from_parts(e, d).unwrap()
}

fn linear_logit(w: f64, b: f64) -> Network {
    let mut net = Network::new(Shape::new(1, 1, 1), &[LayerSpec::Dense { out: 1 }], &mut RngStream::new(0)).unwrap();
    net.set_params_flat(&[w, b]).unwrap();
    net
}

#[test]
fn identity_projector_leaves_only_adversarial_terms() {
    let p = identity_projector();
    let (d, dl) = (linear_logit(0.7, 0.1), linear_logit(-0.4, 0.2));
    let x = [0.3, -0.6];
    let w = LossWeights::default();
    let t = projector_loss(&p, &d, &dl, &x, &x, 2, &w).unwrap();
    assert_eq!(&t.0[..3], &[0.0, 0.0, 0.0]);
    let expect4 = w.l4 * x.iter().map(|&a| -(sigmoid(-0.4 * a + 0.2)).ln()).sum::<f64>() / 2.0;
    let expect5 = w.l5 * x.iter().map(|&a| -(sigmoid(0.7 * a + 0.1)).ln()).sum::<f64>() / 2.0;
    assert!((t.0[3] - expect4).abs() < 1e-15);
    assert!((t.0[4] - expect5).abs() < 1e-15);
    assert!((t.total() - expect4 - expect5).abs() < 1e-15);
}

#[test]
fn zero_adversarial_weights_leave_distance_terms() {
    let p = identity_projector();
    let (d, dl) = (linear_logit(0.7, 0.1), linear_logit(-0.4, 0.2));
    let w = LossWeights { l4: 0.0, l5: 0.0, ..LossWeights::default() };
    let (x, v) = ([0.3, -0.6], [0.5, -0.2]);
    let t = projector_loss(&p, &d, &dl, &x, &v, 2, &w).unwrap();
    assert_eq!(t.total(), t.reconstruction());
    // P = I: ‖x − v‖² per sample, averaged
    let dist = ((0.3f64 - 0.5).powi(2) + (-0.6f64 + 0.2).powi(2)) / 2.0;
    assert!((t.0[1] - w.l2 * dist).abs() < 1e-15);
    assert_eq!(t.0[2], 0.0);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let results = loss_gradient_suite(21).unwrap();
    assert_eq!(results.len(), 6);
    for r in &results {
        assert!(r.param_rel_err < FD_TOLERANCE, "{}: {:.3e}", r.name, r.param_rel_err);
    }
}

#[test]
fn classifier_loss_values() {
    let zero = linear_logit(0.0, 0.0);
    let l = classifier_loss(&zero, &[0.3, 1.0], &[-2.0], 2, 1).unwrap();
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
    assert!((2f64.ln() - 0.693147).abs() < 1e-6);

    let sharp = linear_logit(100.0, 0.0);
    assert!(classifier_loss(&sharp, &[1.0], &[-1.0], 1, 1).unwrap() < 1e-40);

    // logits +2 (positive) and −1 (negative)
    let unit = linear_logit(1.0, 0.0);
    let l = classifier_loss(&unit, &[2.0], &[-1.0], 1, 1).unwrap();
    let hand = (1.0 + (-2.0f64).exp()).ln() + (1.0 + (-1.0f64).exp()).ln();
    assert!((l - hand).abs() < 1e-15);
    assert!((l - 0.440190).abs() < 1e-6);
}

#[test]
fn softplus_is_stable() {
    assert_eq!(softplus(1000.0), 1000.0);
    assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    assert!((sigmoid(-800.0)).is_finite() && sigmoid(800.0) == 1.0);
}

fn calibrated_state(cfg: &TrainConfig, set: &[Image]) -> TrainState {
    let mut state = TrainState::new(Shape::new(1, 8, 8), cfg).unwrap();
    let refs: Vec<&Image> = set.iter().take(4).collect();
    let x = images_to_batch(&refs, Shape::new(1, 8, 8));
    let v: Vec<f64> = x.iter().map(|a| a * 0.9).collect();
    state.calibrate(&x, &v, 4).unwrap();
    state
}

#[test]
fn train_step_is_deterministic_and_clips() {
    let cfg = tiny_config(5);
    let set = tiny_set(8, 1);
    let batch: Vec<&Image> = set.iter().take(4).collect();
    let mut a = calibrated_state(&cfg, &set);
    let mut b = calibrated_state(&cfg, &set);
    for _ in 0..3 {
        let ma = train_step(&mut a, &batch, &cfg).unwrap();
        let mb = train_step(&mut b, &batch, &cfg).unwrap();
        assert_eq!(ma, mb);
        assert!(a.classifier_max_abs_param() <= cfg.c_clip);
        assert!(ma.terms.0.iter().all(|t| *t >= 0.0 && t.is_finite()));
    }
    assert_eq!(a.iteration, 3);
    assert!(train_step(&mut a, &[], &cfg).is_err());
}

#[test]
fn zero_budget_returns_initial_model() {
    let cfg = TrainConfig { iterations: 0, ..tiny_config(6) };
    let set = tiny_set(6, 2);
    let out = train(&set, &set[..2], &cfg).unwrap();
    let fresh = TrainState::new(Shape::new(1, 8, 8), &cfg).unwrap();
    assert_eq!(out.projector.encoder.params_flat(), fresh.projector.encoder.params_flat());
    assert_eq!(out.projector.decoder.params_flat(), fresh.projector.decoder.params_flat());
    assert!(out.metrics.is_empty());
    assert!(!out.projector.is_ready());
    assert_eq!(metrics_to_csv(&out.metrics), format!("{METRICS_HEADER}\n"));
}

#[test]
fn training_runs_are_reproducible() {
    let cfg = tiny_config(7);
    let set = tiny_set(10, 3);
    let a = train(&set[..8], &set[8..], &cfg).unwrap();
    let b = train(&set[..8], &set[8..], &cfg).unwrap();
    assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
    assert_eq!(a.projector.to_bytes().unwrap(), b.projector.to_bytes().unwrap());
    assert_eq!(a.metrics.len(), 6);
    let vals: Vec<f64> = a.metrics.iter().filter_map(|m| m.val_loss).collect();
    assert_eq!(vals.len(), 3);
    let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_loss, Some(best));
    assert!(a.projector.is_ready());
    let csv = metrics_to_csv(&a.metrics);
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(1).unwrap().ends_with(','));
    assert!(!csv.lines().nth(2).unwrap().ends_with(','));
}

#[test]
fn patience_zero_stops_at_first_non_improvement() {
    let set = tiny_set(12, 4);
    let cfg = TrainConfig {
        iterations: 60,
        eval_every: 1,
        patience: 0,
        adam: AdamConfig { lr: 0.05, ..AdamConfig::default() },
        ..tiny_config(8)
    };
    let out = train(&set[..8], &set[8..], &cfg).unwrap();
    assert!(out.stopped_early);
    let vals: Vec<f64> = out.metrics.iter().map(|m| m.val_loss.unwrap()).collect();
    let (last, rest) = vals.split_last().unwrap();
    assert!(rest.windows(2).all(|w| w[1] < w[0]));
    assert!(rest.last().is_none_or(|prev| last >= prev));
    assert_eq!(out.best_iteration, Some(vals.len() - 2));
}

#[test]
fn rejects_bad_inputs() {
    let cfg = tiny_config(9);
    let set = tiny_set(4, 5);
    assert!(train(&[], &set, &cfg).is_err());
    assert!(train(&set, &[], &cfg).is_err());
    let bad = TrainConfig { c_clip: 0.0, ..cfg.clone() };
    assert!(train(&set, &set, &bad).is_err());
    let odd = vec![ramp(8, 8), ramp(8, 6)];
    assert!(matches!(train(&odd, &set, &cfg), Err(Error::Dimension(_))));
}
