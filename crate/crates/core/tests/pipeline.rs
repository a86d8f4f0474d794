use std::sync::Arc;

use learnprox::datasets::{load_idx, synthetic_images, synthetic_shapes, ShapeMix};
use learnprox::imagery::{box_downsample, psnr, Image};
use learnprox::linops::{box_downsample_op, mask_op, LinearOperator, MaskSpec};
use learnprox::neuralnet::ProjectionNetwork;
use learnprox::priors::{L1WaveletPrior, NetworkProjector};
use learnprox::solvers::{admm_solve, AdmmConfig};
use learnprox::training::{train, TrainConfig};

#[test]
fn wavelet_inpainting_beats_zero_fill() {
    let x = &synthetic_images(1, 32, 5, ShapeMix::Rectangles).unwrap().images[0];
    let op = mask_op(&MaskSpec::pixelwise(0.3, 9), 32, 32, 1).unwrap();
    let y = op.forward(&x.to_vector()).unwrap();
    let prior = L1WaveletPrior::new(0.02, 32, 32, 1, None).unwrap();
    let out = admm_solve(&op, &y, &prior, &AdmmConfig::default(), Some(x)).unwrap();
    let rec = Image::from_tensor(32, 32, 1, &out.x).unwrap();
    let zero_fill = Image::from_tensor(32, 32, 1, &op.adjoint(&y).unwrap()).unwrap();
    assert!(psnr(x, &rec).unwrap() > psnr(x, &zero_fill).unwrap() + 3.0);
    assert!(!out.diverged());
    let last = out.trace.records.last().unwrap();
    assert!(
        (last.psnr.unwrap() - psnr(x, &Image::from_tensor(32, 32, 1, &out.state.x).unwrap()).unwrap()).abs() < 1e-9
    );
}

#[test]
fn downsampling_operator_matches_image_resampler() {
    let x = &synthetic_shapes(1, 24, 2).unwrap().images[0];
    let op = box_downsample_op(24, 24, 1, 3).unwrap();
    let y = op.forward(&x.to_vector()).unwrap();
    let expected = box_downsample(x, 3).unwrap();
    for (a, b) in y.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn idx_files_load_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
    images.extend([0u8, 255, 128, 7, 9, 11, 1, 2, 3, 4, 5, 6]);
    let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 4, 9];
    std::fs::write(dir.path().join("img"), images).unwrap();
    std::fs::write(dir.path().join("lab"), labels).unwrap();
    let ds = load_idx(&dir.path().join("img"), Some(&dir.path().join("lab"))).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.geometry(), Some((2, 3, 1)));
    assert_eq!(ds.labels.as_deref(), Some(&[4u8, 9][..]));
    assert_eq!(ds.images[0].get(0, 1, 0), 1.0);
    assert_eq!(ds.images[0].get(0, 0, 0), -1.0);
    std::fs::write(dir.path().join("short"), [0, 0, 8, 1, 0, 0, 0, 5, 4]).unwrap();
    assert!(load_idx(&dir.path().join("img"), Some(&dir.path().join("short"))).is_err());
}

#[test]
fn trained_projector_survives_a_file_and_tiles_larger_images() {
    let ds = synthetic_shapes(24, 8, 1).unwrap();
    let cfg = TrainConfig { iterations: 4, batch_size: 4, eval_every: 2, widths: [4, 8, 8], ..TrainConfig::default() };
    let out = train(&ds.images[..16], &ds.images[16..], &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.prxa");
    out.projector.save(&path).unwrap();
    let net = Arc::new(ProjectionNetwork::load(&path).unwrap());
    assert!(net.is_ready());

    let big = &synthetic_shapes(1, 20, 3).unwrap().images[0];
    let proj = NetworkProjector::new(net.clone(), 20, 20, 1).unwrap();
    let op = mask_op(&MaskSpec::centered_block(), 20, 20, 1).unwrap();
    let y = op.forward(&big.to_vector()).unwrap();
    let cfg = AdmmConfig { max_iters: 10, ..AdmmConfig::default() };
    let a = admm_solve(&op, &y, &proj, &cfg, Some(big)).unwrap();
    let b = admm_solve(&op, &y, &proj, &cfg, Some(big)).unwrap();
    assert_eq!(a.x, b.x);
    assert!(a.x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(a.trace.records.len(), 10);
}
