//! Measurement operators `A` with exact adjoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot_slices, norm_slice, RngStream, Tensor};

/// A linear map `R^in_dim -> R^out_dim` with its adjoint, acting on flat
/// vectors.
pub trait LinearOperator: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn name(&self) -> String;

    /// `out = A x`; slices have lengths `in_dim` and `out_dim`.
    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    /// `out = Aᵀ y`; slices have lengths `out_dim` and `in_dim`.
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.in_dim() {
            return Err(Error::dim(format!("{} expects input length {}, got {}", self.name(), self.in_dim(), x.len())));
        }
        let mut out = vec![0.0; self.out_dim()];
        self.apply_into(x.data(), &mut out);
        Ok(Tensor::from_parts_unchecked(vec![self.out_dim()], out))
    }

    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        if y.len() != self.out_dim() {
            return Err(Error::dim(format!(
                "{} adjoint expects length {}, got {}",
                self.name(),
                self.out_dim(),
                y.len()
            )));
        }
        let mut out = vec![0.0; self.in_dim()];
        self.adjoint_into(y.data(), &mut out);
        Ok(Tensor::from_parts_unchecked(vec![self.in_dim()], out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityOp {
    dim: usize,
}

pub fn identity_op(d: usize) -> IdentityOp {
    IdentityOp { dim: d }
}

impl LinearOperator for IdentityOp {
    fn in_dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.dim
    }
    fn name(&self) -> String {
        format!("identity({})", self.dim)
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(y);
    }
}

/// Dense `m × d` matrix with i.i.d. `N(0, 1/m)` entries, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMatrixOp {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

pub fn gaussian_matrix_op(d: usize, ratio: f64, seed: u64) -> Result<GaussianMatrixOp> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param(format!("compression ratio {ratio} outside (0, 1]")));
    }
    let m = (ratio * d as f64).floor() as usize;
    if m == 0 {
        return Err(Error::param(format!("ratio {ratio} on d = {d} leaves no measurements")));
    }
    let mut rng = RngStream::new(seed);
    let scale = 1.0 / (m as f64).sqrt();
    let entries = (0..m * d).map(|_| scale * rng.next_normal()).collect();
    Ok(GaussianMatrixOp { rows: m, cols: d, entries })
}

impl GaussianMatrixOp {
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Redraws exactly `round(fraction · m · d)` distinct entries from the
    /// original `N(0, 1/m)` distribution, leaving the rest bit-identical.
    pub fn resample_entries(&self, fraction: f64, seed: u64) -> Result<GaussianMatrixOp> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::param(format!("resample fraction {fraction} outside [0, 1]")));
        }
        let total = self.entries.len();
        let count = (fraction * total as f64).round() as usize;
        let mut rng = RngStream::new(seed);
        let scale = 1.0 / (self.rows as f64).sqrt();
        let mut idx: Vec<usize> = (0..total).collect();
        let mut entries = self.entries.clone();
        for k in 0..count {
            let j = k + rng.next_below(total - k);
            idx.swap(k, j);
            entries[idx[k]] = scale * rng.next_normal();
        }
        Ok(GaussianMatrixOp { rows: self.rows, cols: self.cols, entries })
    }
}

impl LinearOperator for GaussianMatrixOp {
    fn in_dim(&self) -> usize {
        self.cols
    }
    fn out_dim(&self) -> usize {
        self.rows
    }
    fn name(&self) -> String {
        format!("gaussian({}x{})", self.rows, self.cols)
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.entries.chunks_exact(self.cols)) {
            *o = dot_slices(row, x);
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (&yi, row) in y.iter().zip(self.entries.chunks_exact(self.cols)) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }
}

/// Which pixels an inpainting mask removes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mask", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Each pixel dropped independently with probability `drop_rate`; all
    /// channels of a pixel share the decision.
    Pixelwise { drop_rate: f64, seed: u64 },
    /// `blocks` square holes of side `round(side_fraction · min(h, w))` at
    /// independent uniform positions (overlaps allowed).
    Scattered { blocks: usize, side_fraction: f64, seed: u64 },
    /// One centred hole covering `round(fraction · dim)` along each axis.
    CenteredBlock { fraction: f64 },
}

impl MaskSpec {
    pub fn pixelwise(drop_rate: f64, seed: u64) -> Self {
        MaskSpec::Pixelwise { drop_rate, seed }
    }

    pub fn scattered(seed: u64) -> Self {
        MaskSpec::Scattered { blocks: 10, side_fraction: 0.10, seed }
    }

    pub fn centered_block() -> Self {
        MaskSpec::CenteredBlock { fraction: 0.30 }
    }
}

/// Diagonal 0/1 operator keeping the observed pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOp {
    keep: Vec<f64>,
}

pub fn mask_op(spec: &MaskSpec, h: usize, w: usize, c: usize) -> Result<MaskOp> {
    let mut pixel_keep = vec![true; h * w];
    match *spec {
        MaskSpec::Pixelwise { drop_rate, seed } => {
            if !(0.0..=1.0).contains(&drop_rate) {
                return Err(Error::param(format!("drop rate {drop_rate} outside [0, 1]")));
            }
            let mut rng = RngStream::new(seed);
            for k in pixel_keep.iter_mut() {
                *k = rng.next_uniform() >= drop_rate;
            }
        }
        MaskSpec::Scattered { blocks, side_fraction, seed } => {
            let side = block_side(side_fraction, h.min(w))?;
            if side > h || side > w {
                return Err(Error::param(format!("block side {side} exceeds {h}x{w} image")));
            }
            let mut rng = RngStream::new(seed);
            for _ in 0..blocks {
                let r0 = rng.next_below(h - side + 1);
                let c0 = rng.next_below(w - side + 1);
                clear_block(&mut pixel_keep, w, r0, c0, side, side);
            }
        }
        MaskSpec::CenteredBlock { fraction } => {
            let bh = block_side(fraction, h)?;
            let bw = block_side(fraction, w)?;
            clear_block(&mut pixel_keep, w, (h - bh) / 2, (w - bw) / 2, bh, bw);
        }
    }
    let keep = pixel_keep.iter().flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, c)).collect();
    Ok(MaskOp { keep })
}

fn block_side(fraction: f64, dim: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("block fraction {fraction} outside (0, 1]")));
    }
    let side = (fraction * dim as f64).round() as usize;
    if side == 0 || side > dim {
        return Err(Error::param(format!("block side {side} does not fit dimension {dim}")));
    }
    Ok(side)
}

fn clear_block(keep: &mut [bool], w: usize, r0: usize, c0: usize, bh: usize, bw: usize) {
    for r in r0..r0 + bh {
        keep[r * w + c0..r * w + c0 + bw].iter_mut().for_each(|k| *k = false);
    }
}

impl MaskOp {
    pub fn from_keep(keep: Vec<f64>) -> Result<Self> {
        if keep.iter().any(|&k| k != 0.0 && k != 1.0) {
            return Err(Error::param("mask entries must be 0 or 1"));
        }
        Ok(Self { keep })
    }

    pub fn keep(&self) -> &[f64] {
        &self.keep
    }

    pub fn kept_fraction(&self) -> f64 {
        self.keep.iter().sum::<f64>() / self.keep.len() as f64
    }
}

impl LinearOperator for MaskOp {
    fn in_dim(&self) -> usize {
        self.keep.len()
    }
    fn out_dim(&self) -> usize {
        self.keep.len()
    }
    fn name(&self) -> String {
        format!("mask({})", self.keep.len())
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, k), v) in out.iter_mut().zip(&self.keep).zip(x) {
            *o = k * v;
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        self.apply_into(y, out);
    }
}

/// Block-mean downsampling of an `h × w × c` image by `factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDownsampleOp {
    height: usize,
    width: usize,
    channels: usize,
    factor: usize,
}

pub fn box_downsample_op(h: usize, w: usize, c: usize, factor: usize) -> Result<BoxDownsampleOp> {
    if factor == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(Error::dim(format!("factor {factor} does not divide {h}x{w}")));
    }
    Ok(BoxDownsampleOp { height: h, width: w, channels: c, factor })
}

impl BoxDownsampleOp {
    pub fn output_size(&self) -> (usize, usize) {
        (self.height / self.factor, self.width / self.factor)
    }
}

impl LinearOperator for BoxDownsampleOp {
    fn in_dim(&self) -> usize {
        self.height * self.width * self.channels
    }
    fn out_dim(&self) -> usize {
        self.in_dim() / (self.factor * self.factor)
    }
    fn name(&self) -> String {
        format!("box_downsample(x{})", self.factor)
    }
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let (f, c) = (self.factor, self.channels);
        let ow = self.width / f;
        let norm = 1.0 / (f * f) as f64;
        out.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..self.height {
            for xx in 0..self.width {
                let src = (y * self.width + xx) * c;
                let dst = ((y / f) * ow + xx / f) * c;
                for ch in 0..c {
                    out[dst + ch] += norm * x[src + ch];
                }
            }
        }
    }
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let (f, c) = (self.factor, self.channels);
        let ow = self.width / f;
        let norm = 1.0 / (f * f) as f64;
        for yy in 0..self.height {
            for xx in 0..self.width {
                let dst = (yy * self.width + xx) * c;
                let src = ((yy / f) * ow + xx / f) * c;
                for ch in 0..c {
                    out[dst + ch] = norm * y[src + ch];
                }
            }
        }
    }
}

/// Maximum relative adjoint mismatch
/// `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (‖Ax‖‖y‖ + ε)` over `trials` Gaussian pairs.
pub fn adjoint_check(op: &dyn LinearOperator, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::param("adjoint_check needs at least one trial"));
    }
    let mut rng = RngStream::new(seed);
    let (d, m) = (op.in_dim(), op.out_dim());
    let mut ax = vec![0.0; m];
    let mut aty = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let y: Vec<f64> = (0..m).map(|_| rng.next_normal()).collect();
        op.apply_into(&x, &mut ax);
        op.adjoint_into(&y, &mut aty);
        let lhs = dot_slices(&ax, &y);
        let rhs = dot_slices(&x, &aty);
        let denom = norm_slice(&ax) * norm_slice(&y) + f64::MIN_POSITIVE;
        worst = worst.max((lhs - rhs).abs() / denom);
    }
    Ok(worst)
}

/// `y + σ n` with `n` standard normal.
pub fn add_measurement_noise(y: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::param(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let mut rng = RngStream::new(seed);
    Ok(y.map(|v| v + sigma * rng.next_normal()))
}

/// Serializable description of a measurement operator for an image of
/// known geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Gaussian { ratio: f64, seed: u64 },
    Mask { mask: MaskSpec },
    BoxDownsample { factor: usize },
    Identity,
}

impl OperatorSpec {
    pub fn build(&self, h: usize, w: usize, c: usize) -> Result<Box<dyn LinearOperator>> {
        let d = h * w * c;
        Ok(match self {
            OperatorSpec::Gaussian { ratio, seed } => Box::new(gaussian_matrix_op(d, *ratio, *seed)?),
            OperatorSpec::Mask { mask } => Box::new(mask_op(mask, h, w, c)?),
            OperatorSpec::BoxDownsample { factor } => Box::new(box_downsample_op(h, w, c, *factor)?),
            OperatorSpec::Identity => Box::new(identity_op(d)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::{box_downsample, Image};
    use crate::tensor::gaussian_sample;

    fn dense(op: &dyn LinearOperator) -> Vec<Vec<f64>> {
        (0..op.in_dim())
            .map(|j| {
                let mut e = vec![0.0; op.in_dim()];
                e[j] = 1.0;
                let mut col = vec![0.0; op.out_dim()];
                op.apply_into(&e, &mut col);
                col
            })
            .collect()
    }

    #[test]
    fn gaussian_dims_and_scaling() {
        assert_eq!(gaussian_matrix_op(784, 0.1, 1).unwrap().out_dim(), 78);
        assert_eq!(gaussian_matrix_op(784, 0.3, 1).unwrap().out_dim(), 235);
        assert!(gaussian_matrix_op(784, 0.0, 1).is_err());
        assert!(gaussian_matrix_op(784, 1.5, 1).is_err());

        let a = gaussian_matrix_op(400, 0.5, 3).unwrap();
        let var = a.entries().iter().map(|v| v * v).sum::<f64>() / a.entries().len() as f64;
        assert!((var * 200.0 - 1.0).abs() < 0.02, "entry variance {var}");
        assert_eq!(a, gaussian_matrix_op(400, 0.5, 3).unwrap());
    }

    #[test]
    fn gaussian_adjoint_is_transpose() {
        let a = gaussian_matrix_op(32, 1.0, 7).unwrap();
        let cols = dense(&a);
        let mut rng = RngStream::new(1);
        let y: Vec<f64> = (0..32).map(|_| rng.next_normal()).collect();
        let mut aty = vec![0.0; 32];
        a.adjoint_into(&y, &mut aty);
        for j in 0..32 {
            let oracle: f64 = (0..32).map(|i| cols[j][i] * y[i]).sum();
            assert!((aty[j] - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
        }
        assert!(adjoint_check(&a, 20, 2).unwrap() < 1e-10);
        assert!(adjoint_check(&gaussian_matrix_op(64, 0.5, 2).unwrap(), 20, 3).unwrap() < 1e-10);
    }

    #[test]
    fn mask_examples() {
        let m = MaskOp::from_keep(vec![1.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(vec![3.0, 4.0, 5.0]).unwrap();
        let once = m.forward(&x).unwrap();
        assert_eq!(once.data(), &[3.0, 0.0, 5.0]);
        assert_eq!(m.forward(&once).unwrap(), once);
        assert_eq!(adjoint_check(&m, 10, 0).unwrap(), 0.0);
    }

    #[test]
    fn pixelwise_mask_rate_and_channels() {
        for seed in 0..5 {
            let m = mask_op(&MaskSpec::pixelwise(0.8, seed), 28, 28, 1).unwrap();
            let kept = m.kept_fraction();
            assert!(kept > 0.15 && kept < 0.25, "kept {kept}");
        }
        let m = mask_op(&MaskSpec::pixelwise(0.5, 4), 6, 6, 3).unwrap();
        for px in m.keep().chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
    }

    #[test]
    fn scattered_and_centered_geometry() {
        let m = mask_op(&MaskSpec::centered_block(), 28, 28, 1).unwrap();
        // side round(8.4) = 8 at offset 10
        for y in 0..28 {
            for x in 0..28 {
                let inside = (10..18).contains(&y) && (10..18).contains(&x);
                assert_eq!(m.keep()[y * 28 + x], if inside { 0.0 } else { 1.0 });
            }
        }
        let m = mask_op(&MaskSpec::scattered(9), 28, 28, 1).unwrap();
        let dropped = m.keep().iter().filter(|&&k| k == 0.0).count();
        // 10 blocks of 3x3, overlaps allowed
        assert!((9..=90).contains(&dropped));
        assert_eq!(m, mask_op(&MaskSpec::scattered(9), 28, 28, 1).unwrap());

        let too_big = MaskSpec::Scattered { blocks: 1, side_fraction: 1.5, seed: 0 };
        assert!(matches!(mask_op(&too_big, 8, 8, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn box_downsample_op_matches_imagery_and_dense_oracle() {
        let op = box_downsample_op(2, 2, 1, 2).unwrap();
        let y = op.forward(&Tensor::from_vec(vec![1.0, 3.0, 5.0, 7.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0]);

        let a = box_downsample_op(28, 28, 1, 2).unwrap();
        assert_eq!(a.output_size(), (14, 14));
        assert_eq!(box_downsample_op(28, 28, 1, 4).unwrap().output_size(), (7, 7));
        assert!(box_downsample_op(28, 28, 1, 3).is_err());

        // dense oracle at 8x8, factor 2
        let op = box_downsample_op(8, 8, 1, 2).unwrap();
        let mut mat = vec![vec![0.0; 64]; 16];
        for y in 0..8 {
            for x in 0..8 {
                mat[(y / 2) * 4 + x / 2][y * 8 + x] = 0.25;
            }
        }
        let cols = dense(&op);
        for (j, col) in cols.iter().enumerate() {
            for i in 0..16 {
                assert_eq!(col[i], mat[i][j]);
            }
        }
        assert!(adjoint_check(&op, 100, 5).unwrap() < 1e-10);

        let img = Image::new(8, 8, 1, gaussian_sample(&mut RngStream::new(2), 64).unwrap().into_data()).unwrap();
        let via_op = op.forward(&img.to_vector()).unwrap();
        assert_eq!(via_op.data(), box_downsample(&img, 2).unwrap().data());
    }

    #[test]
    fn identity_examples() {
        let i = identity_op(5);
        let x = gaussian_sample(&mut RngStream::new(1), 5).unwrap();
        assert_eq!(i.forward(&x).unwrap(), x);
        assert_eq!(i.adjoint(&x).unwrap(), x);
        assert_eq!(adjoint_check(&i, 10, 1).unwrap(), 0.0);
        let a = gaussian_matrix_op(5, 0.6, 2).unwrap();
        assert_eq!(a.forward(&i.forward(&x).unwrap()).unwrap(), a.forward(&x).unwrap());
    }

    #[test]
    fn forward_checks_lengths() {
        let a = gaussian_matrix_op(10, 0.5, 1).unwrap();
        assert!(a.forward(&Tensor::zeros(vec![9])).is_err());
        assert!(a.adjoint(&Tensor::zeros(vec![10])).is_err());
    }

    #[test]
    fn measurement_noise() {
        let y = gaussian_sample(&mut RngStream::new(1), 10).unwrap();
        assert_eq!(add_measurement_noise(&y, 0.0, 3).unwrap(), y);
        assert!(add_measurement_noise(&y, -0.1, 3).is_err());

        let z = Tensor::zeros(vec![10_000]);
        let n = add_measurement_noise(&z, 0.1, 8).unwrap();
        let mean = n.data().iter().sum::<f64>() / 1e4;
        let std = (n.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9999.0).sqrt();
        assert!(std > 0.097 && std < 0.103, "std {std}");
        assert_eq!(n, add_measurement_noise(&z, 0.1, 8).unwrap());
    }

    #[test]
    fn resampling_counts() {
        let a = gaussian_matrix_op(100, 0.3, 1).unwrap();
        assert_eq!(a.resample_entries(0.0, 5).unwrap(), a);
        let fresh = a.resample_entries(1.0, 5).unwrap();
        assert_eq!((fresh.out_dim(), fresh.in_dim()), (30, 100));
        assert!(fresh.entries().iter().zip(a.entries()).all(|(x, y)| x != y));

        let b = a.resample_entries(0.05, 6).unwrap();
        let differ = b.entries().iter().zip(a.entries()).filter(|(x, y)| x != y).count();
        assert_eq!(differ, (0.05f64 * 3000.0).round() as usize);
        assert!(a.resample_entries(1.1, 0).is_err());
    }

    #[test]
    fn frobenius_bound() {
        let a = gaussian_matrix_op(50, 0.4, 11).unwrap();
        let fro = a.entries().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut rng = RngStream::new(12);
        for _ in 0..20 {
            let x = gaussian_sample(&mut rng, 50).unwrap();
            let ax = a.forward(&x).unwrap();
            assert!(crate::tensor::l2_norm(&ax) <= fro * crate::tensor::l2_norm(&x));
        }
    }
}
