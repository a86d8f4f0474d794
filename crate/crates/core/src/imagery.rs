//! Image container, quality metrics, resampling kernels and patch tiling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `height × width × channels` image stored row-major with interleaved
/// channels. Pixel values nominally lie in `[-1, 1]`; loaders and
/// [`clamp_image`] enforce that range, intermediate solver signals may exceed
/// it.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Tensor,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::dim(format!("images have 1 or 3 channels, got {channels}")));
        }
        let pixels = Tensor::new(vec![height, width, channels], data)?;
        Ok(Self { height, width, channels, pixels })
    }

    pub fn from_tensor(height: usize, width: usize, channels: usize, t: &Tensor) -> Result<Self> {
        if t.len() != height * width * channels {
            return Err(Error::dim(format!(
                "tensor of length {} cannot be viewed as {height}x{width}x{channels}",
                t.len()
            )));
        }
        Self::new(height, width, channels, t.data().to_vec())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn data(&self) -> &[f64] {
        self.pixels.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }

    /// Flat length-`d` view, the vector `x` of the inverse problem.
    pub fn to_vector(&self) -> Tensor {
        Tensor::from_parts_unchecked(vec![self.pixel_count()], self.pixels.data().to_vec())
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels.data()[(y * self.width + x) * self.channels + c]
    }

    pub fn same_geometry(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn is_in_range(&self) -> bool {
        self.data().iter().all(|v| (-1.0..=1.0).contains(v))
    }

    fn geometry(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// PSNR in dB after remapping both images from `[-1, 1]` to `[0, 1]` (peak 1).
/// Identical images give `f64::INFINITY`.
pub fn psnr(reference: &Image, candidate: &Image) -> Result<f64> {
    if !reference.same_geometry(candidate) {
        return Err(Error::dim(format!("psnr of {} against {}", reference.geometry(), candidate.geometry())));
    }
    // (a+1)/2 - (b+1)/2 = (a-b)/2
    let sse: f64 = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(a, b)| {
            let d = 0.5 * (a - b);
            d * d
        })
        .sum();
    let mse = sse / reference.pixel_count() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Offsets of the square tiles covering an image. Tiles advance by the patch
/// size; when a dimension is not a multiple of it the last tile is anchored
/// to the border and overlaps its predecessor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub row_offsets: Vec<usize>,
    pub col_offsets: Vec<usize>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || patch_size > height.min(width) {
            return Err(Error::dim(format!("patch size {patch_size} does not fit a {height}x{width} image")));
        }
        Ok(Self {
            patch_size,
            height,
            width,
            channels,
            row_offsets: tile_offsets(height, patch_size),
            col_offsets: tile_offsets(width, patch_size),
        })
    }

    pub fn rows(&self) -> usize {
        self.row_offsets.len()
    }

    pub fn cols(&self) -> usize {
        self.col_offsets.len()
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch origins `(row, col)` in row-major grid order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_offsets.iter().flat_map(move |&r| self.col_offsets.iter().map(move |&c| (r, c)))
    }
}

fn tile_offsets(dim: usize, size: usize) -> Vec<usize> {
    let mut offsets: Vec<usize> = (0..dim / size).map(|i| i * size).collect();
    if !dim.is_multiple_of(size) {
        offsets.push(dim - size);
    }
    offsets
}

pub fn extract_patches(img: &Image, size: usize) -> Result<(Vec<Image>, PatchGrid)> {
    let grid = PatchGrid::new(img.height, img.width, img.channels, size)?;
    let c = img.channels;
    let patches = grid
        .origins()
        .map(|(r0, c0)| {
            let mut data = Vec::with_capacity(size * size * c);
            for y in r0..r0 + size {
                let start = (y * img.width + c0) * c;
                data.extend_from_slice(&img.data()[start..start + size * c]);
            }
            Image::new(size, size, c, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((patches, grid))
}

/// Writes patches back in grid order; later patches overwrite overlaps.
pub fn stitch_patches(patches: &[Image], grid: &PatchGrid) -> Result<Image> {
    if patches.len() != grid.len() {
        return Err(Error::Grid(format!("grid holds {} patches, got {}", grid.len(), patches.len())));
    }
    let (s, c) = (grid.patch_size, grid.channels);
    let mut data = vec![0.0; grid.height * grid.width * c];
    for (patch, (r0, c0)) in patches.iter().zip(grid.origins()) {
        if patch.height != s || patch.width != s || patch.channels != c {
            return Err(Error::Grid(format!("patch {} does not match grid patch {s}x{s}x{c}", patch.geometry())));
        }
        for y in 0..s {
            let dst = ((r0 + y) * grid.width + c0) * c;
            data[dst..dst + s * c].copy_from_slice(&patch.data()[y * s * c..(y + 1) * s * c]);
        }
    }
    Image::new(grid.height, grid.width, c, data)
}

pub fn box_downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || !img.height.is_multiple_of(factor) || !img.width.is_multiple_of(factor) {
        return Err(Error::dim(format!("factor {factor} does not divide {}x{}", img.height, img.width)));
    }
    let (oh, ow, c) = (img.height / factor, img.width / factor, img.channels);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..img.height {
        for x in 0..img.width {
            for ch in 0..c {
                out[((y / factor) * ow + x / factor) * c + ch] += img.get(y, x, ch) * norm;
            }
        }
    }
    Image::new(oh, ow, c, out)
}

pub fn nearest_upsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(Error::param("upsampling factor must be at least 1"));
    }
    let (oh, ow, c) = (img.height * factor, img.width * factor, img.channels);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                out.push(img.get(y / factor, x / factor, ch));
            }
        }
    }
    Image::new(oh, ow, c, out)
}

/// Nearest-neighbour resize to an arbitrary size (pixel-centre sampling).
pub fn nearest_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize target must be non-empty"));
    }
    let c = img.channels;
    let src_index = |dst: usize, out: usize, inp: usize| -> usize {
        let s = ((dst as f64 + 0.5) * inp as f64 / out as f64).floor() as usize;
        s.min(inp - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let sy = src_index(y, out_h, img.height);
        for x in 0..out_w {
            let sx = src_index(x, out_w, img.width);
            for ch in 0..c {
                out.push(img.get(sy, sx, ch));
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

/// Area-average resize for shrinking by a non-integer ratio.
pub fn area_downsample(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 || out_h > img.height || out_w > img.width {
        return Err(Error::dim(format!("cannot area-downsample {}x{} to {out_h}x{out_w}", img.height, img.width)));
    }
    let c = img.channels;
    let row_w = overlap_weights(img.height, out_h);
    let col_w = overlap_weights(img.width, out_w);
    let mut out = vec![0.0; out_h * out_w * c];
    for &(oy, iy, wy) in &row_w {
        for &(ox, ix, wx) in &col_w {
            for ch in 0..c {
                out[(oy * out_w + ox) * c + ch] += wy * wx * img.get(iy, ix, ch);
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

// (output index, input index, weight) triples of a 1-D area filter.
fn overlap_weights(inp: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = inp as f64 / out as f64;
    let mut w = Vec::new();
    for o in 0..out {
        let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
        let mut i = lo.floor() as usize;
        while (i as f64) < hi && i < inp {
            let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
            if overlap > 0.0 {
                w.push((o, i, overlap / scale));
            }
            i += 1;
        }
    }
    w
}

fn catmull_rom(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

// Per output index: four clamped source indices and their kernel weights.
fn bicubic_taps(inp: usize, out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let i = base as i64 - 1 + k as i64;
                idx[k] = i.clamp(0, inp as i64 - 1) as usize;
                wts[k] = catmull_rom(frac - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Catmull–Rom (a = −0.5) bicubic upsampling with half-pixel alignment and
/// clamped borders.
pub fn bicubic_upsample(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h < img.height || out_w < img.width {
        return Err(Error::dim(format!(
            "bicubic_upsample cannot shrink {}x{} to {out_h}x{out_w}",
            img.height, img.width
        )));
    }
    let c = img.channels;
    let rows = bicubic_taps(img.height, out_h);
    let cols = bicubic_taps(img.width, out_w);
    // horizontal pass then vertical pass
    let mut tmp = vec![0.0; img.height * out_w * c];
    for y in 0..img.height {
        for (x, (idx, wts)) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut s = 0.0;
                for k in 0..4 {
                    s += wts[k] * img.get(y, idx[k], ch);
                }
                tmp[(y * out_w + x) * c + ch] = s;
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * c];
    for (y, (idx, wts)) in rows.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let mut s = 0.0;
                for k in 0..4 {
                    s += wts[k] * tmp[(idx[k] * out_w + x) * c + ch];
                }
                out[(y * out_w + x) * c + ch] = s;
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

pub fn clamp_image(img: &Image) -> Image {
    let data = img.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Image::new(img.height, img.width, img.channels, data).expect("geometry unchanged")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{uniform_sample, RngStream};
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, v: &[f64]) -> Image {
        Image::new(h, w, 1, v.to_vec()).unwrap()
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let t = uniform_sample(&mut RngStream::new(seed), -1.0, 1.0, h * w * c).unwrap();
        Image::new(h, w, c, t.into_data()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(8, 8, 1, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

        // 0.1 on the [0,1] scale is 0.2 on [-1,1]
        let base = Image::filled(4, 4, 1, -0.5).unwrap();
        let shifted = Image::filled(4, 4, 1, -0.3).unwrap();
        assert!((psnr(&base, &shifted).unwrap() - 20.0).abs() < 1e-9);

        let b = random_image(8, 8, 1, 2);
        let mut mse = 0.0;
        for i in 0..64 {
            let d = (a.data()[i] + 1.0) / 2.0 - (b.data()[i] + 1.0) / 2.0;
            mse += d * d;
        }
        mse /= 64.0;
        let oracle = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - oracle).abs() / oracle < 1e-10);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());

        assert!(psnr(&a, &random_image(4, 4, 1, 3)).is_err());
    }

    #[test]
    fn patch_tiling() {
        let img = random_image(128, 128, 1, 4);
        let (patches, grid) = extract_patches(&img, 64).unwrap();
        assert_eq!((patches.len(), grid.rows(), grid.cols()), (4, 2, 2));
        assert_eq!(stitch_patches(&patches, &grid).unwrap(), img);

        let img = random_image(64, 64, 3, 5);
        let (patches, grid) = extract_patches(&img, 64).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0], img);
        assert_eq!(stitch_patches(&patches, &grid).unwrap(), img);

        assert!(extract_patches(&img, 65).is_err());
    }

    #[test]
    fn border_anchored_tiling_covers_everything() {
        let img = random_image(100, 100, 1, 6);
        let (patches, grid) = extract_patches(&img, 64).unwrap();
        assert_eq!((grid.rows(), grid.cols()), (2, 2));
        assert_eq!(grid.row_offsets, vec![0, 36]);

        let mut hits = vec![0usize; 100 * 100];
        for (r0, c0) in grid.origins() {
            for y in r0..r0 + 64 {
                for x in c0..c0 + 64 {
                    hits[y * 100 + x] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h >= 1));
        assert_eq!(stitch_patches(&patches, &grid).unwrap(), img);
    }

    #[test]
    fn stitch_overwrites_overlaps_with_later_patch() {
        let img = random_image(6, 6, 1, 7);
        let (mut patches, grid) = extract_patches(&img, 4).unwrap();
        for (k, p) in patches.iter_mut().enumerate() {
            *p = Image::filled(4, 4, 1, k as f64 / 10.0).unwrap();
        }
        let out = stitch_patches(&patches, &grid).unwrap();
        // pixel (3,3) is covered by all four patches, the last one wins
        assert_eq!(out.get(3, 3, 0), 0.3);
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert!(stitch_patches(&patches[..3], &grid).is_err());
    }

    #[test]
    fn box_and_nearest() {
        let img = gray(2, 2, &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(box_downsample(&img, 2).unwrap().data(), &[4.0]);
        let c = Image::filled(6, 6, 3, 0.25).unwrap();
        assert!(box_downsample(&c, 3).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(box_downsample(&c, 4).is_err());

        let up = nearest_upsample(&gray(1, 1, &[4.0]), 2).unwrap();
        assert_eq!(up.data(), &[4.0; 4]);
        let r = random_image(5, 3, 1, 8);
        assert_eq!(nearest_upsample(&r, 1).unwrap(), r);
        let back = box_downsample(&nearest_upsample(&r, 3).unwrap(), 3).unwrap();
        assert!(back.data().iter().zip(r.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn box_then_nearest_keeps_block_means() {
        let img = random_image(8, 8, 1, 9);
        let down = box_downsample(&img, 2).unwrap();
        let back = nearest_upsample(&down, 2).unwrap();
        let again = box_downsample(&back, 2).unwrap();
        for (a, b) in down.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bicubic_properties() {
        let c = Image::filled(5, 7, 1, -0.37).unwrap();
        let up = bicubic_upsample(&c, 13, 20).unwrap();
        assert!(up.data().iter().all(|&v| (v + 0.37).abs() < 1e-15));

        let r = random_image(6, 5, 3, 10);
        assert_eq!(bicubic_upsample(&r, 6, 5).unwrap(), r);
        assert!(bicubic_upsample(&r, 5, 5).is_err());

        // ramp f(x) = 0.1 x + 0.02 y; sampled at the mapped source coordinate
        let (h, w) = (8, 8);
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.push(0.1 * x as f64 + 0.02 * y as f64);
            }
        }
        let ramp = gray(h, w, &data);
        let up = bicubic_upsample(&ramp, 16, 16).unwrap();
        for y in 4..12 {
            for x in 4..12 {
                let sx = (x as f64 + 0.5) / 2.0 - 0.5;
                let sy = (y as f64 + 0.5) / 2.0 - 0.5;
                let expect = 0.1 * sx + 0.02 * sy;
                assert!((up.get(y, x, 0) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clamp_examples() {
        let img = gray(1, 3, &[1.5, -2.0, 0.3]);
        assert_eq!(clamp_image(&img).data(), &[1.0, -1.0, 0.3]);
        let ok = random_image(4, 4, 1, 11);
        assert_eq!(clamp_image(&ok), ok);
    }

    #[test]
    fn area_downsample_preserves_constants_and_mean() {
        let c = Image::filled(28, 28, 1, 0.4).unwrap();
        let d = area_downsample(&c, 11, 17).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        let r = random_image(28, 28, 1, 12);
        let d = area_downsample(&r, 14, 14).unwrap();
        assert_eq!(d, box_downsample(&r, 2).unwrap());
    }

    proptest! {
        #[test]
        fn psnr_is_symmetric(seed_a in 0u64..1000, seed_b in 1000u64..2000) {
            let a = random_image(6, 6, 1, seed_a);
            let b = random_image(6, 6, 1, seed_b);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }

        #[test]
        fn divisible_round_trip(k in 1usize..4, s in 2usize..6, seed in 0u64..500) {
            let img = random_image(k * s, 2 * k * s, 1, seed);
            let (p, g) = extract_patches(&img, s).unwrap();
            prop_assert_eq!(stitch_patches(&p, &g).unwrap(), img);
        }
    }
}
