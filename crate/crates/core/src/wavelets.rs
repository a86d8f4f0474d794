//! Orthonormal 2-D Haar transform.
//!
//! Each analysis level maps a 2×2 block `[a b; c d]` to
//! `ll = (a+b+c+d)/2`, `lh = (a−b+c−d)/2`, `hl = (a+b−c−d)/2`,
//! `hh = (a−b−c+d)/2`; the `ll` band of level `k` feeds level `k + 1`.

use crate::error::{Error, Result};
use crate::imagery::Image;

/// Detail bands of one level, each `h_k × w_k × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    pub height: usize,
    pub width: usize,
    pub lh: Vec<f64>,
    pub hl: Vec<f64>,
    pub hh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Coarsest approximation band.
    pub approx: Vec<f64>,
    /// Finest level first.
    pub details: Vec<DetailBands>,
}

impl WaveletCoeffs {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn len(&self) -> usize {
        self.approx.len() + self.details.iter().map(|d| d.lh.len() + d.hl.len() + d.hh.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All coefficients, coarse approximation first then details from the
    /// coarsest level down.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.approx);
        for d in self.details.iter().rev() {
            out.extend_from_slice(&d.lh);
            out.extend_from_slice(&d.hl);
            out.extend_from_slice(&d.hh);
        }
        out
    }

    /// Inverse of [`WaveletCoeffs::to_vec`] for a given geometry.
    pub fn from_vec(height: usize, width: usize, channels: usize, levels: usize, data: &[f64]) -> Result<Self> {
        check_levels(height, width, levels)?;
        if data.len() != height * width * channels {
            return Err(Error::Structure(format!(
                "{} coefficients for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        let (ah, aw) = (height >> levels, width >> levels);
        let mut pos = ah * aw * channels;
        let approx = data[..pos].to_vec();
        let mut details = Vec::with_capacity(levels);
        for k in (1..=levels).rev() {
            let (bh, bw) = (height >> k, width >> k);
            let n = bh * bw * channels;
            let mut take = || {
                let band = data[pos..pos + n].to_vec();
                pos += n;
                band
            };
            let (lh, hl, hh) = (take(), take(), take());
            details.push(DetailBands { height: bh, width: bw, lh, hl, hh });
        }
        details.reverse();
        Ok(Self { height, width, channels, approx, details })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let g = |v: &Vec<f64>| v.iter().map(|&x| f(x)).collect::<Vec<_>>();
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            approx: g(&self.approx),
            details: self
                .details
                .iter()
                .map(|d| DetailBands { height: d.height, width: d.width, lh: g(&d.lh), hl: g(&d.hl), hh: g(&d.hh) })
                .collect(),
        }
    }
}

fn check_levels(h: usize, w: usize, levels: usize) -> Result<()> {
    let block = 1usize.checked_shl(levels as u32).unwrap_or(0);
    if block == 0 || !h.is_multiple_of(block) || !w.is_multiple_of(block) || h < block || w < block {
        return Err(Error::dim(format!("{h}x{w} is not divisible by 2^{levels} for a {levels}-level Haar transform")));
    }
    Ok(())
}

/// Deepest level count not exceeding two that the geometry supports.
pub fn default_levels(height: usize, width: usize) -> usize {
    (0..=2).rev().find(|&l| check_levels(height, width, l).is_ok()).unwrap_or(0)
}

pub fn haar_forward(img: &Image, levels: usize) -> Result<WaveletCoeffs> {
    haar_forward_raw(img.data(), img.height(), img.width(), img.channels(), levels)
}

pub fn haar_forward_raw(data: &[f64], h: usize, w: usize, c: usize, levels: usize) -> Result<WaveletCoeffs> {
    check_levels(h, w, levels)?;
    if data.len() != h * w * c {
        return Err(Error::dim(format!("{} values for a {h}x{w}x{c} image", data.len())));
    }
    let mut current = data.to_vec();
    let (mut ch, mut cw) = (h, w);
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (bh, bw) = (ch / 2, cw / 2);
        let n = bh * bw * c;
        let (mut ll, mut lh, mut hl, mut hh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for y in 0..bh {
            for x in 0..bw {
                for k in 0..c {
                    let at = |yy: usize, xx: usize| current[(yy * cw + xx) * c + k];
                    let (a, b) = (at(2 * y, 2 * x), at(2 * y, 2 * x + 1));
                    let (cc, d) = (at(2 * y + 1, 2 * x), at(2 * y + 1, 2 * x + 1));
                    let i = (y * bw + x) * c + k;
                    ll[i] = 0.5 * (a + b + cc + d);
                    lh[i] = 0.5 * (a - b + cc - d);
                    hl[i] = 0.5 * (a + b - cc - d);
                    hh[i] = 0.5 * (a - b - cc + d);
                }
            }
        }
        details.push(DetailBands { height: bh, width: bw, lh, hl, hh });
        current = ll;
        ch = bh;
        cw = bw;
    }
    Ok(WaveletCoeffs { height: h, width: w, channels: c, approx: current, details })
}

pub fn haar_inverse(coeffs: &WaveletCoeffs) -> Result<Image> {
    let data = haar_inverse_raw(coeffs)?;
    Image::new(coeffs.height, coeffs.width, coeffs.channels, data)
}

pub fn haar_inverse_raw(coeffs: &WaveletCoeffs) -> Result<Vec<f64>> {
    let levels = coeffs.levels();
    let (h, w, c) = (coeffs.height, coeffs.width, coeffs.channels);
    check_levels(h, w, levels).map_err(|e| Error::Structure(e.to_string()))?;
    let (ah, aw) = (h >> levels, w >> levels);
    if coeffs.approx.len() != ah * aw * c {
        return Err(Error::Structure(format!(
            "approximation band has {} values, expected {}",
            coeffs.approx.len(),
            ah * aw * c
        )));
    }
    let mut current = coeffs.approx.clone();
    for (k, d) in coeffs.details.iter().enumerate().rev() {
        let (bh, bw) = (h >> (k + 1), w >> (k + 1));
        let n = bh * bw * c;
        if d.height != bh || d.width != bw || d.lh.len() != n || d.hl.len() != n || d.hh.len() != n {
            return Err(Error::Structure(format!("level {} bands are malformed", k + 1)));
        }
        let (oh, ow) = (2 * bh, 2 * bw);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..bh {
            for x in 0..bw {
                for ch in 0..c {
                    let i = (y * bw + x) * c + ch;
                    let (ll, lh, hl, hh) = (current[i], d.lh[i], d.hl[i], d.hh[i]);
                    out[((2 * y) * ow + 2 * x) * c + ch] = 0.5 * (ll + lh + hl + hh);
                    out[((2 * y) * ow + 2 * x + 1) * c + ch] = 0.5 * (ll - lh + hl - hh);
                    out[((2 * y + 1) * ow + 2 * x) * c + ch] = 0.5 * (ll + lh - hl - hh);
                    out[((2 * y + 1) * ow + 2 * x + 1) * c + ch] = 0.5 * (ll - lh - hl + hh);
                }
            }
        }
        current = out;
    }
    Ok(current)
}
