//! Dataset and image-file ingestion: IDX, PGM (P5), PNG, image
//! directories and a seeded synthetic corpus.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imagery::Image;
use crate::tensor::RngStream;

/// Pixel byte to `[-1, 1]`: `p / 127.5 − 1`.
pub fn byte_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding to the nearest level and
/// saturating outside `[-1, 1]`.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetSource {
    Idx,
    ImageDirectory,
    SyntheticShapes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub source: DatasetSource,
    pub images: Vec<Image>,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(height, width, channels)` of the items, `None` when empty.
    pub fn geometry(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.height(), im.width(), im.channels()))
    }

    /// Seeded permutation of the item indices.
    pub fn order(&self, seed: u64) -> Vec<usize> {
        RngStream::new(seed).permutation(self.len())
    }

    /// Consecutive chunks of the seeded order with the requested sizes.
    pub fn split(&self, seed: u64, sizes: &[usize]) -> Result<Vec<Vec<Image>>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::param(format!("split needs {total} items, dataset has {}", self.len())));
        }
        let order = self.order(seed);
        let mut start = 0;
        Ok(sizes
            .iter()
            .map(|&n| {
                let part = order[start..start + n].iter().map(|&i| self.images[i].clone()).collect();
                start += n;
                part
            })
            .collect())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format { offset: offset as u64, detail: "IDX header truncated".into() })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX `u8` image tensor (magic `0x00000803`, big-endian
/// dimensions count × rows × cols).
pub fn parse_idx_images(buf: &[u8]) -> Result<Vec<Image>> {
    let magic = be_u32(buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad IDX image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let count = be_u32(buf, 4)? as usize;
    let rows = be_u32(buf, 8)? as usize;
    let cols = be_u32(buf, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format { offset: 8, detail: format!("IDX images have zero size {rows}x{cols}") });
    }
    let per = rows * cols;
    let need = 16 + count * per;
    if buf.len() < need {
        let complete = (buf.len().saturating_sub(16)) / per;
        return Err(Error::Format {
            offset: (16 + complete * per) as u64,
            detail: format!("IDX declares {count} images, data ends inside image {complete}"),
        });
    }
    if buf.len() > need {
        return Err(Error::Format { offset: need as u64, detail: "trailing bytes after IDX image data".into() });
    }
    buf[16..]
        .chunks_exact(per)
        .map(|px| Image::new(rows, cols, 1, px.iter().map(|&p| byte_to_unit(p)).collect()))
        .collect()
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad IDX label magic {magic:#010x}, expected 0x00000801"),
        });
    }
    let count = be_u32(buf, 4)? as usize;
    if buf.len() != 8 + count {
        return Err(Error::Format {
            offset: buf.len().min(8 + count) as u64,
            detail: format!("IDX declares {count} labels, file holds {}", buf.len().saturating_sub(8)),
        });
    }
    Ok(buf[8..].to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = match labels_path {
        Some(p) => {
            let labels = parse_idx_labels(&read_file(p)?)?;
            if labels.len() != images.len() {
                return Err(Error::Format {
                    offset: 4,
                    detail: format!("{} labels for {} images", labels.len(), images.len()),
                });
            }
            Some(labels)
        }
        None => None,
    };
    Ok(Dataset { source: DatasetSource::Idx, images, labels })
}

fn pgm_token(buf: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match buf.get(*pos) {
            Some(b'#') => {
                while buf.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while buf.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&buf[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format { offset: start as u64, detail: "expected a decimal number in PGM header".into() })
}

pub fn decode_pgm(buf: &[u8]) -> Result<Image> {
    if !buf.starts_with(b"P5") {
        return Err(Error::Format { offset: 0, detail: "not a binary PGM (P5) file".into() });
    }
    let mut pos = 2;
    let width = pgm_token(buf, &mut pos)?;
    let height = pgm_token(buf, &mut pos)?;
    let maxval = pgm_token(buf, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: pos as u64,
            detail: format!("only 8-bit PGM (maxval 255) is supported, got {maxval}"),
        });
    }
    if !buf.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format { offset: pos as u64, detail: "missing whitespace after PGM maxval".into() });
    }
    pos += 1;
    let need = width * height;
    if width == 0 || height == 0 || buf.len() - pos != need {
        return Err(Error::Format {
            offset: pos as u64,
            detail: format!("PGM {width}x{height} needs {need} pixel bytes, found {}", buf.len() - pos),
        });
    }
    Image::new(height, width, 1, buf[pos..].iter().map(|&p| byte_to_unit(p)).collect())
}

pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::Format { offset: 0, detail: "PGM holds grayscale images only".into() });
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| unit_to_byte(v)));
    Ok(out)
}

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::Format { offset: 0, detail: format!("PNG: {e}") }
}

pub fn decode_png(buf: &[u8]) -> Result<Image> {
    let mut reader = png::Decoder::new(BufReader::new(Cursor::new(buf))).read_info().map_err(png_error)?;
    let info = reader.info();
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(png_error(format!("unsupported color type {other:?}; only 8-bit gray or RGB"))),
    };
    if info.bit_depth != png::BitDepth::Eight || info.interlaced {
        return Err(png_error("only non-interlaced 8-bit images are supported"));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut data = vec![0; reader.output_buffer_size().ok_or_else(|| png_error("image too large"))?];
    let frame = reader.next_frame(&mut data).map_err(png_error)?;
    let row = width * channels;
    let pixels = (0..height)
        .flat_map(|y| data[y * frame.line_size..y * frame.line_size + row].iter().map(|&p| byte_to_unit(p)))
        .collect();
    Image::new(height, width, channels, pixels)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(if img.channels() == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_error)?;
        let bytes: Vec<u8> = img.data().iter().map(|&v| unit_to_byte(v)).collect();
        writer.write_image_data(&bytes).map_err(png_error)?;
        writer.finish().map_err(png_error)?;
    }
    Ok(out)
}

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Loads a PGM (P5) or PNG file, detected by its leading bytes.
pub fn load_image_file(path: &Path) -> Result<Image> {
    let buf = read_file(path)?;
    if buf.starts_with(PNG_SIGNATURE) {
        decode_png(&buf)
    } else if buf.starts_with(b"P5") {
        decode_pgm(&buf)
    } else {
        Err(Error::Format { offset: 0, detail: format!("{}: neither PNG nor binary PGM", path.display()) })
    }
}

/// Saves by extension: `.pgm` or `.png`.
pub fn save_image_file(img: &Image, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => encode_pgm(img)?,
        Some("png") => encode_png(img)?,
        _ => {
            return Err(Error::Format {
                offset: 0,
                detail: format!("{}: unsupported image extension (use .png or .pgm)", path.display()),
            })
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

/// Every `.png`/`.pgm` file in `dir`, in file-name order. All images must
/// share one geometry.
pub fn load_image_dir(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    paths.sort();
    let images = paths.iter().map(|p| load_image_file(p)).collect::<Result<Vec<_>>>()?;
    if let Some(first) = images.first() {
        if let Some(bad) = images.iter().position(|im| !im.same_geometry(first)) {
            return Err(Error::dim(format!(
                "{} does not match the geometry of {}",
                paths[bad].display(),
                paths[0].display()
            )));
        }
    }
    Ok(Dataset { source: DatasetSource::ImageDirectory, images, labels: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeMix {
    /// Rectangles, discs and linear-gradient backgrounds.
    Mixed,
    /// Axis-aligned constant rectangles on a constant background.
    Rectangles,
}

/// Seeded piecewise-smooth grayscale images in `[-1, 1]`.
pub fn synthetic_shapes(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    synthetic_images(count, size, seed, ShapeMix::Mixed)
}

pub fn synthetic_images(count: usize, size: usize, seed: u64, mix: ShapeMix) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::param(format!("synthetic images need size >= 8, got {size}")));
    }
    let mut rng = RngStream::new(seed);
    let images = (0..count).map(|_| synthetic_one(size, mix, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { source: DatasetSource::SyntheticShapes, images, labels: None })
}

fn synthetic_one(size: usize, mix: ShapeMix, rng: &mut RngStream) -> Result<Image> {
    let level = |rng: &mut RngStream| rng.next_uniform() * 2.0 - 1.0;
    let s = size as f64;
    let mut px = vec![level(rng); size * size];
    if mix == ShapeMix::Mixed && rng.next_uniform() < 0.5 {
        let (gx, gy) = (level(rng) * 0.5, level(rng) * 0.5);
        let base = px[0];
        for y in 0..size {
            for x in 0..size {
                px[y * size + x] = base + gx * (x as f64 / s - 0.5) + gy * (y as f64 / s - 0.5);
            }
        }
    }
    let shapes = 1 + rng.next_below(4);
    for _ in 0..shapes {
        let value = level(rng);
        let disc = mix == ShapeMix::Mixed && rng.next_uniform() < 0.5;
        if disc {
            let (cx, cy) = (rng.next_uniform() * s, rng.next_uniform() * s);
            let r = (0.1 + 0.25 * rng.next_uniform()) * s;
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r {
                        px[y * size + x] = value;
                    }
                }
            }
        } else {
            let w = 2 + rng.next_below(size / 2);
            let h = 2 + rng.next_below(size / 2);
            let x0 = rng.next_below(size - w + 1);
            let y0 = rng.next_below(size - h + 1);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    px[y * size + x] = value;
                }
            }
        }
    }
    Image::new(size, size, 1, px.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelets::haar_forward;

    fn idx_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert!((byte_to_unit(128) - 0.00392).abs() < 1e-5);
        for p in 0..=255u8 {
            assert_eq!(unit_to_byte(byte_to_unit(p)), p);
        }
    }

    #[test]
    fn idx_parsing() {
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let imgs = parse_idx_images(&idx_bytes(3, 2, 2, &px)).unwrap();
        assert_eq!(imgs.len(), 3);
        assert_eq!(imgs[1].get(0, 1, 0), byte_to_unit(100));

        let mut bad = idx_bytes(3, 2, 2, &px);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(Error::Format { offset: 0, .. })));
        let short = idx_bytes(3, 2, 2, &px[..9]);
        assert!(matches!(parse_idx_images(&short), Err(Error::Format { offset: 24, .. })));
        assert!(matches!(parse_idx_images(&short[..10]), Err(Error::Format { offset: 8, .. })));

        let mut labels = vec![0, 0, 8, 1, 0, 0, 0, 2];
        labels.extend([7, 3]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);
        assert!(parse_idx_labels(&labels[..9]).is_err());
    }

    #[test]
    fn pgm_examples() {
        let mut file = b"P5\n# comment\n2 2\n255\n".to_vec();
        file.extend([255; 4]);
        let img = decode_pgm(&file).unwrap();
        assert_eq!(img.data(), &[1.0; 4]);
        assert!(decode_pgm(b"P2\n2 2\n255\n").is_err());
        let mut deep = b"P5 1 1 65535\n".to_vec();
        deep.extend([0, 0]);
        assert!(decode_pgm(&deep).is_err());
    }

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = RngStream::new(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.next_uniform() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn file_round_trips_stay_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        for (name, img) in [
            ("a.pgm", random_image(5, 7, 1, 1)),
            ("b.png", random_image(6, 4, 1, 2)),
            ("c.png", random_image(3, 5, 3, 3)),
        ] {
            let path = dir.path().join(name);
            save_image_file(&img, &path).unwrap();
            let back = load_image_file(&path).unwrap();
            assert!(back.same_geometry(&img));
            let err = back.data().iter().zip(img.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 2.0 / 255.0);
        }
        assert!(save_image_file(&random_image(2, 2, 3, 0), &dir.path().join("x.pgm")).is_err());
        assert!(save_image_file(&random_image(2, 2, 1, 0), &dir.path().join("x.jpg")).is_err());
        fs::write(dir.path().join("junk.png"), b"hello").unwrap();
        assert!(matches!(load_image_file(&dir.path().join("junk.png")), Err(Error::Format { .. })));
    }

    #[test]
    fn png_matches_independent_decoder() {
        let img = random_image(9, 11, 3, 4);
        let bytes = encode_png(&img).unwrap();
        let oracle = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).unwrap().to_rgb8();
        let ours = decode_png(&bytes).unwrap();
        assert_eq!((oracle.width(), oracle.height()), (11, 9));
        for (a, &b) in ours.data().iter().zip(oracle.as_raw()) {
            assert_eq!(*a, byte_to_unit(b));
        }
        let gray = random_image(4, 6, 1, 5);
        let mut buf = Vec::new();
        let luma = image::GrayImage::from_raw(6, 4, gray.data().iter().map(|&v| unit_to_byte(v)).collect()).unwrap();
        luma.write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png).unwrap();
        let ours = decode_png(&buf).unwrap();
        assert_eq!(ours.data(), luma.as_raw().iter().map(|&p| byte_to_unit(p)).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn png_rejects_alpha() {
        let rgba = image::RgbaImage::from_raw(1, 1, vec![1, 2, 3, 4]).unwrap();
        let mut buf = Vec::new();
        rgba.write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png).unwrap();
        assert!(matches!(decode_png(&buf), Err(Error::Format { .. })));
    }

    #[test]
    fn image_directory() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            save_image_file(&random_image(4, 4, 1, i), &dir.path().join(format!("{i}.png"))).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let ds = load_image_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.geometry(), Some((4, 4, 1)));
        save_image_file(&random_image(5, 4, 1, 9), &dir.path().join("z.pgm")).unwrap();
        assert!(load_image_dir(dir.path()).is_err());
    }

    #[test]
    fn synthetic_corpus() {
        let a = synthetic_shapes(20, 16, 7).unwrap();
        let b = synthetic_shapes(20, 16, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.images.iter().all(|im| im.is_in_range()));
        assert_ne!(a, synthetic_shapes(20, 16, 8).unwrap());
        assert!(synthetic_shapes(1, 7, 0).is_err());
    }

    #[test]
    fn rectangle_images_have_sparse_details() {
        let ds = synthetic_images(30, 32, 3, ShapeMix::Rectangles).unwrap();
        for im in &ds.images {
            let c = haar_forward(im, 2).unwrap();
            let detail: Vec<f64> = c.to_vec()[c.approx.len()..].to_vec();
            let zero = detail.iter().filter(|v| v.abs() < 1e-6).count();
            assert!(zero as f64 >= 0.6 * detail.len() as f64, "{zero} of {}", detail.len());
        }
    }

    #[test]
    fn seeded_splits() {
        let ds = synthetic_shapes(10, 8, 1).unwrap();
        let parts = ds.split(5, &[6, 3]).unwrap();
        assert_eq!(parts[0].len(), 6);
        assert_eq!(parts[1].len(), 3);
        assert_eq!(ds.split(5, &[6, 3]).unwrap(), parts);
        assert!(ds.split(5, &[11]).is_err());
        let order = ds.order(5);
        assert_eq!(parts[1][0], ds.images[order[6]]);
    }
}
