//! Model file format.
//!
//! ```text
//! "PRXA" | version: u16 | network count: u16
//! per network:  name (u8 length + UTF-8) | input c, h, w: u32 | layer count: u32
//!               per layer: kind: u8 | geometry: u32 ...
//! per network:  parameter count: u64 | parameters: f32 ...
//! per network:  norm count: u32 | per norm: channels: u32 | calibrated: u8
//!               | means: f32 ... | variances: f32 ...
//! ```
//! All integers and floats are little-endian. Layer kind codes: 1 conv
//! (window, channels, stride), 2 dconv (window, channels, stride), 3 dense
//! (out), 4 channel-wise dense, 5 elu, 6 refnorm, 7 bottleneck (channels,
//! mode: 0 same, 1 half, 2 quarter).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::RngStream;

use super::arch::ProjectionNetwork;
use super::layers::{BottleneckMode, LayerSpec, Shape};
use super::network::Network;

pub const MAGIC: &[u8; 4] = b"PRXA";
pub const FORMAT_VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::param(format!("{v} does not fit the model format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_networks(nets: &[(&str, &Network)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(nets.len() as u16).to_le_bytes());
    for (name, net) in nets {
        let bytes = name.as_bytes();
        if bytes.len() > u8::MAX as usize {
            return Err(Error::param("network name longer than 255 bytes"));
        }
        out.push(bytes.len() as u8);
        out.extend_from_slice(bytes);
        let s = net.input_shape();
        for v in [s.channels, s.height, s.width] {
            put_u32(&mut out, v)?;
        }
        let specs = net.specs();
        put_u32(&mut out, specs.len())?;
        for spec in specs {
            match spec {
                LayerSpec::Conv { window, channels, stride } | LayerSpec::Dconv { window, channels, stride } => {
                    out.push(if matches!(spec, LayerSpec::Conv { .. }) { 1 } else { 2 });
                    for v in [window, channels, stride] {
                        put_u32(&mut out, v)?;
                    }
                }
                LayerSpec::Dense { out: o } => {
                    out.push(3);
                    put_u32(&mut out, o)?;
                }
                LayerSpec::ChannelwiseDense => out.push(4),
                LayerSpec::Elu => out.push(5),
                LayerSpec::RefNorm => out.push(6),
                LayerSpec::Bottleneck { channels, mode } => {
                    out.push(7);
                    put_u32(&mut out, channels)?;
                    put_u32(&mut out, mode.code() as usize)?;
                }
            }
        }
    }
    for (_, net) in nets {
        let params = net.params_flat();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
    }
    for (_, net) in nets {
        let mut norms = Vec::new();
        net.visit_norms(&mut |r| norms.push(r));
        put_u32(&mut out, norms.len())?;
        for r in norms {
            put_u32(&mut out, r.mean.len())?;
            out.push(r.calibrated as u8);
            for v in r.mean.iter().chain(&r.var) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("model file truncated: need {n} more bytes"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, detail: detail.into() }
    }
}

pub fn decode_networks(buf: &[u8]) -> Result<Vec<(String, Network)>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format { offset: 0, detail: "bad magic, expected \"PRXA\"".into() });
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(cur.fail(format!("unsupported format version {version}")));
    }
    let count = cur.u16()? as usize;
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u8()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| cur.fail("network name is not UTF-8"))?;
        let input = Shape::new(cur.u32()?, cur.u32()?, cur.u32()?);
        let layers = cur.u32()?;
        let mut specs = Vec::with_capacity(layers);
        for _ in 0..layers {
            let spec = match cur.u8()? {
                1 => LayerSpec::Conv { window: cur.u32()?, channels: cur.u32()?, stride: cur.u32()? },
                2 => LayerSpec::Dconv { window: cur.u32()?, channels: cur.u32()?, stride: cur.u32()? },
                3 => LayerSpec::Dense { out: cur.u32()? },
                4 => LayerSpec::ChannelwiseDense,
                5 => LayerSpec::Elu,
                6 => LayerSpec::RefNorm,
                7 => {
                    let channels = cur.u32()?;
                    let code = cur.u32()? as u32;
                    let mode = BottleneckMode::from_code(code)
                        .ok_or_else(|| cur.fail(format!("unknown bottleneck mode {code}")))?;
                    LayerSpec::Bottleneck { channels, mode }
                }
                k => return Err(cur.fail(format!("unknown layer kind {k}"))),
            };
            specs.push(spec);
        }
        let net = Network::new(input, &specs, &mut RngStream::new(0))
            .map_err(|e| cur.fail(format!("invalid layer table: {e}")))?;
        nets.push((name, net));
    }
    for (_, net) in nets.iter_mut() {
        let n = cur.u64()? as usize;
        if n != net.param_count() {
            return Err(cur.fail(format!("parameter count {n} does not match layer table ({})", net.param_count())));
        }
        let values = (0..n).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
        net.set_params_flat(&values)?;
    }
    for (_, net) in nets.iter_mut() {
        let count = cur.u32()?;
        let mut expected = 0;
        net.visit_norms(&mut |_| expected += 1);
        if count != expected {
            return Err(cur.fail(format!("{count} normalization blocks, layer table has {expected}")));
        }
        let mut stats = Vec::with_capacity(count);
        for _ in 0..count {
            let channels = cur.u32()?;
            let calibrated = cur.u8()? != 0;
            let mean = (0..channels).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
            let var = (0..channels).map(|_| cur.f32()).collect::<Result<Vec<_>>>()?;
            stats.push((calibrated, mean, var));
        }
        let mut it = stats.into_iter();
        let mut mismatch = false;
        net.visit_norms_mut(&mut |r| {
            let (calibrated, mean, var) = it.next().expect("count checked");
            if mean.len() != r.mean.len() {
                mismatch = true;
                return;
            }
            r.calibrated = calibrated;
            r.mean = mean;
            r.var = var;
        });
        if mismatch {
            return Err(cur.fail("normalization channel count does not match layer table"));
        }
    }
    if cur.pos != buf.len() {
        return Err(cur.fail("trailing bytes after model data"));
    }
    Ok(nets)
}

impl ProjectionNetwork {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_networks(&[("encoder", &self.encoder), ("decoder", &self.decoder)])
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut nets = decode_networks(buf)?;
        let position = |nets: &Vec<(String, Network)>, name: &str| {
            nets.iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format { offset: 0, detail: format!("model file has no \"{name}\" network") })
        };
        let enc = nets.swap_remove(position(&nets, "encoder")?).1;
        let dec = nets.swap_remove(position(&nets, "decoder")?).1;
        ProjectionNetwork::from_parts(enc, dec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
