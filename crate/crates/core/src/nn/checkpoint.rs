//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic        4 bytes  "NOWT"
//! version      u32      = 1
//! input shape  3 × u32  C, H, W
//! layer count  u32
//! per layer:
//!   tag        u8       1 conv2d | 2 activation | 3 maxpool | 4 flatten | 5 dense
//!   shape      u32s     conv2d: out, in, kh, kw, stride, padding
//!                       activation: 0 relu | 1 sigmoid
//!                       maxpool: window
//!                       flatten: none
//!                       dense: inputs, outputs
//!   payload    f32s     conv2d/dense: weights (row-major) then biases
//! ```
//!
//! Parameters are stored as `f32`, so a network whose parameters are already
//! `f32`-representable (see [`Network::rounded_to_f32`]) round-trips bit-exactly.

use std::io::Write;
use std::path::Path;

use super::{Activation, Conv2d, Dense, Layer, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NOWT";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_ACTIVATION: u8 = 2;
const TAG_MAXPOOL: u8 = 3;
const TAG_FLATTEN: u8 = 4;
const TAG_DENSE: u8 = 5;

pub fn write_checkpoint(net: &Network, out: &mut impl Write) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    for d in net.input_shape() {
        put_u32(&mut buf, d as u32);
    }
    put_u32(&mut buf, net.layers().len() as u32);
    for layer in net.layers() {
        match layer {
            Layer::Conv2d(c) => {
                buf.push(TAG_CONV);
                for v in [c.out_channels, c.in_channels, c.kernel_h, c.kernel_w, c.stride, c.padding] {
                    put_u32(&mut buf, v as u32);
                }
                put_f32s(&mut buf, &c.weight);
                put_f32s(&mut buf, &c.bias);
            }
            Layer::Activation(a) => {
                buf.push(TAG_ACTIVATION);
                put_u32(&mut buf, matches!(a, Activation::Sigmoid) as u32);
            }
            Layer::MaxPool { window } => {
                buf.push(TAG_MAXPOOL);
                put_u32(&mut buf, *window as u32);
            }
            Layer::Flatten => buf.push(TAG_FLATTEN),
            Layer::Dense(d) => {
                buf.push(TAG_DENSE);
                put_u32(&mut buf, d.inputs as u32);
                put_u32(&mut buf, d.outputs as u32);
                put_f32s(&mut buf, &d.weight);
                put_f32s(&mut buf, &d.bias);
            }
        }
    }
    out.write_all(&buf)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_checkpoint(net, &mut bytes).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let version_at = r.pos;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(version_at as u64, format!("unsupported version {version}")));
    }
    let input = [r.usize()?, r.usize()?, r.usize()?];
    let count = r.usize()?;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let tag_at = r.pos;
        let layer = match r.u8()? {
            TAG_CONV => {
                let (out, inp, kh, kw, stride, padding) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
                let mut c = Conv2d::new(out, inp, (kh, kw), stride, padding);
                c.weight = r.f32s(c.weight.len())?;
                c.bias = r.f32s(out)?;
                Layer::Conv2d(c)
            }
            TAG_ACTIVATION => {
                let at = r.pos;
                match r.u32()? {
                    0 => Layer::Activation(Activation::Relu),
                    1 => Layer::Activation(Activation::Sigmoid),
                    other => return Err(Error::format(at as u64, format!("unknown activation {other}"))),
                }
            }
            TAG_MAXPOOL => Layer::MaxPool { window: r.usize()? },
            TAG_FLATTEN => Layer::Flatten,
            TAG_DENSE => {
                let (inputs, outputs) = (r.usize()?, r.usize()?);
                let mut d = Dense::new(inputs, outputs);
                d.weight = r.f32s(inputs * outputs)?;
                d.bias = r.f32s(outputs)?;
                Layer::Dense(d)
            }
            other => return Err(Error::format(tag_at as u64, format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last layer"));
    }
    Network::new(input, layers).map_err(|e| Error::format(bytes.len() as u64, format!("inconsistent layers: {e}")))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos as u64, format!("truncated: need {n} more bytes"))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let at = self.pos;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(at as u64, "payload size overflow"))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format((at + 4 * i) as u64, "non-finite parameter"));
        }
        Ok(values)
    }
}
