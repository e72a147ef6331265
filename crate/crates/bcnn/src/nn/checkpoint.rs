//! Checkpoint serialisation: architecture plus parameters, bit-exact.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BCNN" | version u32 = 1
//! input ndim u32 | input dims u32…
//! layer count u32
//! per layer: tag u8 + fields
//!   1 conv  : kh, kw, out_channels, stride, pad (u32 each)
//!   2 pool  : window, stride (u32 each)
//!   3 relu  : —
//!   4 ip    : out_units (u32)
//!   5 drop  : keep_prob (f64)
//! per parameterised layer, in order: weight f64… then bias f64… (row-major)
//! ```
//!
//! Weights round-trip as raw IEEE-754 bits, so a saved network reloads
//! exactly.  Loading re-runs shape inference and tensor validation, so a
//! truncated or corrupted file (including NaN parameters) is rejected.

use super::{LayerSpec, Network, NnError};
use crate::tensor::Shape;
use std::fmt;
use std::io;
use std::path::Path;

const MAGIC: [u8; 4] = *b"BCNN";
const VERSION: u32 = 1;

/// Errors from writing or reading checkpoint files.
#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    /// File does not start with the `BCNN` magic.
    BadMagic([u8; 4]),
    /// Unknown format version.
    BadVersion(u32),
    /// File ends inside the named section.
    Truncated { section: &'static str, offset: usize },
    /// Unknown layer tag byte.
    BadLayerTag { tag: u8, offset: usize },
    /// Bytes remain after the last parameter.
    TrailingBytes { extra: usize },
    /// A dimension exceeds the format's u32 fields.
    DimTooLarge(usize),
    /// The decoded network fails validation (bad shapes, non-finite
    /// parameters, …).
    Nn(NnError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::BadMagic(m) => write!(f, "bad checkpoint magic {m:?}"),
            CheckpointError::BadVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            CheckpointError::Truncated { section, offset } => {
                write!(f, "checkpoint truncated in {section} at byte {offset}")
            }
            CheckpointError::BadLayerTag { tag, offset } => {
                write!(f, "unknown layer tag {tag} at byte {offset}")
            }
            CheckpointError::TrailingBytes { extra } => {
                write!(f, "{extra} trailing bytes after checkpoint payload")
            }
            CheckpointError::DimTooLarge(d) => {
                write!(f, "dimension {d} does not fit the checkpoint format")
            }
            CheckpointError::Nn(e) => write!(f, "checkpoint decodes to an invalid network: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io(e) => Some(e),
            CheckpointError::Nn(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<NnError> for CheckpointError {
    fn from(e: NnError) -> Self {
        CheckpointError::Nn(e)
    }
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::DimTooLarge(v))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Writes a network to `path`.
pub fn save(net: &Network, path: &Path) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    push_u32(&mut buf, net.input_shape().ndim())?;
    for &d in net.input_shape().dims() {
        push_u32(&mut buf, d)?;
    }
    let specs = net.specs();
    push_u32(&mut buf, specs.len())?;
    for spec in &specs {
        match *spec {
            LayerSpec::Conv { kh, kw, out_channels, stride, pad } => {
                buf.push(1);
                for v in [kh, kw, out_channels, stride, pad] {
                    push_u32(&mut buf, v)?;
                }
            }
            LayerSpec::MaxPool { window, stride } => {
                buf.push(2);
                push_u32(&mut buf, window)?;
                push_u32(&mut buf, stride)?;
            }
            LayerSpec::Relu => buf.push(3),
            LayerSpec::InnerProduct { out_units } => {
                buf.push(4);
                push_u32(&mut buf, out_units)?;
            }
            LayerSpec::Dropout { keep_prob } => {
                buf.push(5);
                buf.extend_from_slice(&keep_prob.to_le_bytes());
            }
        }
    }
    for i in net.param_layers() {
        let params = net.params(i).expect("param layer");
        for &v in params.weight.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in params.bias.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.buf.len() {
            return Err(CheckpointError::Truncated { section, offset: self.at });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<usize, CheckpointError> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self, section: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, section)?[0])
    }

    fn f64(&mut self, section: &'static str) -> Result<f64, CheckpointError> {
        let b = self.take(8, section)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Reads a network from `path`, validating the architecture and parameters.
pub fn load(path: &Path) -> Result<Network, CheckpointError> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, at: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic.try_into().expect("4 bytes")));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }

    let ndim = r.u32("input shape")?;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32("input shape")?);
    }
    let input_shape = Shape::new(&dims).map_err(|e| CheckpointError::Nn(e.into()))?;

    let n_layers = r.u32("layer count")?;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let offset = r.at;
        let tag = r.u8("layer tag")?;
        specs.push(match tag {
            1 => LayerSpec::Conv {
                kh: r.u32("conv fields")?,
                kw: r.u32("conv fields")?,
                out_channels: r.u32("conv fields")?,
                stride: r.u32("conv fields")?,
                pad: r.u32("conv fields")?,
            },
            2 => LayerSpec::MaxPool {
                window: r.u32("pool fields")?,
                stride: r.u32("pool fields")?,
            },
            3 => LayerSpec::Relu,
            4 => LayerSpec::InnerProduct { out_units: r.u32("ip fields")? },
            5 => LayerSpec::Dropout { keep_prob: r.f64("dropout fields")? },
            tag => return Err(CheckpointError::BadLayerTag { tag, offset }),
        });
    }

    let mut net = Network::build(input_shape, specs)?;
    for i in net.param_layers() {
        let (w_shape, b_shape) = {
            let p = net.params(i).expect("param layer");
            (p.weight.shape().clone(), p.bias.shape().clone())
        };
        let mut weight = Vec::with_capacity(w_shape.elem_count());
        for _ in 0..w_shape.elem_count() {
            weight.push(r.f64("weights")?);
        }
        let mut bias = Vec::with_capacity(b_shape.elem_count());
        for _ in 0..b_shape.elem_count() {
            bias.push(r.f64("biases")?);
        }
        let weight = crate::tensor::Tensor::new(w_shape, weight)
            .map_err(|e| CheckpointError::Nn(e.into()))?;
        let bias = crate::tensor::Tensor::new(b_shape, bias)
            .map_err(|e| CheckpointError::Nn(e.into()))?;
        net.set_params(i, super::LayerParams { weight, bias })?;
    }

    if r.at != buf.len() {
        return Err(CheckpointError::TrailingBytes { extra: buf.len() - r.at });
    }
    Ok(net)
}
