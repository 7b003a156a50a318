//! Binary model files.
//!
//! NNCM stores a model with raw little-endian `f32` payloads. NNCQ stores a
//! model whose parameters all have their low `n` bits clear and keeps only
//! the upper `32 - n` bits of each, bit-packed.
//!
//! Both share the per-layer structure:
//!
//! ```text
//! u8  kind        0 dense, 1 conv2d, 2 factorized dense
//! u8  activation  0 none, 1 relu, 2 softmax output
//! u32 dims...     dense: out, in
//!                 conv2d: out_ch, in_ch, kernel_h, kernel_w, in_h, in_w
//!                 factorized: out, in, rank
//! weights         dense: out*in; conv2d: out_ch*in_ch*kh*kw;
//!                 factorized: u_fold (out*rank) then v_t (rank*in)
//! bias            out values (out_ch for conv2d)
//! u8  mask flag   1 = followed by ceil(len/8) bytes, LSB first
//! u32 rank        factorized layers only; repeats the rank dim
//! ```

use std::fs;
use std::path::Path;

use energycomp_core::compress::stego::{is_bitmasked, pack_upper_bits, packed_len, unpack_upper_bits};
use energycomp_core::model::{Activation, ConvShape, Layer, LayerWeights, Mask, Model};
use energycomp_core::numerics::{FactorPair, Matrix};

use crate::error::{Error, IoContext, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"NNCM";
pub const QUANTIZED_MAGIC: [u8; 4] = *b"NNCQ";
pub const FORMAT_VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_FACTORIZED: u8 = 2;

/// How parameter payloads are laid out.
#[derive(Clone, Copy)]
enum Payload {
    Raw,
    Packed(u32),
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_layers(&mut out, model, Payload::Raw);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes, "NNCM");
    r.magic(MODEL_MAGIC)?;
    r.version()?;
    let model = read_layers(&mut r, Payload::Raw)?;
    r.finish()?;
    Ok(model)
}

/// Fails unless every parameter of `model` already has its low `n` bits
/// clear, since those bits would otherwise be lost.
pub fn encode_quantized(model: &Model, n: u32) -> Result<Vec<u8>> {
    if n > 32 {
        return Err(energycomp_core::Error::BitCountOutOfRange(n).into());
    }
    if !is_bitmasked(model, n) {
        return Err(Error::Format(format!(
            "model parameters are not masked at {n} bits and cannot be stored as NNCQ"
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&QUANTIZED_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(n as u8);
    write_layers(&mut out, model, Payload::Packed(n));
    Ok(out)
}

/// Returns the model and its cleared bit count.
pub fn decode_quantized(bytes: &[u8]) -> Result<(Model, u32)> {
    let mut r = Reader::new(bytes, "NNCQ");
    r.magic(QUANTIZED_MAGIC)?;
    r.version()?;
    let n = u32::from(r.u8("bit count")?);
    if n > 32 {
        return Err(r.error(format!("bit count {n} exceeds 32")));
    }
    let model = read_layers(&mut r, Payload::Packed(n))?;
    r.finish()?;
    Ok((model, n))
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).at(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).at(path)?;
    decode_model(&bytes).map_err(|e| prefix(path, e))
}

pub fn save_quantized(model: &Model, n: u32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_quantized(model, n)?).at(path)
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<(Model, u32)> {
    let path = path.as_ref();
    let bytes = fs::read(path).at(path)?;
    decode_quantized(&bytes).map_err(|e| prefix(path, e))
}

fn prefix(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn write_layers(out: &mut Vec<u8>, model: &Model, payload: Payload) {
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put_u32(out, model.layers().len());
    for layer in model.layers() {
        let (kind, dims): (u8, Vec<usize>) = match layer.weights() {
            LayerWeights::Dense(w) => (KIND_DENSE, vec![w.rows(), w.cols()]),
            LayerWeights::Conv2d { shape, .. } => (
                KIND_CONV,
                vec![
                    shape.out_channels,
                    shape.in_channels,
                    shape.kernel_h,
                    shape.kernel_w,
                    shape.in_h,
                    shape.in_w,
                ],
            ),
            LayerWeights::Factorized(f) => (KIND_FACTORIZED, vec![f.dims().0, f.dims().1, f.rank()]),
        };
        out.push(kind);
        out.push(activation_tag(layer.activation()));
        for d in &dims {
            put_u32(out, *d);
        }
        let weights: Vec<f32> = layer.tensors().concat();
        write_values(out, &weights, payload);
        write_values(out, layer.bias(), payload);
        match layer.mask() {
            Some(mask) => {
                out.push(1);
                out.extend_from_slice(&mask.to_bytes());
            }
            None => out.push(0),
        }
        if kind == KIND_FACTORIZED {
            put_u32(out, dims[2]);
        }
    }
}

fn write_values(out: &mut Vec<u8>, values: &[f32], payload: Payload) {
    match payload {
        Payload::Raw => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Payload::Packed(n) => out.extend(pack_upper_bits(values, n).expect("bit count checked by caller")),
    }
}

fn read_layers(r: &mut Reader<'_>, payload: Payload) -> Result<Model> {
    let count = r.u32("layer count")? as usize;
    if count == 0 {
        return Err(r.error("model has no layers".into()));
    }
    let mut layers = Vec::with_capacity(count.min(1024));
    for idx in 0..count {
        r.layer = Some(idx);
        let kind = r.u8("layer kind")?;
        let activation = parse_activation(r.u8("activation")?).ok_or_else(|| r.error("unknown activation tag".into()))?;
        let (weights, bias_len) = match kind {
            KIND_DENSE => {
                let (rows, cols) = (r.dim("rows")?, r.dim("cols")?);
                let w = r.values(checked_mul(r, rows, cols)?, payload, "weights")?;
                (LayerWeights::Dense(Matrix::from_vec(rows, cols, w)?), rows)
            }
            KIND_CONV => {
                let shape = ConvShape {
                    out_channels: r.dim("out channels")?,
                    in_channels: r.dim("in channels")?,
                    kernel_h: r.dim("kernel height")?,
                    kernel_w: r.dim("kernel width")?,
                    in_h: r.dim("input height")?,
                    in_w: r.dim("input width")?,
                };
                let patch = checked_mul(r, shape.in_channels, checked_mul(r, shape.kernel_h, shape.kernel_w)?)?;
                let k = r.values(checked_mul(r, shape.out_channels, patch)?, payload, "kernel")?;
                let kernel = Matrix::from_vec(shape.out_channels, patch, k)?;
                (LayerWeights::Conv2d { shape, kernel }, shape.out_channels)
            }
            KIND_FACTORIZED => {
                let (rows, cols, rank) = (r.dim("rows")?, r.dim("cols")?, r.dim("rank")?);
                let u_len = checked_mul(r, rows, rank)?;
                let v_len = checked_mul(r, rank, cols)?;
                let mut all = r.values(u_len + v_len, payload, "factors")?;
                let v = all.split_off(u_len);
                let factor = FactorPair::new(Matrix::from_vec(rows, rank, all)?, Matrix::from_vec(rank, cols, v)?)?;
                (LayerWeights::Factorized(factor), rows)
            }
            other => return Err(r.error(format!("unknown layer kind {other}"))),
        };
        let bias = r.values(bias_len, payload, "bias")?;
        let mut layer = Layer::new(weights, bias, activation)?;
        match r.u8("mask flag")? {
            0 => {}
            1 => {
                let len = layer
                    .prunable()
                    .map(<[f32]>::len)
                    .ok_or_else(|| r.error("mask present on a factorized layer".into()))?;
                let bytes = r.take(len.div_ceil(8), "mask")?;
                layer.set_mask(Some(Mask::from_bytes(len, bytes)?))?;
            }
            flag => return Err(r.error(format!("mask flag must be 0 or 1, found {flag}"))),
        }
        if kind == KIND_FACTORIZED {
            let trailer = r.u32("rank trailer")? as usize;
            let rank = layer.tensors()[0].len() / layer.out_len();
            if trailer != rank {
                return Err(r.error(format!("rank trailer {trailer} disagrees with rank {rank}")));
            }
        }
        layers.push(layer);
    }
    r.layer = None;
    Model::new(layers).map_err(|e| r.error(e.to_string()))
}

fn checked_mul(r: &Reader<'_>, a: usize, b: usize) -> Result<usize> {
    a.checked_mul(b)
        .filter(|&n| n <= u32::MAX as usize)
        .ok_or_else(|| r.error(format!("dimensions {a}x{b} are too large")))
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::None => 0,
        Activation::Relu => 1,
        Activation::SoftmaxOut => 2,
    }
}

fn parse_activation(tag: u8) -> Option<Activation> {
    match tag {
        0 => Some(Activation::None),
        1 => Some(Activation::Relu),
        2 => Some(Activation::SoftmaxOut),
        _ => None,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
    layer: Option<usize>,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], format: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            format,
            layer: None,
        }
    }

    fn error(&self, msg: String) -> Error {
        match self.layer {
            Some(l) => Error::Format(format!("{} layer {l} at byte {}: {msg}", self.format, self.pos)),
            None => Error::Format(format!("{} at byte {}: {msg}", self.format, self.pos)),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.error(format!("truncated reading {what}: need {n} bytes, {remaining} left")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        match self.u32(what)? {
            0 => Err(self.error(format!("{what} is zero"))),
            d => Ok(d as usize),
        }
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(self.error(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(&expected),
                String::from_utf8_lossy(found)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        match self.u32("version")? {
            FORMAT_VERSION => Ok(()),
            v => Err(self.error(format!("unsupported version {v}, expected {FORMAT_VERSION}"))),
        }
    }

    fn values(&mut self, count: usize, payload: Payload, what: &str) -> Result<Vec<f32>> {
        match payload {
            Payload::Raw => {
                let bytes = self.take(count * 4, what)?;
                Ok(bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect())
            }
            Payload::Packed(n) => {
                let bytes = self.take(packed_len(count, n), what)?;
                Ok(unpack_upper_bits(bytes, count, n)?)
            }
        }
    }

    fn finish(&self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(self.error(format!("{extra} trailing bytes after the last layer"))),
        }
    }
}
