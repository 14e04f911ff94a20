//! `TWGT` weight files.
//!
//! Layout (little-endian): magic `TWGT`, `u32` version, `u32` metadata length
//! and that many bytes of JSON, `u8` rank, `u32` input channels, `u32 × 3`
//! input extents `[d, h, w]`, `u32` layer count, then per layer a `u8` kind
//! tag, a `u8` frozen flag and kind-specific fields. Parameterised layers
//! store their geometry followed by `f32` weights and biases. The file ends
//! with the SHA-256 of every preceding byte.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::layers::{Conv, ConvTranspose, MaxPool};
use super::network::{Layer, Sequential};
use super::NnError;

pub const WEIGHT_MAGIC: &[u8; 4] = b"TWGT";
pub const WEIGHT_VERSION: u32 = 1;

const TAG_CONV: u8 = 1;
const TAG_CONV_T: u8 = 2;
const TAG_POOL: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_CLAMP: u8 = 5;
const TAG_PAD: u8 = 6;
const TAG_CROP: u8 = 7;
const TAG_RESCALE: u8 = 8;
const TAG_INPUT_RESCALE: u8 = 9;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_triple(buf: &mut Vec<u8>, t: [usize; 3]) {
    t.iter().for_each(|&v| put_u32(buf, v));
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f64]) {
    for &v in vals {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a network plus free-form JSON metadata.
pub fn encode_weights(net: &Sequential, metadata: &serde_json::Value) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(metadata).expect("JSON values always serialize");
    put_u32(&mut buf, meta.len());
    buf.extend_from_slice(&meta);
    buf.push(net.rank as u8);
    put_u32(&mut buf, net.in_channels);
    put_triple(&mut buf, net.in_dims);
    put_u32(&mut buf, net.layers.len());
    for (layer, &frozen) in net.layers.iter().zip(&net.frozen) {
        let tag = match layer {
            Layer::Conv(_) => TAG_CONV,
            Layer::ConvTranspose(_) => TAG_CONV_T,
            Layer::MaxPool(_) => TAG_POOL,
            Layer::Relu => TAG_RELU,
            Layer::Clamp => TAG_CLAMP,
            Layer::Pad(_) => TAG_PAD,
            Layer::Crop(_) => TAG_CROP,
            Layer::Rescale(_) => TAG_RESCALE,
            Layer::InputRescale(_) => TAG_INPUT_RESCALE,
        };
        buf.push(tag);
        buf.push(frozen as u8);
        match layer {
            Layer::Conv(c) => {
                put_u32(&mut buf, c.in_ch);
                put_u32(&mut buf, c.out_ch);
                put_triple(&mut buf, c.kernel);
                put_triple(&mut buf, c.stride);
                put_triple(&mut buf, c.padding);
                put_f32s(&mut buf, &c.weight);
                put_f32s(&mut buf, &c.bias);
            }
            Layer::ConvTranspose(c) => {
                put_u32(&mut buf, c.in_ch);
                put_u32(&mut buf, c.out_ch);
                put_triple(&mut buf, c.kernel);
                put_triple(&mut buf, c.stride);
                put_triple(&mut buf, c.padding);
                put_f32s(&mut buf, &c.weight);
                put_f32s(&mut buf, &c.bias);
            }
            Layer::MaxPool(p) => put_triple(&mut buf, p.kernel),
            Layer::Relu | Layer::Clamp => {}
            Layer::Pad(d) | Layer::Crop(d) | Layer::Rescale(d) | Layer::InputRescale(d) => {
                put_triple(&mut buf, *d)
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::CorruptWeights("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn triple(&mut self) -> Result<[usize; 3], NnError> {
        let t = [self.u32()?, self.u32()?, self.u32()?];
        if t.iter().any(|&v| v == 0 || v > 1 << 20) {
            return Err(NnError::CorruptWeights(format!("implausible extents {t:?}")));
        }
        Ok(t)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| NnError::CorruptWeights("size overflow".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
    }
}

/// Parses and verifies a weight file. Returns the network and its metadata.
pub fn decode_weights(bytes: &[u8]) -> Result<(Sequential, serde_json::Value), NnError> {
    if bytes.len() < 4 + 32 || &bytes[..4] != WEIGHT_MAGIC {
        return Err(NnError::CorruptWeights("missing TWGT magic".into()));
    }
    let (payload, footer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != footer {
        return Err(NnError::ChecksumMismatch);
    }
    let mut r = Reader { bytes: payload, pos: 4 };
    let version = r.u32()? as u32;
    if version != WEIGHT_VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let meta_len = r.u32()?;
    let metadata: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| NnError::CorruptWeights(format!("metadata: {e}")))?;
    let rank = r.u8()? as usize;
    if rank != 2 && rank != 3 {
        return Err(NnError::CorruptWeights(format!("rank {rank}")));
    }
    let in_channels = r.u32()?;
    let in_dims = r.triple()?;
    let count = r.u32()?;
    let mut net = Sequential::new(in_channels, in_dims, rank);
    for _ in 0..count {
        let tag = r.u8()?;
        let frozen = r.u8()? != 0;
        let layer = match tag {
            TAG_CONV | TAG_CONV_T => {
                let (i, o) = (r.u32()?, r.u32()?);
                let (k, s) = (r.triple()?, r.triple()?);
                let p = [r.u32()?, r.u32()?, r.u32()?];
                let kvol: usize = k.iter().product();
                let weight = r.f32s(i * o * kvol)?;
                let bias = r.f32s(o)?;
                if tag == TAG_CONV {
                    let mut c = Conv::new(i, o, k, s, p);
                    c.weight = weight;
                    c.bias = bias;
                    Layer::Conv(c)
                } else {
                    let mut c = ConvTranspose::new(i, o, k, s, p);
                    c.weight = weight;
                    c.bias = bias;
                    Layer::ConvTranspose(c)
                }
            }
            TAG_POOL => Layer::MaxPool(MaxPool { kernel: r.triple()? }),
            TAG_RELU => Layer::Relu,
            TAG_CLAMP => Layer::Clamp,
            TAG_PAD => Layer::Pad(r.triple()?),
            TAG_CROP => Layer::Crop(r.triple()?),
            TAG_RESCALE => Layer::Rescale(r.triple()?),
            TAG_INPUT_RESCALE => Layer::InputRescale(r.triple()?),
            other => return Err(NnError::CorruptWeights(format!("unknown layer tag {other}"))),
        };
        net.push(layer);
        *net.frozen.last_mut().expect("just pushed") = frozen;
    }
    if r.pos != payload.len() {
        return Err(NnError::CorruptWeights("trailing bytes".into()));
    }
    net.shape_walk()?;
    Ok((net, metadata))
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_weights(path: &Path, net: &Sequential, metadata: &serde_json::Value) -> Result<(), NnError> {
    let bytes = encode_weights(net, metadata);
    let tmp = path.with_extension("twgt.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(Sequential, serde_json::Value), NnError> {
    decode_weights(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> Sequential {
        let mut net = Sequential::new(2, [1, 8, 8], 2);
        net.push(Layer::Conv(Conv::same(2, 3, [1, 3, 3])));
        net.push(Layer::Relu);
        net.push(Layer::MaxPool(MaxPool { kernel: [1, 2, 2] }));
        net.push(Layer::ConvTranspose(ConvTranspose::new(3, 1, [1, 2, 2], [1, 2, 2], [0; 3])));
        net.push(Layer::Clamp);
        net.push(Layer::Crop([1, 7, 8]));
        net.frozen[0] = true;
        net.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
        net
    }

    #[test]
    fn round_trip_preserves_f32_parameters() {
        let net = tiny();
        let meta = serde_json::json!({"kind": "test"});
        let (back, m) = decode_weights(&encode_weights(&net, &meta)).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.frozen, net.frozen);
        assert_eq!(back.layers.len(), net.layers.len());
        for (a, b) in back.layers.iter().zip(&net.layers) {
            if let (Some((wa, ba)), Some((wb, bb))) = (a.params(), b.params()) {
                for (x, y) in wa.iter().chain(ba).zip(wb.iter().chain(bb)) {
                    assert_eq!(*x, *y as f32 as f64);
                }
            }
        }
        assert_eq!(back.param_hash(0..6), net.param_hash(0..6));
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = encode_weights(&tiny(), &serde_json::json!({}));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_weights(&bytes), Err(NnError::ChecksumMismatch)));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let bytes = encode_weights(&tiny(), &serde_json::json!({}));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_weights(&wrong), Err(NnError::CorruptWeights(_))));
        assert!(decode_weights(&bytes[..bytes.len() - 5]).is_err());
    }
}
