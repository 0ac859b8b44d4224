//! Tensor serialization with an optional LZ compression stage.
//!
//! Serializations:
//! - `TextArray`: canonical decimal text, nested brackets by dimension, no
//!   whitespace, shortest round-trip representation per element.
//! - `BinaryFloat { rate_bits }`: little-endian 32-bit words with all but the
//!   top `rate_bits` bits zeroed. Rate 32 is lossless.
//!
//! Blob layout: `codec_id: u8`, `rank: u8`, `rank x extent: u64 LE`, body.
//! When the LZ stage is on, the body is `original_len: u64 LE` followed by an
//! LZ4 block.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::exec::Exec;
use crate::tensor::{check_shape, Tensor, MAX_RANK};

const LZ_FLAG: u8 = 0x80;
const TEXT_ID: u8 = 0x00;
pub const MIN_RATE: u8 = 8;
pub const MAX_RATE: u8 = 32;

/// Elements formatted per parallel task in text encoding.
const TEXT_BLOCK: usize = 4096;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("malformed blob: {0}")]
    MalformedBlob(String),
    #[error("unknown codec id 0x{0:02x}")]
    UnknownCodec(u8),
    #[error("corrupt compressed stream: {0}")]
    CorruptStream(String),
    #[error("invalid codec spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Serialization {
    TextArray,
    BinaryFloat { rate_bits: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Compression {
    None,
    Lz,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodecSpec {
    pub serialization: Serialization,
    pub compression: Compression,
}

impl CodecSpec {
    pub const TEXT: CodecSpec = CodecSpec {
        serialization: Serialization::TextArray,
        compression: Compression::None,
    };
    pub const BIN32: CodecSpec = CodecSpec {
        serialization: Serialization::BinaryFloat { rate_bits: 32 },
        compression: Compression::None,
    };

    pub fn new(serialization: Serialization, compression: Compression) -> Result<Self, CodecError> {
        if let Serialization::BinaryFloat { rate_bits } = serialization {
            if !(MIN_RATE..=MAX_RATE).contains(&rate_bits) {
                return Err(CodecError::InvalidSpec(format!(
                    "rate_bits {rate_bits} outside [{MIN_RATE}, {MAX_RATE}]"
                )));
            }
        }
        Ok(CodecSpec {
            serialization,
            compression,
        })
    }

    pub fn binary(rate_bits: u8, compression: Compression) -> Result<Self, CodecError> {
        CodecSpec::new(Serialization::BinaryFloat { rate_bits }, compression)
    }

    pub fn with_compression(self, compression: Compression) -> Self {
        CodecSpec { compression, ..self }
    }

    /// Low 7 bits: 0 for text, otherwise the rate. High bit: LZ stage.
    pub fn id(&self) -> u8 {
        let base = match self.serialization {
            Serialization::TextArray => TEXT_ID,
            Serialization::BinaryFloat { rate_bits } => rate_bits,
        };
        match self.compression {
            Compression::None => base,
            Compression::Lz => base | LZ_FLAG,
        }
    }

    pub fn from_id(id: u8) -> Result<Self, CodecError> {
        let compression = if id & LZ_FLAG != 0 {
            Compression::Lz
        } else {
            Compression::None
        };
        let serialization = match id & !LZ_FLAG {
            TEXT_ID => Serialization::TextArray,
            r @ MIN_RATE..=MAX_RATE => Serialization::BinaryFloat { rate_bits: r },
            _ => return Err(CodecError::UnknownCodec(id)),
        };
        Ok(CodecSpec {
            serialization,
            compression,
        })
    }

    pub fn is_lossless(&self) -> bool {
        matches!(
            self.serialization,
            Serialization::TextArray | Serialization::BinaryFloat { rate_bits: 32 }
        )
    }

    /// Serialization label used in CSV output.
    pub fn serialization_label(&self) -> String {
        match self.serialization {
            Serialization::TextArray => "text".into(),
            Serialization::BinaryFloat { rate_bits } => format!("bin{rate_bits}"),
        }
    }

    pub fn compression_label(&self) -> &'static str {
        match self.compression {
            Compression::None => "none",
            Compression::Lz => "lz",
        }
    }
}

impl fmt::Display for CodecSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialization_label())?;
        if self.compression == Compression::Lz {
            f.write_str("+lz")?;
        }
        Ok(())
    }
}

/// Parses `text`, `bin32`, `bin16`, ... with an optional `+lz` suffix.
impl FromStr for CodecSpec {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let (ser, compression) = match s.strip_suffix("+lz") {
            Some(rest) => (rest, Compression::Lz),
            None => (s.as_str(), Compression::None),
        };
        let serialization = match ser {
            "text" | "json" => Serialization::TextArray,
            "zfp" => Serialization::BinaryFloat { rate_bits: 32 },
            _ => {
                let rate = ser
                    .strip_prefix("bin")
                    .and_then(|r| r.parse::<u8>().ok())
                    .ok_or_else(|| CodecError::InvalidSpec(format!("unknown codec `{s}`")))?;
                Serialization::BinaryFloat { rate_bits: rate }
            }
        };
        CodecSpec::new(serialization, compression)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBlob {
    pub codec_id: u8,
    pub shape: Vec<usize>,
    pub body: Vec<u8>,
}

impl EncodedBlob {
    pub fn header_len(&self) -> usize {
        2 + 8 * self.shape.len()
    }

    pub fn encoded_len(&self) -> usize {
        self.header_len() + self.body.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.codec_id);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let malformed = |m: String| CodecError::MalformedBlob(m);
        if bytes.len() < 2 {
            return Err(malformed(format!("{} byte(s), need at least 2", bytes.len())));
        }
        let codec_id = bytes[0];
        CodecSpec::from_id(codec_id)?;
        let rank = bytes[1] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(malformed(format!("rank {rank}")));
        }
        let header = 2 + 8 * rank;
        if bytes.len() < header {
            return Err(malformed("truncated shape header".into()));
        }
        let shape = bytes[2..header]
            .chunks_exact(8)
            .map(|c| {
                let d = u64::from_le_bytes(c.try_into().unwrap());
                usize::try_from(d).map_err(|_| malformed(format!("extent {d}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        check_shape(&shape).map_err(|e| malformed(e.to_string()))?;
        Ok(EncodedBlob {
            codec_id,
            shape,
            body: bytes[header..].to_vec(),
        })
    }
}

/// Mask keeping the top `rate_bits` bits of a 32-bit word.
pub fn rate_mask(rate_bits: u8) -> u32 {
    if rate_bits >= 32 {
        u32::MAX
    } else {
        !(u32::MAX >> rate_bits)
    }
}

pub fn encode(spec: &CodecSpec, t: &Tensor) -> EncodedBlob {
    encode_with(Exec::default(), spec, t)
}

pub fn encode_with(exec: Exec, spec: &CodecSpec, t: &Tensor) -> EncodedBlob {
    let raw = match spec.serialization {
        Serialization::TextArray => text_encode(exec, t).into_bytes(),
        Serialization::BinaryFloat { rate_bits } => binary_encode(exec, t.data(), rate_bits),
    };
    let body = match spec.compression {
        Compression::None => raw,
        Compression::Lz => compress_bytes(&raw),
    };
    EncodedBlob {
        codec_id: spec.id(),
        shape: t.shape().to_vec(),
        body,
    }
}

pub fn decode(blob: &EncodedBlob) -> Result<Tensor, CodecError> {
    let spec = CodecSpec::from_id(blob.codec_id)?;
    let n = check_shape(&blob.shape).map_err(|e| CodecError::MalformedBlob(e.to_string()))?;
    let decompressed;
    let raw: &[u8] = match spec.compression {
        Compression::None => &blob.body,
        Compression::Lz => {
            decompressed = decompress_bytes(&blob.body)?;
            &decompressed
        }
    };
    let data = match spec.serialization {
        Serialization::TextArray => text_decode(raw, &blob.shape)?,
        Serialization::BinaryFloat { .. } => {
            if raw.len() != n * 4 {
                return Err(CodecError::MalformedBlob(format!(
                    "binary body has {} bytes, shape needs {}",
                    raw.len(),
                    n * 4
                )));
            }
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
    };
    Ok(Tensor::from_parts(blob.shape.clone(), data))
}

/// Encodes and returns the wall time spent (serialization plus compression).
pub fn timed_encode(spec: &CodecSpec, t: &Tensor) -> (EncodedBlob, Duration) {
    let start = Instant::now();
    let blob = encode(spec, t);
    (blob, start.elapsed())
}

/// Wall time of encoding `t` under `spec`; no I/O is involved.
pub fn measure_overhead(spec: &CodecSpec, t: &Tensor) -> Duration {
    timed_encode(spec, t).1
}

fn binary_encode(exec: Exec, data: &[f32], rate_bits: u8) -> Vec<u8> {
    let mask = rate_mask(rate_bits);
    let mut out = vec![0u8; data.len() * 4];
    const BLOCK: usize = 1 << 16;
    exec.for_each_chunk(&mut out, BLOCK * 4, |ci, chunk| {
        let src = &data[ci * BLOCK..ci * BLOCK + chunk.len() / 4];
        for (dst, v) in chunk.chunks_exact_mut(4).zip(src) {
            dst.copy_from_slice(&(v.to_bits() & mask).to_le_bytes());
        }
    });
    out
}

/// Separator written before element `i` of a tensor with the given strides
/// (`strides[d]` = elements per index step at dimension `d`).
fn text_separator(out: &mut String, i: usize, strides: &[usize]) {
    let rank = strides.len();
    if i == 0 {
        out.extend(std::iter::repeat_n('[', rank));
        return;
    }
    // number of innermost dimensions that wrap at this element
    let closed = strides[..rank - 1].iter().filter(|&&s| i.is_multiple_of(s)).count();
    out.extend(std::iter::repeat_n(']', closed));
    out.push(',');
    out.extend(std::iter::repeat_n('[', closed));
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn text_encode(exec: Exec, t: &Tensor) -> String {
    let st = strides(t.shape());
    let data = t.data();
    let blocks = data.len().div_ceil(TEXT_BLOCK);
    let parts = exec.map_range(blocks, |b| {
        use std::fmt::Write;
        let start = b * TEXT_BLOCK;
        let end = (start + TEXT_BLOCK).min(data.len());
        let mut s = String::with_capacity((end - start) * 12);
        for (i, v) in data[start..end].iter().enumerate() {
            text_separator(&mut s, start + i, &st);
            write!(s, "{v:?}").expect("formatting into a String cannot fail");
        }
        s
    });
    let mut out = String::with_capacity(parts.iter().map(String::len).sum::<usize>() + t.rank());
    for p in parts {
        out.push_str(&p);
    }
    out.extend(std::iter::repeat_n(']', t.rank()));
    out
}

fn text_decode(raw: &[u8], shape: &[usize]) -> Result<Vec<f32>, CodecError> {
    let text = std::str::from_utf8(raw).map_err(|e| CodecError::MalformedBlob(format!("text body: {e}")))?;
    let st = strides(shape);
    let n = st[0] * shape[0];
    let mut data = Vec::with_capacity(n);
    let mut rest = text;
    let mut sep = String::new();
    for i in 0..n {
        sep.clear();
        text_separator(&mut sep, i, &st);
        rest = rest
            .strip_prefix(sep.as_str())
            .ok_or_else(|| CodecError::MalformedBlob(format!("expected `{sep}` before element {i}")))?;
        let end = rest.find([',', ']']).unwrap_or(rest.len());
        let v: f32 = rest[..end]
            .parse()
            .map_err(|_| CodecError::MalformedBlob(format!("bad number `{}` at element {i}", &rest[..end])))?;
        data.push(v);
        rest = &rest[end..];
    }
    let closing = "]".repeat(shape.len());
    if rest != closing {
        return Err(CodecError::MalformedBlob("unexpected trailing text".into()));
    }
    Ok(data)
}

/// LZ4 block compression with a leading `u64 LE` original length.
pub fn compress_bytes(b: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + b.len() / 2);
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(&lz4_flex::block::compress(b));
    out
}

pub fn decompress_bytes(b: &[u8]) -> Result<Vec<u8>, CodecError> {
    if b.len() < 8 {
        return Err(CodecError::CorruptStream("missing length prefix".into()));
    }
    let len = u64::from_le_bytes(b[..8].try_into().unwrap());
    let block = &b[8..];
    // an LZ4 sequence expands at most ~255x
    let bound = (block.len() as u64).saturating_mul(255).saturating_add(16);
    if len > bound {
        return Err(CodecError::CorruptStream(format!(
            "declared length {len} impossible for a {}-byte block",
            block.len()
        )));
    }
    let out = lz4_flex::block::decompress(block, len as usize).map_err(|e| CodecError::CorruptStream(e.to_string()))?;
    if out.len() as u64 != len {
        return Err(CodecError::CorruptStream(format!(
            "decompressed {} bytes, expected {len}",
            out.len()
        )));
    }
    Ok(out)
}

/// Every spec the codec supports.
pub fn all_specs() -> Vec<CodecSpec> {
    let mut v = Vec::new();
    for compression in [Compression::None, Compression::Lz] {
        v.push(CodecSpec::new(Serialization::TextArray, compression).unwrap());
        for r in MIN_RATE..=MAX_RATE {
            v.push(CodecSpec::binary(r, compression).unwrap());
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn text_canonical_form() {
        let blob = encode(&CodecSpec::TEXT, &t(vec![2], vec![1.0, 2.0]));
        assert_eq!(blob.body, b"[1.0,2.0]");
        let blob = encode(&CodecSpec::TEXT, &t(vec![2, 1, 2], vec![1.0, -0.5, 3.0, 1e-7]));
        assert_eq!(std::str::from_utf8(&blob.body).unwrap(), "[[[1.0,-0.5]],[[3.0,1e-7]]]");
        assert!(decode(&blob)
            .unwrap()
            .bit_eq(&t(vec![2, 1, 2], vec![1.0, -0.5, 3.0, 1e-7])));
    }

    #[test]
    fn text_rejects_noncanonical() {
        let mut blob = encode(&CodecSpec::TEXT, &t(vec![2], vec![1.0, 2.0]));
        blob.body = b"[1.0, 2.0]".to_vec();
        assert!(matches!(decode(&blob), Err(CodecError::MalformedBlob(_))));
        blob.body = b"[1.0,2.0]]".to_vec();
        assert!(matches!(decode(&blob), Err(CodecError::MalformedBlob(_))));
        blob.body = b"[1.0]".to_vec();
        assert!(matches!(decode(&blob), Err(CodecError::MalformedBlob(_))));
    }

    #[test]
    fn rate16_keeps_one_exact() {
        // oracle: 1.0 = 0x3f80_0000, zeroing the low 16 bits changes nothing
        let bits = 1.0f32.to_bits();
        assert_eq!(bits & 0xffff_0000, bits);
        let spec = CodecSpec::binary(16, Compression::None).unwrap();
        let out = decode(&encode(&spec, &t(vec![1], vec![1.0]))).unwrap();
        assert_eq!(out.data()[0].to_bits(), bits);
    }

    #[test]
    fn binary_layout_is_little_endian_words() {
        let blob = encode(&CodecSpec::BIN32, &t(vec![2], vec![1.5, -2.0]));
        assert_eq!(&blob.body[..4], &1.5f32.to_le_bytes());
        assert_eq!(&blob.body[4..], &(-2.0f32).to_le_bytes());
        let bytes = blob.to_bytes();
        assert_eq!(bytes[0], 32);
        assert_eq!(bytes[1], 1);
        assert_eq!(&bytes[2..10], &2u64.to_le_bytes());
        assert_eq!(EncodedBlob::from_bytes(&bytes).unwrap(), blob);
    }

    #[test]
    fn codec_id_roundtrip_and_injective() {
        let specs = all_specs();
        let ids: HashSet<u8> = specs.iter().map(CodecSpec::id).collect();
        assert_eq!(ids.len(), specs.len());
        for s in specs {
            assert_eq!(CodecSpec::from_id(s.id()).unwrap(), s);
            assert_eq!(s.to_string().parse::<CodecSpec>().unwrap(), s);
        }
        assert!(matches!(CodecSpec::from_id(5), Err(CodecError::UnknownCodec(5))));
        assert!(CodecSpec::binary(7, Compression::None).is_err());
        assert!(CodecSpec::binary(33, Compression::None).is_err());
    }

    #[test]
    fn zeros_survive_every_spec() {
        let z = Tensor::zeros(vec![3, 4]).unwrap();
        for s in all_specs() {
            assert!(decode(&encode(&s, &z)).unwrap().bit_eq(&z), "{s}");
        }
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(
            EncodedBlob::from_bytes(&[32]),
            Err(CodecError::MalformedBlob(_))
        ));
        assert!(matches!(
            EncodedBlob::from_bytes(&[3, 1]),
            Err(CodecError::UnknownCodec(3))
        ));
        assert!(matches!(
            EncodedBlob::from_bytes(&[32, 0]),
            Err(CodecError::MalformedBlob(_))
        ));
        assert!(matches!(
            EncodedBlob::from_bytes(&[32, 1, 1, 0]),
            Err(CodecError::MalformedBlob(_))
        ));
        let mut blob = encode(&CodecSpec::BIN32, &t(vec![2], vec![1.0, 2.0]));
        blob.body.pop();
        assert!(matches!(decode(&blob), Err(CodecError::MalformedBlob(_))));
    }

    #[test]
    fn lz_edge_cases() {
        assert_eq!(decompress_bytes(&compress_bytes(&[])).unwrap(), Vec::<u8>::new());
        assert!(matches!(decompress_bytes(&[1, 2]), Err(CodecError::CorruptStream(_))));
        let mut c = compress_bytes(&[7u8; 1000]);
        c[0] = 0xff; // inflate the declared length
        assert!(matches!(decompress_bytes(&c), Err(CodecError::CorruptStream(_))));
        let mut c = compress_bytes(b"hello hello hello hello");
        let last = c.len() - 1;
        c.truncate(last);
        assert!(decompress_bytes(&c).is_err());
    }

    #[test]
    fn sequential_and_parallel_encode_identically() {
        let data: Vec<f32> = (0..20_000).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = t(vec![100, 200], data);
        for s in [
            CodecSpec::TEXT,
            CodecSpec::BIN32,
            CodecSpec::binary(12, Compression::Lz).unwrap(),
        ] {
            assert_eq!(
                encode_with(Exec::Sequential, &s, &x),
                encode_with(Exec::Parallel, &s, &x)
            );
        }
    }
}
