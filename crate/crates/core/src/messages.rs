//! Payload formats carried inside frames.
//!
//! - Architecture: `codec_id: u8` then the JSON [`ArchEnvelope`], LZ-compressed
//!   when the codec id has the LZ flag (only text serialization is accepted).
//! - Weights: `count: u32 LE`, then per tensor `name_len: u16 LE`, name,
//!   `blob_len: u64 LE`, [`EncodedBlob`] bytes.
//! - Shutdown: concatenated node reports, each `record_len: u32 LE` + record.
//!   Every compute node appends its own report before forwarding, so the frame
//!   reaching the dispatcher carries one report per node in chain order.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, CodecSpec, Compression, EncodedBlob, Serialization};
use crate::model::{Architecture, WeightMap};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PayloadError {
    #[error("malformed {what} payload: {reason}")]
    Malformed { what: &'static str, reason: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

fn malformed(what: &'static str, reason: impl Into<String>) -> PayloadError {
    PayloadError::Malformed {
        what,
        reason: reason.into(),
    }
}

/// What a compute node learns from its model connection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchEnvelope {
    pub index: usize,
    pub chain_len: usize,
    pub architecture: Architecture,
}

impl ArchEnvelope {
    pub fn is_last(&self) -> bool {
        self.index + 1 == self.chain_len
    }
}

pub fn encode_architecture(env: &ArchEnvelope, compression: Compression) -> Vec<u8> {
    let json = serde_json::to_vec(env).expect("architecture serializes");
    let spec = CodecSpec::TEXT.with_compression(compression);
    let mut out = vec![spec.id()];
    match compression {
        Compression::None => out.extend_from_slice(&json),
        Compression::Lz => out.extend_from_slice(&codec::compress_bytes(&json)),
    }
    out
}

pub fn decode_architecture(payload: &[u8]) -> Result<ArchEnvelope, PayloadError> {
    let (&id, body) = payload
        .split_first()
        .ok_or_else(|| malformed("architecture", "empty"))?;
    let spec = CodecSpec::from_id(id)?;
    if spec.serialization != Serialization::TextArray {
        return Err(malformed("architecture", "architecture must be text"));
    }
    let json = match spec.compression {
        Compression::None => body.to_vec(),
        Compression::Lz => codec::decompress_bytes(body)?,
    };
    serde_json::from_slice(&json).map_err(|e| malformed("architecture", e.to_string()))
}

/// Encodes every weight tensor; returns the payload and the time spent encoding.
pub fn encode_weights(weights: &WeightMap, spec: &CodecSpec) -> (Vec<u8>, Duration) {
    let mut elapsed = Duration::ZERO;
    let mut out = Vec::new();
    out.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights {
        let start = Instant::now();
        let blob = codec::encode(spec, t).to_bytes();
        elapsed += start.elapsed();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    (out, elapsed)
}

struct Cursor<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.buf.len() < n {
            return Err(malformed(self.what, "truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PayloadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_weights(payload: &[u8]) -> Result<WeightMap, PayloadError> {
    let mut c = Cursor {
        buf: payload,
        what: "weights",
    };
    let count = c.u32()?;
    let mut out = WeightMap::new();
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| malformed("weights", "name is not UTF-8"))?
            .to_string();
        let blen = usize::try_from(c.u64()?).map_err(|_| malformed("weights", "blob length"))?;
        let blob = EncodedBlob::from_bytes(c.take(blen)?)?;
        let t: Tensor = codec::decode(&blob)?;
        if out.insert(name.clone(), t).is_some() {
            return Err(malformed("weights", format!("duplicate tensor `{name}`")));
        }
    }
    if !c.buf.is_empty() {
        return Err(malformed("weights", "trailing bytes"));
    }
    Ok(out)
}

/// Per-node counters reported at teardown.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeReport {
    pub index: u32,
    pub layers: u32,
    /// Inference messages processed.
    pub cycles: u64,
    /// Inference time, injected delay included.
    pub compute: Duration,
    /// Time spent encoding outgoing tensors.
    pub overhead: Duration,
    /// Bytes written downstream before this node's Shutdown frame.
    pub sent_bytes: u64,
    pub aborted: Option<String>,
}

impl NodeReport {
    /// Fixed 44-byte layout plus an optional abort reason, so report sizes do
    /// not depend on timing values.
    pub fn to_record(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48);
        out.extend_from_slice(&self.index.to_le_bytes());
        out.extend_from_slice(&self.layers.to_le_bytes());
        out.extend_from_slice(&self.cycles.to_le_bytes());
        out.extend_from_slice(&(self.compute.as_nanos() as u64).to_le_bytes());
        out.extend_from_slice(&(self.overhead.as_nanos() as u64).to_le_bytes());
        out.extend_from_slice(&self.sent_bytes.to_le_bytes());
        let reason = self.aborted.as_deref().unwrap_or("").as_bytes();
        out.extend_from_slice(&(reason.len() as u32).to_le_bytes());
        out.extend_from_slice(reason);
        out
    }

    pub fn from_record(rec: &[u8]) -> Result<Self, PayloadError> {
        let mut c = Cursor {
            buf: rec,
            what: "node report",
        };
        let index = c.u32()?;
        let layers = c.u32()?;
        let cycles = c.u64()?;
        let compute = Duration::from_nanos(c.u64()?);
        let overhead = Duration::from_nanos(c.u64()?);
        let sent_bytes = c.u64()?;
        let rlen = c.u32()? as usize;
        let reason = std::str::from_utf8(c.take(rlen)?).map_err(|_| malformed("node report", "reason is not UTF-8"))?;
        if !c.buf.is_empty() {
            return Err(malformed("node report", "trailing bytes"));
        }
        Ok(NodeReport {
            index,
            layers,
            cycles,
            compute,
            overhead,
            sent_bytes,
            aborted: (!reason.is_empty()).then(|| reason.to_string()),
        })
    }
}

/// Appends one length-prefixed report to a Shutdown payload.
pub fn append_report(payload: &mut Vec<u8>, report: &NodeReport) {
    let rec = report.to_record();
    payload.extend_from_slice(&(rec.len() as u32).to_le_bytes());
    payload.extend_from_slice(&rec);
}

/// Splits a Shutdown payload into reports and the payload length after each
/// report (the Shutdown payload size leaving that node).
pub fn parse_shutdown(payload: &[u8]) -> Result<Vec<(NodeReport, usize)>, PayloadError> {
    let mut c = Cursor {
        buf: payload,
        what: "shutdown",
    };
    let mut out = Vec::new();
    while !c.buf.is_empty() {
        let len = c.u32()? as usize;
        let rep = NodeReport::from_record(c.take(len)?)?;
        out.push((rep, payload.len() - c.buf.len()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, LayerSpec};

    #[test]
    fn architecture_roundtrip_both_compressions() {
        let env = ArchEnvelope {
            index: 1,
            chain_len: 3,
            architecture: Architecture {
                entry: "in".into(),
                exit: "r".into(),
                layers: vec![
                    LayerSpec::input("in", vec![1, 4]),
                    LayerSpec::op("r", LayerKind::ReLU, &["in"]),
                ],
            },
        };
        for c in [Compression::None, Compression::Lz] {
            let p = encode_architecture(&env, c);
            assert_eq!(decode_architecture(&p).unwrap(), env);
        }
        assert!(decode_architecture(&[32, b'{']).is_err());
        assert!(decode_architecture(&[]).is_err());
    }

    #[test]
    fn weights_roundtrip_and_truncation() {
        let mut w = WeightMap::new();
        w.insert(
            "a.kernel".into(),
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        w.insert("a.bias".into(), Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap());
        for spec in ["text", "bin32", "bin32+lz", "text+lz"] {
            let (p, _) = encode_weights(&w, &spec.parse().unwrap());
            let back = decode_weights(&p).unwrap();
            assert_eq!(back.len(), 2);
            for (k, v) in &w {
                assert!(back[k].bit_eq(v));
            }
            assert!(decode_weights(&p[..p.len() - 1]).is_err());
        }
    }

    #[test]
    fn shutdown_records_accumulate() {
        let mut payload = Vec::new();
        let r0 = NodeReport {
            index: 0,
            layers: 3,
            cycles: 10,
            compute: Duration::from_nanos(123_456),
            overhead: Duration::from_nanos(789),
            sent_bytes: 4242,
            aborted: None,
        };
        let r1 = NodeReport {
            index: 1,
            aborted: Some("decode error".into()),
            ..r0.clone()
        };
        append_report(&mut payload, &r0);
        let first_len = payload.len();
        append_report(&mut payload, &r1);
        let parsed = parse_shutdown(&payload).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0], (r0.clone(), first_len));
        assert_eq!(parsed[1], (r1, payload.len()));
        // record size is independent of the counter values
        let big = NodeReport {
            compute: Duration::from_secs(1_000_000),
            sent_bytes: u64::MAX,
            ..r0.clone()
        };
        assert_eq!(big.to_record().len(), r0.to_record().len());
        assert!(parse_shutdown(&payload[..payload.len() - 1]).is_err());
    }
}
