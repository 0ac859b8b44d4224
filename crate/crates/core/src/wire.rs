//! Frame protocol shared by every connection in a chain.
//!
//! ```text
//! magic        2 bytes  "DF"
//! kind         1 byte
//! sequence     8 bytes  u64 LE
//! payload_len  8 bytes  u64 LE
//! chunks       repeated: chunk_len u32 LE, chunk bytes
//! ```
//!
//! The payload is split into chunks of at most `chunk_bytes`; an empty payload
//! has no chunks. See `docs/wire.md` for the normative description.

use std::fmt;
use std::io::{self, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub const MAGIC: [u8; 2] = *b"DF";
pub const HEADER_LEN: usize = 19;
pub const CHUNK_HEADER_LEN: usize = 4;
pub const DEFAULT_CHUNK_BYTES: usize = 512 * 1024;
pub const MIN_CHUNK_BYTES: usize = 4096;
/// Payloads must be strictly smaller than this.
pub const MAX_PAYLOAD: u64 = 1 << 48;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("truncated frame: {0}")]
    TruncatedFrame(String),
    #[error("chunk overflow: {0}")]
    ChunkOverflow(String),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds the 2^48 limit")]
    PayloadTooLarge(u64),
    #[error("chunk size {0} is below the {MIN_CHUNK_BYTES}-byte minimum")]
    ChunkTooSmall(usize),
    #[error("invalid next-hop address `{0}`")]
    BadAddress(String),
    #[error("sequence regressed from {last} to {got}")]
    OrderViolation { last: u64, got: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Architecture = 1,
    Weights = 2,
    NextHop = 3,
    InferenceData = 4,
    Result = 5,
    Shutdown = 6,
    /// Compute node finished building its partition.
    Ack = 7,
    /// Compute node refused its configuration; payload is a UTF-8 reason.
    Reject = 8,
}

impl MessageKind {
    pub fn from_u8(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            1 => MessageKind::Architecture,
            2 => MessageKind::Weights,
            3 => MessageKind::NextHop,
            4 => MessageKind::InferenceData,
            5 => MessageKind::Result,
            6 => MessageKind::Shutdown,
            7 => MessageKind::Ack,
            8 => MessageKind::Reject,
            _ => return Err(WireError::UnknownKind(b)),
        })
    }

    /// Kinds whose sequence numbers must strictly increase on a connection.
    pub fn is_sequenced(self) -> bool {
        matches!(self, MessageKind::InferenceData | MessageKind::Result)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub sequence: u64,
    pub payload: Vec<u8>,
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Message")
            .field("kind", &self.kind)
            .field("sequence", &self.sequence)
            .field("payload_len", &self.payload.len())
            .finish()
    }
}

impl Message {
    pub fn new(kind: MessageKind, sequence: u64, payload: Vec<u8>) -> Self {
        Message {
            kind,
            sequence,
            payload,
        }
    }

    pub fn next_hop(addr: &str) -> Result<Self, WireError> {
        parse_host_port(addr)?;
        Ok(Message::new(MessageKind::NextHop, 0, addr.as_bytes().to_vec()))
    }

    /// Resolves a NextHop payload.
    pub fn next_hop_addr(&self) -> Result<SocketAddr, WireError> {
        let s = std::str::from_utf8(&self.payload).map_err(|_| WireError::BadAddress(format!("{:?}", self.payload)))?;
        parse_host_port(s)
    }
}

/// Parses and resolves `host:port`.
pub fn parse_host_port(s: &str) -> Result<SocketAddr, WireError> {
    let (host, port) = s.rsplit_once(':').ok_or_else(|| WireError::BadAddress(s.to_string()))?;
    if host.is_empty() || port.parse::<u16>().is_err() {
        return Err(WireError::BadAddress(s.to_string()));
    }
    s.to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| WireError::BadAddress(s.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkConfig {
    chunk_bytes: usize,
}

impl ChunkConfig {
    pub fn new(chunk_bytes: usize) -> Result<Self, WireError> {
        if chunk_bytes < MIN_CHUNK_BYTES || chunk_bytes > u32::MAX as usize {
            return Err(WireError::ChunkTooSmall(chunk_bytes));
        }
        Ok(ChunkConfig { chunk_bytes })
    }

    pub fn chunk_bytes(&self) -> usize {
        self.chunk_bytes
    }

    pub fn chunk_count(&self, payload_len: usize) -> usize {
        payload_len.div_ceil(self.chunk_bytes)
    }

    /// Exact number of bytes a frame with this payload length occupies.
    pub fn frame_len(&self, payload_len: usize) -> u64 {
        (HEADER_LEN + payload_len + CHUNK_HEADER_LEN * self.chunk_count(payload_len)) as u64
    }
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            chunk_bytes: DEFAULT_CHUNK_BYTES,
        }
    }
}

/// Writes one frame; returns the number of bytes written.
pub fn write_frame<W: Write>(w: &mut W, msg: &Message, chunk: ChunkConfig) -> Result<u64, WireError> {
    let len = msg.payload.len() as u64;
    if len >= MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(len));
    }
    let mut header = [0u8; HEADER_LEN];
    header[..2].copy_from_slice(&MAGIC);
    header[2] = msg.kind as u8;
    header[3..11].copy_from_slice(&msg.sequence.to_le_bytes());
    header[11..19].copy_from_slice(&len.to_le_bytes());
    w.write_all(&header)?;
    for c in msg.payload.chunks(chunk.chunk_bytes) {
        w.write_all(&(c.len() as u32).to_le_bytes())?;
        w.write_all(c)?;
    }
    Ok(chunk.frame_len(msg.payload.len()))
}

pub fn frame_encode(msg: &Message, chunk: ChunkConfig) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(chunk.frame_len(msg.payload.len()) as usize);
    write_frame(&mut out, msg, chunk)?;
    Ok(out)
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), WireError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => WireError::TruncatedFrame(format!("eof in {what}")),
        _ => WireError::Io(e),
    })
}

/// Reads one frame, or `None` on a clean end of stream before any header byte.
/// Never reads past the end of the frame.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::TruncatedFrame(format!("eof after {got} header bytes"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if header[..2] != MAGIC {
        return Err(WireError::BadMagic([header[0], header[1]]));
    }
    let kind = MessageKind::from_u8(header[2])?;
    let sequence = u64::from_le_bytes(header[3..11].try_into().unwrap());
    let total = u64::from_le_bytes(header[11..19].try_into().unwrap());
    if total >= MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(total));
    }
    let mut payload = Vec::with_capacity(total.min(1 << 24) as usize);
    let mut remaining = total;
    while remaining > 0 {
        let mut lb = [0u8; CHUNK_HEADER_LEN];
        read_full(r, &mut lb, "chunk header")?;
        let clen = u32::from_le_bytes(lb) as u64;
        if clen == 0 || clen > remaining {
            return Err(WireError::ChunkOverflow(format!(
                "chunk of {clen} bytes with {remaining} payload bytes outstanding"
            )));
        }
        let start = payload.len();
        payload.resize(start + clen as usize, 0);
        read_full(r, &mut payload[start..], "chunk body")?;
        remaining -= clen;
    }
    Ok(Some(Message {
        kind,
        sequence,
        payload,
    }))
}

/// Like [`read_frame`] but end of stream is an error.
pub fn frame_decode<R: Read>(r: &mut R) -> Result<Message, WireError> {
    read_frame(r)?.ok_or_else(|| WireError::TruncatedFrame("stream ended before a frame".into()))
}

/// Shared, resettable byte counter.
#[derive(Clone, Debug, Default)]
pub struct ByteCounter(Arc<AtomicU64>);

impl ByteCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    /// Returns the value before resetting.
    pub fn reset(&self) -> u64 {
        self.0.swap(0, Ordering::Relaxed)
    }
}

/// Counts every byte accepted by the inner writer.
pub struct CountingWriter<W> {
    inner: W,
    counter: ByteCounter,
}

impl<W: Write> CountingWriter<W> {
    pub fn new(inner: W, counter: ByteCounter) -> Self {
        CountingWriter { inner, counter }
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.counter.add(n as u64);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Buffered frame sender over a counted transport.
pub struct FrameWriter<W: Write> {
    inner: BufWriter<CountingWriter<W>>,
    chunk: ChunkConfig,
    counter: ByteCounter,
}

impl<W: Write> FrameWriter<W> {
    pub fn new(inner: W, chunk: ChunkConfig) -> Self {
        let counter = ByteCounter::new();
        FrameWriter {
            inner: BufWriter::with_capacity(64 * 1024, CountingWriter::new(inner, counter.clone())),
            chunk,
            counter,
        }
    }

    /// Sends one frame and flushes it to the transport.
    pub fn send(&mut self, msg: &Message) -> Result<u64, WireError> {
        let n = write_frame(&mut self.inner, msg, self.chunk)?;
        self.inner.flush()?;
        Ok(n)
    }

    /// Bytes handed to the transport so far.
    pub fn count_payload(&self) -> u64 {
        self.counter.get()
    }

    pub fn counter(&self) -> ByteCounter {
        self.counter.clone()
    }

    pub fn chunk(&self) -> ChunkConfig {
        self.chunk
    }

    pub fn get_ref(&self) -> &W {
        self.inner.get_ref().get_ref()
    }
}

impl FrameWriter<TcpStream> {
    pub fn connect(addr: SocketAddr, chunk: ChunkConfig) -> io::Result<Self> {
        let s = TcpStream::connect(addr)?;
        s.set_nodelay(true)?;
        Ok(FrameWriter::new(s, chunk))
    }
}

/// Frame receiver that enforces strictly increasing sequence numbers on
/// InferenceData and Result frames.
pub struct FrameReader<R: Read> {
    inner: R,
    last_seq: Option<u64>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner, last_seq: None }
    }

    pub fn recv(&mut self) -> Result<Option<Message>, WireError> {
        let msg = read_frame(&mut self.inner)?;
        if let Some(m) = &msg {
            if m.kind.is_sequenced() {
                if let Some(last) = self.last_seq {
                    if m.sequence <= last {
                        return Err(WireError::OrderViolation { last, got: m.sequence });
                    }
                }
                self.last_seq = Some(m.sequence);
            }
        }
        Ok(msg)
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(kind: MessageKind, seq: u64, len: usize) -> Message {
        Message::new(kind, seq, (0..len).map(|i| (i * 31 % 251) as u8).collect())
    }

    #[test]
    fn three_chunks_for_three_default_chunks_of_payload() {
        let chunk = ChunkConfig::default();
        let m = msg(MessageKind::Weights, 1, 1_572_864);
        assert_eq!(chunk.chunk_count(m.payload.len()), 3);
        let bytes = frame_encode(&m, chunk).unwrap();
        assert_eq!(bytes.len() as u64, chunk.frame_len(m.payload.len()));
        assert_eq!(bytes.len(), HEADER_LEN + 1_572_864 + 3 * 4);
        assert_eq!(frame_decode(&mut &bytes[..]).unwrap(), m);
    }

    #[test]
    fn empty_payload_is_header_only() {
        let m = Message::new(MessageKind::Shutdown, 9, vec![]);
        let bytes = frame_encode(&m, ChunkConfig::default()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[..2], b"DF");
        assert_eq!(bytes[2], 6);
        assert_eq!(&bytes[3..11], &9u64.to_le_bytes());
        assert_eq!(&bytes[11..19], &0u64.to_le_bytes());
        assert_eq!(frame_decode(&mut &bytes[..]).unwrap(), m);
    }

    #[test]
    fn decode_errors() {
        let m = msg(MessageKind::InferenceData, 1, 10_000);
        let chunk = ChunkConfig::new(4096).unwrap();
        let bytes = frame_encode(&m, chunk).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(frame_decode(&mut &bad[..]), Err(WireError::BadMagic(_))));

        assert!(matches!(
            frame_decode(&mut &bytes[..bytes.len() - 1]),
            Err(WireError::TruncatedFrame(_))
        ));
        assert!(matches!(
            frame_decode(&mut &bytes[..5]),
            Err(WireError::TruncatedFrame(_))
        ));
        assert!(matches!(frame_decode(&mut &[][..]), Err(WireError::TruncatedFrame(_))));
        assert!(read_frame(&mut &[][..]).unwrap().is_none());

        // first chunk claims more than the declared total
        let mut bad = bytes.clone();
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&20_000u32.to_le_bytes());
        assert!(matches!(frame_decode(&mut &bad[..]), Err(WireError::ChunkOverflow(_))));

        let mut bad = bytes.clone();
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(frame_decode(&mut &bad[..]), Err(WireError::ChunkOverflow(_))));

        let mut bad = bytes;
        bad[2] = 99;
        assert!(matches!(frame_decode(&mut &bad[..]), Err(WireError::UnknownKind(99))));
    }

    #[test]
    fn chunk_config_bounds() {
        assert!(ChunkConfig::new(4095).is_err());
        assert!(ChunkConfig::new(4096).is_ok());
    }

    #[test]
    fn counting_single_header_and_n_frames() {
        let mut w = FrameWriter::new(Vec::new(), ChunkConfig::default());
        assert_eq!(w.count_payload(), 0);
        w.send(&Message::new(MessageKind::Shutdown, 0, vec![])).unwrap();
        assert_eq!(w.count_payload(), 19);
        w.counter().reset();
        let m = msg(MessageKind::InferenceData, 3, 700);
        w.send(&m).unwrap();
        let single = w.counter().reset();
        for _ in 0..7 {
            w.send(&m).unwrap();
        }
        assert_eq!(w.count_payload(), 7 * single);
    }

    #[test]
    fn reader_enforces_sequence_order() {
        let chunk = ChunkConfig::default();
        let mut buf = Vec::new();
        for s in [1, 2, 2] {
            write_frame(&mut buf, &Message::new(MessageKind::Result, s, vec![]), chunk).unwrap();
        }
        let mut r = FrameReader::new(&buf[..]);
        assert_eq!(r.recv().unwrap().unwrap().sequence, 1);
        assert_eq!(r.recv().unwrap().unwrap().sequence, 2);
        assert!(matches!(r.recv(), Err(WireError::OrderViolation { last: 2, got: 2 })));
    }

    #[test]
    fn next_hop_payload() {
        let m = Message::next_hop("127.0.0.1:4000").unwrap();
        assert_eq!(m.next_hop_addr().unwrap(), "127.0.0.1:4000".parse().unwrap());
        assert!(Message::next_hop("nohost").is_err());
        assert!(Message::next_hop("127.0.0.1:notaport").is_err());
    }
}
