//! Framing laws: round trips, chunking and stream concatenation.

use std::io::Cursor;

use proptest::prelude::*;

use defer::wire::{
    frame_decode, frame_encode, read_frame, ChunkConfig, FrameReader, FrameWriter, Message, MessageKind, WireError,
    CHUNK_HEADER_LEN, HEADER_LEN, MIN_CHUNK_BYTES,
};

fn kind() -> impl Strategy<Value = MessageKind> {
    (1u8..=8).prop_map(|b| MessageKind::from_u8(b).unwrap())
}

fn chunk() -> impl Strategy<Value = ChunkConfig> {
    prop_oneof![Just(MIN_CHUNK_BYTES), MIN_CHUNK_BYTES..70_000, Just(512 * 1024)]
        .prop_map(|c| ChunkConfig::new(c).unwrap())
}

/// Payload of `len` bytes with a seed-dependent pattern, cheap to build at MiB sizes.
fn payload(len: usize, seed: u8) -> Vec<u8> {
    (0..len)
        .map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn frames_round_trip(
        k in kind(), seq in any::<u64>(), len in prop_oneof![0usize..10_000, 0usize..(4 << 20)],
        seed in any::<u8>(), c in chunk(),
    ) {
        let msg = Message::new(k, seq, payload(len, seed));
        let bytes = frame_encode(&msg, c).unwrap();
        let chunks = len.div_ceil(c.chunk_bytes());
        prop_assert_eq!(bytes.len(), HEADER_LEN + len + chunks * CHUNK_HEADER_LEN);
        prop_assert_eq!(bytes.len() as u64, c.frame_len(len));
        prop_assert_eq!(frame_decode(&mut Cursor::new(&bytes)).unwrap(), msg);
    }

    #[test]
    fn concatenated_frames_split_back(
        msgs in prop::collection::vec((kind(), 1u64..1000, 0usize..20_000, any::<u8>()), 0..12),
        c in chunk(),
    ) {
        // sequenced kinds must strictly increase, so sequences are running sums
        let mut seq = 0;
        let msgs: Vec<Message> = msgs
            .into_iter()
            .map(|(k, step, l, p)| {
                seq += step;
                Message::new(k, seq, payload(l, p))
            })
            .collect();
        let mut w = FrameWriter::new(Vec::new(), c);
        for m in &msgs {
            w.send(m).unwrap();
        }
        let wire = w.get_ref().clone();
        let total: u64 = msgs.iter().map(|m| c.frame_len(m.payload.len())).sum();
        prop_assert_eq!(wire.len() as u64, total);
        let mut r = FrameReader::new(Cursor::new(wire));
        for m in &msgs {
            prop_assert_eq!(&r.recv().unwrap().unwrap(), m);
        }
        prop_assert!(r.recv().unwrap().is_none());
    }

    #[test]
    fn sequence_regression_is_detected(a in 1u64..u64::MAX, back in 0u64..1000) {
        let b = a.saturating_sub(back);
        let c = ChunkConfig::default();
        let mut w = FrameWriter::new(Vec::new(), c);
        w.send(&Message::new(MessageKind::InferenceData, a, vec![1])).unwrap();
        w.send(&Message::new(MessageKind::InferenceData, b, vec![2])).unwrap();
        let mut r = FrameReader::new(Cursor::new(w.get_ref().clone()));
        r.recv().unwrap().unwrap();
        let is_violation = matches!(r.recv(), Err(WireError::OrderViolation { .. }));
        prop_assert!(is_violation);
    }

    #[test]
    fn any_truncation_is_an_error(len in 0usize..9000, cut_frac in 0.0f64..1.0) {
        let c = ChunkConfig::new(MIN_CHUNK_BYTES).unwrap();
        let bytes = frame_encode(&Message::new(MessageKind::InferenceData, 9, payload(len, 1)), c).unwrap();
        let cut = ((bytes.len() as f64) * cut_frac) as usize;
        // a clean EOF before the header is end-of-stream, anything later is truncation
        let r = read_frame(&mut Cursor::new(&bytes[..cut]));
        if cut == 0 {
            prop_assert!(matches!(r, Ok(None)));
        } else {
            prop_assert!(r.is_err());
        }
    }

    #[test]
    fn corrupted_headers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = read_frame(&mut Cursor::new(&bytes));
    }
}

#[test]
fn header_layout_is_fixed() {
    let c = ChunkConfig::default();
    let b = frame_encode(&Message::new(MessageKind::Result, 0x0102030405060708, vec![0xAA; 3]), c).unwrap();
    assert_eq!(&b[..2], b"DF");
    assert_eq!(b[2], 5);
    assert_eq!(&b[3..11], &0x0102030405060708u64.to_le_bytes());
    assert_eq!(&b[11..19], &3u64.to_le_bytes());
    assert_eq!(&b[19..23], &3u32.to_le_bytes());
    assert_eq!(&b[23..], &[0xAA; 3]);
}

#[test]
fn small_chunks_are_refused() {
    assert!(ChunkConfig::new(MIN_CHUNK_BYTES - 1).is_err());
    assert!(MessageKind::from_u8(0).is_err());
    assert!(MessageKind::from_u8(9).is_err());
}
