//! Length-prefixed record framing shared by upload buffer logs, dead-letter
//! files and the binary bulk wire format.
//!
//! Each record is an 8-byte big-endian unsigned payload length followed by
//! the payload bytes. Records are concatenated with no separator.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

pub const LEN_PREFIX: usize = 8;

pub fn encoded_len(payload: &[u8]) -> usize {
    LEN_PREFIX + payload.len()
}

pub fn encode_into(payload: &[u8], out: &mut Vec<u8>) {
    out.reserve(encoded_len(payload));
    out.extend_from_slice(&(payload.len() as u64).to_be_bytes());
    out.extend_from_slice(payload);
}

pub fn encode_all<I, P>(payloads: I) -> Vec<u8>
where
    I: IntoIterator<Item = P>,
    P: AsRef<[u8]>,
{
    let mut out = Vec::new();
    for p in payloads {
        encode_into(p.as_ref(), &mut out);
    }
    out
}

/// Writes one record with a single `write_all` call.
pub fn write_record<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(encoded_len(payload));
    encode_into(payload, &mut buf);
    w.write_all(&buf)
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct Decoded {
    pub records: Vec<Vec<u8>>,
    /// Bytes covered by complete records.
    pub valid_len: usize,
    /// Whether trailing bytes formed an incomplete record.
    pub torn: bool,
}

pub fn decode_all(bytes: &[u8]) -> Decoded {
    let mut out = Decoded::default();
    let mut pos = 0;
    while pos < bytes.len() {
        let Some(prefix) = bytes.get(pos..pos + LEN_PREFIX) else {
            out.torn = true;
            break;
        };
        let len = u64::from_be_bytes(prefix.try_into().unwrap());
        let start = pos + LEN_PREFIX;
        let end = match usize::try_from(len).ok().and_then(|l| start.checked_add(l)) {
            Some(end) if end <= bytes.len() => end,
            _ => {
                out.torn = true;
                break;
            }
        };
        out.records.push(bytes[start..end].to_vec());
        pos = end;
    }
    out.valid_len = pos;
    out
}

/// Reads and decodes a whole log file. A missing file decodes as empty.
pub fn read_log(path: &Path) -> io::Result<Decoded> {
    match fs::read(path) {
        Ok(bytes) => Ok(decode_all(&bytes)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Decoded::default()),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_layout() {
        let bytes = encode_all([&b"ab"[..], b""]);
        assert_eq!(
            bytes,
            vec![0, 0, 0, 0, 0, 0, 0, 2, b'a', b'b', 0, 0, 0, 0, 0, 0, 0, 0]
        );
    }

    #[test]
    fn torn_tail_is_dropped() {
        let mut bytes = encode_all([b"one", b"two"]);
        let full = bytes.len();
        bytes.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 9, b'x']);
        let d = decode_all(&bytes);
        assert_eq!(d.records, vec![b"one".to_vec(), b"two".to_vec()]);
        assert_eq!(d.valid_len, full);
        assert!(d.torn);

        let d = decode_all(&[0, 0, 1]);
        assert!(d.records.is_empty() && d.torn && d.valid_len == 0);

        let huge = u64::MAX.to_be_bytes();
        assert!(decode_all(&huge).torn);
    }

    proptest! {
        #[test]
        fn round_trip(payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..300), 0..20)) {
            let bytes = encode_all(&payloads);
            let d = decode_all(&bytes);
            prop_assert!(!d.torn);
            prop_assert_eq!(d.valid_len, bytes.len());
            prop_assert_eq!(d.records, payloads);
        }

        #[test]
        fn any_truncation_keeps_a_prefix(
            payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..50), 1..10),
            cut in any::<prop::sample::Index>(),
        ) {
            let bytes = encode_all(&payloads);
            let cut = cut.index(bytes.len());
            let d = decode_all(&bytes[..cut]);
            prop_assert!(d.records.len() <= payloads.len());
            prop_assert_eq!(&d.records[..], &payloads[..d.records.len()]);
        }
    }
}
