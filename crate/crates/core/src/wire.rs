//! Protocol message frames.
//!
//! Each per-recipient payload is a sequence of frames. A frame is a
//! little-endian `u32` body length, then the body: a one-byte tag followed by
//! fixed-width little-endian fields.
//!
//! | tag  | message          | fields                                  |
//! |------|------------------|-----------------------------------------|
//! | 0x01 | initial value    | instance `u32`, value (9 bytes)         |
//! | 0x02 | perplexed        | instance `u32`                          |
//! | 0x03 | phase-king vote  | instance `u32`, phase `u32`, bit `u8`   |
//! | 0x04 | king broadcast   | instance `u32`, phase `u32`, bit `u8`   |
//!
//! A value is a presence byte (0 = ⊥, 1 = present) and an `i64`. Instance 0
//! is the median broadcast round; instances `1..=n` are the parallel
//! weak-validity runs. A vote bit of 2 means "no proposal" and is only
//! meaningful in the second sub-round of a phase.

use thiserror::Error;

use crate::model::Value;

pub const TAG_INITIAL: u8 = 0x01;
pub const TAG_PERPLEXED: u8 = 0x02;
pub const TAG_VOTE: u8 = 0x03;
pub const TAG_KING: u8 = 0x04;

/// Vote bit meaning "no value reached the proposal threshold".
pub const NO_PROPOSAL: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Message {
    Initial { instance: u32, value: Value },
    Perplexed { instance: u32 },
    Vote { instance: u32, phase: u32, bit: u8 },
    King { instance: u32, phase: u32, bit: u8 },
}

impl Message {
    pub fn instance(&self) -> u32 {
        match *self {
            Message::Initial { instance, .. }
            | Message::Perplexed { instance }
            | Message::Vote { instance, .. }
            | Message::King { instance, .. } => instance,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame")]
    Truncated,
    #[error("unknown tag {0:#04x}")]
    UnknownTag(u8),
    #[error("bad body length {len} for tag {tag:#04x}")]
    BadLength { tag: u8, len: usize },
    #[error("bad value presence byte {0}")]
    BadPresence(u8),
}

fn body_len(tag: u8) -> Option<usize> {
    match tag {
        TAG_INITIAL => Some(1 + 4 + 9),
        TAG_PERPLEXED => Some(1 + 4),
        TAG_VOTE | TAG_KING => Some(1 + 4 + 4 + 1),
        _ => None,
    }
}

pub fn encode_into(msg: &Message, out: &mut Vec<u8>) {
    let tag = match msg {
        Message::Initial { .. } => TAG_INITIAL,
        Message::Perplexed { .. } => TAG_PERPLEXED,
        Message::Vote { .. } => TAG_VOTE,
        Message::King { .. } => TAG_KING,
    };
    let len = body_len(tag).expect("known tag") as u32;
    out.extend_from_slice(&len.to_le_bytes());
    out.push(tag);
    out.extend_from_slice(&msg.instance().to_le_bytes());
    match *msg {
        Message::Initial { value, .. } => match value {
            Value::Bottom => {
                out.push(0);
                out.extend_from_slice(&0i64.to_le_bytes());
            }
            Value::Int(v) => {
                out.push(1);
                out.extend_from_slice(&v.to_le_bytes());
            }
        },
        Message::Perplexed { .. } => {}
        Message::Vote { phase, bit, .. } | Message::King { phase, bit, .. } => {
            out.extend_from_slice(&phase.to_le_bytes());
            out.push(bit);
        }
    }
}

pub fn encode(msgs: &[Message]) -> Vec<u8> {
    let mut out = Vec::with_capacity(msgs.len() * 18);
    for m in msgs {
        encode_into(m, &mut out);
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Iterates the frames of a payload. Iteration stops after the first
/// malformed frame; everything past it is unreadable.
pub struct Frames<'a> {
    buf: &'a [u8],
    done: bool,
}

pub fn frames(buf: &[u8]) -> Frames<'_> {
    Frames { buf, done: false }
}

impl Iterator for Frames<'_> {
    type Item = Result<Message, WireError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done || self.buf.is_empty() {
            return None;
        }
        let res = self.parse_one();
        if res.is_err() {
            self.done = true;
        }
        Some(res)
    }
}

impl Frames<'_> {
    fn parse_one(&mut self) -> Result<Message, WireError> {
        if self.buf.len() < 5 {
            return Err(WireError::Truncated);
        }
        let len = u32_at(self.buf, 0) as usize;
        let tag = self.buf[4];
        let expected = body_len(tag).ok_or(WireError::UnknownTag(tag))?;
        if len != expected {
            return Err(WireError::BadLength { tag, len });
        }
        if self.buf.len() < 4 + len {
            return Err(WireError::Truncated);
        }
        let body = &self.buf[4..4 + len];
        let instance = u32_at(body, 1);
        let msg = match tag {
            TAG_INITIAL => {
                let raw = i64::from_le_bytes(body[6..14].try_into().unwrap());
                let value = match body[5] {
                    0 => Value::Bottom,
                    1 => Value::Int(raw),
                    other => return Err(WireError::BadPresence(other)),
                };
                Message::Initial { instance, value }
            }
            TAG_PERPLEXED => Message::Perplexed { instance },
            TAG_VOTE => Message::Vote { instance, phase: u32_at(body, 5), bit: body[9] },
            TAG_KING => Message::King { instance, phase: u32_at(body, 5), bit: body[9] },
            _ => unreachable!(),
        };
        self.buf = &self.buf[4 + len..];
        Ok(msg)
    }
}

/// All well-formed frames up to the first malformed one.
pub fn decode_lossy(buf: &[u8]) -> impl Iterator<Item = Message> + '_ {
    frames(buf).map_while(Result::ok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_value() -> impl Strategy<Value = crate::model::Value> {
        prop_oneof![Just(Value::Bottom), any::<i64>().prop_map(Value::Int)]
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (any::<u32>(), arb_value()).prop_map(|(instance, value)| Message::Initial { instance, value }),
            any::<u32>().prop_map(|instance| Message::Perplexed { instance }),
            (any::<u32>(), any::<u32>(), 0u8..3).prop_map(|(instance, phase, bit)| Message::Vote { instance, phase, bit }),
            (any::<u32>(), any::<u32>(), 0u8..2).prop_map(|(instance, phase, bit)| Message::King { instance, phase, bit }),
        ]
    }

    proptest! {
        #[test]
        fn frames_roundtrip(msgs in proptest::collection::vec(arb_message(), 0..20)) {
            let bytes = encode(&msgs);
            let back: Result<Vec<_>, _> = frames(&bytes).collect();
            prop_assert_eq!(back.unwrap(), msgs);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_lossy(&bytes).count();
        }
    }

    #[test]
    fn initial_frame_layout() {
        let bytes = encode(&[Message::Initial { instance: 2, value: Value::Int(-1) }]);
        assert_eq!(&bytes[..4], &14u32.to_le_bytes());
        assert_eq!(bytes[4], TAG_INITIAL);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(bytes[9], 1);
        assert_eq!(&bytes[10..18], &(-1i64).to_le_bytes());
        assert_eq!(bytes.len(), 18);
    }

    #[test]
    fn garbage_tail_is_dropped() {
        let mut bytes = encode(&[Message::Perplexed { instance: 1 }]);
        bytes.extend_from_slice(&[7, 0, 0, 0, 0x09, 1, 2]);
        let got: Vec<_> = frames(&bytes).collect();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0], Ok(Message::Perplexed { instance: 1 }));
        assert_eq!(got[1], Err(WireError::UnknownTag(0x09)));
        assert_eq!(decode_lossy(&bytes).count(), 1);
    }
}
