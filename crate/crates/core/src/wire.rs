//! Canonical byte encoding for [`Message`].
//!
//! Layout: every field is written in declaration order; integers are
//! big-endian `u64` (process ids `u32`), byte strings are prefixed with a
//! `u32` length, enum variants with a single discriminant byte. Decoding is
//! strict: trailing bytes and unknown discriminants are errors.

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::types::{Message, MessageKind, ProcessId, ReadyVector, Stream, UrbPayload, Value};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("unknown {what} discriminant {found}")]
    BadTag { what: &'static str, found: u8 },
    #[error("empty value payload")]
    EmptyValue,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

const K_SYNC: u8 = 1;
const K_SYNC_ACK: u8 = 2;
const K_URB_DATA: u8 = 3;
const K_URB_ACK: u8 = 4;

const P_BOT: u8 = 0;
const P_VALUE: u8 = 1;
const P_APP: u8 = 2;

pub fn encode(m: &Message) -> Bytes {
    let mut b = BytesMut::with_capacity(64);
    b.put_u32(m.sender.0);
    b.put_u32(m.dest.0);
    b.put_u64(m.tag);
    match &m.kind {
        MessageKind::Sync { sn } => {
            b.put_u8(K_SYNC);
            b.put_u64(*sn);
        }
        MessageKind::SyncAck { sn, seq, obs_s, ready } => {
            b.put_u8(K_SYNC_ACK);
            b.put_u64(*sn);
            b.put_u64(*seq);
            b.put_u64(*obs_s);
            b.put_u32(ready.0.len() as u32);
            for r in &ready.0 {
                b.put_u64(*r);
            }
        }
        MessageKind::UrbData { origin, seq, payload } => {
            b.put_u8(K_URB_DATA);
            b.put_u32(origin.0);
            b.put_u64(*seq);
            match payload {
                UrbPayload::Proposal(None) => b.put_u8(P_BOT),
                UrbPayload::Proposal(Some(v)) => {
                    b.put_u8(P_VALUE);
                    put_bytes(&mut b, v.as_bytes());
                }
                UrbPayload::App(v) => {
                    b.put_u8(P_APP);
                    put_bytes(&mut b, v.as_bytes());
                }
            }
        }
        MessageKind::UrbAck { stream, origin, seq, delivered } => {
            b.put_u8(K_URB_ACK);
            b.put_u8(match stream {
                Stream::Proposal => 0,
                Stream::Fifo => 1,
            });
            b.put_u32(origin.0);
            b.put_u64(*seq);
            b.put_u8(*delivered as u8);
        }
    }
    b.freeze()
}

fn put_bytes(b: &mut BytesMut, v: &[u8]) {
    b.put_u32(v.len() as u32);
    b.put_slice(v);
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn need(&self, k: usize) -> Result<(), DecodeError> {
        if self.0.remaining() < k {
            Err(DecodeError::Truncated)
        } else {
            Ok(())
        }
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        self.need(1)?;
        Ok(self.0.get_u8())
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.need(4)?;
        Ok(self.0.get_u32())
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        self.need(8)?;
        Ok(self.0.get_u64())
    }
    fn value(&mut self) -> Result<Value, DecodeError> {
        let len = self.u32()? as usize;
        self.need(len)?;
        let bytes = Bytes::copy_from_slice(&self.0[..len]);
        self.0.advance(len);
        Value::new(bytes).map_err(|_| DecodeError::EmptyValue)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader(bytes);
    let sender = ProcessId(r.u32()?);
    let dest = ProcessId(r.u32()?);
    let tag = r.u64()?;
    let kind = match r.u8()? {
        K_SYNC => MessageKind::Sync { sn: r.u64()? },
        K_SYNC_ACK => {
            let sn = r.u64()?;
            let seq = r.u64()?;
            let obs_s = r.u64()?;
            let len = r.u32()? as usize;
            r.need(len.saturating_mul(8))?;
            let mut ready = Vec::with_capacity(len);
            for _ in 0..len {
                ready.push(r.u64()?);
            }
            MessageKind::SyncAck { sn, seq, obs_s, ready: ReadyVector(ready) }
        }
        K_URB_DATA => {
            let origin = ProcessId(r.u32()?);
            let seq = r.u64()?;
            let payload = match r.u8()? {
                P_BOT => UrbPayload::Proposal(None),
                P_VALUE => UrbPayload::Proposal(Some(r.value()?)),
                P_APP => UrbPayload::App(r.value()?),
                found => return Err(DecodeError::BadTag { what: "payload", found }),
            };
            MessageKind::UrbData { origin, seq, payload }
        }
        K_URB_ACK => {
            let stream = match r.u8()? {
                0 => Stream::Proposal,
                1 => Stream::Fifo,
                found => return Err(DecodeError::BadTag { what: "stream", found }),
            };
            let origin = ProcessId(r.u32()?);
            let seq = r.u64()?;
            let delivered = match r.u8()? {
                0 => false,
                1 => true,
                found => return Err(DecodeError::BadTag { what: "bool", found }),
            };
            MessageKind::UrbAck { stream, origin, seq, delivered }
        }
        found => return Err(DecodeError::BadTag { what: "message", found }),
    };
    if !r.0.is_empty() {
        return Err(DecodeError::Trailing(r.0.len()));
    }
    Ok(Message { sender, dest, tag, kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_value() -> impl Strategy<Value = Value> {
        proptest::collection::vec(any::<u8>(), 1..24).prop_map(|v| Value::new(v).unwrap())
    }

    fn arb_kind() -> impl Strategy<Value = MessageKind> {
        prop_oneof![
            any::<u64>().prop_map(|sn| MessageKind::Sync { sn }),
            (any::<u64>(), any::<u64>(), any::<u64>(), proptest::collection::vec(any::<u64>(), 0..6))
                .prop_map(|(sn, seq, obs_s, r)| MessageKind::SyncAck {
                    sn,
                    seq,
                    obs_s,
                    ready: ReadyVector(r)
                }),
            (0u32..8, any::<u64>(), proptest::option::of(arb_value()), any::<bool>()).prop_map(
                |(o, seq, v, app)| MessageKind::UrbData {
                    origin: ProcessId(o),
                    seq,
                    payload: match (app, v) {
                        (true, Some(v)) => UrbPayload::App(v),
                        (_, v) => UrbPayload::Proposal(v),
                    },
                }
            ),
            (any::<bool>(), 0u32..8, any::<u64>(), any::<bool>()).prop_map(|(f, o, seq, d)| {
                MessageKind::UrbAck {
                    stream: if f { Stream::Fifo } else { Stream::Proposal },
                    origin: ProcessId(o),
                    seq,
                    delivered: d,
                }
            }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(s in 0u32..8, d in 0u32..8, tag in any::<u64>(), kind in arb_kind()) {
            let m = Message { sender: ProcessId(s), dest: ProcessId(d), tag, kind };
            prop_assert_eq!(decode(&encode(&m)), Ok(m));
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..80)) {
            let _ = decode(&bytes);
        }
    }

    #[test]
    fn bot_proposal_is_distinct_from_every_value() {
        let bot = Message {
            sender: ProcessId(0),
            dest: ProcessId(1),
            tag: 3,
            kind: MessageKind::UrbData {
                origin: ProcessId(0),
                seq: 1,
                payload: UrbPayload::Proposal(None),
            },
        };
        let enc = encode(&bot);
        // A value-carrying proposal is always strictly longer: discriminant + length + >=1 byte.
        let with_value = Message {
            kind: MessageKind::UrbData {
                origin: ProcessId(0),
                seq: 1,
                payload: UrbPayload::Proposal(Some(Value::new(vec![0u8]).unwrap())),
            },
            ..bot.clone()
        };
        assert_eq!(encode(&with_value).len(), enc.len() + 5);
        assert_eq!(decode(&enc).unwrap(), bot);
    }

    #[test]
    fn empty_value_on_wire_is_rejected() {
        let m = Message {
            sender: ProcessId(0),
            dest: ProcessId(0),
            tag: 0,
            kind: MessageKind::UrbData {
                origin: ProcessId(0),
                seq: 1,
                payload: UrbPayload::App(Value::from_static("x")),
            },
        };
        let mut raw = encode(&m).to_vec();
        // Rewrite the value length to zero and drop the byte.
        let n = raw.len();
        raw[n - 5..n - 1].copy_from_slice(&0u32.to_be_bytes());
        raw.pop();
        assert_eq!(decode(&raw), Err(DecodeError::EmptyValue));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let m = Message {
            sender: ProcessId(1),
            dest: ProcessId(2),
            tag: 9,
            kind: MessageKind::Sync { sn: 4 },
        };
        let mut raw = encode(&m).to_vec();
        raw.push(0);
        assert_eq!(decode(&raw), Err(DecodeError::Trailing(1)));
    }
}
