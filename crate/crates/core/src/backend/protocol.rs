//! Wire format for remote backends.
//!
//! Every frame is a 4-byte big-endian length followed by that many bytes.
//! All integers are big-endian; floats are IEEE-754 binary64 bit patterns.
//!
//! Request body: `op:u8 session:u64 payload`
//!
//! | op | name       | payload                                             |
//! |----|------------|-----------------------------------------------------|
//! | 1  | OPEN       | `len:u16` then `len` bytes of vocabulary descriptor |
//! | 2  | PREFILL    | `count:u32` then `count` token ids as `u32`         |
//! | 3  | DECODE     | `temperature:f64 top_p:f64 seed:u64 max_new:u32`    |
//! | 4  | CHECKPOINT | empty                                               |
//! | 5  | ROLLBACK   | `mark_id:u64 position:u64`                          |
//! | 6  | CLOSE      | empty                                               |
//!
//! OPEN is sent with session 0; the reply carries the new session id.
//!
//! Response body: `status:u8 payload`
//!
//! | status | meaning         | payload                                   |
//! |--------|-----------------|-------------------------------------------|
//! | 0      | OK              | per op, below                             |
//! | 1      | CONTRACT        | `code:u8` (see [`ContractViolation::code`]) |
//! | 2      | PROTOCOL        | UTF-8 message                             |
//! | 3      | UNKNOWN_SESSION | empty                                     |
//! | 4      | INTERNAL        | UTF-8 message                             |
//!
//! OK payloads: OPEN `session:u64`; PREFILL `cache_len:u64`; DECODE
//! `token:u32 cache_len:u64`; CHECKPOINT `mark_id:u64 position:u64`;
//! ROLLBACK `cache_len:u64`; CLOSE empty.

use std::io::{self, Read, Write};

use super::{ContractViolation, SamplingParams};
use crate::tokenizer::TokenId;

pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Open { vocab: String },
    Prefill { tokens: Vec<TokenId> },
    Decode { params: SamplingParams },
    Checkpoint,
    Rollback { mark_id: u64, position: u64 },
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Ok(Vec<u8>),
    Contract(ContractViolation),
    Protocol(String),
    UnknownSession,
    Internal(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError(pub String);

impl Request {
    pub fn op(&self) -> u8 {
        match self {
            Self::Open { .. } => 1,
            Self::Prefill { .. } => 2,
            Self::Decode { .. } => 3,
            Self::Checkpoint => 4,
            Self::Rollback { .. } => 5,
            Self::Close => 6,
        }
    }

    pub fn encode(&self, session: u64) -> Vec<u8> {
        let mut b = vec![self.op()];
        b.extend_from_slice(&session.to_be_bytes());
        match self {
            Self::Open { vocab } => {
                b.extend_from_slice(&(vocab.len() as u16).to_be_bytes());
                b.extend_from_slice(vocab.as_bytes());
            }
            Self::Prefill { tokens } => {
                b.extend_from_slice(&(tokens.len() as u32).to_be_bytes());
                for t in tokens {
                    b.extend_from_slice(&t.to_be_bytes());
                }
            }
            Self::Decode { params } => {
                b.extend_from_slice(&params.temperature.to_bits().to_be_bytes());
                b.extend_from_slice(&params.top_p.to_bits().to_be_bytes());
                b.extend_from_slice(&params.seed.to_be_bytes());
                b.extend_from_slice(&params.max_new_tokens.to_be_bytes());
            }
            Self::Checkpoint | Self::Close => {}
            Self::Rollback { mark_id, position } => {
                b.extend_from_slice(&mark_id.to_be_bytes());
                b.extend_from_slice(&position.to_be_bytes());
            }
        }
        b
    }

    pub fn decode(body: &[u8]) -> Result<(u64, Self), DecodeError> {
        let mut c = Cursor::new(body);
        let op = c.u8()?;
        let session = c.u64()?;
        let req = match op {
            1 => {
                let len = usize::from(c.u16()?);
                let bytes = c.take(len)?;
                let vocab = String::from_utf8(bytes.to_vec())
                    .map_err(|_| DecodeError("descriptor is not UTF-8".into()))?;
                Self::Open { vocab }
            }
            2 => {
                let n = c.u32()? as usize;
                if n > c.remaining() / 4 {
                    return Err(DecodeError(format!("prefill count {n} exceeds frame")));
                }
                let tokens = (0..n).map(|_| c.u32()).collect::<Result<_, _>>()?;
                Self::Prefill { tokens }
            }
            3 => Self::Decode {
                params: SamplingParams {
                    temperature: f64::from_bits(c.u64()?),
                    top_p: f64::from_bits(c.u64()?),
                    seed: c.u64()?,
                    max_new_tokens: c.u32()?,
                },
            },
            4 => Self::Checkpoint,
            5 => Self::Rollback {
                mark_id: c.u64()?,
                position: c.u64()?,
            },
            6 => Self::Close,
            _ => return Err(DecodeError(format!("unknown op {op}"))),
        };
        c.finish()?;
        Ok((session, req))
    }
}

impl Status {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Self::Ok(p) => [&[0u8][..], p].concat(),
            Self::Contract(v) => vec![1, v.code()],
            Self::Protocol(m) => [&[2u8][..], m.as_bytes()].concat(),
            Self::UnknownSession => vec![3],
            Self::Internal(m) => [&[4u8][..], m.as_bytes()].concat(),
        }
    }

    pub fn decode(body: &[u8]) -> Result<Self, DecodeError> {
        let (&status, rest) = body
            .split_first()
            .ok_or_else(|| DecodeError("empty response".into()))?;
        let text = || String::from_utf8_lossy(rest).into_owned();
        Ok(match status {
            0 => Self::Ok(rest.to_vec()),
            1 => {
                let code = rest.first().copied().unwrap_or(0);
                Self::Contract(
                    ContractViolation::from_code(code)
                        .ok_or_else(|| DecodeError(format!("unknown contract code {code}")))?,
                )
            }
            2 => Self::Protocol(text()),
            3 => Self::UnknownSession,
            4 => Self::Internal(text()),
            _ => return Err(DecodeError(format!("unknown status {status}"))),
        })
    }
}

/// Big-endian reader over a frame body.
pub struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError(format!(
                "frame truncated: wanted {n} bytes at {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(DecodeError(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(body.len() + 4);
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream before any byte of a frame.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefill_layout_is_exact() {
        let body = Request::Prefill {
            tokens: vec![1, 0x0102_0304],
        }
        .encode(7);
        assert_eq!(
            body,
            [2, 0, 0, 0, 0, 0, 0, 0, 7, 0, 0, 0, 2, 0, 0, 0, 1, 1, 2, 3, 4]
        );
        let mut framed = Vec::new();
        write_frame(&mut framed, &body).unwrap();
        assert_eq!(&framed[..4], &[0, 0, 0, 21]);
    }

    #[test]
    fn requests_round_trip() {
        let reqs = [
            Request::Open { vocab: "v".into() },
            Request::Prefill { tokens: vec![3, 4, 5] },
            Request::Decode {
                params: SamplingParams {
                    temperature: 0.7,
                    top_p: 0.9,
                    seed: 42,
                    max_new_tokens: 9,
                },
            },
            Request::Checkpoint,
            Request::Rollback { mark_id: 3, position: 99 },
            Request::Close,
        ];
        for r in reqs {
            assert_eq!(Request::decode(&r.encode(11)).unwrap(), (11, r));
        }
    }

    #[test]
    fn truncated_and_trailing_bodies_are_rejected() {
        let body = Request::Checkpoint.encode(1);
        assert!(Request::decode(&body[..5]).is_err());
        let mut long = body.clone();
        long.push(0);
        assert!(Request::decode(&long).is_err());
        assert!(Request::decode(&[9, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn statuses_round_trip() {
        for s in [
            Status::Ok(vec![1, 2]),
            Status::Contract(ContractViolation::StaleMark),
            Status::Protocol("bad".into()),
            Status::UnknownSession,
            Status::Internal("x".into()),
        ] {
            assert_eq!(Status::decode(&s.encode()).unwrap(), s);
        }
    }

    #[test]
    fn read_frame_distinguishes_clean_eof() {
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
        let mut partial: &[u8] = &[0, 0];
        assert!(read_frame(&mut partial).is_err());
        let mut huge: &[u8] = &[0xFF, 0, 0, 0];
        assert!(read_frame(&mut huge).is_err());
    }
}
