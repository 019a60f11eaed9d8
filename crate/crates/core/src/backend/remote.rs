//! Client for a backend served over TCP (see [`super::protocol`]).

use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use log::warn;

use super::protocol::{read_frame, write_frame, Cursor, Request, Status};
use super::{Backend, BackendError, ContractViolation, Mark, SamplingParams};
use crate::tokenizer::TokenId;

#[derive(Debug)]
pub struct RemoteBackend {
    stream: TcpStream,
    session: u64,
    vocab: String,
    cache_len: usize,
    poisoned: bool,
    timeout: Duration,
}

impl RemoteBackend {
    /// Connect and open a session for `vocab`. Fails with a contract error
    /// when the service serves a different vocabulary.
    pub fn connect(
        addr: impl ToSocketAddrs,
        vocab: &str,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| BackendError::ConnectionLost(e.to_string()))?
            .next()
            .ok_or_else(|| BackendError::ConnectionLost("address resolved to nothing".into()))?;
        let stream = TcpStream::connect_timeout(&addr, timeout)
            .map_err(|e| BackendError::ConnectionLost(e.to_string()))?;
        stream
            .set_read_timeout(Some(timeout))
            .and_then(|_| stream.set_write_timeout(Some(timeout)))
            .and_then(|_| stream.set_nodelay(true))
            .map_err(|e| BackendError::ConnectionLost(e.to_string()))?;
        let mut backend = Self {
            stream,
            session: 0,
            vocab: vocab.to_string(),
            cache_len: 0,
            poisoned: false,
            timeout,
        };
        let payload = backend.call(&Request::Open {
            vocab: vocab.to_string(),
        })?;
        backend.session = backend.parse(&payload, |c| c.u64())?;
        Ok(backend)
    }

    pub fn session_id(&self) -> u64 {
        self.session
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    fn fail(&mut self, err: BackendError) -> BackendError {
        warn!("remote backend session {} poisoned: {err}", self.session);
        self.poisoned = true;
        err
    }

    fn io_error(&mut self, e: io::Error) -> BackendError {
        let err = match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => {
                BackendError::Timeout(self.timeout)
            }
            _ => BackendError::ConnectionLost(e.to_string()),
        };
        self.fail(err)
    }

    fn call(&mut self, req: &Request) -> Result<Vec<u8>, BackendError> {
        if self.poisoned {
            return Err(BackendError::Poisoned);
        }
        if let Err(e) = write_frame(&mut self.stream, &req.encode(self.session)) {
            return Err(self.io_error(e));
        }
        let body = match read_frame(&mut self.stream) {
            Ok(Some(b)) => b,
            Ok(None) => {
                return Err(self.fail(BackendError::ConnectionLost(
                    "service closed the connection".into(),
                )))
            }
            Err(e) => return Err(self.io_error(e)),
        };
        match Status::decode(&body) {
            Ok(Status::Ok(payload)) => Ok(payload),
            Ok(Status::Contract(v)) => Err(BackendError::Contract(v)),
            Ok(Status::Protocol(m)) => Err(self.fail(BackendError::Protocol(m))),
            Ok(Status::UnknownSession) => Err(self.fail(BackendError::Protocol(format!(
                "service does not know session {}",
                self.session
            )))),
            Ok(Status::Internal(m)) => Err(self.fail(BackendError::Remote(m))),
            Err(e) => Err(self.fail(BackendError::Protocol(e.0))),
        }
    }

    fn parse<T>(
        &mut self,
        payload: &[u8],
        f: impl FnOnce(&mut Cursor) -> Result<T, super::protocol::DecodeError>,
    ) -> Result<T, BackendError> {
        let mut c = Cursor::new(payload);
        match f(&mut c).and_then(|v| c.finish().map(|_| v)) {
            Ok(v) => Ok(v),
            Err(e) => Err(self.fail(BackendError::Protocol(e.0))),
        }
    }
}

impl Backend for RemoteBackend {
    fn vocab_descriptor(&self) -> &str {
        &self.vocab
    }

    fn cache_len(&self) -> usize {
        self.cache_len
    }

    fn prefill(&mut self, tokens: &[TokenId]) -> Result<usize, BackendError> {
        if tokens.is_empty() {
            return Err(ContractViolation::EmptyPrefill.into());
        }
        let payload = self.call(&Request::Prefill {
            tokens: tokens.to_vec(),
        })?;
        self.cache_len = self.parse(&payload, |c| c.u64())? as usize;
        Ok(self.cache_len)
    }

    fn decode_next(&mut self, params: &SamplingParams) -> Result<TokenId, BackendError> {
        let payload = self.call(&Request::Decode { params: *params })?;
        let (tok, len) = self.parse(&payload, |c| Ok((c.u32()?, c.u64()?)))?;
        self.cache_len = len as usize;
        Ok(tok)
    }

    fn checkpoint(&mut self) -> Result<Mark, BackendError> {
        let payload = self.call(&Request::Checkpoint)?;
        let (id, position) = self.parse(&payload, |c| Ok((c.u64()?, c.u64()?)))?;
        Ok(Mark {
            session: self.session,
            id,
            position: position as usize,
        })
    }

    fn rollback(&mut self, mark: Mark) -> Result<(), BackendError> {
        if mark.session != self.session {
            return Err(ContractViolation::ForeignMark.into());
        }
        let payload = self.call(&Request::Rollback {
            mark_id: mark.id,
            position: mark.position as u64,
        })?;
        self.cache_len = self.parse(&payload, |c| c.u64())? as usize;
        Ok(())
    }
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        if !self.poisoned {
            let _ = self.call(&Request::Close);
        }
    }
}
