//! Generative backend contract: chunked prefill, single-token decode and a
//! checkpoint stack over the model's cache.

mod markov;
mod mock;
pub mod protocol;
mod remote;
mod server;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{Token, TokenId, Vocab};

pub use markov::MarkovModel;
pub use mock::{CostModel, MockBackend};
pub use remote::RemoteBackend;
pub use server::{serve_backend, BackendFactory, ServerHandle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_new_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.95,
            seed: 0,
            max_new_tokens: 512,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_new_tokens == 0 {
            return Err("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

/// A checkpoint. Only valid on the session that issued it, until a rollback
/// to it or to an earlier mark consumes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mark {
    pub session: u64,
    pub id: u64,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ContractViolation {
    #[error("vocabulary mismatch")]
    VocabMismatch,
    #[error("prefill with no tokens")]
    EmptyPrefill,
    #[error("decode on an empty cache")]
    EmptyCache,
    #[error("mark is stale (consumed or never issued)")]
    StaleMark,
    #[error("mark belongs to another session")]
    ForeignMark,
    #[error("token id outside the vocabulary")]
    UnknownToken,
    #[error("invalid sampling parameters")]
    BadParams,
}

impl ContractViolation {
    pub fn code(self) -> u8 {
        match self {
            Self::VocabMismatch => 1,
            Self::EmptyPrefill => 2,
            Self::EmptyCache => 3,
            Self::StaleMark => 4,
            Self::ForeignMark => 5,
            Self::UnknownToken => 6,
            Self::BadParams => 7,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => Self::VocabMismatch,
            2 => Self::EmptyPrefill,
            3 => Self::EmptyCache,
            4 => Self::StaleMark,
            5 => Self::ForeignMark,
            6 => Self::UnknownToken,
            7 => Self::BadParams,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("contract violation: {0}")]
    Contract(#[from] ContractViolation),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("connection to backend lost: {0}")]
    ConnectionLost(String),
    #[error("backend protocol violation: {0}")]
    Protocol(String),
    #[error("session poisoned by an earlier failure")]
    Poisoned,
    #[error("backend failure: {0}")]
    Remote(String),
}

impl BackendError {
    /// Errors after which the session state is unknown.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            Self::Timeout(_) | Self::ConnectionLost(_) | Self::Protocol(_) | Self::Poisoned
        )
    }
}

/// A model cache. Calls on one backend are serialized by its owner.
pub trait Backend: Send + fmt::Debug {
    fn vocab_descriptor(&self) -> &str;

    fn cache_len(&self) -> usize;

    /// Append tokens; returns the new cache length.
    fn prefill(&mut self, tokens: &[TokenId]) -> Result<usize, BackendError>;

    /// Sample one token and append it.
    fn decode_next(&mut self, params: &SamplingParams) -> Result<TokenId, BackendError>;

    fn checkpoint(&mut self) -> Result<Mark, BackendError>;

    /// Truncate to the mark; the mark and any later ones are consumed.
    fn rollback(&mut self, mark: Mark) -> Result<(), BackendError>;

    /// The cached token ids, when the backend can expose them (test hook).
    fn transcript(&self) -> Option<Vec<TokenId>> {
        None
    }
}

impl Backend for Box<dyn Backend> {
    fn vocab_descriptor(&self) -> &str {
        (**self).vocab_descriptor()
    }
    fn cache_len(&self) -> usize {
        (**self).cache_len()
    }
    fn prefill(&mut self, tokens: &[TokenId]) -> Result<usize, BackendError> {
        (**self).prefill(tokens)
    }
    fn decode_next(&mut self, params: &SamplingParams) -> Result<TokenId, BackendError> {
        (**self).decode_next(params)
    }
    fn checkpoint(&mut self) -> Result<Mark, BackendError> {
        (**self).checkpoint()
    }
    fn rollback(&mut self, mark: Mark) -> Result<(), BackendError> {
        (**self).rollback(mark)
    }
    fn transcript(&self) -> Option<Vec<TokenId>> {
        (**self).transcript()
    }
}

/// Checkpoint bookkeeping shared by in-process backends.
#[derive(Debug, Clone, Default)]
pub struct MarkStack {
    session: u64,
    next_id: u64,
    marks: Vec<Mark>,
}

impl MarkStack {
    pub fn new(session: u64) -> Self {
        Self {
            session,
            next_id: 1,
            marks: Vec::new(),
        }
    }

    pub fn push(&mut self, position: usize) -> Mark {
        let mark = Mark {
            session: self.session,
            id: self.next_id,
            position,
        };
        self.next_id += 1;
        self.marks.push(mark);
        mark
    }

    /// Validate and consume `mark` (and everything above it).
    pub fn take(&mut self, mark: Mark) -> Result<usize, ContractViolation> {
        if mark.session != self.session {
            return Err(ContractViolation::ForeignMark);
        }
        let idx = self
            .marks
            .iter()
            .rposition(|m| m.id == mark.id && m.position == mark.position)
            .ok_or(ContractViolation::StaleMark)?;
        self.marks.truncate(idx);
        Ok(mark.position)
    }

    pub fn depth(&self) -> usize {
        self.marks.len()
    }
}

/// A backend bound to a vocabulary, speaking [`Token`]s.
#[derive(Debug)]
pub struct BackendSession<B: Backend = Box<dyn Backend>> {
    backend: B,
    vocab: Vocab,
}

impl<B: Backend> BackendSession<B> {
    pub fn open(backend: B, vocab: Vocab) -> Result<Self, BackendError> {
        if backend.vocab_descriptor() != vocab.descriptor() {
            return Err(ContractViolation::VocabMismatch.into());
        }
        Ok(Self { backend, vocab })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn into_inner(self) -> B {
        self.backend
    }

    pub fn cache_len(&self) -> usize {
        self.backend.cache_len()
    }

    pub fn prefill(&mut self, tokens: &[Token]) -> Result<usize, BackendError> {
        let ids = self.vocab.encode_all(tokens);
        self.backend.prefill(&ids)
    }

    pub fn decode_next(&mut self, params: &SamplingParams) -> Result<Token, BackendError> {
        let id = self.backend.decode_next(params)?;
        self.vocab
            .decode(id)
            .ok_or(BackendError::Contract(ContractViolation::UnknownToken))
    }

    pub fn checkpoint(&mut self) -> Result<Mark, BackendError> {
        self.backend.checkpoint()
    }

    pub fn rollback(&mut self, mark: Mark) -> Result<(), BackendError> {
        self.backend.rollback(mark)
    }
}
