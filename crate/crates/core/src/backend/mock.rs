//! Deterministic in-process backend with a synthetic compute-cost model.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::markov::{sample, GrammarState, MarkovModel};
use super::{Backend, BackendError, ContractViolation, Mark, MarkStack, SamplingParams};
use crate::clock::SharedClock;
use crate::tokenizer::TokenId;

/// Time the mock spends per token, charged to the caller's clock.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub prefill_ms_per_token: f64,
    pub decode_ms_per_token: f64,
}

impl CostModel {
    pub fn free() -> Self {
        Self::default()
    }
}

#[derive(Debug)]
pub struct MockBackend {
    model: Arc<MarkovModel>,
    clock: SharedClock,
    cost: CostModel,
    cache: Vec<TokenId>,
    /// Grammar state after each cached token.
    states: Vec<GrammarState>,
    marks: MarkStack,
}

impl MockBackend {
    pub fn new(model: Arc<MarkovModel>, clock: SharedClock, cost: CostModel, session: u64) -> Self {
        Self {
            model,
            clock,
            cost,
            cache: Vec::new(),
            states: Vec::new(),
            marks: MarkStack::new(session),
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.cache
    }

    pub fn cost(&self) -> CostModel {
        self.cost
    }

    fn push(&mut self, id: TokenId) {
        let prev = self.states.last().copied().unwrap_or_default();
        self.states.push(prev.advance(self.model.vocab().decode(id)));
        self.cache.push(id);
    }
}

/// Per-position stream so that how the cache was built never matters.
fn position_rng(seed: u64, position: usize) -> ChaCha8Rng {
    let mut z = seed ^ (position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

impl Backend for MockBackend {
    fn vocab_descriptor(&self) -> &str {
        self.model.vocab().descriptor()
    }

    fn cache_len(&self) -> usize {
        self.cache.len()
    }

    fn prefill(&mut self, tokens: &[TokenId]) -> Result<usize, BackendError> {
        if tokens.is_empty() {
            return Err(ContractViolation::EmptyPrefill.into());
        }
        let size = self.model.vocab().size();
        if tokens.iter().any(|&t| t >= size) {
            return Err(ContractViolation::UnknownToken.into());
        }
        self.clock
            .sleep_ms(tokens.len() as f64 * self.cost.prefill_ms_per_token);
        for &t in tokens {
            self.push(t);
        }
        Ok(self.cache.len())
    }

    fn decode_next(&mut self, params: &SamplingParams) -> Result<TokenId, BackendError> {
        if self.cache.is_empty() {
            return Err(ContractViolation::EmptyCache.into());
        }
        if params.validate().is_err() {
            return Err(ContractViolation::BadParams.into());
        }
        self.clock.sleep_ms(self.cost.decode_ms_per_token);
        let n = self.cache.len();
        let prev1 = self.cache.last().copied();
        let prev2 = n.checked_sub(2).map(|i| self.cache[i]);
        let state = self.states[n - 1];
        let candidates = self.model.candidates(prev2, prev1, state);
        let mut rng = position_rng(params.seed, n);
        let id = sample(&candidates, params.temperature, params.top_p, &mut rng);
        self.push(id);
        Ok(id)
    }

    fn checkpoint(&mut self) -> Result<Mark, BackendError> {
        Ok(self.marks.push(self.cache.len()))
    }

    fn rollback(&mut self, mark: Mark) -> Result<(), BackendError> {
        let pos = self.marks.take(mark)?;
        self.cache.truncate(pos);
        self.states.truncate(pos);
        Ok(())
    }

    fn transcript(&self) -> Option<Vec<TokenId>> {
        Some(self.cache.clone())
    }
}
