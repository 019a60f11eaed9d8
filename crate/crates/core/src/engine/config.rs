use serde::{Deserialize, Serialize};

use crate::backend::SamplingParams;
use crate::midi::PedalConfig;
use crate::tokenizer::TokenizerConfig;

/// How hanging notes get a duration at takeover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpeculativePolicy {
    /// Truncate at the signal.
    Elapsed,
    /// Elapsed time plus `extension_ms`.
    ElapsedPlusExtension,
    /// Ask the model for the duration token, never shorter than elapsed.
    ModelPredicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReclaimFlush {
    CutImmediately,
    FinishSoundingNotes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrefillStrategy {
    /// Prefill in chunks while listening.
    Continuous,
    /// Prefill the whole context at takeover (the naive baseline).
    OneShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub tokenizer: TokenizerConfig,
    pub pedals: PedalConfig,
    pub prefill_chunk_tokens: usize,
    pub speculative_policy: SpeculativePolicy,
    pub extension_ms: f64,
    pub max_context_tokens: usize,
    pub sampling: SamplingParams,
    pub reclaim_flush: ReclaimFlush,
    pub strategy: PrefillStrategy,
    /// Any key press during generation also reclaims.
    pub key_press_reclaim: bool,
    pub allow_empty_context: bool,
    /// Minimum time between assembling the first generated event and
    /// its sounding; must cover the largest actuation latency.
    pub playback_lead_ms: f64,
    /// How far before its target a generated note may sound (calibration
    /// error plus jitter); bounds the listening watermark.
    pub ai_onset_margin_ms: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            pedals: PedalConfig::default(),
            prefill_chunk_tokens: 64,
            speculative_policy: SpeculativePolicy::ModelPredicted,
            extension_ms: 500.0,
            max_context_tokens: 8192,
            sampling: SamplingParams::default(),
            reclaim_flush: ReclaimFlush::CutImmediately,
            strategy: PrefillStrategy::Continuous,
            key_press_reclaim: false,
            allow_empty_context: false,
            playback_lead_ms: 130.0,
            ai_onset_margin_ms: 50.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.tokenizer.validate().map_err(|e| e.to_string())?;
        self.sampling.validate()?;
        if self.prefill_chunk_tokens == 0 {
            return Err("prefill_chunk_tokens must be positive".into());
        }
        if self.max_context_tokens < 16 {
            return Err("max_context_tokens must be at least 16".into());
        }
        if self.prefill_chunk_tokens > self.max_context_tokens {
            return Err("prefill_chunk_tokens must not exceed max_context_tokens".into());
        }
        if !(self.extension_ms >= 0.0) {
            return Err("extension_ms must be non-negative".into());
        }
        if !(self.playback_lead_ms >= 0.0 && self.ai_onset_margin_ms >= 0.0) {
            return Err("playback_lead_ms and ai_onset_margin_ms must be non-negative".into());
        }
        Ok(())
    }
}
