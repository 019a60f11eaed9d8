//! Speculative finalization at the takeover signal.

use log::debug;

use super::generate::GenState;
use super::{is_open, Engine, EngineOutput, Phase, PrefillStrategy, SpeculatedNote, SpeculativePolicy, TakeoverReport};
use crate::backend::{BackendError, SamplingParams};
use crate::midi::Note;
use crate::tokenizer::{quantize_duration, sort_events, TimedEvent, Token, TokenizerConfig};

/// Duration for a hanging note under a non-model policy.
pub fn policy_duration(
    note: &Note,
    signal_ms: f64,
    policy: SpeculativePolicy,
    extension_ms: f64,
    config: &TokenizerConfig,
) -> u32 {
    let elapsed = quantize_duration(signal_ms - note.onset_ms, config);
    match policy {
        SpeculativePolicy::Elapsed => elapsed,
        SpeculativePolicy::ElapsedPlusExtension | SpeculativePolicy::ModelPredicted => {
            quantize_duration(f64::from(elapsed) + extension_ms, config)
        }
    }
}

/// Clamp a model-predicted duration to at least the elapsed time.
pub fn clamp_predicted(predicted: u32, note: &Note, signal_ms: f64, config: &TokenizerConfig) -> u32 {
    predicted.max(quantize_duration(signal_ms - note.onset_ms, config))
}

impl Engine {
    pub(super) fn takeover(&mut self, _now_ms: f64, out: &mut Vec<EngineOutput>) {
        let signal = self.signal_ms.expect("finalizing always has a signal");
        if self.tracker.notes_seen() == 0 && !self.config.allow_empty_context {
            out.push(self.notice("takeover declined: nothing has been played yet"));
            self.signal_ms = None;
            self.set_phase(Phase::Listen, out);
            return;
        }
        if !self.ai_notes.is_empty() {
            // The previous continuation is still sounding; its notes belong
            // in the context before this takeover's residual.
            if !self.flush_requested {
                self.flush_requested = true;
                out.push(EngineOutput::CancelTurn { turn: self.turn });
                out.push(EngineOutput::FlushSounding { time_ms: signal });
            }
            return;
        }
        if let Some(r) = self.open_report.take() {
            out.push(EngineOutput::Report(r));
        }
        let t0 = self.now();
        self.turn += 1;
        match self.finalize(signal, out) {
            Ok((speculated, residual_tokens)) => {
                let mark = match self.session.checkpoint() {
                    Ok(m) => m,
                    Err(e) => return self.abort_takeover(e, out),
                };
                let finalize_ms = self.now() - t0;
                let report = TakeoverReport {
                    turn: self.turn,
                    signal_time_ms: signal,
                    finalize_ms,
                    first_token_ms: None,
                    first_note_sound_ms: None,
                    hanging_count: speculated.len(),
                    residual_tokens,
                    context_tokens: self.transcript.len(),
                    speculated,
                };
                debug!("takeover finalized in {finalize_ms:.3} ms");
                self.open_report = Some(report);
                self.gen = Some(GenState::new(self.turn, signal, mark, self.encoder));
                self.signal_ms = None;
                self.stats.watermark_ms = self.stats.watermark_ms.max(signal);
                self.set_phase(Phase::Generating, out);
            }
            Err(e) => self.abort_takeover(e, out),
        }
    }

    fn abort_takeover(&mut self, e: impl std::fmt::Display, out: &mut Vec<EngineOutput>) {
        self.degraded = true;
        self.signal_ms = None;
        out.push(self.notice(format!("takeover aborted: {e}")));
        self.set_phase(Phase::Listen, out);
    }

    /// Close hanging notes and prefill everything up to the signal.
    fn finalize(
        &mut self,
        signal: f64,
        out: &mut Vec<EngineOutput>,
    ) -> Result<(Vec<SpeculatedNote>, usize), FinalizeError> {
        if self.degraded || self.config.strategy == PrefillStrategy::OneShot {
            let origin = self.encoder.origin_ms();
            self.rebuild(origin)?;
            self.degraded = false;
        }
        let cfg = self.config.tokenizer;
        let before = self.transcript.len();
        self.encoder.start(&mut self.ready);

        let mut events: Vec<TimedEvent> = Vec::new();
        let mut later = Vec::new();
        for ev in self.pending.drain(..) {
            if ev.raw_time_ms <= signal {
                events.push(ev);
            } else {
                later.push(ev);
            }
        }
        self.pending = later;
        let hanging: Vec<Note> = self
            .tracker
            .hanging_notes(signal)
            .into_iter()
            .filter(|n| n.onset_ms <= signal)
            .collect();
        events.extend(hanging.iter().map(|n| TimedEvent::from_note(n, &cfg)));
        sort_events(&mut events);

        let mut speculated = Vec::with_capacity(hanging.len());
        for ev in &events {
            self.stats.events_encoded += 1;
            if !is_open(ev) {
                self.encoder.encode(ev, &mut self.ready)?;
                continue;
            }
            self.encoder.encode_head(ev, &mut self.ready)?;
            let note = *hanging
                .iter()
                .find(|n| n.onset_ms == ev.raw_time_ms && Some(n.pitch) == pitch_of(ev))
                .expect("open event comes from a hanging note");
            let (duration, fallback) = self.speculate(&note, signal, out)?;
            self.ready.push(Token::Dur(duration));
            self.tracker.close_with_duration(note.pitch, f64::from(duration));
            speculated.push(SpeculatedNote {
                pitch: note.pitch,
                onset_ms: note.onset_ms,
                duration_ms: duration,
                fallback,
            });
        }
        let residual = std::mem::take(&mut self.ready);
        self.prefill(&residual)?;
        Ok((speculated, self.transcript.len() - before))
    }

    fn speculate(
        &mut self,
        note: &Note,
        signal: f64,
        out: &mut Vec<EngineOutput>,
    ) -> Result<(u32, bool), BackendError> {
        let cfg = self.config.tokenizer;
        let policy = self.config.speculative_policy;
        let ext = self.config.extension_ms;
        if policy != SpeculativePolicy::ModelPredicted {
            return Ok((policy_duration(note, signal, policy, ext, &cfg), false));
        }
        let head = std::mem::take(&mut self.ready);
        self.prefill(&head)?;
        let mark = self.session.checkpoint()?;
        let greedy = SamplingParams {
            temperature: 1e-9,
            top_p: 1.0,
            seed: self.config.sampling.seed,
            max_new_tokens: 1,
        };
        let decoded = self.session.decode_next(&greedy);
        self.session.rollback(mark)?;
        match decoded {
            Ok(Token::Dur(d)) => Ok((clamp_predicted(d, note, signal, &cfg), false)),
            Ok(other) => {
                out.push(self.notice(format!(
                    "model predicted {other:?} instead of a duration for pitch {}; using extension",
                    note.pitch
                )));
                Ok((policy_duration(note, signal, SpeculativePolicy::ElapsedPlusExtension, ext, &cfg), true))
            }
            Err(e) if !e.is_fatal() => {
                out.push(self.notice(format!(
                    "duration prediction failed ({e}); using extension"
                )));
                Ok((policy_duration(note, signal, SpeculativePolicy::ElapsedPlusExtension, ext, &cfg), true))
            }
            Err(e) => Err(e),
        }
    }
}

fn pitch_of(ev: &TimedEvent) -> Option<u8> {
    match ev.body {
        crate::tokenizer::EventBody::Note { pitch, .. } => Some(pitch),
        crate::tokenizer::EventBody::Pedal { .. } => None,
    }
}

#[derive(Debug, thiserror::Error)]
pub(super) enum FinalizeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TokenizerConfig {
        TokenizerConfig::default()
    }

    #[test]
    fn policy_examples() {
        let n = Note::open(60, 1000.0, 80);
        assert_eq!(policy_duration(&n, 1800.0, SpeculativePolicy::Elapsed, 500.0, &cfg()), 800);
        assert_eq!(
            policy_duration(&n, 1800.0, SpeculativePolicy::ElapsedPlusExtension, 500.0, &cfg()),
            1300
        );
        assert_eq!(clamp_predicted(400, &n, 1800.0, &cfg()), 800);
        assert_eq!(clamp_predicted(1200, &n, 1800.0, &cfg()), 1200);
    }
}
