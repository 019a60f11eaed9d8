//! The turn-taking state machine.
//!
//! Listen: finalized events below the watermark are tokenized and prefilled
//! in chunks. Finalizing: the soft pedal was pressed; hanging notes get
//! speculative durations and the residual is prefilled. Generating: tokens
//! are decoded and streamed to the scheduler until the performer reclaims or
//! the continuation ends, then the cache is rolled back to the takeover point
//! and the notes that actually sounded are merged back in as context.
//!
//! The engine never touches a clock to decide musical time: callers pass
//! `now` and guarantee that every input and feedback event stamped at or
//! before `now` has been delivered.

mod config;
mod generate;
mod takeover;

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendSession, Mark};
use crate::clock::SharedClock;
use crate::midi::{MidiEvent, MidiKind, Note, Pedal, PedalEvent, TrackerOutput, TrackerState};
use crate::tokenizer::{
    quantize_time, sort_events, sustain_events, EventBody, StreamEncoder, TimedEvent, Token, Vocab,
};

pub use config::{EngineConfig, PrefillStrategy, ReclaimFlush, SpeculativePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Listen,
    Finalizing,
    Generating,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Listen => "Listen",
            Phase::Finalizing => "Finalizing",
            Phase::Generating => "Generating",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeculatedNote {
    pub pitch: u8,
    pub onset_ms: f64,
    pub duration_ms: u32,
    /// The model did not produce a duration; the extension policy was used.
    pub fallback: bool,
}

/// Timing of one takeover. Absolute times are session milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TakeoverReport {
    pub turn: u64,
    pub signal_time_ms: f64,
    /// Speculation plus residual prefill (plus the full prefill for the
    /// one-shot strategy).
    pub finalize_ms: f64,
    pub first_token_ms: Option<f64>,
    pub first_note_sound_ms: Option<f64>,
    pub hanging_count: usize,
    pub residual_tokens: usize,
    pub context_tokens: usize,
    pub speculated: Vec<SpeculatedNote>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EngineOutput {
    Phase {
        phase: Phase,
        time_ms: f64,
    },
    ScheduleNote {
        id: u64,
        pitch: u8,
        velocity: u8,
        target_on_ms: f64,
        target_off_ms: f64,
    },
    SchedulePedal {
        id: u64,
        on: bool,
        target_ms: f64,
    },
    /// Cancel every pending event of a generation turn.
    CancelTurn {
        turn: u64,
    },
    /// Release struck generated notes and the pedal as soon as possible.
    FlushSounding {
        time_ms: f64,
    },
    Report(TakeoverReport),
    Notice {
        time_ms: f64,
        text: String,
    },
}

impl EngineOutput {
    /// Machine-readable log line for state transitions, reports and notices.
    pub fn log_line(&self) -> Option<String> {
        let v = match self {
            Self::Phase { phase, time_ms } => {
                serde_json::json!({"event": "phase", "time_ms": time_ms, "phase": phase})
            }
            Self::Report(r) => serde_json::json!({"event": "takeover_report", "report": r}),
            Self::Notice { time_ms, text } => {
                serde_json::json!({"event": "notice", "time_ms": time_ms, "text": text})
            }
            _ => return None,
        };
        Some(v.to_string())
    }
}

/// What happened to scheduled output, reported back by the playback host.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feedback {
    Sounded { id: u64, time_ms: f64 },
    Damped { id: u64, time_ms: f64 },
    /// Dropped as stale or cancelled before it was sent.
    Dropped { id: u64 },
    PedalSent { on: bool, time_ms: f64 },
}

pub fn turn_of(id: u64) -> u64 {
    id >> 32
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub tokens_prefilled: u64,
    pub prefill_calls: u64,
    pub tokens_generated: u64,
    /// Events passed through the tokenizer's encoder.
    pub events_encoded: u64,
    pub rebuilds: u64,
    pub watermark_ms: f64,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("backend session vocabulary does not match the tokenizer config")]
    VocabMismatch,
    #[error("backend session must start empty")]
    NonEmptySession,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy)]
struct AiNote {
    pitch: u8,
    velocity: u8,
    target_on: f64,
    sounded: Option<f64>,
}

pub struct Engine {
    config: EngineConfig,
    session: BackendSession,
    clock: SharedClock,
    tracker: TrackerState,
    phase: Phase,
    signal_ms: Option<f64>,
    encoder: StreamEncoder,
    /// Finalized events not yet encoded.
    pending: Vec<TimedEvent>,
    /// Encoded tokens not yet prefilled.
    ready: Vec<Token>,
    /// Mirror of the backend cache.
    transcript: Vec<Token>,
    base_mark: Mark,
    sustain_seq: u64,
    degraded: bool,
    turn: u64,
    gen: Option<generate::GenState>,
    ai_notes: BTreeMap<u64, AiNote>,
    open_report: Option<TakeoverReport>,
    flush_requested: bool,
    stats: EngineStats,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("phase", &self.phase)
            .field("turn", &self.turn)
            .field("cache_len", &self.transcript.len())
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        mut session: BackendSession,
        clock: SharedClock,
    ) -> Result<Self, EngineError> {
        config.validate().map_err(EngineError::Config)?;
        if session.vocab() != &Vocab::new(config.tokenizer) {
            return Err(EngineError::VocabMismatch);
        }
        if session.cache_len() != 0 {
            return Err(EngineError::NonEmptySession);
        }
        let base_mark = session.checkpoint()?;
        Ok(Self {
            tracker: TrackerState::new(config.pedals),
            encoder: StreamEncoder::new(config.tokenizer),
            config,
            session,
            clock,
            phase: Phase::Listen,
            signal_ms: None,
            pending: Vec::new(),
            ready: Vec::new(),
            transcript: Vec::new(),
            base_mark,
            sustain_seq: 0,
            degraded: false,
            turn: 0,
            gen: None,
            ai_notes: BTreeMap::new(),
            open_report: None,
            flush_requested: false,
            stats: EngineStats::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn tracker(&self) -> &TrackerState {
        &self.tracker
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    /// Tokens the engine believes are in the backend cache.
    pub fn context(&self) -> &[Token] {
        &self.transcript
    }

    /// Absolute time of segment zero of the current context.
    pub fn context_origin_ms(&self) -> u64 {
        self.encoder.origin_ms()
    }

    pub fn backend(&self) -> &dyn Backend {
        self.session.backend().as_ref()
    }

    pub fn vocab(&self) -> &Vocab {
        self.session.vocab()
    }

    /// Generated notes scheduled but not yet damped or dropped.
    pub fn unresolved_notes(&self) -> usize {
        self.ai_notes.len()
    }

    fn now(&self) -> f64 {
        self.clock.now_ms()
    }

    fn notice(&self, text: impl Into<String>) -> EngineOutput {
        let text = text.into();
        warn!("{text}");
        EngineOutput::Notice {
            time_ms: self.now(),
            text,
        }
    }

    fn set_phase(&mut self, phase: Phase, out: &mut Vec<EngineOutput>) {
        debug!("phase {} -> {}", self.phase, phase);
        self.phase = phase;
        out.push(EngineOutput::Phase {
            phase,
            time_ms: self.now(),
        });
    }

    /// Ingest one performer event (timestamped by the caller).
    pub fn on_event(&mut self, ev: MidiEvent) -> Vec<EngineOutput> {
        let mut out = Vec::new();
        let outputs = match self.tracker.ingest(ev) {
            Ok(o) => o,
            Err(e) => {
                out.push(self.notice(format!("dropped event: {e}")));
                return out;
            }
        };
        for o in outputs {
            match o {
                TrackerOutput::FinalizedNote(n) => self.push_note(&n),
                TrackerOutput::PedalChange(p) => self.push_pedal(&p),
                TrackerOutput::TakeoverSignal { time_ms } => match self.phase {
                    Phase::Listen => {
                        self.signal_ms = Some(time_ms);
                        self.flush_requested = false;
                        self.set_phase(Phase::Finalizing, &mut out);
                    }
                    Phase::Generating => self.reclaim(time_ms, &mut out),
                    Phase::Finalizing => {
                        out.push(self.notice("soft pedal pressed while finalizing; ignored"))
                    }
                },
            }
        }
        if self.config.key_press_reclaim
            && self.phase == Phase::Generating
            && matches!(ev.normalized().kind, MidiKind::NoteOn { .. })
        {
            self.reclaim(ev.timestamp_ms, &mut out);
        }
        out
    }

    fn push_note(&mut self, note: &Note) {
        self.pending.push(TimedEvent::from_note(note, &self.config.tokenizer));
    }

    fn push_pedal(&mut self, p: &PedalEvent) {
        if p.pedal == Pedal::Sustain {
            self.pending
                .push(TimedEvent::from_pedal(p, self.sustain_seq, &self.config.tokenizer));
            self.sustain_seq += 1;
        }
    }

    /// Whether [`Engine::step`] has something to do at `now_ms`.
    pub fn has_work(&self, now_ms: f64) -> bool {
        match self.phase {
            Phase::Listen => {
                if self.config.strategy == PrefillStrategy::OneShot || self.degraded {
                    return false;
                }
                if !self.ready.is_empty() {
                    return true;
                }
                let q = self.quantized_watermark(now_ms);
                self.pending.iter().any(|e| e.onset < q)
            }
            Phase::Finalizing => self.ai_notes.is_empty() || !self.flush_requested,
            Phase::Generating => self.gen.as_ref().is_some_and(|g| !g.done),
        }
    }

    /// Earliest future time at which the watermark alone would make
    /// [`Engine::has_work`] true.
    pub fn next_wake_ms(&self, now_ms: f64) -> Option<f64> {
        if self.phase != Phase::Listen
            || self.config.strategy == PrefillStrategy::OneShot
            || self.degraded
        {
            return None;
        }
        let first = self.pending.iter().map(|e| e.onset).min()?;
        let res = self.config.tokenizer.time_resolution_ms;
        let block = self.watermark(f64::INFINITY);
        if block.is_finite() && quantize_time(block, res) <= first {
            return None;
        }
        Some(now_ms.max(first as f64 + f64::from(res) / 2.0))
    }

    /// Do one unit of work: one prefill chunk, a whole takeover, or one
    /// decode step.
    pub fn step(&mut self, now_ms: f64) -> Vec<EngineOutput> {
        let mut out = Vec::new();
        match self.phase {
            Phase::Listen => self.listen_step(now_ms, &mut out),
            Phase::Finalizing => self.takeover(now_ms, &mut out),
            Phase::Generating => self.generate_step(&mut out),
        }
        out
    }

    fn watermark(&self, now_ms: f64) -> f64 {
        let mut w = now_ms;
        if let Some(o) = self.tracker.earliest_open_onset() {
            w = w.min(o);
        }
        for n in self.ai_notes.values() {
            w = w.min(n.sounded.unwrap_or(n.target_on - self.config.ai_onset_margin_ms));
        }
        w.max(self.stats.watermark_ms)
    }

    fn quantized_watermark(&self, now_ms: f64) -> u64 {
        quantize_time(self.watermark(now_ms), self.config.tokenizer.time_resolution_ms)
    }

    fn listen_step(&mut self, now_ms: f64, out: &mut Vec<EngineOutput>) {
        if self.config.strategy == PrefillStrategy::OneShot || self.degraded {
            return;
        }
        self.stats.watermark_ms = self.watermark(now_ms);
        let q = self.quantized_watermark(now_ms);
        if let Err(e) = self.encode_below(q) {
            self.degraded = true;
            out.push(self.notice(format!("tokenizer rejected an event ({e}); context will be rebuilt at takeover")));
            return;
        }
        if self.ready.is_empty() {
            return;
        }
        if self.transcript.len() + self.ready.len() > self.config.max_context_tokens {
            if let Err(e) = self.compact(q) {
                self.degraded = true;
                out.push(self.notice(format!("context rebuild failed: {e}")));
            }
            return;
        }
        let n = self.ready.len().min(self.config.prefill_chunk_tokens);
        let chunk: Vec<Token> = self.ready.drain(..n).collect();
        if let Err(e) = self.prefill(&chunk) {
            self.degraded = true;
            out.push(self.notice(format!(
                "prefill failed ({e}); falling back to one-shot prefill at takeover"
            )));
        }
    }

    /// Encode pending events with quantized onset below `limit`.
    fn encode_below(&mut self, limit: u64) -> Result<(), crate::tokenizer::TokenizerError> {
        if !self.pending.iter().any(|e| e.onset < limit) {
            return Ok(());
        }
        sort_events(&mut self.pending);
        let split = self.pending.partition_point(|e| e.onset < limit);
        let due: Vec<TimedEvent> = self.pending.drain(..split).collect();
        for ev in &due {
            self.encoder.encode(ev, &mut self.ready)?;
            self.stats.events_encoded += 1;
        }
        Ok(())
    }

    fn prefill(&mut self, tokens: &[Token]) -> Result<(), BackendError> {
        if tokens.is_empty() {
            return Ok(());
        }
        self.session.prefill(tokens)?;
        self.transcript.extend_from_slice(tokens);
        self.stats.tokens_prefilled += tokens.len() as u64;
        self.stats.prefill_calls += 1;
        Ok(())
    }

    fn rollback(&mut self, mark: Mark) -> Result<(), BackendError> {
        self.session.rollback(mark)?;
        self.transcript.truncate(mark.position);
        Ok(())
    }

    /// Every finalized event at or after `origin_ms`, as encoder input.
    fn all_events(&self, origin_ms: u64) -> Vec<TimedEvent> {
        let cfg = &self.config.tokenizer;
        let mut events: Vec<TimedEvent> = self
            .tracker
            .finalized()
            .iter()
            .map(|n| TimedEvent::from_note(n, cfg))
            .chain(sustain_events(self.tracker.pedal_log(), cfg))
            .filter(|e| e.onset >= origin_ms)
            .collect();
        sort_events(&mut events);
        events
    }

    /// Empty the cache and requeue every finalized event from `origin_ms`.
    fn rebuild(&mut self, origin_ms: u64) -> Result<(), BackendError> {
        self.rollback(self.base_mark)?;
        self.base_mark = self.session.checkpoint()?;
        self.encoder = StreamEncoder::with_origin(self.config.tokenizer, origin_ms);
        self.ready.clear();
        self.pending = self.all_events(origin_ms);
        self.stats.rebuilds += 1;
        Ok(())
    }

    /// Smallest segment-aligned origin whose context below `limit` fits in
    /// three quarters of the budget.
    fn compact_origin(&self, limit: u64) -> u64 {
        let seg = u64::from(self.config.tokenizer.segment_ms);
        let budget = self.config.max_context_tokens * 3 / 4;
        let events = self.all_events(0);
        let mut origin = self.encoder.origin_ms();
        loop {
            let below: Vec<&TimedEvent> = events
                .iter()
                .filter(|e| e.onset >= origin && e.onset < limit)
                .collect();
            let segments = below.last().map_or(0, |e| (e.onset - origin) / seg) as usize;
            let tokens = 1 + segments + below.iter().map(|e| e.token_count_hint()).sum::<usize>();
            if tokens <= budget || below.is_empty() {
                return origin;
            }
            origin += seg;
        }
    }

    fn compact(&mut self, limit: u64) -> Result<(), BackendError> {
        let origin = self.compact_origin(limit);
        debug!("context full; rebuilding from {origin} ms");
        self.rebuild(origin)
    }

    /// Record what the playback host reports about generated output.
    pub fn on_feedback(&mut self, fb: Feedback) -> Vec<EngineOutput> {
        let mut out = Vec::new();
        match fb {
            Feedback::Sounded { id, time_ms } => {
                if let Some(n) = self.ai_notes.get_mut(&id) {
                    n.sounded = Some(time_ms);
                }
                if let Some(r) = self.open_report.as_mut() {
                    if r.turn == turn_of(id) && r.first_note_sound_ms.is_none() {
                        r.first_note_sound_ms = Some(time_ms);
                        out.push(EngineOutput::Report(self.open_report.take().unwrap()));
                    }
                }
            }
            Feedback::Damped { id, time_ms } => {
                if let Some(n) = self.ai_notes.remove(&id) {
                    if let Some(s) = n.sounded {
                        self.merge_generated(n, s, time_ms);
                    }
                }
                self.after_resolution(&mut out);
            }
            Feedback::Dropped { id } => {
                self.ai_notes.remove(&id);
                self.after_resolution(&mut out);
            }
            Feedback::PedalSent { on, time_ms } => {
                if self.tracker.merge_sustain(on, time_ms) {
                    let p = *self.tracker.pedal_log().last().unwrap();
                    self.push_pedal(&p);
                }
            }
        }
        out
    }

    fn merge_generated(&mut self, n: AiNote, sounded: f64, damped: f64) {
        let floor = self.stats.watermark_ms;
        let onset = if sounded < floor {
            warn!("generated note sounded at {sounded} ms, below the prefilled watermark {floor} ms; clamped");
            floor
        } else {
            sounded
        };
        let note = Note::closed(n.pitch, onset, (damped - onset).max(0.0), n.velocity);
        self.tracker.merge_note(note);
        self.push_note(&note);
    }

    fn after_resolution(&mut self, out: &mut Vec<EngineOutput>) {
        if let Some(r) = &self.open_report {
            let turn = r.turn;
            if !self.ai_notes.keys().any(|id| turn_of(*id) == turn)
                && self.gen.as_ref().is_none_or(|g| g.done || g.turn != turn)
            {
                out.push(EngineOutput::Report(self.open_report.take().unwrap()));
            }
        }
        if self.gen.as_ref().is_some_and(|g| g.done) {
            self.maybe_end_turn(out);
        }
    }

    /// One-shot tokenization of everything the tracker has finalized, the
    /// reference the continuous context must match.
    pub fn reference_tokens(&self) -> Result<Vec<Token>, crate::tokenizer::TokenizerError> {
        let origin = self.encoder.origin_ms();
        let mut enc = StreamEncoder::with_origin(self.config.tokenizer, origin);
        let mut out = Vec::new();
        enc.start(&mut out);
        for ev in self.all_events(origin) {
            enc.encode(&ev, &mut out)?;
        }
        Ok(out)
    }
}

fn is_open(ev: &TimedEvent) -> bool {
    matches!(ev.body, EventBody::Note { duration: None, .. })
}
