//! Note-centric symbolic vocabulary.
//!
//! A performance is a time-ordered stream of note triples
//! (`Note{pitch, velocity bucket}`, `Onset{offset}`, `Dur{duration}`) and
//! sustain pedal tokens, with `Segment` tokens advancing an absolute time
//! cursor by `segment_ms`. Offsets are relative to the current segment.
//!
//! Events are ordered by quantized onset, then kind (pedal before note), then
//! pitch, then raw time. Because the order never depends on durations or on
//! events later in time, encoding a prefix of a performance yields a prefix
//! of the full encoding; continuous prefill relies on this.

mod dump;
mod vocab;

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{Note, Pedal, PedalEvent};

pub use dump::{parse_dump, write_dump};
pub use vocab::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub time_resolution_ms: u32,
    pub segment_ms: u32,
    pub velocity_buckets: u32,
    pub max_duration_ms: u32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            time_resolution_ms: 10,
            segment_ms: 5000,
            velocity_buckets: 16,
            max_duration_ms: 10_000,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        let bad = |why: &str| Err(TokenizerError::InvalidConfig(why.to_string()));
        if self.time_resolution_ms == 0
            || self.segment_ms == 0
            || self.velocity_buckets == 0
            || self.max_duration_ms == 0
        {
            return bad("all sizes must be positive");
        }
        if !self.segment_ms.is_multiple_of(self.time_resolution_ms) {
            return bad("segment_ms must be a multiple of time_resolution_ms");
        }
        if !self.max_duration_ms.is_multiple_of(self.time_resolution_ms) {
            return bad("max_duration_ms must be a multiple of time_resolution_ms");
        }
        if self.velocity_buckets > 128 {
            return bad("at most 128 velocity buckets");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Start,
    End,
    Segment,
    Note { pitch: u8, vel_bucket: u8 },
    Onset(u32),
    Dur(u32),
    PedalOn(u32),
    PedalOff(u32),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("note {index} is still open; hanging notes must be finalized before tokenizing")]
    OpenNote { index: usize },
    #[error("malformed token sequence at index {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("event at {onset_ms} ms precedes the encoder cursor at {cursor_ms} ms")]
    NonMonotonic { onset_ms: u64, cursor_ms: u64 },
}

/// Round to the nearest grid multiple; exact halves round up.
pub fn quantize_time(t_ms: f64, resolution_ms: u32) -> u64 {
    let res = f64::from(resolution_ms);
    let steps = (t_ms.max(0.0) / res + 0.5).floor();
    steps as u64 * u64::from(resolution_ms)
}

/// Equal-width buckets over the 0..=127 velocity range.
pub fn quantize_velocity(velocity: u8, buckets: u32) -> u8 {
    (u32::from(velocity.min(127)) * buckets / 128) as u8
}

/// Representative velocity for a bucket: the middle of the velocities that
/// map to it, clamped to 1..=127.
pub fn bucket_velocity(bucket: u8, buckets: u32) -> u8 {
    let lo = (u32::from(bucket) * 128).div_ceil(buckets).max(1);
    let hi = ((u32::from(bucket) + 1) * 128).div_ceil(buckets) - 1;
    let hi = hi.clamp(lo, 127);
    ((lo + hi) / 2).clamp(1, 127) as u8
}

/// Note duration on the grid, at least one grid step and at most the cap.
pub fn quantize_duration(duration_ms: f64, config: &TokenizerConfig) -> u32 {
    let q = quantize_time(duration_ms, config.time_resolution_ms);
    let q = q.max(u64::from(config.time_resolution_ms));
    if q > u64::from(config.max_duration_ms) {
        warn!(
            "duration {duration_ms:.1} ms clamped to {} ms",
            config.max_duration_ms
        );
        config.max_duration_ms
    } else {
        q as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventBody {
    Note {
        pitch: u8,
        vel_bucket: u8,
        /// Quantized; `None` while the note is still being finalized.
        duration: Option<u32>,
    },
    Pedal {
        on: bool,
    },
}

/// A quantized event positioned in token order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedEvent {
    pub onset: u64,
    pub raw_time_ms: f64,
    /// Tie-break for events identical in every other key (pedal log index).
    pub seq: u64,
    pub body: EventBody,
}

impl TimedEvent {
    pub fn from_note(note: &Note, config: &TokenizerConfig) -> Self {
        Self {
            onset: quantize_time(note.onset_ms, config.time_resolution_ms),
            raw_time_ms: note.onset_ms,
            seq: 0,
            body: EventBody::Note {
                pitch: note.pitch,
                vel_bucket: quantize_velocity(note.velocity, config.velocity_buckets),
                duration: note.duration_ms.map(|d| quantize_duration(d, config)),
            },
        }
    }

    pub fn from_pedal(pedal: &PedalEvent, seq: u64, config: &TokenizerConfig) -> Self {
        Self {
            onset: quantize_time(pedal.time_ms, config.time_resolution_ms),
            raw_time_ms: pedal.time_ms,
            seq,
            body: EventBody::Pedal { on: pedal.is_on() },
        }
    }

    fn rank(&self) -> (u8, u8) {
        match self.body {
            EventBody::Pedal { .. } => (0, 0),
            EventBody::Note { pitch, .. } => (1, pitch),
        }
    }

    /// Canonical token order.
    pub fn order(&self, other: &Self) -> Ordering {
        self.onset
            .cmp(&other.onset)
            .then(self.rank().cmp(&other.rank()))
            .then(self.raw_time_ms.total_cmp(&other.raw_time_ms))
            .then(self.seq.cmp(&other.seq))
    }

    pub fn token_count_hint(&self) -> usize {
        match self.body {
            EventBody::Note { .. } => 3,
            EventBody::Pedal { .. } => 1,
        }
    }
}

/// Stateful encoder that appends events in canonical order.
///
/// `origin_ms` is the absolute time of segment zero; it is non-zero only when
/// old segments have been dropped from a bounded context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamEncoder {
    config: TokenizerConfig,
    origin_ms: u64,
    segment: u64,
    cursor: u64,
    started: bool,
}

impl StreamEncoder {
    pub fn new(config: TokenizerConfig) -> Self {
        Self::with_origin(config, 0)
    }

    pub fn with_origin(config: TokenizerConfig, origin_ms: u64) -> Self {
        Self {
            config,
            origin_ms,
            segment: 0,
            cursor: origin_ms,
            started: false,
        }
    }

    pub fn origin_ms(&self) -> u64 {
        self.origin_ms
    }

    /// Absolute time of the current segment's start.
    pub fn segment_start_ms(&self) -> u64 {
        self.origin_ms + self.segment * u64::from(self.config.segment_ms)
    }

    pub fn segment_index(&self) -> u64 {
        self.segment
    }

    pub fn cursor_ms(&self) -> u64 {
        self.cursor
    }

    pub fn start(&mut self, out: &mut Vec<Token>) {
        if !self.started {
            out.push(Token::Start);
            self.started = true;
        }
    }

    /// Emit the tokens that position an event: segment advances plus, for a
    /// note, its `Note` and `Onset` tokens. Callers that already know the
    /// duration use [`StreamEncoder::encode`].
    pub fn encode_head(
        &mut self,
        ev: &TimedEvent,
        out: &mut Vec<Token>,
    ) -> Result<(), TokenizerError> {
        self.start(out);
        if ev.onset < self.cursor {
            return Err(TokenizerError::NonMonotonic {
                onset_ms: ev.onset,
                cursor_ms: self.cursor,
            });
        }
        let seg = u64::from(self.config.segment_ms);
        while ev.onset >= self.segment_start_ms() + seg {
            out.push(Token::Segment);
            self.segment += 1;
        }
        self.cursor = ev.onset;
        let offset = (ev.onset - self.segment_start_ms()) as u32;
        match ev.body {
            EventBody::Note {
                pitch, vel_bucket, ..
            } => {
                out.push(Token::Note { pitch, vel_bucket });
                out.push(Token::Onset(offset));
            }
            EventBody::Pedal { on: true } => out.push(Token::PedalOn(offset)),
            EventBody::Pedal { on: false } => out.push(Token::PedalOff(offset)),
        }
        Ok(())
    }

    pub fn encode(&mut self, ev: &TimedEvent, out: &mut Vec<Token>) -> Result<(), TokenizerError> {
        self.encode_head(ev, out)?;
        if let EventBody::Note { duration, .. } = ev.body {
            let d = duration.ok_or(TokenizerError::OpenNote { index: 0 })?;
            out.push(Token::Dur(d));
        }
        Ok(())
    }
}

/// Sustain pedal events only; the soft pedal is a control signal, not music.
pub fn sustain_events<'a>(
    pedals: impl IntoIterator<Item = &'a PedalEvent>,
    config: &TokenizerConfig,
) -> Vec<TimedEvent> {
    pedals
        .into_iter()
        .filter(|p| p.pedal == Pedal::Sustain)
        .enumerate()
        .map(|(i, p)| TimedEvent::from_pedal(p, i as u64, config))
        .collect()
}

pub fn sort_events(events: &mut [TimedEvent]) {
    events.sort_by(|a, b| a.order(b));
}

/// One-shot tokenization of a closed performance.
pub fn tokenize(
    notes: &[Note],
    pedals: &[PedalEvent],
    config: &TokenizerConfig,
) -> Result<Vec<Token>, TokenizerError> {
    tokenize_from(notes, pedals, config, 0)
}

/// Tokenize only events at or after `origin_ms` (a segment boundary).
pub fn tokenize_from(
    notes: &[Note],
    pedals: &[PedalEvent],
    config: &TokenizerConfig,
    origin_ms: u64,
) -> Result<Vec<Token>, TokenizerError> {
    if let Some(index) = notes.iter().position(Note::is_open) {
        return Err(TokenizerError::OpenNote { index });
    }
    let mut events: Vec<TimedEvent> = notes
        .iter()
        .map(|n| TimedEvent::from_note(n, config))
        .chain(sustain_events(pedals, config))
        .filter(|e| e.onset >= origin_ms)
        .collect();
    sort_events(&mut events);
    let mut enc = StreamEncoder::with_origin(*config, origin_ms);
    let mut out = Vec::with_capacity(events.len() * 3 + 1);
    enc.start(&mut out);
    for ev in &events {
        enc.encode(ev, &mut out)?;
    }
    Ok(out)
}

/// Inverse of [`tokenize`]: absolute times are `segments * segment_ms + offset`.
pub fn detokenize(
    tokens: &[Token],
    config: &TokenizerConfig,
) -> Result<(Vec<Note>, Vec<PedalEvent>), TokenizerError> {
    detokenize_from(tokens, config, 0)
}

pub fn detokenize_from(
    tokens: &[Token],
    config: &TokenizerConfig,
    origin_ms: u64,
) -> Result<(Vec<Note>, Vec<PedalEvent>), TokenizerError> {
    let seg = u64::from(config.segment_ms);
    let mut segment = 0u64;
    let mut notes = Vec::new();
    let mut pedals = Vec::new();
    let malformed = |index: usize, reason: &str| TokenizerError::Malformed {
        index,
        reason: reason.to_string(),
    };
    let mut i = 0;
    while i < tokens.len() {
        let base = origin_ms + segment * seg;
        match tokens[i] {
            Token::Start if i == 0 => {}
            Token::Start => return Err(malformed(i, "start token after the beginning")),
            Token::End => break,
            Token::Segment => segment += 1,
            Token::PedalOn(off) => pedals.push(PedalEvent::sustain(true, (base + u64::from(off)) as f64)),
            Token::PedalOff(off) => {
                pedals.push(PedalEvent::sustain(false, (base + u64::from(off)) as f64))
            }
            Token::Note { pitch, vel_bucket } => {
                let Some(Token::Onset(off)) = tokens.get(i + 1) else {
                    return Err(malformed(i, "note token not followed by an onset"));
                };
                let Some(Token::Dur(d)) = tokens.get(i + 2) else {
                    return Err(malformed(i, "note token not followed by onset and duration"));
                };
                notes.push(Note::closed(
                    pitch,
                    (base + u64::from(*off)) as f64,
                    f64::from(*d),
                    bucket_velocity(vel_bucket, config.velocity_buckets),
                ));
                i += 2;
            }
            Token::Onset(_) => return Err(malformed(i, "onset without a note")),
            Token::Dur(_) => return Err(malformed(i, "duration without a note")),
        }
        i += 1;
    }
    Ok((notes, pedals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TokenizerConfig {
        TokenizerConfig::default()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_time(12.0, 10), 10);
        assert_eq!(quantize_time(15.0, 10), 20);
        assert_eq!(quantize_time(14.999, 10), 10);
        assert_eq!(quantize_velocity(127, 16), 15);
        assert_eq!(quantize_velocity(64, 16), 8);
        assert_eq!(quantize_velocity(1, 16), 0);
    }

    #[test]
    fn bucket_representatives_are_fixed_points() {
        for buckets in 1..=128u32 {
            for v in 1..=127u8 {
                let b = quantize_velocity(v, buckets);
                let rep = bucket_velocity(b, buckets);
                assert_eq!(quantize_velocity(rep, buckets), b, "buckets {buckets} v {v}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = TokenizerConfig {
            segment_ms: 5005,
            ..cfg()
        };
        assert!(bad.validate().is_err());
        let bad = TokenizerConfig {
            max_duration_ms: 10_001,
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_note_layout() {
        let toks = tokenize(&[Note::closed(60, 0.0, 500.0, 64)], &[], &cfg()).unwrap();
        assert_eq!(
            toks,
            vec![
                Token::Start,
                Token::Note { pitch: 60, vel_bucket: 8 },
                Token::Onset(0),
                Token::Dur(500)
            ]
        );
    }

    #[test]
    fn segment_boundary_arithmetic() {
        let notes = [
            Note::closed(60, 4990.0, 200.0, 64),
            Note::closed(62, 5100.0, 200.0, 64),
        ];
        let toks = tokenize(&notes, &[], &cfg()).unwrap();
        assert_eq!(
            toks,
            vec![
                Token::Start,
                Token::Note { pitch: 60, vel_bucket: 8 },
                Token::Onset(4990),
                Token::Dur(200),
                Token::Segment,
                Token::Note { pitch: 62, vel_bucket: 8 },
                Token::Onset(100),
                Token::Dur(200),
            ]
        );
    }

    #[test]
    fn open_note_is_rejected() {
        let err = tokenize(
            &[Note::closed(60, 0.0, 10.0, 1), Note::open(61, 5.0, 1)],
            &[],
            &cfg(),
        )
        .unwrap_err();
        assert_eq!(err, TokenizerError::OpenNote { index: 1 });
    }

    #[test]
    fn detokenize_two_segments() {
        let toks = [
            Token::Start,
            Token::Segment,
            Token::Segment,
            Token::Note { pitch: 60, vel_bucket: 8 },
            Token::Onset(100),
            Token::Dur(300),
        ];
        let (notes, pedals) = detokenize(&toks, &cfg()).unwrap();
        assert!(pedals.is_empty());
        assert_eq!(notes, vec![Note::closed(60, 10_100.0, 300.0, 67)]);
    }

    #[test]
    fn detokenize_pedal_pairing() {
        let toks = [Token::Start, Token::PedalOn(0), Token::PedalOff(2000)];
        let (_, pedals) = detokenize(&toks, &cfg()).unwrap();
        assert_eq!(
            pedals,
            vec![PedalEvent::sustain(true, 0.0), PedalEvent::sustain(false, 2000.0)]
        );
    }

    #[test]
    fn malformed_triple_names_index() {
        let toks = [
            Token::Start,
            Token::Note { pitch: 60, vel_bucket: 8 },
            Token::Onset(0),
            Token::Note { pitch: 61, vel_bucket: 8 },
        ];
        let err = detokenize(&toks, &cfg()).unwrap_err();
        assert!(matches!(err, TokenizerError::Malformed { index: 1, .. }));
    }

    #[test]
    fn durations_are_clamped_to_grid_bounds() {
        let c = cfg();
        assert_eq!(quantize_duration(2.0, &c), 10);
        assert_eq!(quantize_duration(25_000.0, &c), 10_000);
    }

    #[test]
    fn pedal_sorts_before_note_at_same_tick() {
        let toks = tokenize(
            &[Note::closed(60, 100.0, 100.0, 64)],
            &[PedalEvent::sustain(true, 102.0)],
            &cfg(),
        )
        .unwrap();
        assert_eq!(toks[1], Token::PedalOn(100));
    }

    #[test]
    fn soft_pedal_is_not_tokenized() {
        let soft = PedalEvent {
            pedal: Pedal::SoftUnaCorda,
            state: crate::midi::PedalState::On,
            time_ms: 10.0,
        };
        assert_eq!(tokenize(&[], &[soft], &cfg()).unwrap(), vec![Token::Start]);
    }

    #[test]
    fn encoder_rejects_time_travel() {
        let c = cfg();
        let mut enc = StreamEncoder::new(c);
        let mut out = Vec::new();
        let late = TimedEvent::from_note(&Note::closed(60, 500.0, 10.0, 64), &c);
        let early = TimedEvent::from_note(&Note::closed(60, 100.0, 10.0, 64), &c);
        enc.encode(&late, &mut out).unwrap();
        assert!(matches!(
            enc.encode(&early, &mut out),
            Err(TokenizerError::NonMonotonic { .. })
        ));
    }

    #[test]
    fn origin_shifts_segment_zero() {
        let c = cfg();
        let notes = [
            Note::closed(60, 100.0, 100.0, 64),
            Note::closed(62, 10_250.0, 100.0, 64),
        ];
        let toks = tokenize_from(&notes, &[], &c, 10_000).unwrap();
        assert_eq!(toks.len(), 4);
        let (back, _) = detokenize_from(&toks, &c, 10_000).unwrap();
        assert_eq!(back[0].onset_ms, 10_250.0);
    }
}
