//! Streaming decode, reclaim and the return to listening.

use log::debug;

use super::{turn_of, AiNote, Engine, EngineOutput, Phase, ReclaimFlush};
use crate::backend::Mark;
use crate::tokenizer::{bucket_velocity, StreamEncoder, Token};

#[derive(Debug, Clone)]
pub(super) struct GenState {
    pub turn: u64,
    pub signal_ms: f64,
    pub mark: Mark,
    /// Encoder state at the takeover point, restored when the generated
    /// tokens are rolled back.
    pub encoder: StreamEncoder,
    segment_start_ms: u64,
    partial: Vec<Token>,
    shift_ms: Option<f64>,
    anchor_ms: f64,
    last_target_ms: f64,
    last_off_ms: f64,
    pedal_down: bool,
    next_index: u64,
    generated: u32,
    pub done: bool,
}

impl GenState {
    pub fn new(turn: u64, signal_ms: f64, mark: Mark, encoder: StreamEncoder) -> Self {
        Self {
            turn,
            signal_ms,
            mark,
            segment_start_ms: encoder.segment_start_ms(),
            encoder,
            partial: Vec::new(),
            shift_ms: None,
            anchor_ms: signal_ms,
            last_target_ms: signal_ms,
            last_off_ms: signal_ms,
            pedal_down: false,
            next_index: 0,
            generated: 0,
            done: false,
        }
    }

    fn next_id(&mut self) -> u64 {
        self.next_index += 1;
        (self.turn << 32) | self.next_index
    }

    /// Map a generated absolute time onto the playback timeline.
    fn target(&mut self, generated_ms: f64, now_ms: f64, lead_ms: f64) -> f64 {
        let shift = *self.shift_ms.get_or_insert_with(|| {
            self.anchor_ms = self.signal_ms.max(now_ms + lead_ms);
            (self.anchor_ms - generated_ms).max(0.0)
        });
        let t = (generated_ms + shift).max(self.anchor_ms).max(self.last_target_ms);
        self.last_target_ms = t;
        t
    }
}

impl Engine {
    pub(super) fn generate_step(&mut self, out: &mut Vec<EngineOutput>) {
        let Some(gen) = self.gen.as_ref() else { return };
        if gen.done {
            return;
        }
        if gen.generated >= self.config.sampling.max_new_tokens {
            return self.finish_decoding(out);
        }
        if self.transcript.len() >= self.config.max_context_tokens {
            out.push(self.notice("context limit reached; generation stopped"));
            return self.finish_decoding(out);
        }
        let tok = match self.session.decode_next(&self.config.sampling) {
            Ok(t) => t,
            Err(e) => {
                if e.is_fatal() {
                    self.degraded = true;
                }
                out.push(self.notice(format!("decode failed: {e}")));
                return self.finish_decoding(out);
            }
        };
        let now = self.now();
        self.transcript.push(tok);
        self.stats.tokens_generated += 1;
        if let Some(r) = self.open_report.as_mut() {
            if r.first_token_ms.is_none() {
                r.first_token_ms = Some(now);
            }
        }
        let lead = self.config.playback_lead_ms;
        let seg = u64::from(self.config.tokenizer.segment_ms);
        let gen = self.gen.as_mut().unwrap();
        gen.generated += 1;
        let malformed = |gen: &mut GenState, what: &str| {
            debug!("skipping malformed generated sequence: {what} after {:?}", gen.partial);
            gen.partial.clear();
        };
        match tok {
            Token::End => return self.finish_decoding(out),
            Token::Start => malformed(gen, "start"),
            Token::Segment => {
                if !gen.partial.is_empty() {
                    malformed(gen, "segment");
                }
                gen.segment_start_ms += seg;
            }
            Token::PedalOn(o) | Token::PedalOff(o) => {
                if !gen.partial.is_empty() {
                    malformed(gen, "pedal");
                }
                let on = matches!(tok, Token::PedalOn(_));
                let at = (gen.segment_start_ms + u64::from(o)) as f64;
                let target = gen.target(at, now, lead);
                gen.pedal_down = on;
                let id = gen.next_id();
                out.push(EngineOutput::SchedulePedal {
                    id,
                    on,
                    target_ms: target,
                });
            }
            Token::Note { .. } => {
                if !gen.partial.is_empty() {
                    malformed(gen, "note");
                }
                gen.partial.push(tok);
            }
            Token::Onset(_) => {
                if matches!(gen.partial.as_slice(), [Token::Note { .. }]) {
                    gen.partial.push(tok);
                } else {
                    malformed(gen, "onset");
                }
            }
            Token::Dur(d) => {
                if let [Token::Note { pitch, vel_bucket }, Token::Onset(o)] = gen.partial[..] {
                    gen.partial.clear();
                    let at = (gen.segment_start_ms + u64::from(o)) as f64;
                    let target_on = gen.target(at, now, lead);
                    let target_off = target_on + f64::from(d);
                    gen.last_off_ms = gen.last_off_ms.max(target_off);
                    let velocity = bucket_velocity(vel_bucket, self.config.tokenizer.velocity_buckets);
                    let id = gen.next_id();
                    self.ai_notes.insert(
                        id,
                        AiNote {
                            pitch,
                            velocity,
                            target_on,
                            sounded: None,
                        },
                    );
                    out.push(EngineOutput::ScheduleNote {
                        id,
                        pitch,
                        velocity,
                        target_on_ms: target_on,
                        target_off_ms: target_off,
                    });
                } else {
                    malformed(gen, "duration");
                }
            }
        }
    }

    /// Stop decoding; the turn ends once its notes have played out.
    fn finish_decoding(&mut self, out: &mut Vec<EngineOutput>) {
        let Some(gen) = self.gen.as_mut() else { return };
        gen.done = true;
        if gen.pedal_down {
            gen.pedal_down = false;
            let id = gen.next_id();
            out.push(EngineOutput::SchedulePedal {
                id,
                on: false,
                target_ms: gen.last_off_ms.max(gen.last_target_ms),
            });
        }
        self.maybe_end_turn(out);
    }

    pub(super) fn maybe_end_turn(&mut self, out: &mut Vec<EngineOutput>) {
        let Some(gen) = &self.gen else { return };
        let turn = gen.turn;
        if gen.done && !self.ai_notes.keys().any(|id| turn_of(*id) == turn) {
            self.end_generation(out);
            if let Some(r) = self.open_report.take() {
                out.push(EngineOutput::Report(r));
            }
        }
    }

    /// Drop generated tokens from the cache and go back to listening.
    fn end_generation(&mut self, out: &mut Vec<EngineOutput>) {
        let Some(gen) = self.gen.take() else { return };
        self.encoder = gen.encoder;
        self.ready.clear();
        if let Err(e) = self.rollback(gen.mark) {
            self.degraded = true;
            out.push(self.notice(format!("rollback after generation failed: {e}")));
        }
        self.set_phase(Phase::Listen, out);
    }

    pub(super) fn reclaim(&mut self, time_ms: f64, out: &mut Vec<EngineOutput>) {
        let Some(gen) = self.gen.as_mut() else { return };
        gen.done = true;
        let turn = gen.turn;
        out.push(EngineOutput::CancelTurn { turn });
        if self.config.reclaim_flush == ReclaimFlush::CutImmediately {
            out.push(EngineOutput::FlushSounding { time_ms });
        }
        self.end_generation(out);
    }
}
