//! Playback host: turns engine outputs into scheduler commands, ticks the
//! scheduler, hands emitted MIDI to an output sink and queues what the sink
//! reports back as timed engine feedback.

use std::collections::BTreeMap;

use log::warn;

use crate::engine::{turn_of, EngineOutput, Feedback};
use crate::instrument::{AcousticKind, VirtualInstrument};
use crate::midi::{MidiEvent, MidiKind};
use crate::scheduler::{time_key, CalibrationTable, Emission, EmissionKind, Scheduler};

/// Where emitted MIDI goes.
pub trait OutputSink {
    /// Deliver one emission at `em.event.timestamp_ms`. Returns feedback and
    /// the time at which it becomes true (possibly in the future).
    fn deliver(&mut self, em: &Emission) -> Vec<(f64, Feedback)>;
}

/// Feedback for pedal emissions, shared by every sink.
fn pedal_feedback(em: &Emission) -> Vec<(f64, Feedback)> {
    match em.event.kind {
        MidiKind::Control { value, .. } => {
            let t = em.event.timestamp_ms;
            vec![(t, Feedback::PedalSent { on: value >= 64, time_ms: t })]
        }
        _ => Vec::new(),
    }
}

/// Sink backed by the simulated player piano.
#[derive(Debug, Clone)]
pub struct InstrumentSink {
    pub instrument: VirtualInstrument,
    pub rejected: u64,
}

impl InstrumentSink {
    pub fn new(instrument: VirtualInstrument) -> Self {
        Self {
            instrument,
            rejected: 0,
        }
    }
}

impl OutputSink for InstrumentSink {
    fn deliver(&mut self, em: &Emission) -> Vec<(f64, Feedback)> {
        if em.kind == EmissionKind::Pedal {
            self.instrument.receive(em.event);
            return pedal_feedback(em);
        }
        let now = em.event.timestamp_ms;
        let mut out = Vec::new();
        for ac in self.instrument.receive(em.event) {
            match ac.kind {
                AcousticKind::Sounded => out.push((
                    ac.time_ms,
                    Feedback::Sounded {
                        id: em.tag,
                        time_ms: ac.time_ms,
                    },
                )),
                AcousticKind::Damped => out.push((
                    ac.time_ms,
                    Feedback::Damped {
                        id: em.tag,
                        time_ms: ac.time_ms,
                    },
                )),
                AcousticKind::RejectedRetrigger => {
                    self.rejected += 1;
                    warn!("instrument rejected a retrigger of pitch {}", ac.pitch);
                    out.push((now, Feedback::Dropped { id: em.tag }));
                }
            }
        }
        out
    }
}

/// Sink for hardware without acoustic confirmation: sounding times are
/// predicted from the calibration table.
pub struct PredictingSink<W> {
    table: CalibrationTable,
    writer: W,
    sounds_at: [f64; 128],
}

impl<W: FnMut(&MidiEvent)> PredictingSink<W> {
    pub fn new(table: CalibrationTable, writer: W) -> Self {
        Self {
            table,
            writer,
            sounds_at: [0.0; 128],
        }
    }
}

impl<W: FnMut(&MidiEvent)> OutputSink for PredictingSink<W> {
    fn deliver(&mut self, em: &Emission) -> Vec<(f64, Feedback)> {
        (self.writer)(&em.event);
        let now = em.event.timestamp_ms;
        match em.event.kind {
            MidiKind::NoteOn { pitch, velocity } => {
                let t = now + self.table.latency(velocity);
                self.sounds_at[usize::from(pitch)] = t;
                vec![(t, Feedback::Sounded { id: em.tag, time_ms: t })]
            }
            MidiKind::NoteOff { pitch, .. } => {
                let t = now.max(self.sounds_at[usize::from(pitch)]);
                vec![(t, Feedback::Damped { id: em.tag, time_ms: t })]
            }
            MidiKind::Control { .. } => pedal_feedback(em),
        }
    }
}

/// Scheduler plus sink plus a time-ordered feedback queue.
pub struct Playback<S> {
    scheduler: Scheduler,
    sink: S,
    feedback: BTreeMap<(i64, u64), (f64, Feedback)>,
    seq: u64,
    /// No tick may happen before this (commands applied at this time).
    horizon_ms: f64,
    /// Tick at the quantized send times that have passed instead of at the
    /// current time, as a scheduler running on its own thread would have.
    retroactive: bool,
    emitted: Vec<Emission>,
}

impl<S: OutputSink> Playback<S> {
    pub fn new(scheduler: Scheduler, sink: S, retroactive: bool) -> Self {
        Self {
            scheduler,
            sink,
            feedback: BTreeMap::new(),
            seq: 0,
            horizon_ms: f64::NEG_INFINITY,
            retroactive,
            emitted: Vec::new(),
        }
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn sink_mut(&mut self) -> &mut S {
        &mut self.sink
    }

    pub fn into_sink(self) -> S {
        self.sink
    }

    /// Every emission so far, in emission order.
    pub fn emitted(&self) -> &[Emission] {
        &self.emitted
    }

    pub fn take_emitted(&mut self) -> Vec<Emission> {
        std::mem::take(&mut self.emitted)
    }

    fn push_feedback(&mut self, at: f64, fb: Feedback) {
        self.seq += 1;
        self.feedback.insert((time_key(at), self.seq), (at, fb));
    }

    /// Apply engine outputs at `now_ms`.
    pub fn apply(&mut self, outputs: &[EngineOutput], now_ms: f64) {
        self.tick_until(now_ms);
        self.horizon_ms = self.horizon_ms.max(now_ms);
        self.scheduler.set_time(self.horizon_ms);
        for o in outputs {
            match *o {
                EngineOutput::ScheduleNote {
                    id,
                    pitch,
                    velocity,
                    target_on_ms,
                    target_off_ms,
                } => {
                    if let Err(e) =
                        self.scheduler
                            .schedule_note(id, pitch, velocity, target_on_ms, target_off_ms)
                    {
                        warn!("note {id} not scheduled: {e}");
                        self.push_feedback(now_ms, Feedback::Dropped { id });
                    }
                }
                EngineOutput::SchedulePedal { id, on, target_ms } => {
                    if let Err(e) = self.scheduler.schedule_pedal(id, on, target_ms) {
                        warn!("pedal change {id} not scheduled: {e}");
                    }
                }
                EngineOutput::CancelTurn { turn } => {
                    for id in self.scheduler.cancel(|tag| turn_of(tag) == turn) {
                        self.push_feedback(now_ms, Feedback::Dropped { id });
                    }
                }
                EngineOutput::FlushSounding { .. } => self.scheduler.release_sounding(now_ms),
                EngineOutput::Phase { .. } | EngineOutput::Report(_) | EngineOutput::Notice { .. } => {}
            }
        }
        self.tick_until(now_ms);
    }

    fn tick_time(&self, send: f64) -> f64 {
        let q = self.scheduler.config().tick_ms;
        ((send / q).ceil() * q).max(self.horizon_ms)
    }

    /// When the next tick with work is due.
    pub fn next_tick_ms(&self) -> Option<f64> {
        self.scheduler.next_send_ms().map(|s| self.tick_time(s))
    }

    pub fn next_feedback_ms(&self) -> Option<f64> {
        self.feedback.first_key_value().map(|(_, (t, _))| *t)
    }

    /// Run every tick due at or before `now_ms`.
    pub fn tick_until(&mut self, now_ms: f64) {
        while let Some(send) = self.scheduler.next_send_ms() {
            let t = if self.retroactive {
                self.tick_time(send)
            } else {
                now_ms.max(self.horizon_ms)
            };
            if t > now_ms || send > now_ms {
                break;
            }
            self.horizon_ms = t;
            self.tick_at(t);
        }
    }

    fn tick_at(&mut self, t: f64) {
        let out = self.scheduler.tick(t);
        for id in out.dropped {
            self.push_feedback(t, Feedback::Dropped { id });
        }
        for em in out.emitted {
            for (at, fb) in self.sink.deliver(&em) {
                self.push_feedback(at, fb);
            }
            self.emitted.push(em);
        }
    }

    /// Pop the earliest feedback due at or before `now_ms`.
    pub fn pop_feedback(&mut self, now_ms: f64) -> Option<(f64, Feedback)> {
        let (&key, &(t, _)) = self.feedback.first_key_value()?;
        if t > now_ms {
            return None;
        }
        self.feedback.remove(&key)
    }

    pub fn is_idle(&self) -> bool {
        self.scheduler.is_idle() && self.feedback.is_empty()
    }
}

/// Everything a session driver observes, in processing order.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEvent {
    /// A performer event as ingested, stamped with the session clock.
    Input(MidiEvent),
    Output(EngineOutput),
    Emitted(Emission),
    Feedback(Feedback),
}
