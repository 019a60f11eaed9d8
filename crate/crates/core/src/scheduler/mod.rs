//! Zero-buffer playback scheduler.
//!
//! NoteOns are sent early by the instrument's velocity-dependent actuation
//! latency so they sound on target; stale NoteOns are dropped instead of
//! played late; pending NoteOffs are pulled earlier when the same key must
//! strike again, so the action always gets `retrigger_gap_ms` of key-off
//! time.

mod calibration;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::MidiEvent;

pub use calibration::{
    all_velocities, run_calibration, Bucket, CalibrationError, CalibrationTable, ProbeTarget,
    PROBE_SPACING_MS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub staleness_threshold_ms: f64,
    pub retrigger_gap_ms: f64,
    pub max_pending: usize,
    /// Also send NoteOffs early, by `note_off_latency_ms`.
    pub compensate_note_off: bool,
    pub note_off_latency_ms: f64,
    pub tick_ms: f64,
    pub sustain_controller: u8,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            staleness_threshold_ms: 30.0,
            retrigger_gap_ms: 60.0,
            max_pending: 4096,
            compensate_note_off: false,
            note_off_latency_ms: 0.0,
            tick_ms: 1.0,
            sustain_controller: 64,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.staleness_threshold_ms >= 0.0) {
            return Err("staleness_threshold_ms must be non-negative".into());
        }
        if !(self.retrigger_gap_ms > 0.0) {
            return Err("retrigger_gap_ms must be positive".into());
        }
        if self.max_pending < 2 {
            return Err("max_pending must be at least 2".into());
        }
        if !(self.tick_ms > 0.0) {
            return Err("tick_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventState {
    Pending,
    Sent,
    Dropped,
}

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("scheduler full ({pending} pending, limit {max})")]
    Backpressure { pending: usize, max: usize },
    #[error("note-off at {off} ms does not follow note-on at {on} ms")]
    InvalidTimes { on: f64, off: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionKind {
    NoteOn,
    NoteOff,
    Pedal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emission {
    pub tag: u64,
    pub kind: EmissionKind,
    /// Stamped with the tick time it actually left at.
    pub event: MidiEvent,
    pub send_ms: f64,
    pub target_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickOutput {
    pub emitted: Vec<Emission>,
    /// Tags of notes dropped as stale.
    pub dropped: Vec<u64>,
}

/// Tag used for pedal releases the scheduler issues on its own.
pub const INTERNAL_TAG: u64 = u64::MAX;

#[derive(Debug, Clone)]
struct NoteEntry {
    tag: u64,
    pitch: u8,
    velocity: u8,
    latency: f64,
    target_on: f64,
    target_off: f64,
    on_send: f64,
    off_send: f64,
    on_state: EventState,
    off_state: EventState,
    on_sent_at: Option<f64>,
    off_sent_at: Option<f64>,
    off_key: Key,
}

impl NoteEntry {
    /// When the hammer is expected to strike.
    fn expected_sound(&self) -> f64 {
        self.on_sent_at.unwrap_or(self.on_send) + self.latency
    }
}

#[derive(Debug, Clone)]
struct PedalEntry {
    tag: u64,
    on: bool,
    send: f64,
    state: EventState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    On(usize),
    Off(usize),
    Pedal(usize),
}

/// (send time in total order, rank: off < control < on, insertion sequence)
type Key = (i64, u8, u64);

pub(crate) fn time_key(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    if b < 0 {
        b ^ i64::MAX
    } else {
        b
    }
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    table: CalibrationTable,
    notes: Vec<NoteEntry>,
    pedals: Vec<PedalEntry>,
    by_pitch: Vec<Vec<usize>>,
    pending: BTreeMap<Key, Slot>,
    seq: u64,
    pedal_down: bool,
    last_tick_ms: f64,
    last_off_sent: [f64; 128],
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, table: CalibrationTable) -> Self {
        Self {
            config,
            table,
            notes: Vec::new(),
            pedals: Vec::new(),
            by_pitch: vec![Vec::new(); 128],
            pending: BTreeMap::new(),
            seq: 0,
            pedal_down: false,
            last_tick_ms: f64::NEG_INFINITY,
            last_off_sent: [f64::NEG_INFINITY; 128],
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn table(&self) -> &CalibrationTable {
        &self.table
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty()
    }

    /// Send time of the earliest pending event.
    pub fn next_send_ms(&self) -> Option<f64> {
        self.pending.first_key_value().map(|(_, slot)| self.send_of(*slot))
    }

    fn send_of(&self, slot: Slot) -> f64 {
        match slot {
            Slot::On(i) => self.notes[i].on_send,
            Slot::Off(i) => self.notes[i].off_send,
            Slot::Pedal(i) => self.pedals[i].send,
        }
    }

    fn key(&mut self, send: f64, rank: u8) -> Key {
        self.seq += 1;
        (time_key(send), rank, self.seq)
    }

    fn move_off(&mut self, i: usize, send: f64) {
        let old = self.notes[i].off_key;
        self.pending.remove(&old);
        let key = self.key(send, 0);
        let n = &mut self.notes[i];
        n.off_send = send;
        n.off_key = key;
        self.pending.insert(key, Slot::Off(i));
    }

    fn defer_on(&mut self, i: usize, send: f64) {
        let key = self.key(send, 2);
        self.notes[i].on_send = send;
        self.pending.insert(key, Slot::On(i));
        let min_off = self.notes[i].expected_sound() + self.config.tick_ms;
        if self.notes[i].off_send < min_off {
            self.move_off(i, min_off);
        }
    }

    /// Queue a note to sound at `target_on_ms` and release at `target_off_ms`.
    pub fn schedule_note(
        &mut self,
        tag: u64,
        pitch: u8,
        velocity: u8,
        target_on_ms: f64,
        target_off_ms: f64,
    ) -> Result<(), SchedulerError> {
        if !(target_off_ms > target_on_ms) {
            return Err(SchedulerError::InvalidTimes {
                on: target_on_ms,
                off: target_off_ms,
            });
        }
        if self.pending.len() + 2 > self.config.max_pending {
            return Err(SchedulerError::Backpressure {
                pending: self.pending.len(),
                max: self.config.max_pending,
            });
        }
        let pitch = pitch & 0x7F;
        let gap = self.config.retrigger_gap_ms;
        let tick = self.config.tick_ms;
        let latency = self.table.latency(velocity);
        let mut on_send = target_on_ms - latency;

        let prior = self.by_pitch[usize::from(pitch)]
            .iter()
            .rev()
            .copied()
            .find(|&i| self.notes[i].on_state != EventState::Dropped);
        if let Some(p) = prior {
            let prev = &self.notes[p];
            match prev.off_state {
                EventState::Sent => {
                    on_send = on_send.max(prev.off_sent_at.unwrap_or(prev.off_send) + gap);
                }
                EventState::Pending if prev.off_send > on_send - gap => {
                    // The off cannot leave before the hammer strikes, nor
                    // before the next tick.
                    let floor = (prev.expected_sound() + tick).max(self.last_tick_ms);
                    let wanted = on_send - gap;
                    if wanted >= floor {
                        self.move_off(p, wanted);
                    } else {
                        if prev.off_send > floor {
                            self.move_off(p, floor);
                        }
                        on_send = self.notes[p].off_send + gap;
                    }
                }
                EventState::Pending | EventState::Dropped => {}
            }
        }

        let expected = on_send + latency;
        let off_target = if self.config.compensate_note_off {
            target_off_ms - self.config.note_off_latency_ms
        } else {
            target_off_ms
        };
        let off_send = off_target.max(expected + tick);
        let on_key = self.key(on_send, 2);
        let off_key = self.key(off_send, 0);
        let idx = self.notes.len();
        self.notes.push(NoteEntry {
            tag,
            pitch,
            velocity,
            latency,
            target_on: target_on_ms,
            target_off: target_off_ms,
            on_send,
            off_send,
            on_state: EventState::Pending,
            off_state: EventState::Pending,
            on_sent_at: None,
            off_sent_at: None,
            off_key,
        });
        self.by_pitch[usize::from(pitch)].push(idx);
        self.pending.insert(on_key, Slot::On(idx));
        self.pending.insert(off_key, Slot::Off(idx));
        Ok(())
    }

    /// Queue a sustain change at `target_ms` (pedals are not compensated and
    /// never dropped as stale).
    pub fn schedule_pedal(&mut self, tag: u64, on: bool, target_ms: f64) -> Result<(), SchedulerError> {
        if self.pending.len() + 1 > self.config.max_pending {
            return Err(SchedulerError::Backpressure {
                pending: self.pending.len(),
                max: self.config.max_pending,
            });
        }
        let key = self.key(target_ms, 1);
        self.pedals.push(PedalEntry {
            tag,
            on,
            send: target_ms,
            state: EventState::Pending,
        });
        self.pending.insert(key, Slot::Pedal(self.pedals.len() - 1));
        Ok(())
    }

    /// Nothing will be sent before `now_ms`; moved events are not placed
    /// earlier than this.
    pub fn set_time(&mut self, now_ms: f64) {
        self.last_tick_ms = self.last_tick_ms.max(now_ms);
    }

    /// Emit everything due at `now_ms`, in send order.
    pub fn tick(&mut self, now_ms: f64) -> TickOutput {
        let mut out = TickOutput::default();
        self.last_tick_ms = self.last_tick_ms.max(now_ms);
        let limit = time_key(now_ms);
        while let Some((&key, &slot)) = self.pending.first_key_value() {
            if key.0 > limit {
                break;
            }
            self.pending.remove(&key);
            match slot {
                Slot::On(i) => {
                    let pitch = usize::from(self.notes[i].pitch);
                    let clear = self.last_off_sent[pitch] + self.config.retrigger_gap_ms;
                    if now_ms < clear {
                        // The release went out later than planned; keep the
                        // gap against what was actually sent.
                        self.defer_on(i, clear);
                        continue;
                    }
                    let late = now_ms - self.notes[i].on_send;
                    if late > self.config.staleness_threshold_ms {
                        let off_key = self.notes[i].off_key;
                        self.pending.remove(&off_key);
                        let n = &mut self.notes[i];
                        n.on_state = EventState::Dropped;
                        n.off_state = EventState::Dropped;
                        out.dropped.push(n.tag);
                        continue;
                    }
                    let n = &mut self.notes[i];
                    n.on_state = EventState::Sent;
                    n.on_sent_at = Some(now_ms);
                    out.emitted.push(Emission {
                        tag: n.tag,
                        kind: EmissionKind::NoteOn,
                        event: MidiEvent::note_on(n.pitch, n.velocity.max(1), now_ms),
                        send_ms: n.on_send,
                        target_ms: n.target_on,
                    });
                }
                Slot::Off(i) => {
                    let strike = self.notes[i].expected_sound() + self.config.tick_ms;
                    if self.notes[i].on_state == EventState::Sent && now_ms < strike {
                        // The NoteOn left late; never release before the
                        // hammer lands.
                        self.move_off(i, strike);
                        continue;
                    }
                    let n = &mut self.notes[i];
                    self.last_off_sent[usize::from(n.pitch)] = now_ms;
                    n.off_state = EventState::Sent;
                    n.off_sent_at = Some(now_ms);
                    out.emitted.push(Emission {
                        tag: n.tag,
                        kind: EmissionKind::NoteOff,
                        event: MidiEvent::note_off(n.pitch, now_ms),
                        send_ms: n.off_send,
                        target_ms: n.target_off,
                    });
                }
                Slot::Pedal(i) => {
                    let p = &mut self.pedals[i];
                    p.state = EventState::Sent;
                    self.pedal_down = p.on;
                    out.emitted.push(Emission {
                        tag: p.tag,
                        kind: EmissionKind::Pedal,
                        event: MidiEvent::control(
                            self.config.sustain_controller,
                            if p.on { 127 } else { 0 },
                            now_ms,
                        ),
                        send_ms: p.send,
                        target_ms: p.send,
                    });
                }
            }
        }
        out
    }

    /// Drop pending events whose tag matches. NoteOffs of notes already
    /// struck are kept. If the sustain pedal is left down with no release
    /// queued, a release is queued for when the last kept NoteOff goes out.
    /// Returns the tags of the notes and pedal changes cancelled.
    pub fn cancel(&mut self, pred: impl Fn(u64) -> bool) -> Vec<u64> {
        let mut cancelled = Vec::new();
        let slots: Vec<(Key, Slot)> = self.pending.iter().map(|(k, s)| (*k, *s)).collect();
        for (key, slot) in slots {
            match slot {
                Slot::On(i) if pred(self.notes[i].tag) => {
                    let off_key = self.notes[i].off_key;
                    self.pending.remove(&key);
                    self.pending.remove(&off_key);
                    self.notes[i].on_state = EventState::Dropped;
                    self.notes[i].off_state = EventState::Dropped;
                    cancelled.push(self.notes[i].tag);
                }
                Slot::Pedal(i) if pred(self.pedals[i].tag) => {
                    self.pending.remove(&key);
                    self.pedals[i].state = EventState::Dropped;
                    cancelled.push(self.pedals[i].tag);
                }
                _ => {}
            }
        }
        if self.pedal_down && !self.pedal_release_pending() {
            let at = self
                .pending
                .values()
                .filter_map(|s| match s {
                    Slot::Off(i) => Some(self.notes[*i].off_send),
                    _ => None,
                })
                .fold(self.last_tick_ms, f64::max);
            let _ = self.schedule_pedal(INTERNAL_TAG, false, at);
        }
        cancelled
    }

    fn pedal_release_pending(&self) -> bool {
        self.pending
            .values()
            .any(|s| matches!(s, Slot::Pedal(i) if !self.pedals[*i].on))
    }

    /// Release struck keys (and the sustain pedal) as soon as possible, but
    /// never before the hammer has struck.
    pub fn release_sounding(&mut self, now_ms: f64) {
        let tick = self.config.tick_ms;
        let offs: Vec<usize> = self
            .pending
            .values()
            .filter_map(|s| match s {
                Slot::Off(i) if self.notes[*i].on_state == EventState::Sent => Some(*i),
                _ => None,
            })
            .collect();
        for i in offs {
            let at = now_ms.max(self.notes[i].expected_sound() + tick);
            if at < self.notes[i].off_send {
                self.move_off(i, at);
            }
        }
        let releases: Vec<(Key, usize)> = self
            .pending
            .iter()
            .filter_map(|(k, s)| match s {
                Slot::Pedal(i) if !self.pedals[*i].on => Some((*k, *i)),
                _ => None,
            })
            .collect();
        let had_release = !releases.is_empty();
        for (k, i) in releases {
            self.pending.remove(&k);
            self.pedals[i].state = EventState::Dropped;
        }
        if self.pedal_down || had_release {
            let _ = self.schedule_pedal(INTERNAL_TAG, false, now_ms);
        }
    }

    /// Latest known state of a tagged note: (on, off).
    pub fn note_state(&self, tag: u64) -> Option<(EventState, EventState)> {
        self.notes
            .iter()
            .rev()
            .find(|n| n.tag == tag)
            .map(|n| (n.on_state, n.off_state))
    }

    /// Planned send times of a tagged note: (on, off).
    pub fn note_sends(&self, tag: u64) -> Option<(f64, f64)> {
        self.notes
            .iter()
            .rev()
            .find(|n| n.tag == tag)
            .map(|n| (n.on_send, n.off_send))
    }
}
