//! Live note tracking: pairs NoteOn/NoteOff into notes, follows pedal state and
//! detects the soft-pedal takeover signal.

use std::collections::BTreeMap;

use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::event::{MidiEvent, MidiKind};

/// A reconstructed note. `duration_ms == None` marks a hanging (open) note.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub pitch: u8,
    pub onset_ms: f64,
    pub duration_ms: Option<f64>,
    pub velocity: u8,
}

impl Note {
    pub fn closed(pitch: u8, onset_ms: f64, duration_ms: f64, velocity: u8) -> Self {
        Self {
            pitch,
            onset_ms,
            duration_ms: Some(duration_ms),
            velocity,
        }
    }

    pub fn open(pitch: u8, onset_ms: f64, velocity: u8) -> Self {
        Self {
            pitch,
            onset_ms,
            duration_ms: None,
            velocity,
        }
    }

    pub fn is_open(&self) -> bool {
        self.duration_ms.is_none()
    }

    pub fn offset_ms(&self) -> Option<f64> {
        self.duration_ms.map(|d| self.onset_ms + d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pedal {
    Sustain,
    SoftUnaCorda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PedalState {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedalEvent {
    pub pedal: Pedal,
    pub state: PedalState,
    pub time_ms: f64,
}

impl PedalEvent {
    pub fn sustain(on: bool, time_ms: f64) -> Self {
        Self {
            pedal: Pedal::Sustain,
            state: if on { PedalState::On } else { PedalState::Off },
            time_ms,
        }
    }

    pub fn is_on(&self) -> bool {
        self.state == PedalState::On
    }
}

/// Controller assignment for the two pedals the engine cares about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PedalConfig {
    pub sustain_controller: u8,
    pub soft_controller: u8,
    /// Values at or above this are "pressed".
    pub threshold: u8,
}

impl Default for PedalConfig {
    fn default() -> Self {
        Self {
            sustain_controller: 64,
            soft_controller: 67,
            threshold: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrackerOutput {
    FinalizedNote(Note),
    PedalChange(PedalEvent),
    TakeoverSignal { time_ms: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("event at {got} ms arrived after an event at {last} ms")]
    OutOfOrder { last: f64, got: f64 },
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    config: PedalConfig,
    open_notes: BTreeMap<u8, (f64, u8)>,
    sustain_down: bool,
    soft_down: bool,
    finalized: Vec<Note>,
    pedal_log: Vec<PedalEvent>,
    last_ts: Option<f64>,
    notes_seen: usize,
}

impl Default for TrackerState {
    fn default() -> Self {
        Self::new(PedalConfig::default())
    }
}

impl TrackerState {
    pub fn new(config: PedalConfig) -> Self {
        Self {
            config,
            open_notes: BTreeMap::new(),
            sustain_down: false,
            soft_down: false,
            finalized: Vec::new(),
            pedal_log: Vec::new(),
            last_ts: None,
            notes_seen: 0,
        }
    }

    pub fn config(&self) -> &PedalConfig {
        &self.config
    }

    pub fn finalized(&self) -> &[Note] {
        &self.finalized
    }

    pub fn pedal_log(&self) -> &[PedalEvent] {
        &self.pedal_log
    }

    pub fn sustain_down(&self) -> bool {
        self.sustain_down
    }

    pub fn soft_down(&self) -> bool {
        self.soft_down
    }

    pub fn last_timestamp(&self) -> Option<f64> {
        self.last_ts
    }

    /// Number of notes ever opened or merged, including hanging ones.
    pub fn notes_seen(&self) -> usize {
        self.notes_seen
    }

    pub fn is_open(&self, pitch: u8) -> bool {
        self.open_notes.contains_key(&pitch)
    }

    pub fn earliest_open_onset(&self) -> Option<f64> {
        self.open_notes
            .values()
            .map(|(onset, _)| *onset)
            .min_by(f64::total_cmp)
    }

    pub fn ingest(&mut self, ev: MidiEvent) -> Result<Vec<TrackerOutput>, TrackerError> {
        if let Some(last) = self.last_ts {
            if ev.timestamp_ms < last {
                return Err(TrackerError::OutOfOrder {
                    last,
                    got: ev.timestamp_ms,
                });
            }
        }
        self.last_ts = Some(ev.timestamp_ms);
        let t = ev.timestamp_ms;
        let mut out = Vec::new();
        match ev.normalized().kind {
            MidiKind::NoteOn { pitch, velocity } => {
                if let Some(note) = self.close(pitch, t) {
                    out.push(TrackerOutput::FinalizedNote(note));
                }
                self.open_notes.insert(pitch, (t, velocity));
                self.notes_seen += 1;
            }
            MidiKind::NoteOff { pitch, .. } => match self.close(pitch, t) {
                Some(note) => out.push(TrackerOutput::FinalizedNote(note)),
                None if self.open_notes.contains_key(&pitch) => {}
                None => debug!("note-off for pitch {pitch} at {t} ms with no open note; ignored"),
            },
            MidiKind::Control { controller, value } => {
                let pressed = value >= self.config.threshold;
                if controller == self.config.sustain_controller {
                    if pressed != self.sustain_down {
                        self.sustain_down = pressed;
                        let pe = PedalEvent::sustain(pressed, t);
                        self.pedal_log.push(pe);
                        out.push(TrackerOutput::PedalChange(pe));
                    }
                } else if controller == self.config.soft_controller && pressed != self.soft_down {
                    self.soft_down = pressed;
                    self.pedal_log.push(PedalEvent {
                        pedal: Pedal::SoftUnaCorda,
                        state: if pressed { PedalState::On } else { PedalState::Off },
                        time_ms: t,
                    });
                    if pressed {
                        out.push(TrackerOutput::TakeoverSignal { time_ms: t });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Hanging notes, ordered by onset (then pitch).
    pub fn hanging_notes(&self, _at_ms: f64) -> Vec<Note> {
        let mut notes: Vec<Note> = self
            .open_notes
            .iter()
            .map(|(&pitch, &(onset, velocity))| Note::open(pitch, onset, velocity))
            .collect();
        notes.sort_by(|a, b| a.onset_ms.total_cmp(&b.onset_ms).then(a.pitch.cmp(&b.pitch)));
        notes
    }

    /// Close a hanging note with a duration decided elsewhere (speculation).
    pub fn close_with_duration(&mut self, pitch: u8, duration_ms: f64) -> Option<Note> {
        let (onset, velocity) = self.open_notes.remove(&pitch)?;
        let note = Note::closed(pitch, onset, duration_ms.max(f64::MIN_POSITIVE), velocity);
        self.insert_sorted(note);
        Some(note)
    }

    /// Merge a note that sounded outside the performer's input (generated).
    /// A performer note held on the same key is left alone.
    pub fn merge_note(&mut self, note: Note) {
        debug_assert!(!note.is_open());
        self.notes_seen += 1;
        self.insert_sorted(note);
    }

    /// Merge a sustain change from another source. Returns false (and records
    /// nothing) when it does not change the pedal state.
    pub fn merge_sustain(&mut self, on: bool, time_ms: f64) -> bool {
        if on == self.sustain_down {
            return false;
        }
        self.sustain_down = on;
        self.pedal_log.push(PedalEvent::sustain(on, time_ms));
        true
    }

    fn close(&mut self, pitch: u8, t: f64) -> Option<Note> {
        let &(onset, velocity) = self.open_notes.get(&pitch)?;
        self.open_notes.remove(&pitch);
        let duration = t - onset;
        if duration <= 0.0 {
            debug!("zero-length note on pitch {pitch} at {t} ms discarded");
            return None;
        }
        let note = Note::closed(pitch, onset, duration, velocity);
        self.insert_sorted(note);
        Some(note)
    }

    fn insert_sorted(&mut self, note: Note) {
        let idx = self
            .finalized
            .partition_point(|n| n.onset_ms <= note.onset_ms);
        self.finalized.insert(idx, note);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest_all(tr: &mut TrackerState, evs: &[MidiEvent]) -> Vec<TrackerOutput> {
        evs.iter().flat_map(|e| tr.ingest(*e).unwrap()).collect()
    }

    #[test]
    fn on_off_pairing() {
        let mut tr = TrackerState::default();
        let out = ingest_all(
            &mut tr,
            &[MidiEvent::note_on(60, 80, 100.0), MidiEvent::note_off(60, 600.0)],
        );
        assert_eq!(
            out,
            vec![TrackerOutput::FinalizedNote(Note::closed(60, 100.0, 500.0, 80))]
        );
    }

    #[test]
    fn same_pitch_retrigger_closes_prior_note() {
        let mut tr = TrackerState::default();
        let out = ingest_all(
            &mut tr,
            &[MidiEvent::note_on(60, 70, 100.0), MidiEvent::note_on(60, 90, 400.0)],
        );
        assert_eq!(
            out,
            vec![TrackerOutput::FinalizedNote(Note::closed(60, 100.0, 300.0, 70))]
        );
        assert_eq!(tr.hanging_notes(400.0), vec![Note::open(60, 400.0, 90)]);
    }

    #[test]
    fn soft_pedal_is_edge_triggered() {
        let mut tr = TrackerState::default();
        let first = tr.ingest(MidiEvent::control(67, 90, 1000.0)).unwrap();
        assert_eq!(first, vec![TrackerOutput::TakeoverSignal { time_ms: 1000.0 }]);
        let second = tr.ingest(MidiEvent::control(67, 95, 1010.0)).unwrap();
        assert!(second.is_empty());
        tr.ingest(MidiEvent::control(67, 0, 1100.0)).unwrap();
        let third = tr.ingest(MidiEvent::control(67, 64, 1200.0)).unwrap();
        assert_eq!(third, vec![TrackerOutput::TakeoverSignal { time_ms: 1200.0 }]);
    }

    #[test]
    fn out_of_order_is_rejected() {
        let mut tr = TrackerState::default();
        tr.ingest(MidiEvent::note_on(60, 80, 100.0)).unwrap();
        let err = tr.ingest(MidiEvent::note_off(60, 50.0)).unwrap_err();
        assert_eq!(err, TrackerError::OutOfOrder { last: 100.0, got: 50.0 });
    }

    #[test]
    fn stray_note_off_is_ignored() {
        let mut tr = TrackerState::default();
        assert!(tr.ingest(MidiEvent::note_off(60, 10.0)).unwrap().is_empty());
        assert!(tr.finalized().is_empty());
    }

    #[test]
    fn hanging_notes_ordered_by_onset() {
        let mut tr = TrackerState::default();
        assert!(tr.hanging_notes(0.0).is_empty());
        ingest_all(
            &mut tr,
            &[MidiEvent::note_on(64, 50, 150.0), MidiEvent::note_on(60, 50, 200.0)],
        );
        let hanging = tr.hanging_notes(300.0);
        assert_eq!(hanging, vec![Note::open(64, 150.0, 50), Note::open(60, 200.0, 50)]);
    }

    #[test]
    fn sustain_does_not_create_or_extend_notes() {
        let mut tr = TrackerState::default();
        let out = ingest_all(
            &mut tr,
            &[
                MidiEvent::control(64, 127, 0.0),
                MidiEvent::note_on(60, 50, 10.0),
                MidiEvent::note_off(60, 20.0),
                MidiEvent::note_on(62, 50, 30.0),
            ],
        );
        assert_eq!(tr.hanging_notes(40.0).len(), 1);
        assert_eq!(
            out,
            vec![
                TrackerOutput::PedalChange(PedalEvent::sustain(true, 0.0)),
                TrackerOutput::FinalizedNote(Note::closed(60, 10.0, 10.0, 50)),
            ]
        );
        assert!(tr.sustain_down());
    }

    #[test]
    fn finalized_list_stays_sorted_with_out_of_order_closes() {
        let mut tr = TrackerState::default();
        ingest_all(
            &mut tr,
            &[
                MidiEvent::note_on(60, 50, 0.0),
                MidiEvent::note_on(62, 50, 10.0),
                MidiEvent::note_off(62, 20.0),
                MidiEvent::note_off(60, 30.0),
            ],
        );
        let onsets: Vec<f64> = tr.finalized().iter().map(|n| n.onset_ms).collect();
        assert_eq!(onsets, vec![0.0, 10.0]);
    }

    #[test]
    fn configurable_soft_controller_and_threshold() {
        let mut tr = TrackerState::new(PedalConfig {
            sustain_controller: 64,
            soft_controller: 66,
            threshold: 100,
        });
        assert!(tr.ingest(MidiEvent::control(67, 127, 0.0)).unwrap().is_empty());
        assert!(tr.ingest(MidiEvent::control(66, 99, 1.0)).unwrap().is_empty());
        assert_eq!(
            tr.ingest(MidiEvent::control(66, 100, 2.0)).unwrap(),
            vec![TrackerOutput::TakeoverSignal { time_ms: 2.0 }]
        );
    }
}
