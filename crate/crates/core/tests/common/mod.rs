//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;

use duet_core::engine::TakeoverReport;
use duet_core::instrument::{AcousticEvent, AcousticKind};
use duet_core::midi::{MidiEvent, MidiKind, Note, PedalConfig, PedalEvent};
use duet_core::scheduler::{Emission, EmissionKind};
use duet_core::sim::performance_script;
use duet_core::tokenizer::TokenizerConfig;

/// Times on a 0.1 ms grid so rounding ties actually occur.
pub fn grid_time(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let t = rng.gen_range(lo..hi);
    (t * 10.0).round() / 10.0
}

/// Random closed performance in `[start, end)`: per-pitch notes never
/// overlap, sustain presses alternate on/off and end released.
pub fn random_phrase(rng: &mut impl Rng, start: f64, end: f64, max_notes: usize) -> (Vec<Note>, Vec<PedalEvent>) {
    let mut notes = Vec::new();
    let mut busy_until = [f64::NEG_INFINITY; 128];
    let n = rng.gen_range(1..=max_notes.max(1));
    for _ in 0..n {
        let pitch = rng.gen_range(36u8..96);
        let onset = grid_time(rng, start, end - 20.0);
        if onset < busy_until[usize::from(pitch)] + 1.0 {
            continue;
        }
        let dur = grid_time(rng, 5.0, 2500.0).min(end - onset - 1.0);
        if dur <= 0.0 {
            continue;
        }
        let velocity = rng.gen_range(1u8..=127);
        busy_until[usize::from(pitch)] = onset + dur;
        notes.push(Note::closed(pitch, onset, dur, velocity));
    }
    let mut pedals = Vec::new();
    let presses = rng.gen_range(0..4);
    let mut times: Vec<f64> = (0..presses * 2).map(|_| grid_time(rng, start, end - 1.0)).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    for (i, t) in times.iter().enumerate() {
        pedals.push(PedalEvent::sustain(i % 2 == 0, *t));
    }
    if pedals.last().is_some_and(|p| p.is_on()) {
        pedals.pop();
    }
    notes.sort_by(|a, b| a.onset_ms.total_cmp(&b.onset_ms));
    (notes, pedals)
}

/// Rebuild notes and sustain changes from wire events, by brute force.
pub fn pair_wire(events: &[MidiEvent], pedals: &PedalConfig) -> (Vec<Note>, Vec<PedalEvent>) {
    let mut open: Vec<Option<(f64, u8)>> = vec![None; 128];
    let mut notes = Vec::new();
    let mut sustain = Vec::new();
    let mut down = false;
    let close = |open: &mut Vec<Option<(f64, u8)>>, pitch: u8, t: f64, notes: &mut Vec<Note>| {
        if let Some((on, v)) = open[usize::from(pitch)].take() {
            if t > on {
                notes.push(Note::closed(pitch, on, t - on, v));
            }
        }
    };
    for ev in events {
        let t = ev.timestamp_ms;
        match ev.kind {
            MidiKind::NoteOn { pitch, velocity } if velocity > 0 => {
                close(&mut open, pitch, t, &mut notes);
                open[usize::from(pitch)] = Some((t, velocity));
            }
            MidiKind::NoteOn { pitch, .. } | MidiKind::NoteOff { pitch, .. } => {
                close(&mut open, pitch, t, &mut notes)
            }
            MidiKind::Control { controller, value } if controller == pedals.sustain_controller => {
                let on = value >= pedals.threshold;
                if on != down {
                    down = on;
                    sustain.push(PedalEvent::sustain(on, t));
                }
            }
            MidiKind::Control { .. } => {}
        }
    }
    for (pitch, o) in open.iter().enumerate() {
        if let Some((on, v)) = o {
            notes.push(Note::open(pitch as u8, *on, *v));
        }
    }
    (notes, sustain)
}

/// A scripted duet: phrases separated by takeover presses, each generation
/// cut short by a reclaim press. Some notes are still held at each signal.
pub struct Duet {
    pub notes: Vec<Note>,
    pub pedals: Vec<PedalEvent>,
    pub presses: Vec<f64>,
}

impl Duet {
    pub fn script(&self, pedal_config: &PedalConfig) -> Vec<MidiEvent> {
        performance_script(&self.notes, &self.pedals, &self.presses, pedal_config)
    }

    /// Add short notes on keys the phrases never use, played while the
    /// model has control.
    pub fn add_interruptions(&mut self, rng: &mut impl Rng) {
        for pair in self.presses.chunks(2) {
            if let [signal, reclaim] = pair {
                let t = grid_time(rng, *signal + 1.0, *reclaim);
                let pitch = rng.gen_range(100u8..108);
                self.notes.push(Note::closed(pitch, t, 30.0, 90));
            }
        }
    }
}

pub fn random_duet(rng: &mut impl Rng, turns: usize, max_gen_ms: f64) -> Duet {
    let mut notes = Vec::new();
    let mut pedals = Vec::new();
    let mut presses = Vec::new();
    let mut t = grid_time(rng, 0.0, 300.0);
    for _ in 0..turns {
        let len = grid_time(rng, 1500.0, 6000.0);
        let (mut n, p) = random_phrase(rng, t, t + len, 40);
        let signal = t + len + grid_time(rng, 0.0, 30.0);
        let holds = rng.gen_range(0..4);
        for _ in 0..holds {
            let pitch = rng.gen_range(36u8..96);
            if n.iter().any(|x| x.pitch == pitch) {
                continue;
            }
            let onset = grid_time(rng, t, signal - 1.0);
            let release = signal + grid_time(rng, 1.0, 1500.0);
            n.push(Note::closed(pitch, onset, release - onset, rng.gen_range(1..=127)));
        }
        notes.extend(n);
        pedals.extend(p);
        presses.push(signal);
        let reclaim = signal + grid_time(rng, 1.0, max_gen_ms);
        presses.push(reclaim);
        t = reclaim + 100.0 + grid_time(rng, 0.0, 800.0);
    }
    notes.sort_by(|a, b| a.onset_ms.total_cmp(&b.onset_ms));
    Duet {
        notes,
        pedals,
        presses,
    }
}

/// Generated notes as the instrument played them.
pub fn sounded_notes(log: &[AcousticEvent]) -> Vec<Note> {
    let mut open: Vec<Option<(f64, u8)>> = vec![None; 128];
    let mut notes = Vec::new();
    for ev in log {
        let p = usize::from(ev.pitch);
        match ev.kind {
            AcousticKind::Sounded => open[p] = Some((ev.time_ms, ev.velocity)),
            AcousticKind::Damped => {
                if let Some((on, v)) = open[p].take() {
                    notes.push(Note::closed(ev.pitch, on, ev.time_ms - on, v));
                }
            }
            AcousticKind::RejectedRetrigger => {}
        }
    }
    notes
}

/// Sustain changes actually sent to the instrument, with their times.
pub fn sent_pedals(emitted: &[Emission]) -> Vec<(f64, bool)> {
    emitted
        .iter()
        .filter(|e| e.kind == EmissionKind::Pedal)
        .filter_map(|e| match e.event.kind {
            MidiKind::Control { value, .. } => Some((e.event.timestamp_ms, value >= 64)),
            _ => None,
        })
        .collect()
}

/// Merge two sustain sources on one pedal, recording only state changes.
pub fn merge_pedal_timelines(human: &[PedalEvent], ai: &[(f64, bool)]) -> Vec<PedalEvent> {
    let mut all: Vec<(f64, u8, bool)> = human
        .iter()
        .map(|p| (p.time_ms, 1, p.is_on()))
        .chain(ai.iter().map(|&(t, on)| (t, 0, on)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut down = false;
    let mut out = Vec::new();
    for (t, _, on) in all {
        if on != down {
            down = on;
            out.push(PedalEvent::sustain(on, t));
        }
    }
    out
}

/// Round half up onto the grid.
pub fn q_time(t: f64, res: u32) -> u64 {
    let r = f64::from(res);
    ((t.max(0.0) / r + 0.5).floor() * r) as u64
}

pub fn q_duration(d: f64, cfg: &TokenizerConfig) -> u32 {
    (q_time(d, cfg.time_resolution_ms) as u32).clamp(cfg.time_resolution_ms, cfg.max_duration_ms)
}

/// Performer notes as the engine should have closed them by takeover
/// `turn`: a note held through any takeover so far keeps the duration
/// speculated then (checked against the script), the rest keep their real
/// durations.
pub fn human_notes_at_takeover(
    all: &[Note],
    reports: &[TakeoverReport],
    turn: usize,
) -> Result<Vec<Note>, String> {
    let signal = reports[turn].signal_time_ms;
    let mut out = Vec::new();
    for n in all.iter().filter(|n| n.onset_ms <= signal) {
        let spec = reports[..=turn].iter().find_map(|r| {
            r.speculated
                .iter()
                .find(|s| s.pitch == n.pitch && s.onset_ms == n.onset_ms)
                .map(|s| (r.signal_time_ms, s))
        });
        match (spec, n.offset_ms()) {
            (Some((at, s)), Some(off)) if off <= at => {
                return Err(format!("note {n:?} was released before the signal but speculated as {s:?}"))
            }
            (Some((_, s)), _) => out.push(Note::closed(n.pitch, n.onset_ms, f64::from(s.duration_ms), n.velocity)),
            (None, None) => return Err(format!("note {n:?} open at takeover but not speculated")),
            (None, Some(off)) if off > signal => {
                return Err(format!("note {n:?} held through the signal but not speculated"))
            }
            (None, Some(_)) => out.push(*n),
        }
    }
    Ok(out)
}
