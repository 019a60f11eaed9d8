//! Simulated player piano: velocity-dependent actuation delay, instantaneous
//! dampers and a mechanical key-reset time.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::midi::{MidiEvent, MidiKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstrumentModel {
    /// Latency at velocity 1.
    pub base_ms: f64,
    /// Latency decrease per velocity step.
    pub slope_ms_per_velocity: f64,
    pub reset_time_ms: f64,
    pub jitter_ms: f64,
    pub seed: u64,
}

impl Default for InstrumentModel {
    fn default() -> Self {
        Self {
            base_ms: 120.0,
            slope_ms_per_velocity: 0.6,
            reset_time_ms: 50.0,
            jitter_ms: 0.0,
            seed: 0,
        }
    }
}

impl InstrumentModel {
    pub fn latency_ms(&self, velocity: u8) -> f64 {
        self.base_ms - self.slope_ms_per_velocity * (f64::from(velocity.clamp(1, 127)) - 1.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        let lo = self.latency_ms(1).min(self.latency_ms(127));
        if !(lo > 0.0) {
            return Err("latency curve must stay positive over velocities 1..=127".into());
        }
        if !(self.reset_time_ms > 0.0) {
            return Err("reset_time_ms must be positive".into());
        }
        if !(self.jitter_ms >= 0.0) {
            return Err("jitter_ms must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AcousticKind {
    Sounded,
    Damped,
    RejectedRetrigger,
}

impl AcousticKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sounded => "sounded",
            Self::Damped => "damped",
            Self::RejectedRetrigger => "rejected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcousticEvent {
    pub kind: AcousticKind,
    pub pitch: u8,
    pub velocity: u8,
    pub time_ms: f64,
}

impl fmt::Display for AcousticEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {:.3}",
            self.kind.as_str(),
            self.pitch,
            self.velocity,
            self.time_ms
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Key {
    down: bool,
    velocity: u8,
    sounds_at: f64,
    last_damped: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct VirtualInstrument {
    model: InstrumentModel,
    rng: ChaCha8Rng,
    keys: [Key; 128],
    log: Vec<AcousticEvent>,
}

impl VirtualInstrument {
    pub fn new(model: InstrumentModel) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            keys: [Key::default(); 128],
            log: Vec::new(),
        }
    }

    pub fn model(&self) -> &InstrumentModel {
        &self.model
    }

    /// Apply one message arriving at `ev.timestamp_ms`. Resulting events may
    /// lie in the future (a hammer in flight).
    pub fn receive(&mut self, ev: MidiEvent) -> Vec<AcousticEvent> {
        let now = ev.timestamp_ms;
        let out = match ev.normalized().kind {
            MidiKind::NoteOn { pitch, velocity } => {
                let key = &mut self.keys[usize::from(pitch & 0x7F)];
                let resetting = key
                    .last_damped
                    .is_some_and(|d| now - d < self.model.reset_time_ms);
                if key.down || resetting {
                    vec![AcousticEvent {
                        kind: AcousticKind::RejectedRetrigger,
                        pitch,
                        velocity,
                        time_ms: now,
                    }]
                } else {
                    let jitter = if self.model.jitter_ms > 0.0 {
                        self.rng.gen_range(-self.model.jitter_ms..=self.model.jitter_ms)
                    } else {
                        0.0
                    };
                    let t = (now + self.model.latency_ms(velocity) + jitter).max(now);
                    *key = Key {
                        down: true,
                        velocity,
                        sounds_at: t,
                        last_damped: key.last_damped,
                    };
                    vec![AcousticEvent {
                        kind: AcousticKind::Sounded,
                        pitch,
                        velocity,
                        time_ms: t,
                    }]
                }
            }
            MidiKind::NoteOff { pitch, .. } => {
                let key = &mut self.keys[usize::from(pitch & 0x7F)];
                if key.down {
                    let t = now.max(key.sounds_at);
                    key.down = false;
                    key.last_damped = Some(t);
                    vec![AcousticEvent {
                        kind: AcousticKind::Damped,
                        pitch,
                        velocity: key.velocity,
                        time_ms: t,
                    }]
                } else {
                    Vec::new()
                }
            }
            MidiKind::Control { .. } => Vec::new(),
        };
        self.log.extend_from_slice(&out);
        out
    }

    /// Acoustic log in time order (stable for equal times).
    pub fn log(&self) -> Vec<AcousticEvent> {
        let mut log = self.log.clone();
        log.sort_by(|a, b| a.time_ms.total_cmp(&b.time_ms));
        log
    }

    pub fn keys_down(&self) -> Vec<u8> {
        (0..128u8).filter(|p| self.keys[usize::from(*p)].down).collect()
    }
}

/// One line per event: `kind pitch velocity time_ms`.
pub fn export_log(log: &[AcousticEvent]) -> String {
    let mut s = String::new();
    for ev in log {
        s.push_str(&ev.to_string());
        s.push('\n');
    }
    s
}

/// Pitches whose last acoustic event is a `Sounded`.
pub fn stuck_keys(log: &[AcousticEvent]) -> Vec<u8> {
    let mut down = [false; 128];
    for ev in log {
        match ev.kind {
            AcousticKind::Sounded => down[usize::from(ev.pitch)] = true,
            AcousticKind::Damped => down[usize::from(ev.pitch)] = false,
            AcousticKind::RejectedRetrigger => {}
        }
    }
    (0..128u8).filter(|p| down[usize::from(*p)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_arithmetic() {
        let mut inst = VirtualInstrument::new(InstrumentModel::default());
        let out = inst.receive(MidiEvent::note_on(60, 100, 0.0));
        assert_eq!(out[0].kind, AcousticKind::Sounded);
        assert!((out[0].time_ms - 60.6).abs() < 1e-9);
    }

    #[test]
    fn reset_rule_rejects_early_retrigger() {
        let model = InstrumentModel {
            reset_time_ms: 60.0,
            ..InstrumentModel::default()
        };
        let mut inst = VirtualInstrument::new(model);
        inst.receive(MidiEvent::note_on(60, 100, 800.0));
        let damp = inst.receive(MidiEvent::note_off(60, 1000.0));
        assert_eq!(damp[0].time_ms, 1000.0);
        let out = inst.receive(MidiEvent::note_on(60, 100, 1030.0));
        assert_eq!(out[0].kind, AcousticKind::RejectedRetrigger);
        let out = inst.receive(MidiEvent::note_on(60, 100, 1060.0));
        assert_eq!(out[0].kind, AcousticKind::Sounded);
    }

    #[test]
    fn louder_simultaneous_sends_sound_earlier() {
        let mut inst = VirtualInstrument::new(InstrumentModel::default());
        let soft = inst.receive(MidiEvent::note_on(60, 30, 0.0))[0];
        let loud = inst.receive(MidiEvent::note_on(64, 110, 0.0))[0];
        assert!(loud.time_ms < soft.time_ms);
    }

    #[test]
    fn damper_waits_for_hammer() {
        let mut inst = VirtualInstrument::new(InstrumentModel::default());
        inst.receive(MidiEvent::note_on(60, 1, 0.0));
        let d = inst.receive(MidiEvent::note_off(60, 10.0))[0];
        assert_eq!(d.time_ms, 120.0);
        assert!(stuck_keys(&inst.log()).is_empty());
    }

    #[test]
    fn jitter_is_seeded() {
        let model = InstrumentModel {
            jitter_ms: 5.0,
            seed: 9,
            ..InstrumentModel::default()
        };
        let run = || {
            let mut inst = VirtualInstrument::new(model);
            for i in 0..20 {
                inst.receive(MidiEvent::note_on(60, 64, i as f64 * 500.0));
                inst.receive(MidiEvent::note_off(60, i as f64 * 500.0 + 200.0));
            }
            export_log(&inst.log())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn export_format() {
        let ev = AcousticEvent {
            kind: AcousticKind::Damped,
            pitch: 61,
            velocity: 80,
            time_ms: 12.5,
        };
        assert_eq!(export_log(&[ev]), "damped 61 80 12.500\n");
    }
}
