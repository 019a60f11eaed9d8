//! Turns session events into broadcast records.

use std::collections::HashMap;

use duet_core::engine::{EngineOutput, Feedback, Phase};
use duet_core::host::SessionEvent;
use duet_core::midi::{MidiKind, PedalConfig};

use crate::protocol::{PedalKind, ServerMessage};

#[derive(Debug, Clone, Copy)]
struct AiNote {
    pitch: u8,
    velocity: u8,
    target_on_ms: f64,
    target_off_ms: f64,
    sounded_ms: Option<f64>,
}

/// Human notes are announced twice (open at the strike, closed at the
/// release); generated notes once when scheduled and again when they sound
/// and when they are damped.
#[derive(Debug)]
pub struct Feed {
    pedals: PedalConfig,
    phase: Phase,
    human_open: [Option<(u8, f64)>; 128],
    sustain_down: bool,
    soft_down: bool,
    ai: HashMap<u64, AiNote>,
}

impl Feed {
    pub fn new(pedals: PedalConfig) -> Self {
        Self {
            pedals,
            phase: Phase::Listen,
            human_open: [None; 128],
            sustain_down: false,
            soft_down: false,
            ai: HashMap::new(),
        }
    }

    /// Phase as of the last translated event.
    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn translate(&mut self, ev: &SessionEvent) -> Vec<ServerMessage> {
        match ev {
            SessionEvent::Input(ev) => self.input(ev.kind, ev.timestamp_ms),
            SessionEvent::Output(out) => self.output(out),
            SessionEvent::Feedback(fb) => self.feedback(fb),
            SessionEvent::Emitted(_) => Vec::new(),
        }
    }

    fn input(&mut self, kind: MidiKind, t: f64) -> Vec<ServerMessage> {
        match kind {
            MidiKind::NoteOn { pitch, velocity } if velocity > 0 => {
                self.human_open[usize::from(pitch)] = Some((velocity, t));
                vec![ServerMessage::HumanNote {
                    pitch,
                    velocity,
                    on_ms: t,
                    off_ms: None,
                }]
            }
            MidiKind::NoteOn { pitch, .. } | MidiKind::NoteOff { pitch, .. } => {
                match self.human_open[usize::from(pitch)].take() {
                    Some((velocity, on_ms)) => vec![ServerMessage::HumanNote {
                        pitch,
                        velocity,
                        on_ms,
                        off_ms: Some(t),
                    }],
                    None => Vec::new(),
                }
            }
            MidiKind::Control { controller, value } => {
                let down = value >= self.pedals.threshold;
                let (which, state) = if controller == self.pedals.sustain_controller {
                    (PedalKind::Sustain, &mut self.sustain_down)
                } else if controller == self.pedals.soft_controller {
                    (PedalKind::Soft, &mut self.soft_down)
                } else {
                    return Vec::new();
                };
                if *state == down {
                    return Vec::new();
                }
                *state = down;
                vec![ServerMessage::HumanPedal {
                    which,
                    down,
                    time_ms: t,
                }]
            }
        }
    }

    fn output(&mut self, out: &EngineOutput) -> Vec<ServerMessage> {
        match out {
            EngineOutput::Phase { phase, time_ms } => {
                self.phase = *phase;
                vec![ServerMessage::State {
                    phase: *phase,
                    time_ms: *time_ms,
                }]
            }
            &EngineOutput::ScheduleNote {
                id,
                pitch,
                velocity,
                target_on_ms,
                target_off_ms,
            } => {
                let note = AiNote {
                    pitch,
                    velocity,
                    target_on_ms,
                    target_off_ms,
                    sounded_ms: None,
                };
                self.ai.insert(id, note);
                vec![ai_note(id, &note, None)]
            }
            EngineOutput::Report(r) => vec![ServerMessage::TakeoverReport(r.clone())],
            EngineOutput::Notice { time_ms, text } => vec![ServerMessage::Notice {
                time_ms: *time_ms,
                text: text.clone(),
            }],
            EngineOutput::SchedulePedal { .. }
            | EngineOutput::CancelTurn { .. }
            | EngineOutput::FlushSounding { .. } => Vec::new(),
        }
    }

    fn feedback(&mut self, fb: &Feedback) -> Vec<ServerMessage> {
        match *fb {
            Feedback::Sounded { id, time_ms } => match self.ai.get_mut(&id) {
                Some(note) => {
                    note.sounded_ms = Some(time_ms);
                    vec![ai_note(id, note, None)]
                }
                None => Vec::new(),
            },
            Feedback::Damped { id, time_ms } => match self.ai.remove(&id) {
                Some(note) => vec![ai_note(id, &note, Some(time_ms))],
                None => Vec::new(),
            },
            Feedback::Dropped { id } => match self.ai.remove(&id) {
                Some(note) => vec![ServerMessage::DroppedNote {
                    id,
                    pitch: note.pitch,
                }],
                None => Vec::new(),
            },
            Feedback::PedalSent { .. } => Vec::new(),
        }
    }
}

fn ai_note(id: u64, n: &AiNote, damped_ms: Option<f64>) -> ServerMessage {
    ServerMessage::AiNote {
        id,
        pitch: n.pitch,
        velocity: n.velocity,
        target_on_ms: n.target_on_ms,
        target_off_ms: n.target_off_ms,
        sounded_ms: n.sounded_ms,
        damped_ms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use duet_core::midi::MidiEvent;

    #[test]
    fn human_notes_open_then_close() {
        let mut feed = Feed::new(PedalConfig::default());
        let on = feed.translate(&SessionEvent::Input(MidiEvent::note_on(60, 70, 10.0)));
        let off = feed.translate(&SessionEvent::Input(MidiEvent::note_off(60, 90.0)));
        let stray = feed.translate(&SessionEvent::Input(MidiEvent::note_off(61, 95.0)));
        assert_eq!(on[0].to_string(), "human_note 60 70 10.000 -");
        assert_eq!(off[0].to_string(), "human_note 60 70 10.000 90.000");
        assert!(stray.is_empty());
    }

    #[test]
    fn ai_note_lifecycle() {
        let mut feed = Feed::new(PedalConfig::default());
        let id = (1 << 32) | 3;
        let sched = EngineOutput::ScheduleNote {
            id,
            pitch: 64,
            velocity: 50,
            target_on_ms: 100.0,
            target_off_ms: 300.0,
        };
        let lines: Vec<String> = [
            SessionEvent::Output(sched),
            SessionEvent::Feedback(Feedback::Sounded { id, time_ms: 101.0 }),
            SessionEvent::Feedback(Feedback::Damped { id, time_ms: 305.0 }),
            SessionEvent::Feedback(Feedback::Dropped { id }),
        ]
        .iter()
        .flat_map(|e| feed.translate(e))
        .map(|m| m.to_string())
        .collect();
        assert_eq!(
            lines,
            [
                format!("ai_note {id} 64 50 100.000 300.000 - -"),
                format!("ai_note {id} 64 50 100.000 300.000 101.000 -"),
                format!("ai_note {id} 64 50 100.000 300.000 101.000 305.000"),
            ]
        );
    }

    #[test]
    fn pedal_changes_are_edges() {
        let mut feed = Feed::new(PedalConfig::default());
        let soft = PedalConfig::default().soft_controller;
        let n: usize = [127, 127, 0, 0, 100]
            .iter()
            .map(|&v| feed.translate(&SessionEvent::Input(MidiEvent::control(soft, v, 0.0))).len())
            .sum();
        assert_eq!(n, 3);
    }
}
