//! Timestamped MIDI wire events and a byte-stream parser with running status.

use std::fmt;

pub const STATUS_NOTE_OFF: u8 = 0x80;
pub const STATUS_NOTE_ON: u8 = 0x90;
pub const STATUS_CONTROL: u8 = 0xB0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MidiKind {
    NoteOn { pitch: u8, velocity: u8 },
    NoteOff { pitch: u8, velocity: u8 },
    Control { controller: u8, value: u8 },
}

/// A channel message stamped with the session clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidiEvent {
    pub kind: MidiKind,
    pub timestamp_ms: f64,
}

impl MidiEvent {
    /// A NoteOn with velocity 0 is a NoteOff on the wire; it is normalized here.
    pub fn note_on(pitch: u8, velocity: u8, timestamp_ms: f64) -> Self {
        let kind = if velocity == 0 {
            MidiKind::NoteOff { pitch, velocity: 0 }
        } else {
            MidiKind::NoteOn { pitch, velocity }
        };
        Self { kind, timestamp_ms }
    }

    pub fn note_off(pitch: u8, timestamp_ms: f64) -> Self {
        Self {
            kind: MidiKind::NoteOff { pitch, velocity: 0 },
            timestamp_ms,
        }
    }

    pub fn control(controller: u8, value: u8, timestamp_ms: f64) -> Self {
        Self {
            kind: MidiKind::Control { controller, value },
            timestamp_ms,
        }
    }

    pub fn normalized(self) -> Self {
        match self.kind {
            MidiKind::NoteOn { pitch, velocity: 0 } => Self::note_off(pitch, self.timestamp_ms),
            _ => self,
        }
    }

    pub fn pitch(&self) -> Option<u8> {
        match self.kind {
            MidiKind::NoteOn { pitch, .. } | MidiKind::NoteOff { pitch, .. } => Some(pitch),
            MidiKind::Control { .. } => None,
        }
    }

    pub fn at(mut self, timestamp_ms: f64) -> Self {
        self.timestamp_ms = timestamp_ms;
        self
    }

    pub fn to_bytes(&self, channel: u8) -> [u8; 3] {
        let ch = channel & 0x0F;
        match self.kind {
            MidiKind::NoteOn { pitch, velocity } => {
                [STATUS_NOTE_ON | ch, pitch & 0x7F, velocity & 0x7F]
            }
            MidiKind::NoteOff { pitch, velocity } => {
                [STATUS_NOTE_OFF | ch, pitch & 0x7F, velocity & 0x7F]
            }
            MidiKind::Control { controller, value } => {
                [STATUS_CONTROL | ch, controller & 0x7F, value & 0x7F]
            }
        }
    }
}

impl fmt::Display for MidiEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            MidiKind::NoteOn { pitch, velocity } => {
                write!(f, "{:.3} on {} {}", self.timestamp_ms, pitch, velocity)
            }
            MidiKind::NoteOff { pitch, .. } => write!(f, "{:.3} off {}", self.timestamp_ms, pitch),
            MidiKind::Control { controller, value } => {
                write!(f, "{:.3} cc {} {}", self.timestamp_ms, controller, value)
            }
        }
    }
}

/// Incremental decoder for a raw MIDI byte stream (a port or device node).
///
/// Handles running status, skips system common/exclusive messages and lets
/// realtime bytes (0xF8..=0xFF) pass through anywhere, including mid-message.
/// Channel messages other than note and control are consumed and dropped.
#[derive(Debug, Default)]
pub struct WireParser {
    running: Option<u8>,
    data: [u8; 2],
    len: usize,
    in_sysex: bool,
}

impl WireParser {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed one byte; returns `(channel, kind)` when a message completes.
    pub fn push(&mut self, byte: u8) -> Option<(u8, MidiKind)> {
        if byte >= 0xF8 {
            return None;
        }
        if byte & 0x80 != 0 {
            self.len = 0;
            match byte {
                0xF0 => {
                    self.in_sysex = true;
                    self.running = None;
                }
                0xF7 => self.in_sysex = false,
                0xF1..=0xF6 => {
                    self.in_sysex = false;
                    self.running = None;
                }
                _ => {
                    self.in_sysex = false;
                    self.running = Some(byte);
                }
            }
            return None;
        }
        if self.in_sysex {
            return None;
        }
        let status = self.running?;
        self.data[self.len] = byte;
        self.len += 1;
        let needed = match status & 0xF0 {
            0xC0 | 0xD0 => 1,
            _ => 2,
        };
        if self.len < needed {
            return None;
        }
        self.len = 0;
        let channel = status & 0x0F;
        let (a, b) = (self.data[0], self.data[1]);
        match status & 0xF0 {
            STATUS_NOTE_ON if b == 0 => Some((channel, MidiKind::NoteOff { pitch: a, velocity: 0 })),
            STATUS_NOTE_ON => Some((channel, MidiKind::NoteOn { pitch: a, velocity: b })),
            STATUS_NOTE_OFF => Some((channel, MidiKind::NoteOff { pitch: a, velocity: b })),
            STATUS_CONTROL => Some((channel, MidiKind::Control { controller: a, value: b })),
            _ => None,
        }
    }
}
