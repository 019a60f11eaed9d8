//! Standard MIDI File import/export for session recording and replay.
//!
//! Files are written as format 0 at 480 ticks per quarter with a tempo of
//! 480000 us/quarter, so one tick is exactly one millisecond. Performer notes
//! go on channel 0 and generated notes on channel 1. The reader accepts
//! formats 0 and 1, running status, tempo maps and SMPTE division.

use thiserror::Error;

use super::event::{MidiEvent, MidiKind};
use super::tracker::{Note, Pedal, PedalConfig, PedalEvent, PedalState, TrackerOutput, TrackerState};

pub const TICKS_PER_QUARTER: u16 = 480;
const TEMPO_US_PER_QUARTER: u32 = 480_000;
pub const HUMAN_CHANNEL: u8 = 0;
pub const GENERATED_CHANNEL: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed MIDI file at byte {offset}: {kind}")]
pub struct SmfError {
    pub offset: usize,
    pub kind: SmfErrorKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmfErrorKind {
    #[error("expected chunk {0}")]
    MissingChunk(&'static str),
    #[error("unexpected end of data")]
    Truncated,
    #[error("variable-length quantity longer than 4 bytes")]
    VarintTooLong,
    #[error("data byte with no running status")]
    NoRunningStatus,
    #[error("unsupported format {0}")]
    UnsupportedFormat(u16),
    #[error("invalid header")]
    BadHeader,
}

/// A channel message decoded from a file, with its absolute time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FileEvent {
    pub channel: u8,
    pub event: MidiEvent,
}

/// Notes and pedal changes of a recorded session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recording {
    pub notes: Vec<Note>,
    /// Parallel to `notes`: true for generated notes.
    pub generated: Vec<bool>,
    pub pedals: Vec<PedalEvent>,
}

impl Recording {
    pub fn human_notes(&self) -> impl Iterator<Item = &Note> {
        self.notes
            .iter()
            .zip(&self.generated)
            .filter(|(_, g)| !**g)
            .map(|(n, _)| n)
    }

    pub fn generated_notes(&self) -> impl Iterator<Item = &Note> {
        self.notes
            .iter()
            .zip(&self.generated)
            .filter(|(_, g)| **g)
            .map(|(n, _)| n)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, kind: SmfErrorKind) -> SmfError {
        SmfError {
            offset: self.pos,
            kind,
        }
    }

    fn u8(&mut self) -> Result<u8, SmfError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| self.err(SmfErrorKind::Truncated))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SmfError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(SmfErrorKind::Truncated));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SmfError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, SmfError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varint(&mut self) -> Result<u32, SmfError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7F);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(SmfError {
            offset: start,
            kind: SmfErrorKind::VarintTooLong,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Division {
    Metrical(u16),
    /// Ticks per second.
    Timecode(f64),
}

struct RawEvent {
    tick: u64,
    track: usize,
    order: usize,
    body: RawBody,
}

enum RawBody {
    Channel(u8, MidiKind),
    Tempo(u32),
}

/// Decode every note and control message of a format 0/1 file, in time order.
pub fn read_events(bytes: &[u8]) -> Result<Vec<FileEvent>, SmfError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| r.err(SmfErrorKind::MissingChunk("MThd")))? != b"MThd" {
        return Err(SmfError {
            offset: 0,
            kind: SmfErrorKind::MissingChunk("MThd"),
        });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(r.err(SmfErrorKind::BadHeader));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    r.pos = header_start + header_len;
    if format > 1 {
        return Err(SmfError {
            offset: header_start,
            kind: SmfErrorKind::UnsupportedFormat(format),
        });
    }
    let division = if division & 0x8000 != 0 {
        let fps = -((division >> 8) as u8 as i8) as f64;
        let sub = (division & 0xFF) as f64;
        Division::Timecode(fps * sub)
    } else if division == 0 {
        return Err(SmfError {
            offset: header_start + 4,
            kind: SmfErrorKind::BadHeader,
        });
    } else {
        Division::Metrical(division)
    };

    let mut raw = Vec::new();
    let mut track = 0usize;
    while track < ntracks as usize && r.pos < bytes.len() {
        let id_pos = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if id != b"MTrk" {
            // Unknown chunks are skipped.
            r.take(len)?;
            if id_pos == r.pos {
                break;
            }
            continue;
        }
        let end = r.pos + len;
        if end > bytes.len() {
            return Err(SmfError {
                offset: id_pos + 4,
                kind: SmfErrorKind::Truncated,
            });
        }
        parse_track(&mut r, end, track, &mut raw)?;
        r.pos = end;
        track += 1;
    }
    if track < ntracks as usize {
        return Err(r.err(SmfErrorKind::MissingChunk("MTrk")));
    }

    raw.sort_by_key(|e| (e.tick, e.track, e.order));
    let mut out = Vec::new();
    // Tempo-map walk: ms at the last tempo change plus ticks since.
    let mut tempo = 500_000u32;
    let mut seg_tick = 0u64;
    let mut seg_ms = 0f64;
    let ms_at = |tick: u64, tempo: u32, seg_tick: u64, seg_ms: f64| match division {
        Division::Metrical(tpq) => {
            seg_ms + (tick - seg_tick) as f64 * tempo as f64 / 1000.0 / tpq as f64
        }
        Division::Timecode(tps) => tick as f64 * 1000.0 / tps,
    };
    for e in raw {
        let t = ms_at(e.tick, tempo, seg_tick, seg_ms);
        match e.body {
            RawBody::Tempo(us) => {
                seg_ms = t;
                seg_tick = e.tick;
                tempo = us;
            }
            RawBody::Channel(channel, kind) => out.push(FileEvent {
                channel,
                event: MidiEvent {
                    kind,
                    timestamp_ms: t,
                },
            }),
        }
    }
    Ok(out)
}

fn parse_track(
    r: &mut Reader<'_>,
    end: usize,
    track: usize,
    raw: &mut Vec<RawEvent>,
) -> Result<(), SmfError> {
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut order = 0usize;
    while r.pos < end {
        tick += u64::from(r.varint()?);
        let status_pos = r.pos;
        let first = r.u8()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            let s = running.ok_or(SmfError {
                offset: status_pos,
                kind: SmfErrorKind::NoRunningStatus,
            })?;
            (s, Some(first))
        };
        match status {
            0xFF => {
                running = None;
                let meta = r.u8()?;
                let len = r.varint()? as usize;
                let data = r.take(len)?;
                if meta == 0x51 && len == 3 {
                    let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                    raw.push(RawEvent {
                        tick,
                        track,
                        order,
                        body: RawBody::Tempo(us),
                    });
                    order += 1;
                } else if meta == 0x2F {
                    return Ok(());
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.varint()? as usize;
                r.take(len)?;
            }
            _ => {
                running = Some(status);
                let a = match first_data {
                    Some(b) => b,
                    None => r.u8()?,
                };
                let kind = status & 0xF0;
                let channel = status & 0x0F;
                let b = if matches!(kind, 0xC0 | 0xD0) { 0 } else { r.u8()? };
                let msg = match kind {
                    0x90 if b == 0 => Some(MidiKind::NoteOff { pitch: a, velocity: 0 }),
                    0x90 => Some(MidiKind::NoteOn { pitch: a, velocity: b }),
                    0x80 => Some(MidiKind::NoteOff { pitch: a, velocity: b }),
                    0xB0 => Some(MidiKind::Control { controller: a, value: b }),
                    _ => None,
                };
                if let Some(msg) = msg {
                    raw.push(RawEvent {
                        tick,
                        track,
                        order,
                        body: RawBody::Channel(channel, msg),
                    });
                    order += 1;
                }
            }
        }
    }
    Ok(())
}

/// Load a recorded session: notes (channel 1 marks generated ones) and pedal
/// changes. Notes still open at end of file are dropped.
pub fn load_smf(bytes: &[u8]) -> Result<Recording, SmfError> {
    let events = read_events(bytes)?;
    let mut trackers = [
        TrackerState::new(PedalConfig::default()),
        TrackerState::new(PedalConfig::default()),
    ];
    let mut tagged: Vec<(Note, bool)> = Vec::new();
    let mut pedals = Vec::new();
    for fe in events {
        let generated = fe.channel == GENERATED_CHANNEL;
        let tr = &mut trackers[usize::from(generated)];
        for out in tr.ingest(fe.event).expect("file events are time ordered") {
            if let TrackerOutput::FinalizedNote(n) = out {
                tagged.push((n, generated));
            }
        }
        if let MidiKind::Control { controller, value } = fe.event.kind {
            let cfg = PedalConfig::default();
            let on = value >= cfg.threshold;
            let pedal = if controller == cfg.sustain_controller {
                Some(Pedal::Sustain)
            } else if controller == cfg.soft_controller {
                Some(Pedal::SoftUnaCorda)
            } else {
                None
            };
            if let Some(pedal) = pedal {
                let last = pedals.iter().rev().find(|p: &&PedalEvent| p.pedal == pedal);
                if last.map(|p| p.is_on()) != Some(on) && (on || last.is_some()) {
                    pedals.push(PedalEvent {
                        pedal,
                        state: if on {
                            PedalState::On
                        } else {
                            PedalState::Off
                        },
                        time_ms: fe.event.timestamp_ms,
                    });
                }
            }
        }
    }
    tagged.sort_by(|a, b| {
        a.0.onset_ms
            .total_cmp(&b.0.onset_ms)
            .then(a.1.cmp(&b.1))
            .then(a.0.pitch.cmp(&b.0.pitch))
    });
    Ok(Recording {
        notes: tagged.iter().map(|(n, _)| *n).collect(),
        generated: tagged.iter().map(|(_, g)| *g).collect(),
        pedals,
    })
}

fn push_varint(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut i = 3;
    buf[i] = (v & 0x7F) as u8;
    v >>= 7;
    while v > 0 {
        i -= 1;
        buf[i] = ((v & 0x7F) as u8) | 0x80;
        v >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn to_tick(ms: f64) -> u64 {
    ms.max(0.0).round() as u64
}

/// Write channel events (already carrying their channel) as a format 0 file.
pub fn write_events(events: &[FileEvent]) -> Vec<u8> {
    let mut timed: Vec<(u64, usize, [u8; 3])> = events
        .iter()
        .enumerate()
        .map(|(i, fe)| (to_tick(fe.event.timestamp_ms), i, fe.event.to_bytes(fe.channel)))
        .collect();
    timed.sort_by_key(|(t, i, _)| (*t, *i));

    let mut track = Vec::new();
    // Tempo: 1 tick == 1 ms at 480 ticks per quarter.
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
    track.extend_from_slice(&TEMPO_US_PER_QUARTER.to_be_bytes()[1..]);
    let mut last = 0u64;
    for (tick, _, bytes) in timed {
        push_varint(&mut track, (tick - last) as u32);
        track.extend_from_slice(&bytes);
        last = tick;
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&TICKS_PER_QUARTER.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

/// Serialize a session. Pedal events are written on the performer channel.
pub fn save_smf(rec: &Recording) -> Vec<u8> {
    let cfg = PedalConfig::default();
    let mut events = Vec::with_capacity(rec.notes.len() * 2 + rec.pedals.len());
    // Offs before ons at equal ticks keeps back-to-back notes distinct.
    for (i, note) in rec.notes.iter().enumerate() {
        let Some(dur) = note.duration_ms else { continue };
        let channel = if rec.generated.get(i).copied().unwrap_or(false) {
            GENERATED_CHANNEL
        } else {
            HUMAN_CHANNEL
        };
        events.push((
            1u8,
            FileEvent {
                channel,
                event: MidiEvent::note_on(note.pitch, note.velocity.max(1), note.onset_ms),
            },
        ));
        events.push((
            0u8,
            FileEvent {
                channel,
                event: MidiEvent::note_off(note.pitch, note.onset_ms + dur),
            },
        ));
    }
    for p in &rec.pedals {
        let controller = match p.pedal {
            Pedal::Sustain => cfg.sustain_controller,
            Pedal::SoftUnaCorda => cfg.soft_controller,
        };
        events.push((
            0u8,
            FileEvent {
                channel: HUMAN_CHANNEL,
                event: MidiEvent::control(controller, if p.is_on() { 127 } else { 0 }, p.time_ms),
            },
        ));
    }
    events.sort_by(|a, b| {
        to_tick(a.1.event.timestamp_ms)
            .cmp(&to_tick(b.1.event.timestamp_ms))
            .then(a.0.cmp(&b.0))
    });
    let ordered: Vec<FileEvent> = events.into_iter().map(|(_, e)| e).collect();
    write_events(&ordered)
}
