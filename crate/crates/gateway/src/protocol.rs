//! Text records exchanged with clients. One record per WebSocket text frame;
//! fields are separated by single spaces. `docs/gateway-protocol.md` is the
//! field-by-field reference.

use std::fmt;

use thiserror::Error;

use duet_core::engine::{Phase, TakeoverReport};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct ProtocolError(pub String);

fn bad(msg: impl Into<String>) -> ProtocolError {
    ProtocolError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Performer,
    Observer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Performer => "performer",
            Role::Observer => "observer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PedalKind {
    Sustain,
    Soft,
}

impl PedalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PedalKind::Sustain => "sustain",
            PedalKind::Soft => "soft",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Hello { role: Role },
    NoteOn { pitch: u8, velocity: u8, client_time_ms: Option<f64> },
    NoteOff { pitch: u8, client_time_ms: Option<f64> },
    Pedal { which: PedalKind, down: bool, client_time_ms: Option<f64> },
    Takeover { client_time_ms: Option<f64> },
    Reclaim { client_time_ms: Option<f64> },
    ConfigGet,
    /// Move a virtual-clock session forward; refused by live sessions.
    Advance { ms: f64 },
}

impl ClientMessage {
    pub fn is_input(&self) -> bool {
        !matches!(self, ClientMessage::Hello { .. } | ClientMessage::ConfigGet)
    }
}

struct Fields<'a> {
    it: std::str::SplitAsciiWhitespace<'a>,
    kind: &'a str,
}

impl<'a> Fields<'a> {
    fn next(&mut self, name: &str) -> Result<&'a str, ProtocolError> {
        self.it
            .next()
            .ok_or_else(|| bad(format!("{}: missing {name}", self.kind)))
    }

    fn u7(&mut self, name: &str) -> Result<u8, ProtocolError> {
        let s = self.next(name)?;
        match s.parse::<u8>() {
            Ok(v) if v <= 127 => Ok(v),
            _ => Err(bad(format!("{}: {name} must be 0..=127, got {s:?}", self.kind))),
        }
    }

    fn time(&mut self, name: &str) -> Result<f64, ProtocolError> {
        let s = self.next(name)?;
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(bad(format!("{}: {name} is not a number: {s:?}", self.kind))),
        }
    }

    fn opt_time(&mut self) -> Result<Option<f64>, ProtocolError> {
        match self.it.next() {
            None => Ok(None),
            Some(s) => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| bad(format!("{}: client time is not a number: {s:?}", self.kind))),
        }
    }

    fn end(mut self) -> Result<(), ProtocolError> {
        match self.it.next() {
            None => Ok(()),
            Some(extra) => Err(bad(format!("{}: unexpected field {extra:?}", self.kind))),
        }
    }
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let mut it = text.split_ascii_whitespace();
        let kind = it.next().ok_or_else(|| bad("empty record"))?;
        let mut f = Fields { it, kind };
        let msg = match kind {
            "hello" => {
                let role = match f.next("role")? {
                    "performer" => Role::Performer,
                    "observer" => Role::Observer,
                    other => return Err(bad(format!("hello: unknown role {other:?}"))),
                };
                ClientMessage::Hello { role }
            }
            "note_on" => {
                let pitch = f.u7("pitch")?;
                let velocity = f.u7("velocity")?;
                ClientMessage::NoteOn {
                    pitch,
                    velocity,
                    client_time_ms: f.opt_time()?,
                }
            }
            "note_off" => ClientMessage::NoteOff {
                pitch: f.u7("pitch")?,
                client_time_ms: f.opt_time()?,
            },
            "pedal" => {
                let which = match f.next("pedal")? {
                    "sustain" => PedalKind::Sustain,
                    "soft" => PedalKind::Soft,
                    other => return Err(bad(format!("pedal: unknown pedal {other:?}"))),
                };
                let down = match f.next("state")? {
                    "down" => true,
                    "up" => false,
                    other => return Err(bad(format!("pedal: state must be down or up, got {other:?}"))),
                };
                ClientMessage::Pedal {
                    which,
                    down,
                    client_time_ms: f.opt_time()?,
                }
            }
            "takeover" => ClientMessage::Takeover {
                client_time_ms: f.opt_time()?,
            },
            "reclaim" => ClientMessage::Reclaim {
                client_time_ms: f.opt_time()?,
            },
            "config_get" => ClientMessage::ConfigGet,
            "advance" => {
                let ms = f.time("ms")?;
                if ms < 0.0 {
                    return Err(bad("advance: ms must be non-negative"));
                }
                ClientMessage::Advance { ms }
            }
            other => return Err(bad(format!("unknown record type {other:?}"))),
        };
        f.end()?;
        Ok(msg)
    }
}

fn opt(f: &mut fmt::Formatter<'_>, t: Option<f64>) -> fmt::Result {
    match t {
        Some(t) => write!(f, " {t:.3}"),
        None => Ok(()),
    }
}

impl fmt::Display for ClientMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ClientMessage::Hello { role } => write!(f, "hello {}", role.as_str()),
            ClientMessage::NoteOn {
                pitch,
                velocity,
                client_time_ms,
            } => {
                write!(f, "note_on {pitch} {velocity}")?;
                opt(f, client_time_ms)
            }
            ClientMessage::NoteOff {
                pitch,
                client_time_ms,
            } => {
                write!(f, "note_off {pitch}")?;
                opt(f, client_time_ms)
            }
            ClientMessage::Pedal {
                which,
                down,
                client_time_ms,
            } => {
                write!(f, "pedal {} {}", which.as_str(), if down { "down" } else { "up" })?;
                opt(f, client_time_ms)
            }
            ClientMessage::Takeover { client_time_ms } => {
                f.write_str("takeover")?;
                opt(f, client_time_ms)
            }
            ClientMessage::Reclaim { client_time_ms } => {
                f.write_str("reclaim")?;
                opt(f, client_time_ms)
            }
            ClientMessage::ConfigGet => f.write_str("config_get"),
            ClientMessage::Advance { ms } => write!(f, "advance {ms:.3}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Welcome { role: Role, time_ms: f64 },
    State { phase: Phase, time_ms: f64 },
    HumanNote { pitch: u8, velocity: u8, on_ms: f64, off_ms: Option<f64> },
    HumanPedal { which: PedalKind, down: bool, time_ms: f64 },
    AiNote {
        id: u64,
        pitch: u8,
        velocity: u8,
        target_on_ms: f64,
        target_off_ms: f64,
        sounded_ms: Option<f64>,
        damped_ms: Option<f64>,
    },
    DroppedNote { id: u64, pitch: u8 },
    TakeoverReport(TakeoverReport),
    Notice { time_ms: f64, text: String },
    Config(Vec<(String, String)>),
    Heartbeat { time_ms: f64 },
    Gap { dropped: u64 },
    Error { text: String },
}

pub fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Listen => "listen",
        Phase::Finalizing => "finalizing",
        Phase::Generating => "generating",
    }
}

fn write_opt(f: &mut fmt::Formatter<'_>, t: Option<f64>) -> fmt::Result {
    match t {
        Some(t) => write!(f, " {t:.3}"),
        None => f.write_str(" -"),
    }
}

impl fmt::Display for ServerMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ServerMessage::Welcome { role, time_ms } => {
                write!(f, "welcome {} {time_ms:.3}", role.as_str())
            }
            ServerMessage::State { phase, time_ms } => {
                write!(f, "state {} {time_ms:.3}", phase_name(*phase))
            }
            ServerMessage::HumanNote {
                pitch,
                velocity,
                on_ms,
                off_ms,
            } => {
                write!(f, "human_note {pitch} {velocity} {on_ms:.3}")?;
                write_opt(f, *off_ms)
            }
            ServerMessage::HumanPedal { which, down, time_ms } => write!(
                f,
                "human_pedal {} {} {time_ms:.3}",
                which.as_str(),
                if *down { "down" } else { "up" }
            ),
            ServerMessage::AiNote {
                id,
                pitch,
                velocity,
                target_on_ms,
                target_off_ms,
                sounded_ms,
                damped_ms,
            } => {
                write!(
                    f,
                    "ai_note {id} {pitch} {velocity} {target_on_ms:.3} {target_off_ms:.3}"
                )?;
                write_opt(f, *sounded_ms)?;
                write_opt(f, *damped_ms)
            }
            ServerMessage::DroppedNote { id, pitch } => write!(f, "dropped_note {id} {pitch}"),
            ServerMessage::TakeoverReport(r) => {
                write!(
                    f,
                    "takeover_report {} {:.3} {:.3}",
                    r.turn, r.signal_time_ms, r.finalize_ms
                )?;
                write_opt(f, r.first_token_ms)?;
                write_opt(f, r.first_note_sound_ms)?;
                write!(
                    f,
                    " {} {} {}",
                    r.hanging_count, r.residual_tokens, r.context_tokens
                )
            }
            ServerMessage::Notice { time_ms, text } => write!(f, "notice {time_ms:.3} {text}"),
            ServerMessage::Config(pairs) => {
                f.write_str("config")?;
                for (k, v) in pairs {
                    write!(f, " {k}={v}")?;
                }
                Ok(())
            }
            ServerMessage::Heartbeat { time_ms } => write!(f, "heartbeat {time_ms:.3}"),
            ServerMessage::Gap { dropped } => write!(f, "gap {dropped}"),
            ServerMessage::Error { text } => write!(f, "error {text}"),
        }
    }
}

/// A server record split into its type and fields, for clients and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub kind: String,
    pub fields: Vec<String>,
}

impl Record {
    pub fn parse(text: &str) -> Option<Self> {
        let mut it = text.split(' ');
        let kind = it.next().filter(|k| !k.is_empty())?.to_string();
        Some(Self {
            kind,
            fields: it.map(str::to_string).collect(),
        })
    }

    pub fn field(&self, i: usize) -> Option<&str> {
        self.fields.get(i).map(String::as_str)
    }

    /// Field `i` as a time, `None` for `-` or a missing field.
    pub fn time(&self, i: usize) -> Option<f64> {
        self.field(i).and_then(|s| s.parse().ok())
    }

    /// The rest of the record from field `i`, for free-text records.
    pub fn text_from(&self, i: usize) -> String {
        self.fields.get(i..).map(|f| f.join(" ")).unwrap_or_default()
    }
}
