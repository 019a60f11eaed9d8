//! MIDI ports as raw device files (`/dev/snd/midiC1D0`, `/dev/midi1`, or a
//! FIFO for testing).

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use log::debug;

use duet_core::midi::{MidiEvent, MidiKind, WireParser};
use duet_core::scheduler::ProbeTarget;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Port {
    pub path: PathBuf,
    pub name: String,
}

fn card_name(card: &str) -> Option<String> {
    let id = fs::read_to_string(format!("/proc/asound/card{card}/id")).ok()?;
    Some(id.trim().to_string())
}

/// Raw MIDI devices present on this machine, with the sound card's name
/// where the kernel reports one.
pub fn list_ports() -> Vec<Port> {
    let mut ports = Vec::new();
    if let Ok(dir) = fs::read_dir("/dev/snd") {
        for entry in dir.flatten() {
            let file = entry.file_name().to_string_lossy().to_string();
            if let Some(rest) = file.strip_prefix("midiC") {
                let card = rest.split('D').next().unwrap_or_default().to_string();
                let name = card_name(&card).unwrap_or_else(|| format!("card {card}"));
                ports.push(Port {
                    path: entry.path(),
                    name,
                });
            }
        }
    }
    if let Ok(dir) = fs::read_dir("/dev") {
        for entry in dir.flatten() {
            let file = entry.file_name().to_string_lossy().to_string();
            if file.starts_with("midi") || file.starts_with("amidi") {
                ports.push(Port {
                    path: entry.path(),
                    name: file,
                });
            }
        }
    }
    ports.sort_by(|a, b| a.path.cmp(&b.path));
    ports
}

fn device_error(what: &str, path: Option<&Path>, detail: &str) -> CliError {
    let ports = list_ports();
    let listing = if ports.is_empty() {
        "no MIDI ports found".to_string()
    } else {
        let lines: Vec<String> = ports
            .iter()
            .map(|p| format!("  {}  ({})", p.path.display(), p.name))
            .collect();
        format!("available ports:\n{}", lines.join("\n"))
    };
    let which = path.map_or("not configured".to_string(), |p| p.display().to_string());
    CliError::Device(format!("{what} port {which}: {detail}\n{listing}"))
}

pub fn open_input(path: Option<&Path>) -> Result<File, CliError> {
    let path = path.ok_or_else(|| device_error("input", None, "pass --midi-in or set midi.in"))?;
    File::open(path).map_err(|e| device_error("input", Some(path), &e.to_string()))
}

pub fn open_output(path: Option<&Path>) -> Result<File, CliError> {
    let path = path.ok_or_else(|| device_error("output", None, "pass --midi-out or set midi.out"))?;
    OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(|e| device_error("output", Some(path), &e.to_string()))
}

/// Decode a byte stream on its own thread until it ends. Each message is
/// handed over as soon as its last byte arrives.
pub fn spawn_reader<R: Read + Send + 'static>(
    mut input: R,
    mut on_message: impl FnMut(u8, MidiKind) -> bool + Send + 'static,
) -> thread::JoinHandle<()> {
    thread::Builder::new()
        .name("midi-in".into())
        .spawn(move || {
            let mut parser = WireParser::new();
            let mut buf = [0u8; 256];
            loop {
                let n = match input.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => n,
                    Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                    Err(e) => {
                        debug!("midi input closed: {e}");
                        break;
                    }
                };
                for &b in &buf[..n] {
                    if let Some((channel, kind)) = parser.push(b) {
                        if !on_message(channel, kind) {
                            return;
                        }
                    }
                }
            }
        })
        .expect("spawn midi reader")
}

/// Calibration against a player piano that echoes the notes it plays on its
/// MIDI output, as reproducing pianos do from their key sensors. The echo of
/// the probe's NoteOn marks the strike.
pub struct PortProbe<W: Write> {
    output: W,
    echoes: Receiver<(Instant, u8)>,
    start: Instant,
    timeout: Duration,
}

impl<W: Write> PortProbe<W> {
    pub fn new<R: Read + Send + 'static>(input: R, output: W, timeout: Duration) -> Self {
        let (tx, rx) = mpsc::channel();
        spawn_reader(input, move |_, kind| match kind {
            MidiKind::NoteOn { pitch, velocity } if velocity > 0 => tx.send((Instant::now(), pitch)).is_ok(),
            _ => true,
        });
        Self {
            output,
            echoes: rx,
            start: Instant::now(),
            timeout,
        }
    }

    fn send(&mut self, ev: MidiEvent) -> std::io::Result<()> {
        self.output.write_all(&ev.to_bytes(0))?;
        self.output.flush()
    }

    fn ms_since_start(&self, t: Instant) -> f64 {
        t.duration_since(self.start).as_secs_f64() * 1000.0
    }
}

impl<W: Write> ProbeTarget for PortProbe<W> {
    fn name(&self) -> String {
        "midi-port".into()
    }

    fn probe(&mut self, pitch: u8, velocity: u8, send_ms: f64) -> Option<f64> {
        let due = self.start + Duration::from_secs_f64(send_ms.max(0.0) / 1000.0);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        // Stale echoes from an earlier probe are not this strike.
        while self.echoes.try_recv().is_ok() {}
        let sent = Instant::now();
        self.send(MidiEvent::note_on(pitch, velocity, 0.0)).ok()?;
        let deadline = sent + self.timeout;
        let heard = loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.echoes.recv_timeout(left) {
                Ok((at, p)) if p == pitch => break Some(at),
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => break None,
            }
        };
        let _ = self.send(MidiEvent::note_off(pitch, 0.0));
        let heard = heard?;
        Some(send_ms + self.ms_since_start(heard) - self.ms_since_start(sent))
    }
}
