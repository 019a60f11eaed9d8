//! What the gateway talks to: a real-time session or a virtual-clock
//! simulation that clients step explicitly.

use duet_core::clock::SharedClock;
use duet_core::engine::EngineStats;
use duet_core::host::{InstrumentSink, OutputSink, PredictingSink, SessionEvent};
use duet_core::instrument::AcousticEvent;
use duet_core::midi::{MidiEvent, MidiKind};
use duet_core::runtime::{InputHandle, LiveSession};
use duet_core::sim::Simulation;

use std::sync::mpsc::Receiver;

/// Sinks that can report what the instrument actually played.
pub trait AcousticSource {
    fn acoustic_log(&self) -> Option<Vec<AcousticEvent>>;
}

impl AcousticSource for InstrumentSink {
    fn acoustic_log(&self) -> Option<Vec<AcousticEvent>> {
        Some(self.instrument.log())
    }
}

impl<W> AcousticSource for PredictingSink<W> {
    fn acoustic_log(&self) -> Option<Vec<AcousticEvent>> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct Finished {
    /// Everything the session observed, in order.
    pub events: Vec<SessionEvent>,
    pub acoustic: Option<Vec<AcousticEvent>>,
    pub stats: EngineStats,
    pub end_ms: f64,
}

pub trait Driver: Send {
    /// Clock used to stamp input on receipt.
    fn clock(&self) -> SharedClock;
    /// Hand performer input to the engine. Returns the stamp it was given.
    fn ingest(&mut self, kind: MidiKind, received_ms: f64) -> Result<f64, String>;
    /// Move a virtual clock forward.
    fn advance(&mut self, ms: f64) -> Result<(), String>;
    /// Session events observed since the last call.
    fn poll(&mut self) -> Vec<SessionEvent>;
    fn finish(self: Box<Self>) -> Finished;
}

pub struct LiveDriver<S: OutputSink + Send + 'static> {
    session: LiveSession<S>,
    input: InputHandle,
    events: Receiver<SessionEvent>,
    clock: SharedClock,
}

impl<S: OutputSink + Send + 'static> LiveDriver<S> {
    pub fn new(mut session: LiveSession<S>, clock: SharedClock) -> Self {
        let events = session.take_events().expect("session events already taken");
        Self {
            input: session.input(),
            session,
            events,
            clock,
        }
    }
}

impl<S: OutputSink + AcousticSource + Send + 'static> Driver for LiveDriver<S> {
    fn clock(&self) -> SharedClock {
        self.clock.clone()
    }

    fn ingest(&mut self, kind: MidiKind, received_ms: f64) -> Result<f64, String> {
        self.input
            .send_at(kind, received_ms)
            .ok_or_else(|| "session has stopped".to_string())
    }

    fn advance(&mut self, _ms: f64) -> Result<(), String> {
        Err("advance is only available on virtual sessions".into())
    }

    fn poll(&mut self) -> Vec<SessionEvent> {
        self.events.try_iter().collect()
    }

    fn finish(self: Box<Self>) -> Finished {
        let summary = self.session.stop();
        Finished {
            events: self.events.try_iter().collect(),
            acoustic: summary.sink.acoustic_log(),
            stats: summary.stats,
            end_ms: summary.end_ms,
        }
    }
}

/// Input is stamped with the virtual time at ingestion, not at receipt, so
/// a session is reproduced exactly from the order of `advance` and input
/// records.
pub struct VirtualDriver {
    sim: Simulation,
    clock: SharedClock,
}

impl VirtualDriver {
    /// `clock` must be the one the simulation runs on.
    pub fn new(sim: Simulation, clock: SharedClock) -> Self {
        Self { sim, clock }
    }
}

impl Driver for VirtualDriver {
    fn clock(&self) -> SharedClock {
        self.clock.clone()
    }

    fn ingest(&mut self, kind: MidiKind, _received_ms: f64) -> Result<f64, String> {
        let now = self.sim.now_ms();
        self.sim.push_input(MidiEvent { kind, timestamp_ms: now });
        self.sim.run_until(now);
        Ok(now)
    }

    fn advance(&mut self, ms: f64) -> Result<(), String> {
        let target = self.sim.now_ms() + ms;
        self.sim.run_until(target);
        Ok(())
    }

    fn poll(&mut self) -> Vec<SessionEvent> {
        self.sim.drain_events()
    }

    fn finish(mut self: Box<Self>) -> Finished {
        let out = self.sim.outcome();
        Finished {
            events: self.sim.drain_events(),
            acoustic: Some(out.acoustic),
            stats: out.stats,
            end_ms: out.end_ms,
        }
    }
}
