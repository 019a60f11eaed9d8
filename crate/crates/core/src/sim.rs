//! Deterministic discrete-event session: scripted performer input, the
//! engine on a mock backend, the scheduler and the virtual instrument, all on
//! one virtual clock.
//!
//! The engine runs as the single inference activity: while a prefill or
//! decode step charges its cost to the clock, input and feedback wait, but
//! the scheduler is treated as its own activity and ticks retroactively at
//! the quantized send times that passed during the step.

use std::collections::VecDeque;

use thiserror::Error;

use crate::backend::{Backend, BackendSession, CostModel, MarkovModel, MockBackend};
use crate::clock::{SharedClock, VirtualClock};
use crate::engine::{
    Engine, EngineConfig, EngineError, EngineOutput, EngineStats, Phase, TakeoverReport,
};
use crate::host::{InstrumentSink, Playback, SessionEvent};
use crate::instrument::{AcousticEvent, InstrumentModel, VirtualInstrument};
use crate::midi::{MidiEvent, Note, PedalEvent};
use crate::scheduler::{
    all_velocities, run_calibration, CalibrationError, CalibrationTable, Emission, Scheduler,
    SchedulerConfig,
};
use crate::tokenizer::{Token, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub engine: EngineConfig,
    pub scheduler: SchedulerConfig,
    pub instrument: InstrumentModel,
    pub cost: CostModel,
    /// Used as given; otherwise measured on a fresh copy of the instrument.
    pub table: Option<CalibrationTable>,
    pub calibration_repeats: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            scheduler: SchedulerConfig::default(),
            instrument: InstrumentModel::default(),
            cost: CostModel::free(),
            table: None,
            calibration_repeats: 1,
        }
    }
}

impl SimConfig {
    /// The configured table, or one measured with `run_calibration`.
    pub fn calibration(&self) -> Result<CalibrationTable, CalibrationError> {
        match &self.table {
            Some(t) => Ok(t.clone()),
            None => {
                let mut probe = VirtualInstrument::new(self.instrument);
                run_calibration(&mut probe, &all_velocities(), self.calibration_repeats)
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// The backend context at the moment generation began.
#[derive(Debug, Clone, PartialEq)]
pub struct TakeoverSnapshot {
    pub turn: u64,
    pub time_ms: f64,
    pub context: Vec<Token>,
    pub origin_ms: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub acoustic: Vec<AcousticEvent>,
    pub emitted: Vec<Emission>,
    pub inputs: Vec<MidiEvent>,
    pub reports: Vec<TakeoverReport>,
    pub snapshots: Vec<TakeoverSnapshot>,
    pub log_lines: Vec<String>,
    pub final_context: Vec<Token>,
    pub origin_ms: u64,
    pub stats: EngineStats,
    pub rejected: u64,
    pub finalized_notes: Vec<Note>,
    pub pedal_log: Vec<PedalEvent>,
    pub end_ms: f64,
    pub phase: Phase,
}

pub struct Simulation {
    clock: SharedClock,
    engine: Engine,
    playback: Playback<InstrumentSink>,
    inputs: VecDeque<MidiEvent>,
    last_input_ms: f64,
    ingested: Vec<MidiEvent>,
    emitted: Vec<Emission>,
    events: Vec<SessionEvent>,
    drained: usize,
    reports: Vec<TakeoverReport>,
    snapshots: Vec<TakeoverSnapshot>,
    log_lines: Vec<String>,
}

impl Simulation {
    /// Session on the fixture-fitted mock backend and a virtual clock.
    pub fn new(config: &SimConfig) -> Result<Self, SimError> {
        Self::with_clock(config, VirtualClock::shared())
    }

    /// Mock-backed session on any clock. With a fast-forwarding wall clock,
    /// idle time is skipped but engine work is measured for real.
    pub fn with_clock(config: &SimConfig, clock: SharedClock) -> Result<Self, SimError> {
        let vocab = Vocab::new(config.engine.tokenizer);
        let backend = MockBackend::new(MarkovModel::shared(&vocab), clock.clone(), config.cost, 1);
        Self::with_backend(config, Box::new(backend), clock)
    }

    pub fn with_backend(
        config: &SimConfig,
        backend: Box<dyn Backend>,
        clock: SharedClock,
    ) -> Result<Self, SimError> {
        config.scheduler.validate().map_err(SimError::Config)?;
        config.instrument.validate().map_err(SimError::Config)?;
        let table = config.calibration()?;
        let vocab = Vocab::new(config.engine.tokenizer);
        let session = BackendSession::open(backend, vocab).map_err(EngineError::from)?;
        let engine = Engine::new(config.engine.clone(), session, clock.clone())?;
        let sink = InstrumentSink::new(VirtualInstrument::new(config.instrument));
        Ok(Self {
            clock,
            engine,
            playback: Playback::new(Scheduler::new(config.scheduler, table), sink, true),
            inputs: VecDeque::new(),
            last_input_ms: f64::NEG_INFINITY,
            ingested: Vec::new(),
            emitted: Vec::new(),
            events: Vec::new(),
            drained: 0,
            reports: Vec::new(),
            snapshots: Vec::new(),
            log_lines: Vec::new(),
        })
    }

    /// Run a whole script until nothing is left to happen.
    pub fn run_script(config: &SimConfig, script: &[MidiEvent]) -> Result<SimOutcome, SimError> {
        let mut sim = Self::new(config)?;
        for ev in script {
            sim.push_input(*ev);
        }
        sim.run_to_end();
        Ok(sim.outcome())
    }

    pub fn now_ms(&self) -> f64 {
        self.clock.now_ms()
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn playback(&self) -> &Playback<InstrumentSink> {
        &self.playback
    }

    /// Queue a performer event. Timestamps are made non-decreasing.
    pub fn push_input(&mut self, mut ev: MidiEvent) {
        ev.timestamp_ms = ev.timestamp_ms.max(self.last_input_ms);
        self.last_input_ms = ev.timestamp_ms;
        self.inputs.push_back(ev);
    }

    /// Queue a performer event stamped with the current session time.
    pub fn push_input_now(&mut self, ev: MidiEvent) {
        let now = self.now_ms();
        self.push_input(ev.at(now));
    }

    /// Observed events not yet drained.
    pub fn drain_events(&mut self) -> Vec<SessionEvent> {
        let out = self.events[self.drained..].to_vec();
        self.drained = self.events.len();
        out
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    fn collect_emissions(&mut self) {
        for em in self.playback.take_emitted() {
            self.events.push(SessionEvent::Emitted(em));
            self.emitted.push(em);
        }
    }

    fn handle_outputs(&mut self, out: Vec<EngineOutput>, now: f64) {
        self.playback.apply(&out, now);
        for o in out {
            if let Some(line) = o.log_line() {
                self.log_lines.push(line);
            }
            match &o {
                EngineOutput::Phase {
                    phase: Phase::Generating,
                    time_ms,
                } => self.snapshots.push(TakeoverSnapshot {
                    turn: self.snapshots.len() as u64 + 1,
                    time_ms: *time_ms,
                    context: self.engine.context().to_vec(),
                    origin_ms: self.engine.context_origin_ms(),
                }),
                EngineOutput::Report(r) => self.record_report(r.clone()),
                _ => {}
            }
            self.events.push(SessionEvent::Output(o));
        }
        self.collect_emissions();
    }

    /// Reports can be published more than once as fields fill in; keep the
    /// latest per turn.
    fn record_report(&mut self, r: TakeoverReport) {
        match self.reports.iter_mut().find(|x| x.turn == r.turn) {
            Some(x) => *x = r,
            None => self.reports.push(r),
        }
    }

    fn deliver_due(&mut self, now: f64) {
        loop {
            let next_input = self.inputs.front().map(|e| e.timestamp_ms).filter(|t| *t <= now);
            let next_fb = self.playback.next_feedback_ms().filter(|t| *t <= now);
            match (next_input, next_fb) {
                (None, None) => return,
                (Some(ti), Some(tf)) if ti < tf => self.deliver_input(now),
                (Some(_), None) => self.deliver_input(now),
                _ => {
                    let (_, fb) = self.playback.pop_feedback(now).expect("due feedback");
                    self.events.push(SessionEvent::Feedback(fb));
                    let out = self.engine.on_feedback(fb);
                    self.handle_outputs(out, now);
                }
            }
        }
    }

    fn deliver_input(&mut self, now: f64) {
        let ev = self.inputs.pop_front().expect("due input");
        self.ingested.push(ev);
        self.events.push(SessionEvent::Input(ev));
        let out = self.engine.on_event(ev);
        self.handle_outputs(out, now);
    }

    fn next_time(&self, now: f64) -> Option<f64> {
        [
            self.inputs.front().map(|e| e.timestamp_ms),
            self.playback.next_tick_ms(),
            self.playback.next_feedback_ms(),
            self.engine.next_wake_ms(now),
        ]
        .into_iter()
        .flatten()
        .min_by(f64::total_cmp)
    }

    /// Process everything due up to `limit_ms`; the clock ends at or after
    /// `limit_ms` (an engine step may overshoot it).
    pub fn run_until(&mut self, limit_ms: f64) {
        self.run(Some(limit_ms));
    }

    /// Run until no input, playback or engine work remains.
    pub fn run_to_end(&mut self) {
        self.run(None);
    }

    fn run(&mut self, limit: Option<f64>) {
        loop {
            let now = self.now_ms();
            self.playback.tick_until(now);
            self.collect_emissions();
            self.deliver_due(now);
            if self.engine.has_work(now) {
                let out = self.engine.step(now);
                let after = self.now_ms();
                self.playback.tick_until(after);
                self.collect_emissions();
                self.handle_outputs(out, after);
                continue;
            }
            match self.next_time(now) {
                Some(t) if limit.is_none_or(|l| t <= l) => self.clock.advance_to(t.max(now)),
                _ => {
                    if let Some(l) = limit {
                        self.clock.advance_to(l);
                    }
                    return;
                }
            }
        }
    }

    pub fn acoustic_log(&self) -> Vec<AcousticEvent> {
        self.playback.sink().instrument.log()
    }

    pub fn outcome(&self) -> SimOutcome {
        SimOutcome {
            acoustic: self.acoustic_log(),
            emitted: self.emitted.clone(),
            inputs: self.ingested.clone(),
            reports: self.reports.clone(),
            snapshots: self.snapshots.clone(),
            log_lines: self.log_lines.clone(),
            final_context: self.engine.context().to_vec(),
            origin_ms: self.engine.context_origin_ms(),
            stats: self.engine.stats(),
            rejected: self.playback.sink().rejected,
            finalized_notes: self.engine.tracker().finalized().to_vec(),
            pedal_log: self.engine.tracker().pedal_log().to_vec(),
            end_ms: self.now_ms(),
            phase: self.engine.phase(),
        }
    }
}

/// How long a scripted soft-pedal press is held.
pub const SOFT_PRESS_MS: f64 = 40.0;

/// Wire events for a performance plus soft-pedal presses at the given times,
/// in delivery order (releases before controls before strikes at equal
/// times).
pub fn performance_script(
    notes: &[Note],
    pedals: &[PedalEvent],
    soft_presses: &[f64],
    pedal_config: &crate::midi::PedalConfig,
) -> Vec<MidiEvent> {
    let mut evs: Vec<(u8, MidiEvent)> = Vec::new();
    for n in notes {
        evs.push((2, MidiEvent::note_on(n.pitch, n.velocity.max(1), n.onset_ms)));
        if let Some(off) = n.offset_ms() {
            evs.push((0, MidiEvent::note_off(n.pitch, off)));
        }
    }
    for p in pedals {
        let value = if p.is_on() { 127 } else { 0 };
        evs.push((1, MidiEvent::control(pedal_config.sustain_controller, value, p.time_ms)));
    }
    for &t in soft_presses {
        evs.push((1, MidiEvent::control(pedal_config.soft_controller, 127, t)));
        evs.push((1, MidiEvent::control(pedal_config.soft_controller, 0, t + SOFT_PRESS_MS)));
    }
    evs.sort_by(|a, b| a.1.timestamp_ms.total_cmp(&b.1.timestamp_ms).then(a.0.cmp(&b.0)));
    evs.into_iter().map(|(_, e)| e).collect()
}
