//! Real-time session: the engine and the playback scheduler on their own
//! threads, driven by a wall clock.
//!
//! Performer input is stamped on arrival and handed to the engine thread.
//! The engine thread interleaves input, playback feedback and engine steps
//! (prefill chunks, the takeover, decode steps). The playback thread ticks
//! the scheduler at least once a millisecond, independently of inference, so
//! a slow decode step never delays a NoteOn that is already scheduled.

use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use crate::backend::{Backend, BackendSession};
use crate::clock::SharedClock;
use crate::engine::{Engine, EngineConfig, EngineError, EngineOutput, EngineStats, Feedback, Phase};
use crate::host::{OutputSink, Playback, SessionEvent};
use crate::midi::{MidiEvent, MidiKind};
use crate::scheduler::{CalibrationTable, Scheduler, SchedulerConfig};
use crate::tokenizer::{Token, Vocab};

/// Longest the engine thread sleeps with nothing to do.
const ENGINE_IDLE_MS: f64 = 20.0;
/// Scheduler tick period.
const TICK_MS: f64 = 1.0;

enum EngineCmd {
    Input(MidiEvent),
    Feedback(Feedback),
    Stop,
}

enum PlayCmd {
    Apply(Vec<EngineOutput>, f64),
    Stop,
}

/// Stamps performer input with the session clock and forwards it to the
/// engine. Cloneable; timestamps stay non-decreasing across clones.
#[derive(Clone)]
pub struct InputHandle {
    clock: SharedClock,
    last_ms: Arc<Mutex<f64>>,
    tx: Sender<EngineCmd>,
}

impl InputHandle {
    /// Stamp `kind` with the current time and send it. Returns the stamp, or
    /// `None` once the session has stopped.
    pub fn send(&self, kind: MidiKind) -> Option<f64> {
        self.send_at(kind, self.clock.now_ms())
    }

    /// Like [`send`](Self::send) with a stamp taken earlier, typically when
    /// the event was received. Raised to the last stamp if it is older.
    pub fn send_at(&self, kind: MidiKind, received_ms: f64) -> Option<f64> {
        let mut last = self.last_ms.lock().unwrap();
        let t = received_ms.max(*last);
        *last = t;
        self.tx
            .send(EngineCmd::Input(MidiEvent { kind, timestamp_ms: t }))
            .ok()
            .map(|_| t)
    }

    pub fn now_ms(&self) -> f64 {
        self.clock.now_ms()
    }
}

/// What is left of a session after [`LiveSession::stop`].
pub struct LiveSummary<S> {
    pub sink: S,
    pub stats: EngineStats,
    pub context: Vec<Token>,
    pub phase: Phase,
    pub end_ms: f64,
}

pub struct LiveSession<S: OutputSink + Send + 'static> {
    input: InputHandle,
    play_tx: Sender<PlayCmd>,
    events: Option<Receiver<SessionEvent>>,
    engine_thread: Option<JoinHandle<Engine>>,
    play_thread: Option<JoinHandle<Playback<S>>>,
    clock: SharedClock,
}

impl<S: OutputSink + Send + 'static> LiveSession<S> {
    pub fn start(
        engine: EngineConfig,
        scheduler: SchedulerConfig,
        table: CalibrationTable,
        backend: Box<dyn Backend>,
        sink: S,
        clock: SharedClock,
    ) -> Result<Self, EngineError> {
        scheduler
            .validate()
            .map_err(|e| EngineError::Config(format!("scheduler: {e}")))?;
        let session = BackendSession::open(backend, Vocab::new(engine.tokenizer))?;
        let engine = Engine::new(engine, session, clock.clone())?;
        let playback = Playback::new(Scheduler::new(scheduler, table), sink, false);

        let (engine_tx, engine_rx) = mpsc::channel();
        let (play_tx, play_rx) = mpsc::channel();
        let (event_tx, event_rx) = mpsc::channel();

        let engine_thread = {
            let clock = clock.clone();
            let play_tx = play_tx.clone();
            let events = event_tx.clone();
            thread::Builder::new()
                .name("duet-engine".into())
                .spawn(move || engine_loop(engine, clock, engine_rx, play_tx, events))
                .expect("spawn engine thread")
        };
        let play_thread = {
            let clock = clock.clone();
            let engine_tx = engine_tx.clone();
            thread::Builder::new()
                .name("duet-playback".into())
                .spawn(move || playback_loop(playback, clock, play_rx, engine_tx, event_tx))
                .expect("spawn playback thread")
        };

        Ok(Self {
            input: InputHandle {
                clock: clock.clone(),
                last_ms: Arc::new(Mutex::new(f64::NEG_INFINITY)),
                tx: engine_tx,
            },
            play_tx,
            events: Some(event_rx),
            engine_thread: Some(engine_thread),
            play_thread: Some(play_thread),
            clock,
        })
    }

    pub fn input(&self) -> InputHandle {
        self.input.clone()
    }

    /// Every input, engine output, emission and feedback, in the order each
    /// thread observed them. Can be taken once.
    pub fn take_events(&mut self) -> Option<Receiver<SessionEvent>> {
        self.events.take()
    }

    pub fn now_ms(&self) -> f64 {
        self.clock.now_ms()
    }

    /// Stop both threads and hand back the sink and the engine's final state.
    pub fn stop(mut self) -> LiveSummary<S> {
        let _ = self.input.tx.send(EngineCmd::Stop);
        let engine = self
            .engine_thread
            .take()
            .expect("engine thread")
            .join()
            .expect("engine thread panicked");
        let _ = self.play_tx.send(PlayCmd::Stop);
        let playback = self
            .play_thread
            .take()
            .expect("playback thread")
            .join()
            .expect("playback thread panicked");
        LiveSummary {
            sink: playback.into_sink(),
            stats: engine.stats(),
            context: engine.context().to_vec(),
            phase: engine.phase(),
            end_ms: self.clock.now_ms(),
        }
    }
}

impl<S: OutputSink + Send + 'static> Drop for LiveSession<S> {
    fn drop(&mut self) {
        let _ = self.input.tx.send(EngineCmd::Stop);
        let _ = self.play_tx.send(PlayCmd::Stop);
        if let Some(h) = self.engine_thread.take() {
            let _ = h.join();
        }
        if let Some(h) = self.play_thread.take() {
            let _ = h.join();
        }
    }
}

fn engine_loop(
    mut engine: Engine,
    clock: SharedClock,
    rx: Receiver<EngineCmd>,
    play_tx: Sender<PlayCmd>,
    events: Sender<SessionEvent>,
) -> Engine {
    let dispatch = |out: Vec<EngineOutput>, now: f64| {
        if out.is_empty() {
            return;
        }
        for o in &out {
            if let Some(line) = o.log_line() {
                debug!("{line}");
            }
            let _ = events.send(SessionEvent::Output(o.clone()));
        }
        let _ = play_tx.send(PlayCmd::Apply(out, now));
    };
    let handle = |engine: &mut Engine, cmd: EngineCmd| -> bool {
        let now = clock.now_ms();
        let out = match cmd {
            EngineCmd::Input(ev) => {
                let _ = events.send(SessionEvent::Input(ev));
                engine.on_event(ev)
            }
            EngineCmd::Feedback(fb) => engine.on_feedback(fb),
            EngineCmd::Stop => return false,
        };
        dispatch(out, now);
        true
    };
    loop {
        loop {
            match rx.try_recv() {
                Ok(cmd) => {
                    if !handle(&mut engine, cmd) {
                        return engine;
                    }
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => return engine,
            }
        }
        let now = clock.now_ms();
        if engine.has_work(now) {
            let out = engine.step(now);
            dispatch(out, clock.now_ms());
            continue;
        }
        let wait = engine
            .next_wake_ms(now)
            .map_or(ENGINE_IDLE_MS, |t| (t - now).clamp(0.0, ENGINE_IDLE_MS));
        match rx.recv_timeout(Duration::from_secs_f64(wait / 1000.0)) {
            Ok(cmd) => {
                if !handle(&mut engine, cmd) {
                    return engine;
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return engine,
        }
    }
}

fn playback_loop<S: OutputSink>(
    mut playback: Playback<S>,
    clock: SharedClock,
    rx: Receiver<PlayCmd>,
    engine_tx: Sender<EngineCmd>,
    events: Sender<SessionEvent>,
) -> Playback<S> {
    loop {
        let now = clock.now_ms();
        loop {
            match rx.try_recv() {
                Ok(PlayCmd::Apply(out, at)) => playback.apply(&out, at.max(now)),
                Ok(PlayCmd::Stop) | Err(mpsc::TryRecvError::Disconnected) => return playback,
                Err(mpsc::TryRecvError::Empty) => break,
            }
        }
        playback.tick_until(now);
        for em in playback.take_emitted() {
            let late = em.event.timestamp_ms - em.send_ms;
            if late > 5.0 {
                warn!("emission {} left {late:.1} ms late", em.tag);
            }
            let _ = events.send(SessionEvent::Emitted(em));
        }
        while let Some((_, fb)) = playback.pop_feedback(now) {
            let _ = events.send(SessionEvent::Feedback(fb));
            if engine_tx.send(EngineCmd::Feedback(fb)).is_err() {
                return playback;
            }
        }
        let next = [playback.next_tick_ms(), playback.next_feedback_ms()]
            .into_iter()
            .flatten()
            .min_by(f64::total_cmp);
        let now = clock.now_ms();
        let wait = next.map_or(TICK_MS, |t| (t - now).clamp(0.0, TICK_MS));
        match rx.recv_timeout(Duration::from_secs_f64(wait / 1000.0)) {
            Ok(PlayCmd::Apply(out, at)) => {
                let now = clock.now_ms();
                playback.apply(&out, at.max(now));
            }
            Ok(PlayCmd::Stop) | Err(RecvTimeoutError::Disconnected) => return playback,
            Err(RecvTimeoutError::Timeout) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CostModel, MarkovModel, MockBackend};
    use crate::clock::WallClock;
    use crate::host::InstrumentSink;
    use crate::instrument::{InstrumentModel, VirtualInstrument};
    use crate::scheduler::{all_velocities, run_calibration};

    #[test]
    fn live_takeover_plays_and_reclaims() {
        let clock: SharedClock = Arc::new(WallClock::new());
        let cfg = EngineConfig::default();
        let vocab = Vocab::new(cfg.tokenizer);
        let backend = MockBackend::new(MarkovModel::shared(&vocab), clock.clone(), CostModel::free(), 1);
        let model = InstrumentModel::default();
        let table = run_calibration(&mut VirtualInstrument::new(model), &all_velocities(), 1).unwrap();
        let sink = InstrumentSink::new(VirtualInstrument::new(model));
        let mut live = LiveSession::start(cfg, SchedulerConfig::default(), table, Box::new(backend), sink, clock)
            .unwrap();
        let events = live.take_events().unwrap();
        let input = live.input();
        for p in [60u8, 64, 67] {
            input.send(MidiKind::NoteOn { pitch: p, velocity: 80 });
            thread::sleep(Duration::from_millis(30));
            input.send(MidiKind::NoteOff { pitch: p, velocity: 0 });
        }
        input.send(MidiKind::Control { controller: 67, value: 127 });
        let mut seen = Vec::new();
        // Wait for the first generated NoteOn, then reclaim.
        while !seen.iter().any(|e| matches!(e, SessionEvent::Emitted(_))) {
            seen.push(events.recv_timeout(Duration::from_secs(10)).expect("no output"));
        }
        input.send(MidiKind::Control { controller: 67, value: 0 });
        input.send(MidiKind::Control { controller: 67, value: 127 });
        thread::sleep(Duration::from_millis(400));
        let summary = live.stop();
        seen.extend(events.try_iter());
        let phases: Vec<Phase> = seen
            .iter()
            .filter_map(|e| match e {
                SessionEvent::Output(EngineOutput::Phase { phase, .. }) => Some(*phase),
                _ => None,
            })
            .collect();
        assert_eq!(phases, vec![Phase::Finalizing, Phase::Generating, Phase::Listen]);
        for e in &seen {
            if let SessionEvent::Emitted(em) = e {
                assert!(em.event.timestamp_ms - em.send_ms < 20.0, "{em:?}");
            }
        }
        assert_eq!(summary.phase, Phase::Listen);
        assert!(summary.sink.instrument.keys_down().is_empty());
    }
}
