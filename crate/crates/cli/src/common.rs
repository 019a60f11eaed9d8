//! Settings resolution and the pieces every command shares.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use duet_core::backend::{Backend, CostModel, MarkovModel, MockBackend, RemoteBackend};
use duet_core::clock::SharedClock;
use duet_core::config::{ConfigError, IoMessage, Settings};
use duet_core::engine::{EngineOutput, Feedback};
use duet_core::host::SessionEvent;
use duet_core::instrument::VirtualInstrument;
use duet_core::midi::{Note, PedalConfig, Recording, TrackerOutput, TrackerState};
use duet_core::scheduler::{all_velocities, run_calibration, CalibrationTable};
use duet_core::sim::SimConfig;
use duet_core::tokenizer::Vocab;

use crate::error::{failed, CliError};

/// Options every command accepts.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn settings(&self) -> Result<Settings, CliError> {
        let mut s = Settings::resolve(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            s.engine.sampling.seed = seed;
        }
        Ok(s)
    }

    /// Output directory, created on demand.
    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| failed(format!("{}: {e}", dir.display())))?;
        Ok(dir)
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| failed(format!("{}: {e}", path.display())))
}

/// The configured table, or one measured on the configured virtual
/// instrument.
pub fn calibration(settings: &Settings) -> Result<CalibrationTable, CliError> {
    match &settings.calibration {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
                path: path.clone(),
                source: IoMessage(e.to_string()),
            })?;
            CalibrationTable::parse(&text)
                .map_err(|e| ConfigError::Invalid(format!("calibration file {path}: {e}")).into())
        }
        None => {
            let mut probe = VirtualInstrument::new(settings.instrument);
            run_calibration(&mut probe, &all_velocities(), settings.calibration_repeats).map_err(failed)
        }
    }
}

pub fn sim_config(settings: &Settings) -> Result<SimConfig, CliError> {
    Ok(SimConfig {
        engine: settings.engine.clone(),
        scheduler: settings.scheduler,
        instrument: settings.instrument,
        cost: settings.cost,
        table: Some(calibration(settings)?),
        calibration_repeats: settings.calibration_repeats,
    })
}

pub fn backend(settings: &Settings, clock: SharedClock) -> Result<Box<dyn Backend>, CliError> {
    let vocab = Vocab::new(settings.engine.tokenizer);
    if settings.backend == "mock" {
        return Ok(Box::new(MockBackend::new(
            MarkovModel::shared(&vocab),
            clock,
            settings.cost,
            1,
        )));
    }
    let timeout = Duration::from_millis(settings.backend_timeout_ms);
    RemoteBackend::connect(settings.backend.as_str(), vocab.descriptor(), timeout)
        .map(|b| Box::new(b) as Box<dyn Backend>)
        .map_err(|e| failed(format!("backend {}: {e}", settings.backend)))
}

/// A mock cost model is "unset" when both costs are zero.
pub fn cost_is_free(cost: &CostModel) -> bool {
    cost.prefill_ms_per_token == 0.0 && cost.decode_ms_per_token == 0.0
}

/// Sleep until `stop` is raised or `limit` passes.
pub fn wait_for_stop(stop: &AtomicBool, limit: Option<Duration>) {
    let start = Instant::now();
    while !stop.load(Ordering::SeqCst) && limit.is_none_or(|l| start.elapsed() < l) {
        thread::sleep(Duration::from_millis(20));
    }
}

/// The performer's notes and pedals as ingested, plus every generated note
/// that sounded, placed where it was heard.
pub fn recording(events: &[SessionEvent], pedals: PedalConfig) -> Recording {
    let mut tracker = TrackerState::new(pedals);
    let mut tagged: Vec<(Note, bool)> = Vec::new();
    let mut scheduled: HashMap<u64, (u8, u8)> = HashMap::new();
    let mut sounded: HashMap<u64, f64> = HashMap::new();
    for ev in events {
        match ev {
            SessionEvent::Input(e) => {
                for out in tracker.ingest(*e).unwrap_or_default() {
                    if let TrackerOutput::FinalizedNote(n) = out {
                        tagged.push((n, false));
                    }
                }
            }
            SessionEvent::Output(EngineOutput::ScheduleNote { id, pitch, velocity, .. }) => {
                scheduled.insert(*id, (*pitch, *velocity));
            }
            SessionEvent::Feedback(Feedback::Sounded { id, time_ms }) => {
                sounded.insert(*id, *time_ms);
            }
            SessionEvent::Feedback(Feedback::Damped { id, time_ms }) => {
                if let (Some(&(pitch, velocity)), Some(on)) = (scheduled.get(id), sounded.remove(id)) {
                    tagged.push((Note::closed(pitch, on, (time_ms - on).max(0.0), velocity), true));
                }
            }
            _ => {}
        }
    }
    tagged.sort_by(|a, b| {
        a.0.onset_ms
            .total_cmp(&b.0.onset_ms)
            .then(a.1.cmp(&b.1))
            .then(a.0.pitch.cmp(&b.0.pitch))
    });
    Recording {
        notes: tagged.iter().map(|(n, _)| *n).collect(),
        generated: tagged.iter().map(|(_, g)| *g).collect(),
        pedals: tracker.pedal_log().to_vec(),
    }
}

/// Wire events of a loaded script, split into what the performer plays and
/// the soft-pedal presses that mark takeovers.
pub fn script_parts(rec: &Recording) -> (Vec<Note>, Vec<duet_core::midi::PedalEvent>, Vec<f64>) {
    use duet_core::midi::Pedal;
    let notes = rec.human_notes().copied().collect();
    let sustain = rec.pedals.iter().filter(|p| p.pedal == Pedal::Sustain).copied().collect();
    let presses = rec
        .pedals
        .iter()
        .filter(|p| p.pedal == Pedal::SoftUnaCorda && p.is_on())
        .map(|p| p.time_ms)
        .collect();
    (notes, sustain, presses)
}
