//! One function per subcommand. Each returns the text it prints on success.

use std::fmt::Write as _;
use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::info;

use duet_core::backend::{serve_backend, Backend, BackendFactory, ContractViolation, MarkovModel, MockBackend};
use duet_core::bench::{run_bench, BenchClock, BenchConfig};
use duet_core::clock::{SharedClock, VirtualClock, WallClock};
use duet_core::config::{Settings, KEYS};
use duet_core::engine::TakeoverReport;
use duet_core::fixtures;
use duet_core::host::{InstrumentSink, PredictingSink, SessionEvent};
use duet_core::instrument::{export_log, VirtualInstrument};
use duet_core::midi::{load_smf, save_smf, MidiEvent, Recording};
use duet_core::runtime::LiveSession;
use duet_core::scheduler::{all_velocities, run_calibration, CalibrationTable, ProbeTarget};
use duet_core::sim::{performance_script, Simulation};
use duet_core::tokenizer::Vocab;
use duet_gateway::{serve, GatewayConfig, LiveDriver, VirtualDriver};

use crate::common::{self, backend, calibration, recording, sim_config, wait_for_stop, write_file, Common};
use crate::devices::{self, PortProbe};
use crate::error::{failed, CliError};
use crate::replay::replay;

/// Files a finished session leaves in the output directory.
pub const SESSION_FILE: &str = "session.mid";
pub const ACOUSTIC_FILE: &str = "acoustic.log";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const REPORTS_FILE: &str = "reports.json";

fn reports_json(reports: &[TakeoverReport]) -> String {
    serde_json::to_string_pretty(reports).expect("reports serialize")
}

fn latest_reports(events: &[SessionEvent]) -> Vec<TakeoverReport> {
    let mut out: Vec<TakeoverReport> = Vec::new();
    for ev in events {
        if let SessionEvent::Output(duet_core::engine::EngineOutput::Report(r)) = ev {
            match out.iter_mut().find(|x| x.turn == r.turn) {
                Some(x) => *x = r.clone(),
                None => out.push(r.clone()),
            }
        }
    }
    out
}

fn log_lines(events: &[SessionEvent]) -> String {
    let mut s = String::new();
    for ev in events {
        if let SessionEvent::Output(o) = ev {
            if let Some(line) = o.log_line() {
                s.push_str(&line);
                s.push('\n');
            }
        }
    }
    s
}

fn report_summary(reports: &[TakeoverReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let rel = |t: Option<f64>| t.map_or("-".to_string(), |t| format!("{:.1}", t - r.signal_time_ms));
        let _ = writeln!(
            s,
            "turn {}: signal {:.1} ms, finalize {:.3} ms, first token +{} ms, first note +{} ms, {} hanging, {} residual tokens",
            r.turn,
            r.signal_time_ms,
            r.finalize_ms,
            rel(r.first_token_ms),
            rel(r.first_note_sound_ms),
            r.hanging_count,
            r.residual_tokens
        );
    }
    s
}

/// Write the session artifacts and describe them.
fn save_session(
    dir: &Path,
    events: &[SessionEvent],
    acoustic: Option<&[duet_core::instrument::AcousticEvent]>,
    settings: &Settings,
) -> Result<String, CliError> {
    let rec = recording(events, settings.engine.pedals);
    write_file(&dir.join(SESSION_FILE), save_smf(&rec))?;
    write_file(&dir.join(EVENTS_FILE), log_lines(events))?;
    let reports = latest_reports(events);
    write_file(&dir.join(REPORTS_FILE), reports_json(&reports))?;
    if let Some(log) = acoustic {
        write_file(&dir.join(ACOUSTIC_FILE), export_log(log))?;
    }
    let mut s = report_summary(&reports);
    let _ = writeln!(
        s,
        "{} human notes, {} generated notes; session written to {}",
        rec.human_notes().count(),
        rec.generated_notes().count(),
        dir.join(SESSION_FILE).display()
    );
    Ok(s)
}

/// Where the built-in script hands over.
const DEFAULT_CUT_MS: f64 = 16_000.0;

#[derive(Debug, Clone, Default)]
pub struct SimArgs {
    pub script: Option<PathBuf>,
    pub takeover: Vec<f64>,
    pub gateway: Option<Option<String>>,
    pub virtual_clock: bool,
    pub duration: Option<Duration>,
}

/// A session against the virtual instrument, from a script or from gateway
/// clients.
pub fn sim(common: &Common, args: &SimArgs, stop: Arc<AtomicBool>) -> Result<String, CliError> {
    let settings = common.settings()?;
    let cfg = sim_config(&settings)?;
    let dir = common.out_dir()?;
    if let Some(addr) = &args.gateway {
        return sim_gateway(common, &settings, args, addr.as_deref(), stop, &dir);
    }

    let (notes, pedals, mut presses) = match &args.script {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let rec = load_smf(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            common::script_parts(&rec)
        }
        None => {
            // Half the piece; the model knows how it ends and would stop.
            let piece = fixtures::broken_chords();
            let notes: Vec<_> = piece.notes.into_iter().filter(|n| n.onset_ms < DEFAULT_CUT_MS).collect();
            let end = notes.iter().filter_map(|n| n.offset_ms()).fold(DEFAULT_CUT_MS, f64::max);
            let pedals = piece.pedals.into_iter().filter(|p| p.time_ms <= end).collect();
            (notes, pedals, vec![end + 250.0])
        }
    };
    if !args.takeover.is_empty() {
        presses = args.takeover.clone();
    }
    if presses.is_empty() {
        return Err(CliError::Usage(
            "the script has no soft-pedal presses; give takeover times with --takeover".into(),
        ));
    }
    presses.sort_by(f64::total_cmp);
    let script = performance_script(&notes, &pedals, &presses, &settings.engine.pedals);

    let clock: SharedClock = VirtualClock::shared();
    let backend = backend(&settings, clock.clone())?;
    let mut sim = Simulation::with_backend(&cfg, backend, clock).map_err(failed)?;
    for ev in script {
        sim.push_input(ev);
    }
    sim.run_to_end();
    let out = sim.outcome();
    save_session(&dir, sim.events(), Some(&out.acoustic), &settings)
}

fn gateway_config(settings: &Settings, addr: Option<&str>) -> Result<GatewayConfig, CliError> {
    let listen = addr.unwrap_or(&settings.gateway_listen);
    let listen: SocketAddr = listen
        .parse()
        .map_err(|_| CliError::Usage(format!("gateway address `{listen}` is not host:port")))?;
    Ok(GatewayConfig {
        listen,
        outbox: settings.gateway_outbox,
        pedals: settings.engine.pedals,
        settings: KEYS
            .iter()
            .map(|k| (k.to_string(), settings.get(k).unwrap_or_default()))
            .collect(),
        ..GatewayConfig::default()
    })
}

fn sim_gateway(
    common: &Common,
    settings: &Settings,
    args: &SimArgs,
    addr: Option<&str>,
    stop: Arc<AtomicBool>,
    dir: &Path,
) -> Result<String, CliError> {
    let _ = common;
    let config = gateway_config(settings, addr)?;
    let gw = if args.virtual_clock {
        let clock: SharedClock = VirtualClock::shared();
        let sim = Simulation::with_backend(&sim_config(settings)?, backend(settings, clock.clone())?, clock.clone())
            .map_err(failed)?;
        serve(Box::new(VirtualDriver::new(sim, clock)), config)
    } else {
        let clock: SharedClock = Arc::new(WallClock::new());
        let sink = InstrumentSink::new(VirtualInstrument::new(settings.instrument));
        let session = LiveSession::start(
            settings.engine.clone(),
            settings.scheduler,
            calibration(settings)?,
            backend(settings, clock.clone())?,
            sink,
            clock.clone(),
        )
        .map_err(failed)?;
        serve(Box::new(LiveDriver::new(session, clock)), config)
    }
    .map_err(|e| failed(format!("gateway: {e}")))?;
    println!("gateway listening on ws://{}/", gw.local_addr());
    wait_for_stop(&stop, args.duration);
    let finished = gw.shutdown();
    save_session(dir, &finished.events, finished.acoustic.as_deref(), settings)
}

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub midi_in: Option<PathBuf>,
    pub midi_out: Option<PathBuf>,
    pub duration: Option<Duration>,
}

/// A live session between two MIDI ports.
pub fn run(common: &Common, args: &RunArgs, stop: Arc<AtomicBool>) -> Result<String, CliError> {
    let settings = common.settings()?;
    let in_path = args.midi_in.clone().or(settings.midi_in.as_ref().map(PathBuf::from));
    let out_path = args.midi_out.clone().or(settings.midi_out.as_ref().map(PathBuf::from));
    let input = devices::open_input(in_path.as_deref())?;
    let output = devices::open_output(out_path.as_deref())?;
    let table = calibration(&settings)?;
    let dir = common.out_dir()?;

    let clock: SharedClock = Arc::new(WallClock::new());
    let output = Mutex::new(output);
    let sink = PredictingSink::new(table.clone(), move |ev: &MidiEvent| {
        use std::io::Write;
        let mut out = output.lock().unwrap();
        if let Err(e) = out.write_all(&ev.to_bytes(0)).and_then(|_| out.flush()) {
            log::error!("midi output: {e}");
        }
    });
    let mut session = LiveSession::start(
        settings.engine.clone(),
        settings.scheduler,
        table,
        backend(&settings, clock.clone())?,
        sink,
        clock,
    )
    .map_err(failed)?;
    let events = session.take_events().expect("fresh session");
    let handle = session.input();
    let reader = devices::spawn_reader(input, move |_, kind| handle.send(kind).is_some());
    let reader_stop = stop.clone();
    // The input closing or the session refusing input ends the run.
    std::thread::spawn(move || {
        let _ = reader.join();
        reader_stop.store(true, std::sync::atomic::Ordering::SeqCst);
    });
    info!("listening; press Ctrl-C to stop");
    wait_for_stop(&stop, args.duration);
    session.stop();
    let events: Vec<SessionEvent> = events.try_iter().collect();
    save_session(&dir, &events, None, &settings)
}

#[derive(Debug, Clone, Default)]
pub struct CalibrateArgs {
    pub midi_in: Option<PathBuf>,
    pub midi_out: Option<PathBuf>,
    pub repeats: Option<u32>,
    pub velocities: Option<Vec<u8>>,
    pub timeout: Option<Duration>,
}

/// Measure a calibration table, against the ports if given, otherwise the
/// configured virtual instrument.
pub fn calibrate(common: &Common, args: &CalibrateArgs) -> Result<String, CliError> {
    let settings = common.settings()?;
    let repeats = args.repeats.unwrap_or(settings.calibration_repeats);
    let velocities = args.velocities.clone().unwrap_or_else(all_velocities);
    let table = if args.midi_in.is_some() || args.midi_out.is_some() {
        let input = devices::open_input(args.midi_in.as_deref())?;
        let output = devices::open_output(args.midi_out.as_deref())?;
        let mut probe = PortProbe::new(input, output, args.timeout.unwrap_or(Duration::from_secs(1)));
        measure(&mut probe, &velocities, repeats)?
    } else {
        measure(&mut VirtualInstrument::new(settings.instrument), &velocities, repeats)?
    };
    let text = table.to_text();
    match &common.out {
        Some(path) => {
            write_file(path, &text)?;
            Ok(format!("calibration table written to {}\n", path.display()))
        }
        None => Ok(text),
    }
}

fn measure(target: &mut dyn ProbeTarget, velocities: &[u8], repeats: u32) -> Result<CalibrationTable, CliError> {
    run_calibration(target, velocities, repeats).map_err(|e| CliError::Device(format!("calibration: {e}")))
}

#[derive(Debug, Clone, Default)]
pub struct BenchArgs {
    pub wall_clock: bool,
}

/// The takeover latency matrix. Costs come from the settings when any is
/// set, otherwise the bench's own defaults apply.
pub fn bench(common: &Common, args: &BenchArgs) -> Result<String, CliError> {
    let settings = common.settings()?;
    let mut config = BenchConfig::default();
    config.sim.engine = settings.engine.clone();
    config.sim.scheduler = settings.scheduler;
    config.sim.instrument = settings.instrument;
    config.sim.table = Some(calibration(&settings)?);
    if !common::cost_is_free(&settings.cost) {
        config.sim.cost = settings.cost;
    }
    if args.wall_clock {
        config.clock = BenchClock::Wall;
    }
    let report = run_bench(&config).map_err(failed)?;
    let dir = common.out_dir()?;
    write_file(&dir.join("bench.csv"), report.to_csv())?;
    write_file(
        &dir.join("bench.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut s = report.to_text();
    let _ = writeln!(s, "\nwritten to {} and {}", dir.join("bench.csv").display(), dir.join("bench.json").display());
    Ok(s)
}

/// Re-play a recorded session's generated notes; fails with the list of
/// violated invariants.
pub fn replay_file(common: &Common, path: &Path) -> Result<String, CliError> {
    let settings = common.settings()?;
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let rec: Recording = load_smf(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let report = replay(&rec, settings.scheduler, settings.instrument, calibration(&settings)?);
    let text = report.to_text();
    if report.violations.is_empty() {
        Ok(text)
    } else {
        eprint!("{text}");
        Err(CliError::Invariant(report.violations))
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServeBackendArgs {
    pub listen: String,
    pub duration: Option<Duration>,
}

/// Serve the mock backend over TCP for remote engines.
pub fn serve_backend_cmd(common: &Common, args: &ServeBackendArgs, stop: Arc<AtomicBool>) -> Result<String, CliError> {
    let settings = common.settings()?;
    let vocab = Vocab::new(settings.engine.tokenizer);
    let descriptor = vocab.descriptor().to_string();
    let model = MarkovModel::shared(&vocab);
    let cost = settings.cost;
    let clock: SharedClock = Arc::new(WallClock::new());
    let factory: BackendFactory = Arc::new(move |v: &str, session: u64| {
        if v != descriptor {
            return Err(ContractViolation::VocabMismatch);
        }
        Ok(Box::new(MockBackend::new(model.clone(), clock.clone(), cost, session)) as Box<dyn Backend>)
    });
    let listener = TcpListener::bind(&args.listen).map_err(|e| failed(format!("{}: {e}", args.listen)))?;
    let server = serve_backend(listener, factory).map_err(failed)?;
    println!("backend listening on {}", server.local_addr());
    wait_for_stop(&stop, args.duration);
    server.shutdown();
    Ok(String::new())
}

/// The effective settings, one `key = value` per line.
pub fn show_config(common: &Common) -> Result<String, CliError> {
    Ok(common.settings()?.to_text())
}
