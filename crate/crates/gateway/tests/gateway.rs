use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use duet_core::backend::{CostModel, MarkovModel, MockBackend};
use duet_core::clock::{SharedClock, VirtualClock, WallClock};
use duet_core::engine::EngineConfig;
use duet_core::fixtures;
use duet_core::host::InstrumentSink;
use duet_core::instrument::{InstrumentModel, VirtualInstrument};
use duet_core::midi::{MidiEvent, MidiKind, PedalConfig};
use duet_core::runtime::LiveSession;
use duet_core::scheduler::{all_velocities, run_calibration, SchedulerConfig};
use duet_core::sim::{performance_script, SimConfig, Simulation};
use duet_core::tokenizer::Vocab;

use duet_gateway::client::Client;
use duet_gateway::feed::Feed;
use duet_gateway::{serve, ClientMessage, GatewayConfig, GatewayHandle, LiveDriver, PedalKind, Record, Role, VirtualDriver};

const WAIT: Duration = Duration::from_secs(10);

fn live_gateway(config: GatewayConfig) -> GatewayHandle {
    let clock: SharedClock = Arc::new(WallClock::new());
    let cfg = EngineConfig::default();
    let vocab = Vocab::new(cfg.tokenizer);
    let backend = MockBackend::new(MarkovModel::shared(&vocab), clock.clone(), CostModel::free(), 1);
    let model = InstrumentModel::default();
    let table = run_calibration(&mut VirtualInstrument::new(model), &all_velocities(), 1).unwrap();
    let sink = InstrumentSink::new(VirtualInstrument::new(model));
    let session =
        LiveSession::start(cfg, SchedulerConfig::default(), table, Box::new(backend), sink, clock.clone()).unwrap();
    serve(Box::new(LiveDriver::new(session, clock)), config).unwrap()
}

fn join(gw: &GatewayHandle, role: Role) -> Client {
    let mut c = Client::connect(gw.local_addr()).unwrap();
    c.recv_until(WAIT, |r| r.kind == "state").unwrap();
    if role == Role::Performer {
        c.send(&ClientMessage::Hello { role }).unwrap();
        let seen = c.recv_until(WAIT, |r| r.kind == "welcome" || r.kind == "error").unwrap();
        assert_eq!(seen.last().unwrap().field(0), Some("performer"), "{seen:?}");
        c.recv_until(WAIT, |r| r.kind == "state").unwrap();
    }
    c
}

fn play_phrase(c: &mut Client) {
    for p in [60u8, 64, 67, 72] {
        c.send(&ClientMessage::NoteOn { pitch: p, velocity: 80, client_time_ms: None }).unwrap();
        thread::sleep(Duration::from_millis(25));
        c.send(&ClientMessage::NoteOff { pitch: p, client_time_ms: None }).unwrap();
    }
}

fn is_state(r: &Record, phase: &str) -> bool {
    r.kind == "state" && r.field(0) == Some(phase)
}

/// Drive a virtual session through the gateway and the same session through
/// the simulation directly; the instrument must hear the same thing.
#[test]
fn gateway_session_matches_in_process_session() {
    let cfg = SimConfig::default();
    let piece = fixtures::broken_chords();
    let notes: Vec<_> = piece.notes.iter().filter(|n| n.onset_ms < 6000.0).copied().collect();
    let pedals: Vec<_> = piece.pedals.iter().filter(|p| p.time_ms < 6000.0).copied().collect();
    let script = performance_script(&notes, &pedals, &[6000.5, 14000.25], &cfg.engine.pedals);
    let end_ms = 25_000.0;

    // In process.
    let mut direct = Simulation::new(&cfg).unwrap();
    for ev in &script {
        direct.push_input(*ev);
    }
    direct.run_until(end_ms);
    let expected = direct.acoustic_log();
    let mut feed = Feed::new(cfg.engine.pedals);
    let expected_records: Vec<String> = direct
        .events()
        .iter()
        .flat_map(|e| feed.translate(e))
        .map(|m| m.to_string())
        .collect();
    assert!(expected.len() >= 10, "only {} acoustic events", expected.len());

    // Through the gateway.
    let clock: SharedClock = VirtualClock::shared();
    let sim = Simulation::with_clock(&cfg, clock.clone()).unwrap();
    let gw = serve(
        Box::new(VirtualDriver::new(sim, clock)),
        GatewayConfig {
            outbox: 1 << 20,
            heartbeat: Duration::from_secs(3600),
            ..GatewayConfig::default()
        },
    )
    .unwrap();
    let mut observer = join(&gw, Role::Observer);
    let mut performer = join(&gw, Role::Performer);
    let pedal_cfg = PedalConfig::default();
    let mut now = 0.0;
    for ev in &script {
        if ev.timestamp_ms > now {
            performer.send(&ClientMessage::Advance { ms: ev.timestamp_ms - now }).unwrap();
            now = ev.timestamp_ms;
        }
        performer.send(&to_record(ev, &pedal_cfg)).unwrap();
    }
    performer.send(&ClientMessage::Advance { ms: end_ms - now }).unwrap();
    performer.send(&ClientMessage::ConfigGet).unwrap();
    let replies = performer.recv_until(WAIT, |r| r.kind == "config").unwrap();
    assert!(replies.iter().all(|r| r.kind != "error"), "{replies:?}");
    let mut seen = Vec::new();
    while seen.len() < expected_records.len() {
        match observer.recv(WAIT).unwrap() {
            Some(t) if !t.starts_with("heartbeat") => seen.push(t),
            Some(_) => {}
            None => break,
        }
    }
    let finished = gw.shutdown();

    assert_eq!(seen, expected_records);
    assert_eq!(finished.acoustic.unwrap(), expected);
    assert_eq!(finished.end_ms, direct.now_ms());
}

fn to_record(ev: &MidiEvent, pedals: &PedalConfig) -> ClientMessage {
    match ev.kind {
        MidiKind::NoteOn { pitch, velocity } if velocity > 0 => ClientMessage::NoteOn {
            pitch,
            velocity,
            client_time_ms: Some(ev.timestamp_ms),
        },
        MidiKind::NoteOn { pitch, .. } | MidiKind::NoteOff { pitch, .. } => ClientMessage::NoteOff {
            pitch,
            client_time_ms: Some(ev.timestamp_ms),
        },
        MidiKind::Control { controller, value } => ClientMessage::Pedal {
            which: if controller == pedals.soft_controller {
                PedalKind::Soft
            } else {
                PedalKind::Sustain
            },
            down: value >= pedals.threshold,
            client_time_ms: None,
        },
    }
}

#[test]
fn takeover_is_announced_within_100ms() {
    let gw = live_gateway(GatewayConfig::default());
    let mut observer = join(&gw, Role::Observer);
    let mut performer = join(&gw, Role::Performer);
    play_phrase(&mut performer);
    performer.recv_until(WAIT, |r| r.kind == "human_note" && r.field(0) == Some("72") && r.field(3) != Some("-")).unwrap();

    let sent = Instant::now();
    performer.send(&ClientMessage::Takeover { client_time_ms: None }).unwrap();
    let seen = observer.recv_until(WAIT, |r| is_state(r, "generating")).unwrap();
    let elapsed = sent.elapsed();
    assert!(elapsed < Duration::from_millis(100), "generating after {elapsed:?}");
    assert!(seen.iter().any(|r| is_state(r, "finalizing")));
    observer.recv_until(WAIT, |r| r.kind == "ai_note").unwrap();
    observer.recv_until(WAIT, |r| r.kind == "takeover_report").unwrap();

    let stats = gw.ingest_stats();
    assert!(stats.samples_ms.len() >= 9, "{:?}", stats.samples_ms);
    assert!(stats.max_ms() < 5.0, "receipt to ingest up to {:.3} ms", stats.max_ms());
    gw.shutdown();
}

#[test]
fn observers_cannot_play() {
    let gw = live_gateway(GatewayConfig::default());
    let mut observer = join(&gw, Role::Observer);
    for msg in [
        ClientMessage::NoteOn { pitch: 60, velocity: 90, client_time_ms: None },
        ClientMessage::Takeover { client_time_ms: None },
    ] {
        observer.send(&msg).unwrap();
        let seen = observer.recv_until(WAIT, |r| r.kind == "error").unwrap();
        assert!(seen.iter().all(|r| r.kind != "human_note" && r.kind != "human_pedal"), "{seen:?}");
    }
    assert!(gw.ingest_latencies_ms().is_empty());
    gw.shutdown();
}

#[test]
fn malformed_records_get_an_error_and_keep_the_connection() {
    let gw = live_gateway(GatewayConfig {
        settings: vec![("gateway.outbox".into(), "256".into())],
        ..GatewayConfig::default()
    });
    let mut c = join(&gw, Role::Performer);
    for bad in ["note_on 60", "note_on 200 10", "jump", "pedal soft maybe"] {
        c.send_raw(bad).unwrap();
        let seen = c.recv_until(WAIT, |r| r.kind == "error").unwrap();
        assert_eq!(seen.len(), 1, "{seen:?}");
    }
    c.send(&ClientMessage::ConfigGet).unwrap();
    let seen = c.recv_until(WAIT, |r| r.kind == "config").unwrap();
    assert_eq!(seen.last().unwrap().fields, ["gateway.outbox=256"]);
    c.send(&ClientMessage::Advance { ms: 10.0 }).unwrap();
    c.recv_until(WAIT, |r| r.kind == "error").unwrap();
    gw.shutdown();
}

#[test]
fn only_one_performer_at_a_time() {
    let gw = live_gateway(GatewayConfig::default());
    let _first = join(&gw, Role::Performer);
    let mut second = Client::connect(gw.local_addr()).unwrap();
    second.send(&ClientMessage::Hello { role: Role::Performer }).unwrap();
    second.recv_until(WAIT, |r| r.kind == "error").unwrap();
    second.send(&ClientMessage::NoteOn { pitch: 60, velocity: 90, client_time_ms: None }).unwrap();
    second.recv_until(WAIT, |r| r.kind == "error").unwrap();
    gw.shutdown();
}

#[test]
fn performer_can_reclaim_after_reconnecting() {
    let gw = live_gateway(GatewayConfig::default());
    let mut observer = join(&gw, Role::Observer);
    let mut performer = join(&gw, Role::Performer);
    play_phrase(&mut performer);
    performer.send(&ClientMessage::Reclaim { client_time_ms: None }).unwrap();
    performer.recv_until(WAIT, |r| r.kind == "error").unwrap();
    performer.send(&ClientMessage::Takeover { client_time_ms: None }).unwrap();
    performer.recv_until(WAIT, |r| is_state(r, "generating")).unwrap();
    performer.send(&ClientMessage::Takeover { client_time_ms: None }).unwrap();
    performer.recv_until(WAIT, |r| r.kind == "error").unwrap();
    performer.close();

    // The engine keeps playing for the audience.
    observer.recv_until(WAIT, |r| r.kind == "ai_note" && r.field(5) != Some("-")).unwrap();

    let mut back = join(&gw, Role::Performer);
    back.send(&ClientMessage::Reclaim { client_time_ms: None }).unwrap();
    back.recv_until(WAIT, |r| is_state(r, "listen")).unwrap();
    observer.recv_until(WAIT, |r| is_state(r, "listen")).unwrap();
    let finished = gw.shutdown();
    assert!(finished.stats.tokens_generated > 0);
}

#[test]
fn idle_clients_get_heartbeats() {
    let gw = live_gateway(GatewayConfig {
        heartbeat: Duration::from_millis(50),
        ..GatewayConfig::default()
    });
    let mut c = Client::connect(gw.local_addr()).unwrap();
    let mut beats = Vec::new();
    while beats.len() < 3 {
        let t = c.recv(WAIT).unwrap().expect("heartbeat");
        let r = Record::parse(&t).unwrap();
        if r.kind == "heartbeat" {
            beats.push(r.time(0).unwrap());
        }
    }
    assert!(beats.windows(2).all(|w| w[0] < w[1]));
    gw.shutdown();
}
