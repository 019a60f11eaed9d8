//! Acceptance criteria, each at its stated tolerance. Prints one PASS/FAIL
//! line per criterion and fails if any criterion fails.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use duet_core::backend::CostModel;
use duet_core::bench::{run_bench, run_cell, BenchClock, BenchConfig};
use duet_core::engine::{EngineOutput, PrefillStrategy, ReclaimFlush, SpeculativePolicy};
use duet_core::host::{InstrumentSink, Playback};
use duet_core::instrument::{export_log, stuck_keys, AcousticKind, InstrumentModel, VirtualInstrument};
use duet_core::midi::{MidiKind, Note, PedalConfig, PedalEvent};
use duet_core::scheduler::{
    all_velocities, run_calibration, EmissionKind, Scheduler, SchedulerConfig,
};
use duet_core::sim::{performance_script, SimConfig, SimOutcome, Simulation};
use duet_core::tokenizer::{detokenize, detokenize_from, tokenize, tokenize_from, TokenizerConfig};

use common::*;

type Verdict = Result<String, String>;

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("continuous prefill removes takeover latency", first_token_latency),
        ("finalize time with hanging notes", finalize_time),
        ("incremental context matches one-shot tokenization", incremental_equals_one_shot),
        ("calibrated playback timing", calibrated_timing),
        ("retrigger gap is always respected", retrigger_gap),
        ("every sounded note is damped", no_stuck_notes),
        ("tokenizer round trip equals quantization", round_trip),
        ("context equals the merged sounded performance", context_is_merged_performance),
        ("bench and acoustic logs are reproducible", reproducible),
    ];
    println!();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let verdict = f();
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn first_token_latency() -> Verdict {
    let t = Instant::now();
    let config = BenchConfig::default();
    let report = run_bench(&config).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed().as_secs_f64();
    ensure(elapsed < 60.0, || format!("bench took {elapsed:.1}s"))?;
    let mut worst_naive = f64::INFINITY;
    let mut worst_cont = 0.0f64;
    for &h in &config.hanging_counts {
        let naive = report.row("naive", 2000, h).ok_or("missing naive row")?;
        let cont = report.row("continuous", 2000, h).ok_or("missing continuous row")?;
        ensure(naive.context_tokens >= 2000, || format!("naive context only {} tokens", naive.context_tokens))?;
        ensure(naive.first_token_ms >= 2000.0, || {
            format!("naive first token {:.3} ms after signal with {h} hanging", naive.first_token_ms)
        })?;
        ensure(cont.first_token_ms <= 150.0, || {
            format!("continuous first token {:.3} ms after signal with {h} hanging", cont.first_token_ms)
        })?;
        worst_naive = worst_naive.min(naive.first_token_ms);
        worst_cont = worst_cont.max(cont.first_token_ms);
    }
    Ok(format!(
        "naive >= {worst_naive:.1} ms, continuous <= {worst_cont:.1} ms, matrix in {elapsed:.2}s"
    ))
}

fn finalize_time() -> Verdict {
    let mut config = BenchConfig::default();
    config.clock = BenchClock::Wall;
    config.sim.cost = CostModel::free();
    config.sim.engine.speculative_policy = SpeculativePolicy::ModelPredicted;
    let mut worst = [0.0f64; 2];
    for _ in 0..5 {
        for (slot, hanging) in [(0, 0usize), (1, 8)] {
            let r = run_cell(&config, PrefillStrategy::Continuous, 2000, hanging).map_err(|e| e.to_string())?;
            ensure(r.hanging_count == hanging, || format!("expected {hanging} hanging, got {}", r.hanging_count))?;
            worst[slot] = worst[slot].max(r.finalize_ms);
        }
    }
    ensure(worst[1] <= 200.0, || format!("8 hanging: {:.3} ms", worst[1]))?;
    ensure(worst[0] <= 10.0, || format!("0 hanging: {:.3} ms", worst[0]))?;
    Ok(format!("worst of 5: 8 hanging {:.3} ms, 0 hanging {:.3} ms", worst[1], worst[0]))
}

fn incremental_equals_one_shot() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policies = [
        SpeculativePolicy::Elapsed,
        SpeculativePolicy::ElapsedPlusExtension,
        SpeculativePolicy::ModelPredicted,
    ];
    let mut hanging_total = 0;
    for session in 0..1000 {
        let mut cfg = SimConfig::default();
        cfg.engine.prefill_chunk_tokens = [1, 5, 64][rng.gen_range(0..3)];
        cfg.engine.speculative_policy = policies[rng.gen_range(0..3)];
        cfg.engine.sampling.max_new_tokens = 32;
        cfg.cost = CostModel {
            prefill_ms_per_token: [0.0, 0.2, 1.0][rng.gen_range(0..3)],
            decode_ms_per_token: [0.0, 2.0][rng.gen_range(0..2)],
        };
        let len = grid_time(&mut rng, 500.0, 20_000.0);
        let (notes, pedals) = random_phrase(&mut rng, 0.0, len, 120);
        let first = notes[0].onset_ms;
        let signal = grid_time(&mut rng, first + 0.1, len);
        let script = performance_script(&notes, &pedals, &[signal, signal + 2000.0], &cfg.engine.pedals);
        let out = Simulation::run_script(&cfg, &script).map_err(|e| e.to_string())?;
        let (snap, report) = match (out.snapshots.first(), out.reports.first()) {
            (Some(s), Some(r)) => (s, r),
            _ => return Err(format!("session {session}: no takeover")),
        };
        let (wire_notes, wire_pedals) = pair_wire(&script, &cfg.engine.pedals);
        let tok = cfg.engine.tokenizer;
        for s in &report.speculated {
            let elapsed = q_duration(report.signal_time_ms - s.onset_ms, &tok);
            let extended = q_duration(f64::from(elapsed) + cfg.engine.extension_ms, &tok);
            let ok = match cfg.engine.speculative_policy {
                SpeculativePolicy::Elapsed => s.duration_ms == elapsed,
                SpeculativePolicy::ElapsedPlusExtension => s.duration_ms == extended,
                SpeculativePolicy::ModelPredicted if s.fallback => s.duration_ms == extended,
                SpeculativePolicy::ModelPredicted => s.duration_ms >= elapsed,
            };
            ensure(ok, || format!("session {session}: speculated {s:?} under {:?}", cfg.engine.speculative_policy))?;
        }
        hanging_total += report.speculated.len();
        let human = human_notes_at_takeover(&wire_notes, &out.reports, 0).map_err(|e| format!("session {session}: {e}"))?;
        let pedals: Vec<PedalEvent> = wire_pedals.into_iter().filter(|p| p.time_ms <= signal).collect();
        let expected = tokenize(&human, &pedals, &tok).map_err(|e| e.to_string())?;
        ensure(snap.origin_ms == 0, || format!("session {session}: context origin moved to {}", snap.origin_ms))?;
        if snap.context != expected {
            let at = snap.context.iter().zip(&expected).position(|(a, b)| a != b);
            return Err(format!(
                "session {session}: context differs at {at:?} (lengths {} vs {})",
                snap.context.len(),
                expected.len()
            ));
        }
    }
    Ok(format!("1000 sessions identical, {hanging_total} notes speculated"))
}

/// Same-pitch notes far enough apart that retrigger protection never
/// moves them, all targets reachable.
fn timing_errors(model: InstrumentModel, repeats: u32, seed: u64) -> Result<Vec<f64>, String> {
    let mut probe = VirtualInstrument::new(InstrumentModel {
        seed: model.seed ^ 0x5eed,
        ..model
    });
    let table = run_calibration(&mut probe, &all_velocities(), repeats).map_err(|e| e.to_string())?;
    let max_latency = table.max_latency();
    let config = SchedulerConfig::default();
    let mut playback = Playback::new(
        Scheduler::new(config, table),
        InstrumentSink::new(VirtualInstrument::new(model)),
        true,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = std::collections::HashMap::new();
    let mut next_free = [max_latency + 1.0; 128];
    let mut notes = Vec::new();
    for id in 0..4000u64 {
        let pitch = rng.gen_range(21u8..109);
        let velocity = rng.gen_range(1u8..=127);
        let on = next_free[usize::from(pitch)] + grid_time(&mut rng, 0.0, 2000.0);
        let dur = grid_time(&mut rng, 20.0, 300.0);
        next_free[usize::from(pitch)] = on + dur + 250.0;
        targets.insert(id, on);
        notes.push(EngineOutput::ScheduleNote {
            id,
            pitch,
            velocity,
            target_on_ms: on,
            target_off_ms: on + dur,
        });
    }
    // Each note is handed over a little before its send time, as the
    // engine would.
    let lead = |o: &EngineOutput| match o {
        EngineOutput::ScheduleNote { target_on_ms, .. } => target_on_ms - max_latency - 20.0,
        _ => unreachable!(),
    };
    notes.sort_by(|a, b| lead(a).total_cmp(&lead(b)));
    for o in &notes {
        playback.apply(std::slice::from_ref(o), lead(o));
    }
    playback.tick_until(f64::MAX / 4.0);
    let mut errors = Vec::new();
    while let Some((_, fb)) = playback.pop_feedback(f64::MAX) {
        match fb {
            duet_core::engine::Feedback::Sounded { id, time_ms } => errors.push(time_ms - targets[&id]),
            duet_core::engine::Feedback::Dropped { id } => return Err(format!("note {id} dropped")),
            _ => {}
        }
    }
    ensure(errors.len() == targets.len(), || format!("{} of {} notes sounded", errors.len(), targets.len()))?;
    Ok(errors)
}

fn calibrated_timing() -> Verdict {
    let tick = SchedulerConfig::default().tick_ms;
    let clean = timing_errors(InstrumentModel::default(), 1, 4)?;
    let within2 = clean.iter().filter(|e| e.abs() <= 2.0).count() as f64 / clean.len() as f64;
    let worst_clean = clean.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    ensure(within2 >= 0.99, || format!("noiseless: only {:.2}% within 2 ms", within2 * 100.0))?;
    ensure(worst_clean <= 1.0 + tick, || format!("noiseless: worst error {worst_clean:.3} ms"))?;
    let noisy = timing_errors(
        InstrumentModel {
            jitter_ms: 5.0,
            seed: 11,
            ..InstrumentModel::default()
        },
        50,
        5,
    )?;
    let worst_noisy = noisy.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    ensure(worst_noisy <= 8.0, || format!("jitter 5 ms: worst error {worst_noisy:.3} ms"))?;
    Ok(format!(
        "noiseless {:.2}% within 2 ms, worst {worst_clean:.3} ms; jitter 5 ms worst {worst_noisy:.3} ms ({} notes each)",
        within2 * 100.0,
        clean.len()
    ))
}

fn duet_config(rng: &mut impl Rng) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.cost.decode_ms_per_token = [0.0, 5.0][rng.gen_range(0..2)];
    cfg.cost.prefill_ms_per_token = [0.0, 0.5][rng.gen_range(0..2)];
    cfg.engine.reclaim_flush = if rng.gen_bool(0.5) {
        ReclaimFlush::CutImmediately
    } else {
        ReclaimFlush::FinishSoundingNotes
    };
    cfg.engine.sampling.seed = rng.gen();
    cfg
}

fn retrigger_gap() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut notes_sent = 0;
    for trace in 0..1000 {
        let cfg = duet_config(&mut rng);
        let turns = rng.gen_range(1..=4);
        let duet = random_duet(&mut rng, turns, 6000.0);
        let out = Simulation::run_script(&cfg, &duet.script(&cfg.engine.pedals)).map_err(|e| e.to_string())?;
        let gap = cfg.scheduler.retrigger_gap_ms;
        let mut last_off = [f64::NEG_INFINITY; 128];
        for em in &out.emitted {
            let Some(p) = em.event.pitch() else { continue };
            let t = em.event.timestamp_ms;
            match em.kind {
                EmissionKind::NoteOff => last_off[usize::from(p)] = t,
                EmissionKind::NoteOn => {
                    notes_sent += 1;
                    let since = t - last_off[usize::from(p)];
                    ensure(since >= gap - 1e-9, || {
                        format!("trace {trace}: pitch {p} struck {since:.3} ms after its release")
                    })?;
                }
                EmissionKind::Pedal => {}
            }
        }
        let rejected = out.acoustic.iter().filter(|e| e.kind == AcousticKind::RejectedRetrigger).count();
        ensure(rejected == 0 && out.rejected == 0, || format!("trace {trace}: {rejected} rejected retriggers"))?;
    }
    Ok(format!("1000 traces, {notes_sent} notes sent, no violations"))
}

fn no_stuck_notes() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut reclaims = 0;
    for run in 0..600 {
        let mut cfg = duet_config(&mut rng);
        cfg.engine.key_press_reclaim = rng.gen_bool(0.5);
        let turns = rng.gen_range(1..=3);
        let mut duet = random_duet(&mut rng, turns, 3000.0);
        duet.add_interruptions(&mut rng);
        duet.notes.sort_by(|a, b| a.onset_ms.total_cmp(&b.onset_ms));
        let mut sim = Simulation::new(&cfg).map_err(|e| e.to_string())?;
        for ev in duet.script(&cfg.engine.pedals) {
            sim.push_input(ev);
        }
        sim.run_to_end();
        let out = sim.outcome();
        reclaims += out.reports.len();
        let stuck = stuck_keys(&out.acoustic);
        ensure(stuck.is_empty(), || format!("run {run}: keys left sounding {stuck:?}"))?;
        let down = sim.playback().sink().instrument.keys_down();
        ensure(down.is_empty(), || format!("run {run}: keys held down {down:?}"))?;
        let mut open = [false; 128];
        for em in &out.emitted {
            match (em.kind, em.event.pitch()) {
                (EmissionKind::NoteOn, Some(p)) => open[usize::from(p)] = true,
                (EmissionKind::NoteOff, Some(p)) => open[usize::from(p)] = false,
                _ => {}
            }
        }
        ensure(!open.contains(&true), || format!("run {run}: NoteOn without NoteOff"))?;
        let pedal_down = out
            .emitted
            .iter()
            .filter_map(|e| match (e.kind, e.event.kind) {
                (EmissionKind::Pedal, MidiKind::Control { value, .. }) => Some(value >= 64),
                _ => None,
            })
            .last()
            .unwrap_or(false);
        ensure(!pedal_down, || format!("run {run}: sustain left down"))?;
    }
    Ok(format!("600 runs, {reclaims} generations interrupted, nothing left sounding"))
}

/// Representative velocity of a bucket, found by scanning every velocity.
fn bucket_representative(velocity: u8, buckets: u32) -> u8 {
    let bucket_of = |v: u32| (f64::from(v) * f64::from(buckets) / 128.0).floor() as u32;
    let b = bucket_of(u32::from(velocity));
    let members: Vec<u32> = (1..=127).filter(|&v| bucket_of(v) == b).collect();
    ((members[0] + members[members.len() - 1]) / 2) as u8
}

fn round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..10_000 {
        let cfg = TokenizerConfig {
            time_resolution_ms: [1, 5, 10, 20][rng.gen_range(0..4)],
            segment_ms: [1000, 2000, 5000][rng.gen_range(0..3)],
            velocity_buckets: [4, 8, 16, 32, 128][rng.gen_range(0..5)],
            max_duration_ms: [2000, 10_000][rng.gen_range(0..2)],
        };
        let len = grid_time(&mut rng, 100.0, 30_000.0);
        let (notes, pedals) = random_phrase(&mut rng, 0.0, len, 60);
        let tokens = tokenize(&notes, &pedals, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        let (mut got_notes, got_pedals) = detokenize(&tokens, &cfg).map_err(|e| format!("case {case}: {e}"))?;
        let res = cfg.time_resolution_ms;
        let mut want_notes: Vec<Note> = notes
            .iter()
            .map(|n| {
                Note::closed(
                    n.pitch,
                    q_time(n.onset_ms, res) as f64,
                    f64::from(q_duration(n.duration_ms.unwrap(), &cfg)),
                    bucket_representative(n.velocity, cfg.velocity_buckets),
                )
            })
            .collect();
        let key = |n: &Note| (n.onset_ms as u64, n.pitch, n.duration_ms.unwrap() as u64, n.velocity);
        want_notes.sort_by_key(key);
        got_notes.sort_by_key(key);
        ensure(got_notes == want_notes, || format!("case {case}: notes differ"))?;
        let mut want_pedals: Vec<(u64, bool)> = pedals.iter().map(|p| (q_time(p.time_ms, res), p.is_on())).collect();
        want_pedals.sort_by_key(|p| p.0);
        let got: Vec<(u64, bool)> = got_pedals.iter().map(|p| (p.time_ms as u64, p.is_on())).collect();
        ensure(got == want_pedals, || format!("case {case}: pedals {got:?} vs {want_pedals:?}"))?;
    }
    Ok("10000 performances".into())
}

fn merged_oracle(
    out: &SimOutcome,
    human_notes: &[Note],
    human_pedals: &[PedalEvent],
    turn: usize,
) -> Result<(Vec<Note>, Vec<PedalEvent>), String> {
    let report = &out.reports[turn];
    let signal = report.signal_time_ms;
    let mut notes = human_notes_at_takeover(human_notes, &out.reports, turn)?;
    notes.extend(sounded_notes(&out.acoustic).into_iter().filter(|n| n.onset_ms <= signal));
    let ai_pedals: Vec<(f64, bool)> = sent_pedals(&out.emitted).into_iter().filter(|p| p.0 <= signal).collect();
    let human: Vec<PedalEvent> = human_pedals.iter().filter(|p| p.time_ms <= signal).copied().collect();
    Ok((notes, merge_pedal_timelines(&human, &ai_pedals)))
}

fn context_is_merged_performance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for duet_no in 0..200 {
        let cfg = duet_config(&mut rng);
        let tok = cfg.engine.tokenizer;
        let duet = random_duet(&mut rng, 4, 4000.0);
        let script = duet.script(&cfg.engine.pedals);
        let out = Simulation::run_script(&cfg, &script).map_err(|e| e.to_string())?;
        // A generation that ends by itself turns the next scripted reclaim
        // press into another takeover; those are checked too.
        ensure(out.snapshots.len() >= 4 && out.snapshots.len() == out.reports.len(), || {
            format!("duet {duet_no}: {} takeovers, {} reports", out.snapshots.len(), out.reports.len())
        })?;
        let (wire_notes, wire_pedals) = pair_wire(&script, &cfg.engine.pedals);
        for (turn, snap) in out.snapshots.iter().enumerate() {
            let (notes, pedals) =
                merged_oracle(&out, &wire_notes, &wire_pedals, turn).map_err(|e| format!("duet {duet_no} turn {turn}: {e}"))?;
            let expected = tokenize_from(&notes, &pedals, &tok, snap.origin_ms).map_err(|e| e.to_string())?;
            let (mut want_n, want_p) = detokenize_from(&expected, &tok, snap.origin_ms).map_err(|e| e.to_string())?;
            let (mut got_n, got_p) = detokenize_from(&snap.context, &tok, snap.origin_ms)
                .map_err(|e| format!("duet {duet_no} turn {turn}: context does not decode: {e}"))?;
            let key = |n: &Note| (n.onset_ms as u64, n.pitch, n.duration_ms.unwrap_or(0.0) as u64, n.velocity);
            want_n.sort_by_key(key);
            got_n.sort_by_key(key);
            if got_n != want_n {
                let missing: Vec<_> = want_n.iter().filter(|n| !got_n.contains(n)).take(3).collect();
                let extra: Vec<_> = got_n.iter().filter(|n| !want_n.contains(n)).take(3).collect();
                return Err(format!(
                    "duet {duet_no} turn {turn}: {} vs {} notes, missing {missing:?}, extra {extra:?}",
                    got_n.len(),
                    want_n.len()
                ));
            }
            let pk = |p: &PedalEvent| (p.time_ms as u64, p.is_on());
            let got_p: Vec<_> = got_p.iter().map(pk).collect();
            let want_p: Vec<_> = want_p.iter().map(pk).collect();
            ensure(got_p == want_p, || {
                format!("duet {duet_no} turn {turn}: pedals {got_p:?} vs {want_p:?}")
            })?;
            checked += 1;
        }
    }
    Ok(format!("{checked} takeovers in 200 duets of four turns"))
}

fn reproducible() -> Verdict {
    let a = run_bench(&BenchConfig::default()).map_err(|e| e.to_string())?;
    let b = run_bench(&BenchConfig::default()).map_err(|e| e.to_string())?;
    ensure(a == b && a.to_csv() == b.to_csv(), || "bench reports differ".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for run in 0..20 {
        let mut cfg = duet_config(&mut rng);
        cfg.instrument.jitter_ms = 3.0;
        cfg.instrument.seed = rng.gen();
        cfg.calibration_repeats = 5;
        let duet = random_duet(&mut rng, 3, 5000.0);
        let script = duet.script(&PedalConfig::default());
        let x = Simulation::run_script(&cfg, &script).map_err(|e| e.to_string())?;
        let y = Simulation::run_script(&cfg, &script).map_err(|e| e.to_string())?;
        ensure(export_log(&x.acoustic) == export_log(&y.acoustic), || format!("run {run}: acoustic logs differ"))?;
        ensure(x.emitted == y.emitted && x.log_lines == y.log_lines, || format!("run {run}: emissions differ"))?;
    }
    Ok(format!("bench ({} rows) and 20 duet logs identical across runs", a.rows.len()))
}
