//! Re-play the generated part of a recorded session through the scheduler
//! and the virtual instrument, and check the playback invariants.

use std::collections::HashMap;
use std::fmt::Write as _;

use duet_core::engine::{EngineOutput, Feedback};
use duet_core::host::{InstrumentSink, Playback};
use duet_core::instrument::{stuck_keys, AcousticKind, InstrumentModel, VirtualInstrument};
use duet_core::midi::{MidiKind, Recording};
use duet_core::scheduler::{CalibrationTable, EmissionKind, Scheduler, SchedulerConfig};

/// How early before its send time each note is handed to the scheduler.
const HANDOVER_LEAD_MS: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub notes: usize,
    pub sounded: usize,
    pub worst_error_ms: f64,
    pub tolerance_ms: f64,
    /// Notes whose strike the retrigger guard had to move.
    pub guarded: usize,
    pub violations: Vec<String>,
}

impl ReplayReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "generated notes   {}", self.notes);
        let _ = writeln!(s, "sounded           {}", self.sounded);
        let _ = writeln!(s, "moved by guard    {}", self.guarded);
        let _ = writeln!(
            s,
            "worst onset error {:.3} ms (tolerance {:.3} ms)",
            self.worst_error_ms, self.tolerance_ms
        );
        if self.violations.is_empty() {
            s.push_str("all invariants hold\n");
        } else {
            for v in &self.violations {
                let _ = writeln!(s, "VIOLATION: {v}");
            }
        }
        s
    }
}

/// Onset error allowed for a note the guard left alone: a millisecond of
/// calibration rounding, one tick of send quantization, and the instrument's
/// jitter both in the table and in the strike.
pub fn tolerance_ms(scheduler: &SchedulerConfig, instrument: &InstrumentModel) -> f64 {
    1.0 + scheduler.tick_ms + 2.0 * instrument.jitter_ms
}

/// Generated notes the instrument could not have played as recorded: a key
/// sounding again before it was damped or before its reset time had passed.
fn recording_violations(rec: &Recording, instrument: &InstrumentModel) -> Vec<String> {
    let mut out = Vec::new();
    let mut damped: [Option<f64>; 128] = [None; 128];
    for n in rec.generated_notes() {
        let p = usize::from(n.pitch);
        if let Some(off) = damped[p] {
            if n.onset_ms < off + instrument.reset_time_ms {
                out.push(format!(
                    "recording: pitch {} sounds at {:.3} ms, {:.3} ms after it was damped",
                    n.pitch,
                    n.onset_ms,
                    n.onset_ms - off
                ));
            }
        }
        damped[p] = Some(n.offset_ms().unwrap_or(n.onset_ms));
    }
    out
}

pub fn replay(
    rec: &Recording,
    scheduler: SchedulerConfig,
    instrument: InstrumentModel,
    table: CalibrationTable,
) -> ReplayReport {
    let tolerance = tolerance_ms(&scheduler, &instrument);
    let max_latency = table.max_latency();
    let mut notes: Vec<(u64, EngineOutput, f64)> = rec
        .generated_notes()
        .enumerate()
        .map(|(i, n)| {
            let on = n.onset_ms;
            let out = EngineOutput::ScheduleNote {
                id: i as u64,
                pitch: n.pitch,
                velocity: n.velocity.max(1),
                target_on_ms: on,
                target_off_ms: n.offset_ms().unwrap_or(on),
            };
            (i as u64, out, on - max_latency - HANDOVER_LEAD_MS)
        })
        .collect();
    notes.sort_by(|a, b| a.2.total_cmp(&b.2));
    let targets: HashMap<u64, (u8, u8, f64)> = notes
        .iter()
        .map(|(id, out, _)| match *out {
            EngineOutput::ScheduleNote {
                pitch,
                velocity,
                target_on_ms,
                ..
            } => (*id, (pitch, velocity, target_on_ms)),
            _ => unreachable!(),
        })
        .collect();

    let mut violations = recording_violations(rec, &instrument);
    let mut playback = Playback::new(
        Scheduler::new(scheduler, table.clone()),
        InstrumentSink::new(VirtualInstrument::new(instrument)),
        true,
    );
    let mut emitted = Vec::new();
    for (_, out, at) in &notes {
        playback.tick_until(*at);
        emitted.extend(playback.take_emitted());
        playback.apply(std::slice::from_ref(out), *at);
    }
    playback.tick_until(f64::MAX / 4.0);
    emitted.extend(playback.take_emitted());

    let mut sounded = HashMap::new();
    let mut dropped = Vec::new();
    while let Some((_, fb)) = playback.pop_feedback(f64::MAX) {
        match fb {
            Feedback::Sounded { id, time_ms } => {
                if sounded.insert(id, time_ms).is_some() {
                    violations.push(format!("note {id} sounded twice"));
                }
            }
            Feedback::Dropped { id } => {
                let (pitch, _, on) = targets[&id];
                dropped.push(id);
                violations.push(format!("note {id} (pitch {pitch} at {on:.3} ms) was dropped"));
            }
            _ => {}
        }
    }

    // Per-key alternation and the retrigger gap, on what was actually sent.
    let mut last: [Option<(bool, f64)>; 128] = [None; 128];
    let mut guarded_ids = Vec::new();
    for em in &emitted {
        let (pitch, on) = match em.event.kind {
            MidiKind::NoteOn { pitch, .. } => (pitch, true),
            MidiKind::NoteOff { pitch, .. } => (pitch, false),
            MidiKind::Control { .. } => continue,
        };
        let t = em.event.timestamp_ms;
        match (last[usize::from(pitch)], on) {
            (None | Some((false, _)), true) => {
                if let Some((false, off)) = last[usize::from(pitch)] {
                    if t - off < scheduler.retrigger_gap_ms - 1e-9 {
                        violations.push(format!(
                            "pitch {pitch} re-struck {:.3} ms after its release at {off:.3} ms",
                            t - off
                        ));
                    }
                    let (_, velocity, target) = targets[&em.tag];
                    if off + scheduler.retrigger_gap_ms > target - table.latency(velocity) - 1e-9 {
                        guarded_ids.push(em.tag);
                    }
                }
            }
            (Some((true, _)), false) => {}
            (state, _) => violations.push(format!(
                "pitch {pitch}: {} at {t:.3} ms after {state:?}",
                if on { "NoteOn" } else { "NoteOff" }
            )),
        }
        if em.kind != EmissionKind::Pedal {
            last[usize::from(pitch)] = Some((on, t));
        }
    }

    let sink = playback.sink();
    if sink.rejected > 0 {
        violations.push(format!("instrument rejected {} strikes", sink.rejected));
    }
    let log = sink.instrument.log();
    let stuck = stuck_keys(&log);
    if !stuck.is_empty() {
        violations.push(format!("keys left sounding: {stuck:?}"));
    }
    let rejected_in_log = log.iter().filter(|e| e.kind == AcousticKind::RejectedRetrigger).count();
    if rejected_in_log as u64 != sink.rejected {
        violations.push("instrument log and sink disagree on rejected strikes".into());
    }

    let mut worst: f64 = 0.0;
    let mut ids: Vec<_> = sounded.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        if guarded_ids.contains(&id) {
            continue;
        }
        let (pitch, _, target) = targets[&id];
        let err = sounded[&id] - target;
        worst = worst.max(err.abs());
        if err.abs() > tolerance {
            violations.push(format!(
                "note {id} (pitch {pitch}) sounded {err:+.3} ms from its target {target:.3} ms"
            ));
        }
    }
    let mut silent: Vec<u64> = targets
        .keys()
        .filter(|id| !sounded.contains_key(id) && !dropped.contains(id))
        .copied()
        .collect();
    silent.sort_unstable();
    for id in silent {
        violations.push(format!("note {id} never sounded"));
    }

    ReplayReport {
        notes: targets.len(),
        sounded: sounded.len(),
        worst_error_ms: worst,
        tolerance_ms: tolerance,
        guarded: guarded_ids.len(),
        violations,
    }
}
