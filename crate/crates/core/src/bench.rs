//! Takeover latency matrix: prefill strategy × context size × hanging notes,
//! on the mock backend with a per-token cost model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backend::CostModel;
use crate::clock::{SharedClock, VirtualClock, WallClock};
use crate::engine::{PrefillStrategy, TakeoverReport};
use crate::fixtures;
use crate::midi::{Note, PedalEvent};
use crate::sim::{performance_script, SimConfig, SimError, Simulation};
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchClock {
    /// Costs are charged exactly; reports are reproducible bit for bit.
    Virtual,
    /// Real time with idle gaps skipped; measures actual engine overhead.
    Wall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sim: SimConfig,
    pub context_sizes: Vec<usize>,
    pub hanging_counts: Vec<usize>,
    pub clock: BenchClock,
    /// Fixed playback delay of the instrument's own buffered mode, shown as
    /// a baseline column.
    pub native_latency_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let mut sim = SimConfig::default();
        sim.cost = CostModel {
            prefill_ms_per_token: 1.0,
            decode_ms_per_token: 5.0,
        };
        Self {
            sim,
            context_sizes: vec![500, 1000, 2000],
            hanging_counts: vec![0, 3, 8],
            clock: BenchClock::Virtual,
            native_latency_ms: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: String,
    pub target_tokens: usize,
    pub context_tokens: usize,
    pub hanging: usize,
    pub residual_tokens: usize,
    pub finalize_ms: f64,
    /// Relative to the takeover signal, like the two columns after it.
    pub first_token_ms: f64,
    pub first_note_sound_ms: Option<f64>,
    pub native_first_note_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, strategy: &str, target_tokens: usize, hanging: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.target_tokens == target_tokens && r.hanging == hanging)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>8} {:>7} {:>8} {:>11} {:>14} {:>14} {:>14}",
            "strategy", "target", "context", "hanging", "residual", "finalize_ms", "first_token_ms", "first_sound_ms", "native_500_ms"
        );
        for r in &self.rows {
            let sound = r.first_note_sound_ms.map_or("-".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>8} {:>7} {:>8} {:>11.3} {:>14.3} {:>14} {:>14.3}",
                r.strategy,
                r.target_tokens,
                r.context_tokens,
                r.hanging,
                r.residual_tokens,
                r.finalize_ms,
                r.first_token_ms,
                sound,
                r.native_first_note_ms
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "strategy,target_tokens,context_tokens,hanging,residual_tokens,finalize_ms,first_token_ms,first_note_sound_ms,native_first_note_ms\n",
        );
        for r in &self.rows {
            let sound = r.first_note_sound_ms.map_or(String::new(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3},{:.3},{},{:.3}",
                r.strategy,
                r.target_tokens,
                r.context_tokens,
                r.hanging,
                r.residual_tokens,
                r.finalize_ms,
                r.first_token_ms,
                sound,
                r.native_first_note_ms
            );
        }
        s
    }
}

/// Pitches of the chord held through the signal.
const HELD_CHORD: [u8; 8] = [36, 43, 48, 52, 55, 60, 64, 67];
const HOLD_BEFORE_SIGNAL_MS: f64 = 400.0;
const RECLAIM_AFTER_MS: f64 = 3000.0;

/// A performance whose context at takeover is at least `target_tokens`,
/// ending in a chord of `hanging` notes held through the signal.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchTrace {
    pub notes: Vec<Note>,
    pub pedals: Vec<PedalEvent>,
    pub signal_ms: f64,
}

impl BenchTrace {
    pub fn new(target_tokens: usize, hanging: usize, config: &SimConfig) -> Self {
        let tok = &config.engine.tokenizer;
        let (source, source_pedals) = source_material();
        let hanging = hanging.min(HELD_CHORD.len());
        let mut k = 1;
        let (notes, pedals, end) = loop {
            let end = source[k - 1].onset_ms + 1.0;
            let notes: Vec<Note> = source[..k]
                .iter()
                .map(|n| Note::closed(n.pitch, n.onset_ms, n.duration_ms.unwrap().min(end - n.onset_ms).max(1.0), n.velocity))
                .collect();
            let mut pedals: Vec<PedalEvent> =
                source_pedals.iter().filter(|p| p.time_ms < end).copied().collect();
            if pedals.last().is_some_and(|p| p.is_on()) {
                pedals.push(PedalEvent::sustain(false, end));
            }
            let count = tokenize(&notes, &pedals, tok).map_or(0, |t| t.len()) + 3 * hanging;
            if count >= target_tokens || k == source.len() {
                break (notes, pedals, end);
            }
            k += 1;
        };
        let chord_at = end + 100.0;
        let signal_ms = chord_at + HOLD_BEFORE_SIGNAL_MS;
        let mut notes = notes;
        for (i, &pitch) in HELD_CHORD[..hanging].iter().enumerate() {
            let release = signal_ms + 500.0;
            notes.push(Note::closed(pitch, chord_at + i as f64, release - chord_at - i as f64, 70));
        }
        Self {
            notes,
            pedals,
            signal_ms,
        }
    }

    pub fn script(&self, config: &SimConfig) -> Vec<crate::midi::MidiEvent> {
        performance_script(
            &self.notes,
            &self.pedals,
            &[self.signal_ms, self.signal_ms + RECLAIM_AFTER_MS],
            &config.engine.pedals,
        )
    }
}

/// The fixture pieces back to back, twice over.
fn source_material() -> (Vec<Note>, Vec<PedalEvent>) {
    let mut notes = Vec::new();
    let mut pedals = Vec::new();
    let mut offset = 0.0;
    for _ in 0..2 {
        for piece in fixtures::all() {
            let end = piece
                .notes
                .iter()
                .filter_map(Note::offset_ms)
                .chain(piece.pedals.iter().map(|p| p.time_ms))
                .fold(0.0, f64::max);
            notes.extend(piece.notes.iter().map(|n| Note {
                onset_ms: n.onset_ms + offset,
                ..*n
            }));
            pedals.extend(piece.pedals.iter().map(|p| PedalEvent {
                time_ms: p.time_ms + offset,
                ..*p
            }));
            offset += end + 1000.0;
        }
    }
    notes.sort_by(|a, b| a.onset_ms.total_cmp(&b.onset_ms).then(a.pitch.cmp(&b.pitch)));
    (notes, pedals)
}

fn strategy_name(s: PrefillStrategy) -> &'static str {
    match s {
        PrefillStrategy::OneShot => "naive",
        PrefillStrategy::Continuous => "continuous",
    }
}

/// Run one cell and return its first takeover report.
pub fn run_cell(
    config: &BenchConfig,
    strategy: PrefillStrategy,
    target_tokens: usize,
    hanging: usize,
) -> Result<TakeoverReport, SimError> {
    let mut sim_config = config.sim.clone();
    sim_config.engine.strategy = strategy;
    let trace = BenchTrace::new(target_tokens, hanging, &sim_config);
    let clock: SharedClock = match config.clock {
        BenchClock::Virtual => VirtualClock::shared(),
        BenchClock::Wall => std::sync::Arc::new(WallClock::fast_forward()),
    };
    let mut sim = Simulation::with_clock(&sim_config, clock)?;
    for ev in trace.script(&sim_config) {
        sim.push_input(ev);
    }
    sim.run_to_end();
    let outcome = sim.outcome();
    outcome
        .reports
        .into_iter()
        .next()
        .ok_or_else(|| SimError::Config("bench trace produced no takeover".into()))
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport, SimError> {
    let mut rows = Vec::new();
    for strategy in [PrefillStrategy::OneShot, PrefillStrategy::Continuous] {
        for &target in &config.context_sizes {
            for &hanging in &config.hanging_counts {
                let r = run_cell(config, strategy, target, hanging)?;
                let first_token = r.first_token_ms.map_or(f64::NAN, |t| t - r.signal_time_ms);
                rows.push(BenchRow {
                    strategy: strategy_name(strategy).to_string(),
                    target_tokens: target,
                    context_tokens: r.context_tokens,
                    hanging: r.hanging_count,
                    residual_tokens: r.residual_tokens,
                    finalize_ms: r.finalize_ms,
                    first_token_ms: first_token,
                    first_note_sound_ms: r.first_note_sound_ms.map(|t| t - r.signal_time_ms),
                    native_first_note_ms: first_token + config.native_latency_ms,
                });
            }
        }
    }
    Ok(BenchReport { rows })
}
