//! Velocity -> actuation-latency tables and the routine that measures them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::instrument::{AcousticKind, VirtualInstrument};
use crate::midi::MidiEvent;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bucket {
    pub lo: u8,
    pub hi: u8,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    buckets: Vec<Bucket>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("buckets do not partition 1..=127: {0}")]
    NotAPartition(String),
    #[error("latency {latency} ms in bucket {lo}..={hi} is not positive")]
    NonPositive { lo: u8, hi: u8, latency: f64 },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no acoustic confirmation for velocities {0:?}; table incomplete")]
    Unmeasured(Vec<u8>),
    #[error("no probe velocities given")]
    NoVelocities,
}

impl CalibrationTable {
    pub fn new(buckets: Vec<Bucket>) -> Result<Self, CalibrationError> {
        let mut expect = 1u16;
        for b in &buckets {
            if u16::from(b.lo) != expect || b.hi < b.lo {
                return Err(CalibrationError::NotAPartition(format!(
                    "bucket {}..={} where {expect} was expected next",
                    b.lo, b.hi
                )));
            }
            if !(b.latency_ms > 0.0 && b.latency_ms.is_finite()) {
                return Err(CalibrationError::NonPositive {
                    lo: b.lo,
                    hi: b.hi,
                    latency: b.latency_ms,
                });
            }
            expect = u16::from(b.hi) + 1;
        }
        if expect != 128 {
            return Err(CalibrationError::NotAPartition(format!(
                "coverage ends at {}",
                expect - 1
            )));
        }
        Ok(Self {
            buckets,
            meta: BTreeMap::new(),
        })
    }

    /// One bucket per velocity, straight from a latency function.
    pub fn from_fn(f: impl Fn(u8) -> f64) -> Result<Self, CalibrationError> {
        Self::new(
            (1..=127u8)
                .map(|v| Bucket {
                    lo: v,
                    hi: v,
                    latency_ms: f(v),
                })
                .collect(),
        )
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    /// Total over 0..=127; velocity 0 uses the first bucket.
    pub fn latency(&self, velocity: u8) -> f64 {
        let v = velocity.clamp(1, 127);
        let i = self.buckets.partition_point(|b| b.hi < v);
        self.buckets[i].latency_ms
    }

    pub fn max_latency(&self) -> f64 {
        self.buckets.iter().map(|b| b.latency_ms).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# meta {k}={v}");
        }
        for b in &self.buckets {
            let _ = writeln!(s, "bucket {} {} {:.3}", b.lo, b.hi, b.latency_ms);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CalibrationError> {
        let mut meta = BTreeMap::new();
        let mut buckets = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |reason: &str| CalibrationError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# meta ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| err("meta line without '='"))?;
                meta.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "bucket" {
                return Err(err("expected `bucket <lo> <hi> <latency_ms>`"));
            }
            let lo = parts[1].parse().map_err(|_| err("bad lo"))?;
            let hi = parts[2].parse().map_err(|_| err("bad hi"))?;
            let latency_ms = parts[3].parse().map_err(|_| err("bad latency"))?;
            buckets.push(Bucket { lo, hi, latency_ms });
        }
        let mut table = Self::new(buckets)?;
        table.meta = meta;
        Ok(table)
    }
}

/// Something that can strike a key and report when it sounded.
pub trait ProbeTarget {
    fn name(&self) -> String;

    /// Send a probe NoteOn (and its release) at `send_ms`; the acoustic onset
    /// time, or `None` when no confirmation arrived.
    fn probe(&mut self, pitch: u8, velocity: u8, send_ms: f64) -> Option<f64>;
}

impl ProbeTarget for VirtualInstrument {
    fn name(&self) -> String {
        "virtual-disklavier".into()
    }

    fn probe(&mut self, pitch: u8, velocity: u8, send_ms: f64) -> Option<f64> {
        let sounded = self
            .receive(MidiEvent::note_on(pitch, velocity, send_ms))
            .into_iter()
            .find(|e| e.kind == AcousticKind::Sounded)?;
        self.receive(MidiEvent::note_off(pitch, sounded.time_ms + 50.0));
        Some(sounded.time_ms)
    }
}

/// Spacing between probes, long enough for any action to reset.
pub const PROBE_SPACING_MS: f64 = 400.0;
const PROBE_PITCH: u8 = 60;

/// Measure each velocity `repeats` times; buckets split at midpoints between
/// probed velocities, each taking its probe's mean latency.
pub fn run_calibration(
    target: &mut dyn ProbeTarget,
    velocities: &[u8],
    repeats: u32,
) -> Result<CalibrationTable, CalibrationError> {
    let mut vels: Vec<u8> = velocities.iter().copied().filter(|v| *v >= 1).collect();
    vels.sort_unstable();
    vels.dedup();
    if vels.is_empty() || repeats == 0 {
        return Err(CalibrationError::NoVelocities);
    }
    let mut t = 0.0;
    let mut means = Vec::with_capacity(vels.len());
    let mut missing = Vec::new();
    for &v in &vels {
        let mut sum = 0.0;
        let mut n = 0u32;
        for _ in 0..repeats {
            if let Some(at) = target.probe(PROBE_PITCH, v, t) {
                sum += at - t;
                n += 1;
            }
            t += PROBE_SPACING_MS;
        }
        if n < repeats {
            missing.push(v);
        }
        means.push(if n > 0 { sum / f64::from(n) } else { f64::NAN });
    }
    if !missing.is_empty() {
        return Err(CalibrationError::Unmeasured(missing));
    }
    let mut buckets = Vec::with_capacity(vels.len());
    let mut lo = 1u8;
    for (i, &v) in vels.iter().enumerate() {
        let hi = match vels.get(i + 1) {
            Some(&next) => ((u16::from(v) + u16::from(next)) / 2) as u8,
            None => 127,
        };
        buckets.push(Bucket {
            lo,
            hi,
            latency_ms: means[i],
        });
        lo = hi.saturating_add(1);
    }
    Ok(CalibrationTable::new(buckets)?
        .with_meta("instrument", target.name())
        .with_meta("repeats", repeats.to_string()))
}

pub fn all_velocities() -> Vec<u8> {
    (1..=127).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::InstrumentModel;

    #[test]
    fn lookup_is_total() {
        let t = CalibrationTable::new(vec![
            Bucket { lo: 1, hi: 63, latency_ms: 100.0 },
            Bucket { lo: 64, hi: 127, latency_ms: 50.0 },
        ])
        .unwrap();
        assert_eq!(t.latency(0), 100.0);
        assert_eq!(t.latency(63), 100.0);
        assert_eq!(t.latency(64), 50.0);
        assert_eq!(t.latency(127), 50.0);
    }

    #[test]
    fn gaps_and_overlaps_are_rejected() {
        let gap = CalibrationTable::new(vec![
            Bucket { lo: 1, hi: 60, latency_ms: 1.0 },
            Bucket { lo: 62, hi: 127, latency_ms: 1.0 },
        ]);
        assert!(matches!(gap, Err(CalibrationError::NotAPartition(_))));
        let short = CalibrationTable::new(vec![Bucket { lo: 1, hi: 100, latency_ms: 1.0 }]);
        assert!(matches!(short, Err(CalibrationError::NotAPartition(_))));
    }

    #[test]
    fn golden_text() {
        let t = CalibrationTable::new(vec![
            Bucket { lo: 1, hi: 63, latency_ms: 101.25 },
            Bucket { lo: 64, hi: 127, latency_ms: 45.0 },
        ])
        .unwrap()
        .with_meta("instrument", "virtual-disklavier")
        .with_meta("date", "2026-01-02")
        .with_meta("repeats", "3");
        let text = t.to_text();
        assert_eq!(
            text,
            "# meta date=2026-01-02\n# meta instrument=virtual-disklavier\n# meta repeats=3\nbucket 1 63 101.250\nbucket 64 127 45.000\n"
        );
        assert_eq!(CalibrationTable::parse(&text).unwrap(), t);
    }

    #[test]
    fn midpoint_buckets() {
        let mut inst = VirtualInstrument::new(InstrumentModel::default());
        let t = run_calibration(&mut inst, &[1, 64, 127], 1).unwrap();
        let spans: Vec<(u8, u8)> = t.buckets().iter().map(|b| (b.lo, b.hi)).collect();
        assert_eq!(spans, vec![(1, 32), (33, 95), (96, 127)]);
    }

    struct Deaf;
    impl ProbeTarget for Deaf {
        fn name(&self) -> String {
            "deaf".into()
        }
        fn probe(&mut self, _: u8, v: u8, t: f64) -> Option<f64> {
            (v != 90).then_some(t + 10.0)
        }
    }

    #[test]
    fn missing_confirmations_invalidate_table() {
        let err = run_calibration(&mut Deaf, &[10, 90], 2).unwrap_err();
        assert_eq!(err, CalibrationError::Unmeasured(vec![90]));
    }
}
