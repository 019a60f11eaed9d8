//! Small procedurally written pieces used to fit the mock backend and to seed
//! example sessions. They are fixed data: changing them changes every golden
//! value that depends on the mock.

use crate::midi::{Note, PedalEvent};

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub name: &'static str,
    pub notes: Vec<Note>,
    pub pedals: Vec<PedalEvent>,
}

pub fn all() -> Vec<Piece> {
    vec![broken_chords(), andalusian(), stride()]
}

fn vel(i: usize, base: u8, spread: u8) -> u8 {
    base + ((i * 7) % usize::from(spread)) as u8
}

/// I-vi-IV-V in C with an eighth-note left hand and a quarter-note tune.
pub fn broken_chords() -> Piece {
    let beat = 500.0;
    let chords: [[u8; 3]; 4] = [[48, 55, 64], [45, 52, 60], [41, 48, 57], [43, 50, 59]];
    let tune: [u8; 16] = [72, 74, 76, 79, 72, 76, 74, 72, 69, 72, 77, 76, 74, 71, 74, 79];
    let mut notes = Vec::new();
    let mut pedals = Vec::new();
    let mut k = 0;
    for cycle in 0..4 {
        for (c, chord) in chords.iter().enumerate() {
            let bar = (cycle * 4 + c) as f64 * 4.0 * beat;
            if cycle + c > 0 {
                pedals.push(PedalEvent::sustain(false, bar + 10.0));
            }
            pedals.push(PedalEvent::sustain(true, bar + 60.0));
            for e in 0..8 {
                let pitch = chord[[0, 1, 2, 1, 0, 1, 2, 1][e]];
                notes.push(Note::closed(pitch, bar + e as f64 * beat / 2.0, 230.0, vel(k, 48, 20)));
                k += 1;
            }
            for q in 0..4 {
                let pitch = tune[(c * 4 + q + cycle) % tune.len()];
                let dur = if q == 3 { 900.0 } else { 440.0 };
                notes.push(Note::closed(pitch, bar + q as f64 * beat + 5.0, dur, vel(k, 70, 30)));
                k += 1;
            }
        }
    }
    pedals.push(PedalEvent::sustain(false, 16.0 * 4.0 * beat));
    sort(&mut notes);
    Piece {
        name: "broken-chords",
        notes,
        pedals,
    }
}

/// Am-G-F-E cadence under a phrygian-dominant line on E.
pub fn andalusian() -> Piece {
    let bar = 1600.0;
    let chords: [[u8; 3]; 4] = [[57, 60, 64], [55, 59, 62], [53, 57, 60], [52, 56, 59]];
    let scale: [u8; 8] = [64, 65, 68, 69, 71, 72, 74, 76];
    let contour: [usize; 12] = [0, 1, 2, 1, 0, 3, 4, 5, 4, 3, 2, 1];
    let mut notes = Vec::new();
    let mut pedals = Vec::new();
    let mut k = 0;
    for round in 0..5 {
        for (c, chord) in chords.iter().enumerate() {
            let t0 = (round * 4 + c) as f64 * bar;
            pedals.push(PedalEvent::sustain(true, t0 + 40.0));
            for (j, p) in chord.iter().enumerate() {
                notes.push(Note::closed(*p - 12, t0 + j as f64 * 15.0, 1500.0, vel(k, 40, 24)));
                k += 1;
            }
            for s in 0..6 {
                let idx = contour[(round * 3 + c * 2 + s) % contour.len()];
                let dur = [260.0, 120.0, 390.0][s % 3];
                notes.push(Note::closed(
                    scale[idx] + if c == 3 && s == 5 { 0 } else { 12 },
                    t0 + s as f64 * 260.0,
                    dur,
                    vel(k, 64, 40),
                ));
                k += 1;
            }
            pedals.push(PedalEvent::sustain(false, t0 + bar - 30.0));
        }
    }
    sort(&mut notes);
    Piece {
        name: "andalusian",
        notes,
        pedals,
    }
}

/// Stride left hand (bass on 1 and 3, chord on 2 and 4) with a syncopated
/// pentatonic right hand. No pedal.
pub fn stride() -> Piece {
    let beat = 400.0;
    let bass: [u8; 4] = [36, 43, 41, 43];
    let chord: [u8; 3] = [52, 55, 60];
    let penta: [u8; 5] = [72, 74, 76, 79, 81];
    let mut notes = Vec::new();
    let mut k = 0;
    for b in 0..24 {
        let t0 = b as f64 * 4.0 * beat;
        for beat_i in 0..4 {
            let t = t0 + beat_i as f64 * beat;
            if beat_i % 2 == 0 {
                notes.push(Note::closed(bass[(b + beat_i) % 4], t, 300.0, vel(k, 80, 25)));
                k += 1;
            } else {
                for p in chord {
                    notes.push(Note::closed(p + (b % 3) as u8, t, 180.0, vel(k, 56, 16)));
                    k += 1;
                }
            }
        }
        for s in 0..5 {
            let t = t0 + [0.0, 300.0, 600.0, 1000.0, 1300.0][s];
            let p = penta[(b * 2 + s * 3) % 5];
            notes.push(Note::closed(p, t + 8.0, [250.0, 250.0, 350.0, 250.0, 280.0][s], vel(k, 72, 40)));
            k += 1;
        }
    }
    sort(&mut notes);
    Piece {
        name: "stride",
        notes,
        pedals: Vec::new(),
    }
}

fn sort(notes: &mut [Note]) {
    notes.sort_by(|a, b| a.onset_ms.total_cmp(&b.onset_ms).then(a.pitch.cmp(&b.pitch)));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_are_well_formed() {
        for piece in all() {
            assert!(piece.notes.len() > 100, "{}", piece.name);
            assert!(piece.notes.iter().all(|n| (1..=127).contains(&n.velocity)));
            let mut down = false;
            for p in &piece.pedals {
                assert_ne!(p.is_on(), down, "{} pedal alternates", piece.name);
                down = p.is_on();
            }
            assert!(!down);
        }
    }
}
