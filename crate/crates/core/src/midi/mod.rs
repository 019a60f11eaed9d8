//! MIDI event model, live note tracking and Standard MIDI File persistence.

pub mod event;
pub mod smf;
pub mod tracker;

pub use event::{MidiEvent, MidiKind, WireParser};
pub use smf::{load_smf, read_events, save_smf, write_events, FileEvent, Recording, SmfError};
pub use tracker::{
    Note, Pedal, PedalConfig, PedalEvent, PedalState, TrackerError, TrackerOutput, TrackerState,
};
