//! Turn-taking human/AI piano duet engine.
//!
//! The pieces, bottom up: [`midi`] (events, note tracking, SMF files),
//! [`tokenizer`] (symbolic vocabulary), [`backend`] (generative model
//! contract, mock and remote), [`engine`] (the listen/takeover/generate state
//! machine), [`scheduler`] (latency-compensated playback), [`instrument`] (a
//! simulated player piano), plus [`sim`] and [`runtime`] which wire them
//! together deterministically or in real time.

pub mod clock;
pub mod midi;
pub mod tokenizer;
pub mod backend;
pub mod fixtures;
pub mod instrument;
pub mod scheduler;
pub mod engine;
pub mod host;
pub mod sim;
pub mod bench;
pub mod runtime;
pub mod config;
