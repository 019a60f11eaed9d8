//! Flat `key = value` settings files.
//!
//! One setting per line, `#` starts a comment line, keys are dotted
//! (`engine.prefill_chunk_tokens`, `scheduler.retrigger_gap_ms`, ...). Every
//! key has a default; a file only lists what it changes. Unknown keys and
//! unparsable values are errors, not warnings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::CostModel;
use crate::engine::{EngineConfig, PrefillStrategy, ReclaimFlush, SpeculativePolicy};
use crate::instrument::InstrumentModel;
use crate::scheduler::SchedulerConfig;

/// Environment variable naming the settings file when none is given.
pub const CONFIG_ENV: &str = "DUET_CONFIG";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: IoMessage },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    BadValue { line: usize, key: String, reason: String },
    #[error("invalid settings: {0}")]
    Invalid(String),
}

/// `std::io::Error` is not comparable; keep its message.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct IoMessage(pub String);

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub engine: EngineConfig,
    pub scheduler: SchedulerConfig,
    pub instrument: InstrumentModel,
    /// Charged by the mock backend.
    pub cost: CostModel,
    /// `mock`, or `host:port` of a backend service.
    pub backend: String,
    pub backend_timeout_ms: u64,
    pub midi_in: Option<String>,
    pub midi_out: Option<String>,
    /// Calibration table file; measured against the virtual instrument when
    /// unset.
    pub calibration: Option<String>,
    pub calibration_repeats: u32,
    pub gateway_listen: String,
    pub gateway_outbox: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            scheduler: SchedulerConfig::default(),
            instrument: InstrumentModel::default(),
            cost: CostModel::free(),
            backend: "mock".into(),
            backend_timeout_ms: 2000,
            midi_in: None,
            midi_out: None,
            calibration: None,
            calibration_repeats: 3,
            gateway_listen: "127.0.0.1:8765".into(),
            gateway_outbox: 256,
        }
    }
}

trait Value: Sized {
    fn show(&self) -> String;
    fn parse(s: &str) -> Result<Self, String>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        }
    )*};
}

from_str_value!(f64, u64, u32, usize, u8, bool, String);

impl Value for Option<String> {
    fn show(&self) -> String {
        self.clone().unwrap_or_default()
    }
    fn parse(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| s.to_string()))
    }
}

macro_rules! enum_value {
    ($t:ty { $($v:ident = $name:literal),* }) => {
        impl Value for $t {
            fn show(&self) -> String {
                match self { $(<$t>::$v => $name.to_string()),* }
            }
            fn parse(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok(<$t>::$v),)*
                    _ => Err(format!("expected one of: {}", [$($name),*].join(", "))),
                }
            }
        }
    };
}

enum_value!(SpeculativePolicy {
    Elapsed = "elapsed",
    ElapsedPlusExtension = "elapsed_plus_extension",
    ModelPredicted = "model_predicted"
});
enum_value!(ReclaimFlush {
    CutImmediately = "cut",
    FinishSoundingNotes = "finish"
});
enum_value!(PrefillStrategy {
    Continuous = "continuous",
    OneShot = "one_shot"
});

macro_rules! settings_table {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every key, in file order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn get_value(s: &Settings, key: &str) -> Option<String> {
            match key {
                $($key => Some(Value::show(&s.$($field).+)),)*
                _ => None,
            }
        }

        fn set_value(s: &mut Settings, key: &str, v: &str) -> Option<Result<(), String>> {
            match key {
                $($key => Some(Value::parse(v).map(|x| s.$($field).+ = x)),)*
                _ => None,
            }
        }
    };
}

settings_table! {
    "tokenizer.time_resolution_ms" => engine.tokenizer.time_resolution_ms,
    "tokenizer.segment_ms" => engine.tokenizer.segment_ms,
    "tokenizer.velocity_buckets" => engine.tokenizer.velocity_buckets,
    "tokenizer.max_duration_ms" => engine.tokenizer.max_duration_ms,
    "pedals.sustain_controller" => engine.pedals.sustain_controller,
    "pedals.soft_controller" => engine.pedals.soft_controller,
    "pedals.threshold" => engine.pedals.threshold,
    "engine.prefill_chunk_tokens" => engine.prefill_chunk_tokens,
    "engine.speculative_policy" => engine.speculative_policy,
    "engine.extension_ms" => engine.extension_ms,
    "engine.max_context_tokens" => engine.max_context_tokens,
    "engine.reclaim_flush" => engine.reclaim_flush,
    "engine.strategy" => engine.strategy,
    "engine.key_press_reclaim" => engine.key_press_reclaim,
    "engine.allow_empty_context" => engine.allow_empty_context,
    "engine.playback_lead_ms" => engine.playback_lead_ms,
    "engine.ai_onset_margin_ms" => engine.ai_onset_margin_ms,
    "sampling.temperature" => engine.sampling.temperature,
    "sampling.top_p" => engine.sampling.top_p,
    "sampling.seed" => engine.sampling.seed,
    "sampling.max_new_tokens" => engine.sampling.max_new_tokens,
    "scheduler.staleness_threshold_ms" => scheduler.staleness_threshold_ms,
    "scheduler.retrigger_gap_ms" => scheduler.retrigger_gap_ms,
    "scheduler.max_pending" => scheduler.max_pending,
    "scheduler.compensate_note_off" => scheduler.compensate_note_off,
    "scheduler.note_off_latency_ms" => scheduler.note_off_latency_ms,
    "scheduler.tick_ms" => scheduler.tick_ms,
    "instrument.base_ms" => instrument.base_ms,
    "instrument.slope_ms_per_velocity" => instrument.slope_ms_per_velocity,
    "instrument.reset_time_ms" => instrument.reset_time_ms,
    "instrument.jitter_ms" => instrument.jitter_ms,
    "instrument.seed" => instrument.seed,
    "cost.prefill_ms_per_token" => cost.prefill_ms_per_token,
    "cost.decode_ms_per_token" => cost.decode_ms_per_token,
    "backend" => backend,
    "backend.timeout_ms" => backend_timeout_ms,
    "midi.in" => midi_in,
    "midi.out" => midi_out,
    "calibration.file" => calibration,
    "calibration.repeats" => calibration_repeats,
    "gateway.listen" => gateway_listen,
    "gateway.outbox" => gateway_outbox,
}

impl Settings {
    pub fn get(&self, key: &str) -> Option<String> {
        get_value(self, key)
    }

    /// Set one key from its text form. Does not re-validate the whole.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(0, key, value)
    }

    fn set_at(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        match set_value(self, key, value) {
            None => Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            }),
            Some(Err(reason)) => Err(ConfigError::BadValue {
                line,
                key: key.to_string(),
                reason,
            }),
            Some(Ok(())) => Ok(()),
        }
    }

    /// Defaults overridden by the lines of `text`, then validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let v = v.trim();
            let v = v.strip_prefix('"').and_then(|v| v.strip_suffix('"')).unwrap_or(v);
            s.set_at(i + 1, k.trim(), v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: IoMessage(e.to_string()),
        })?;
        Self::parse(&text)
    }

    /// The file named by `path`, else by the environment, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::load(&p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |what: &str, r: Result<(), String>| {
            r.map_err(|e| ConfigError::Invalid(format!("{what}: {e}")))
        };
        wrap("engine", self.engine.validate())?;
        wrap("scheduler", self.scheduler.validate())?;
        wrap("instrument", self.instrument.validate())?;
        if !(self.cost.prefill_ms_per_token >= 0.0 && self.cost.decode_ms_per_token >= 0.0) {
            return Err(ConfigError::Invalid("cost: per-token costs must be non-negative".into()));
        }
        if self.gateway_outbox == 0 {
            return Err(ConfigError::Invalid("gateway.outbox must be positive".into()));
        }
        if self.calibration_repeats == 0 {
            return Err(ConfigError::Invalid("calibration.repeats must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }
}
