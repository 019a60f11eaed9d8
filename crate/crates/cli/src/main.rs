use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use duet_cli::commands::{self, BenchArgs, CalibrateArgs, RunArgs, ServeBackendArgs, SimArgs};
use duet_cli::common::Common;
use duet_cli::CliError;

#[derive(Parser, Debug)]
#[command(name = "duet", version, about = "Turn-taking piano duet with a generative model")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Settings file (also read from DUET_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Sampling seed, overriding the settings.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Live session between a MIDI input and a player piano.
    Run {
        #[arg(long)]
        midi_in: Option<PathBuf>,
        #[arg(long)]
        midi_out: Option<PathBuf>,
        /// Stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Session against the virtual instrument.
    Sim {
        /// Standard MIDI file to perform; soft-pedal presses in it mark takeovers.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Takeover time in ms; repeatable, replaces the script's presses.
        #[arg(long)]
        takeover: Vec<f64>,
        /// Take input from WebSocket clients instead of a script.
        #[arg(long, num_args = 0..=1, value_name = "ADDR")]
        gateway: Option<Option<String>>,
        /// With --gateway: run on a virtual clock that clients advance.
        #[arg(long, requires = "gateway")]
        virtual_clock: bool,
        /// With --gateway: stop after this many seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Measure the instrument's strike latency per velocity.
    Calibrate {
        #[arg(long)]
        midi_in: Option<PathBuf>,
        #[arg(long)]
        midi_out: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<u32>,
        /// Comma-separated velocities to probe (default 1..=127).
        #[arg(long, value_delimiter = ',')]
        velocities: Option<Vec<u8>>,
        /// Seconds to wait for each echo.
        #[arg(long)]
        timeout: Option<f64>,
    },
    /// Takeover latency across context sizes and hanging-note counts.
    Bench {
        /// Charge model costs in real time instead of virtual time.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Check a recorded session's generated notes against the playback invariants.
    Replay { file: PathBuf },
    /// Serve the mock model over TCP.
    ServeBackend {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Print the effective settings.
    ShowConfig,
}

fn secs(s: Option<f64>) -> Result<Option<Duration>, CliError> {
    s.map(|s| Duration::try_from_secs_f64(s).map_err(|_| CliError::Usage(format!("bad duration {s}"))))
        .transpose()
}

fn dispatch(cli: Cli, stop: Arc<AtomicBool>) -> Result<String, CliError> {
    let common = Common {
        config: cli.global.config,
        seed: cli.global.seed,
        out: cli.global.out,
    };
    match cli.command {
        Command::Run {
            midi_in,
            midi_out,
            duration,
        } => commands::run(
            &common,
            &RunArgs {
                midi_in,
                midi_out,
                duration: secs(duration)?,
            },
            stop,
        ),
        Command::Sim {
            script,
            takeover,
            gateway,
            virtual_clock,
            duration,
        } => commands::sim(
            &common,
            &SimArgs {
                script,
                takeover,
                gateway,
                virtual_clock,
                duration: secs(duration)?,
            },
            stop,
        ),
        Command::Calibrate {
            midi_in,
            midi_out,
            repeats,
            velocities,
            timeout,
        } => commands::calibrate(
            &common,
            &CalibrateArgs {
                midi_in,
                midi_out,
                repeats,
                velocities,
                timeout: secs(timeout)?,
            },
        ),
        Command::Bench { wall_clock } => commands::bench(&common, &BenchArgs { wall_clock }),
        Command::Replay { file } => commands::replay_file(&common, &file),
        Command::ServeBackend { listen, duration } => commands::serve_backend_cmd(
            &common,
            &ServeBackendArgs {
                listen,
                duration: secs(duration)?,
            },
            stop,
        ),
        Command::ShowConfig => commands::show_config(&common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("no Ctrl-C handler: {e}");
    }
    match dispatch(cli, stop) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("duet: {e}");
            if let CliError::Invariant(v) = &e {
                for line in v {
                    eprintln!("  {line}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
