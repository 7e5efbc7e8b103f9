use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conetrack::sim::{generate_track, Track};
use conetrack_harness::{emit_plots, evaluate, run_scenario, HarnessError, Mode, RunLog, RunStatus, Scenario};

#[derive(Parser)]
#[command(name = "conetrack", version, about = "Cone-track mapping, localization and state-estimation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a closed track and write it as CSV.
    GenTrack {
        #[arg(long)]
        seed: u64,
        /// Centerline length, m.
        #[arg(long, default_value_t = 300.0)]
        length: f64,
        #[arg(long, default_value_t = 3.5)]
        width: f64,
        #[arg(long, default_value_t = 5.0)]
        spacing: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario; writes run.jsonl, track.csv, map.csv and metrics.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        laps: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run log against a track.
    Eval {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write plot CSVs and an SVG from a run log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<conetrack::Error> for Failure {
    fn from(e: conetrack::Error) -> Self {
        match e {
            conetrack::Error::InvalidArgument { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn read_log(path: &PathBuf) -> Result<RunLog, Failure> {
    Ok(RunLog::read_jsonl(BufReader::new(File::open(path)?))?)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenTrack { seed, length, width, spacing, out } => {
            let track = generate_track(seed, length, width, spacing)?;
            track.write_csv(BufWriter::new(File::create(&out)?))?;
            println!("track: {:.1} m, {} cones -> {}", track.length, track.cone_count(), out.display());
        }
        Command::Run { config, seed, mode, laps, out } => {
            let mut sc = Scenario::load(&config)?;
            if let Some(s) = seed {
                sc.run.seed = s;
            }
            if let Some(m) = mode {
                sc.run.mode = m;
            }
            if let Some(l) = laps {
                sc.run.laps = l;
            }
            sc.validate()?;
            let res = run_scenario(&sc)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("run.jsonl"), res.log.to_jsonl())?;
            res.track.write_csv(BufWriter::new(File::create(out.join("track.csv"))?))?;
            if let Some(map) = &res.map {
                map.write_csv(BufWriter::new(File::create(out.join("map.csv"))?))?;
            }
            let metrics = evaluate(&res.log, &res.track)?;
            fs::write(out.join("metrics.json"), metrics.to_json())?;
            println!(
                "{}: {} of {} laps, {} events -> {}",
                res.status.as_str(),
                res.laps,
                sc.run.laps,
                res.log.len(),
                out.display()
            );
            if res.status != RunStatus::Completed {
                return Err(Failure::Runtime(format!("run ended early: {}", res.status.as_str())));
            }
        }
        Command::Eval { log, track, out } => {
            let log = read_log(&log)?;
            let track = Track::read_csv(BufReader::new(File::open(&track)?))?;
            let metrics = evaluate(&log, &track)?;
            fs::write(&out, metrics.to_json())?;
            print!("{}", metrics.to_json());
        }
        Command::Plot { log, out } => {
            let log = read_log(&log)?;
            for p in emit_plots(&log, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // usage errors share the validation exit code; help and version exit 0
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
