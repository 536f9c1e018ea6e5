//! The `envfuzz` command line.
//!
//! Exit codes: 0 success, 1 domain error (bad file, unreplayable trace,
//! failed recording), 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use envfuzz_core::engine::{
    fuzz_campaign, replay_crash, replay_plain, triage, CampaignConfig, Reproduction,
};
use envfuzz_core::recorder::{bundled_script, record, EnvScript};
use envfuzz_core::targets::{bundled_target, Process, DEFAULT_STEP_BUDGET};

use crate::campaign::{
    load_crash, load_recording, read_campaign, read_file, read_stats, write_campaign, write_file,
};
use crate::etf::encode_recording;
use crate::script::parse_env_script;
use crate::text::import_text_trace;
use crate::StdClock;

#[derive(Parser, Debug)]
#[command(
    name = "envfuzz",
    version,
    about = "Record, replay and fuzz the environment of a program"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a target against an env script and save the recording.
    Record {
        #[arg(long)]
        target: String,
        /// JSON env script; defaults to the target's bundled script.
        #[arg(long)]
        env_script: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STEP_BUDGET)]
        step_budget: u64,
    },
    /// Fuzz a recording and write a campaign directory.
    Fuzz {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Wall-clock budget, e.g. 30s, 5m, 1h.
        #[arg(long, value_parser = parse_duration_ms, conflicts_with = "passes")]
        budget: Option<u64>,
        /// Number of passes over the recording (default 1).
        #[arg(long)]
        passes: Option<u64>,
        /// Stop after this many executions.
        #[arg(long)]
        max_execs: Option<u64>,
        /// Abort branches at the first divergence instead of relaxing replay.
        #[arg(long)]
        no_relaxed: bool,
        /// Ignore coverage and state feedback when growing corpora.
        #[arg(long)]
        no_feedback: bool,
        #[arg(long, default_value_t = DEFAULT_STEP_BUDGET)]
        step_budget: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Replay a recording faithfully, or re-run one crash file.
    Replay {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        crash: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_STEP_BUDGET)]
        step_budget: u64,
    },
    /// Re-run every crash of a campaign and check its fault recurs.
    Triage { dir: PathBuf },
    /// Convert a trace from another format to ETF.
    Import {
        #[arg(long, value_enum)]
        from: ImportFormat,
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Target name stored in the header.
        #[arg(long, default_value = "unknown")]
        target: String,
    },
    /// Print the stats of a campaign directory.
    Report {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ImportFormat {
    EtfText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Text,
}

/// Parses `90`, `90s`, `5m` or `2h` into milliseconds.
pub fn parse_duration_ms(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, unit) = match s.find(|c: char| !c.is_ascii_digit()) {
        Some(i) => s.split_at(i),
        None => (s, "s"),
    };
    let n: u64 = digits
        .parse()
        .map_err(|_| format!("invalid duration `{s}`"))?;
    let scale = match unit {
        "s" => 1_000,
        "m" => 60_000,
        "h" => 3_600_000,
        _ => return Err(format!("invalid duration unit in `{s}` (use s, m or h)")),
    };
    n.checked_mul(scale)
        .ok_or_else(|| format!("duration `{s}` is too large"))
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn target_factory(name: &str) -> Result<impl Fn() -> Process + '_, Failure> {
    bundled_target(name)?;
    Ok(move || bundled_target(name).expect("target name checked"))
}

/// Runs one command line. `args[0]` is the program name.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(Failure(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    match cmd {
        Command::Record {
            target,
            env_script,
            output,
            step_budget,
        } => {
            let process = bundled_target(&target)?.with_budget(step_budget);
            let script: EnvScript = match env_script {
                Some(p) => parse_env_script(&read_file(&p)?)
                    .map_err(|e| Failure(format!("{}: {e}", p.display())))?,
                None => bundled_script(&target)
                    .ok_or_else(|| Failure(format!("no bundled env script for {target}")))?,
            };
            let rec = record(process, &script)?;
            write_file(&output, encode_recording(&rec.recording))?;
            writeln!(
                out,
                "recorded {} interactions ({} inputs), target {}",
                rec.recording.len(),
                rec.recording.input_records().count(),
                rec.status
            )?;
            if rec.hung() {
                writeln!(
                    err,
                    "error: recording cut off by the step budget of {step_budget}"
                )?;
                return Ok(1);
            }
            Ok(0)
        }
        Command::Fuzz {
            input,
            target,
            seed,
            budget,
            passes,
            max_execs,
            no_relaxed,
            no_feedback,
            step_budget,
            output,
        } => {
            let recording = load_recording(&input)?;
            let factory = target_factory(&target)?;
            let cfg = CampaignConfig {
                seed,
                max_passes: match (budget, passes) {
                    (None, None) if max_execs.is_none() => Some(1),
                    _ => passes,
                },
                max_execs,
                time_budget_ms: budget,
                step_budget,
                no_relaxed,
                no_feedback,
                energy_override: None,
            };
            let clock = StdClock::start();
            let campaign = fuzz_campaign(&recording, &factory, &cfg, &clock)?;
            let stats = write_campaign(&output, &recording, &cfg, &campaign)?;
            writeln!(
                out,
                "{} executions in {} passes, {} coverage slots, {} states, {} crashes",
                stats.executions,
                stats.passes,
                stats.coverage_slots,
                stats.states,
                stats.crashes.len()
            )?;
            writeln!(out, "campaign written to {}", output.display())?;
            Ok(0)
        }
        Command::Replay {
            input,
            target,
            crash,
            step_budget,
        } => {
            let recording = load_recording(&input)?;
            let process = bundled_target(&target)?.with_budget(step_budget);
            match crash {
                None => {
                    let r = replay_plain(&recording, process)?;
                    writeln!(
                        out,
                        "replayed {} interactions, target {}",
                        r.calls.len(),
                        r.status
                    )?;
                    writeln!(out, "{} divergences", r.divergence.total())?;
                    Ok(0)
                }
                Some(path) => {
                    let entry = load_crash(&path)?;
                    match replay_crash(&entry, &recording, process, step_budget)? {
                        None => {
                            writeln!(
                                out,
                                "branch point record {} was not reached",
                                entry.branch_seq
                            )?;
                            Ok(1)
                        }
                        Some(o) => {
                            writeln!(out, "branch at record {}: {}", entry.branch_seq, o.status)?;
                            writeln!(out, "{} divergences", o.divergence.total())?;
                            let same = o.status.fault() == Some(entry.fault);
                            writeln!(
                                out,
                                "{}",
                                if same {
                                    "fault reproduced"
                                } else {
                                    "fault not reproduced"
                                }
                            )?;
                            Ok(if same { 0 } else { 1 })
                        }
                    }
                }
            }
        }
        Command::Triage { dir } => run_triage(&dir, out),
        Command::Import {
            from: ImportFormat::EtfText,
            input,
            output,
            target,
        } => {
            let text = read_file(&input)?;
            let imported = import_text_trace(&text, &target)
                .map_err(|e| Failure(format!("{}: {e}", input.display())))?;
            write_file(&output, encode_recording(&imported.recording))?;
            writeln!(out, "imported {} interactions", imported.recording.len())?;
            if imported.unknown_calls > 0 {
                writeln!(
                    err,
                    "warning: {} calls with unrecognised names",
                    imported.unknown_calls
                )?;
            }
            Ok(0)
        }
        Command::Report { dir, format } => {
            let stats = read_stats(&dir)?;
            match format {
                ReportFormat::Json => write!(out, "{}", stats.to_json())?,
                ReportFormat::Text => write!(out, "{}", stats.render_text())?,
            }
            Ok(0)
        }
    }
}

fn run_triage(dir: &Path, out: &mut dyn Write) -> Result<i32, Failure> {
    let campaign = read_campaign(dir)?;
    let factory = target_factory(&campaign.stats.target)?;
    let step_budget = campaign.stats.config.step_budget;
    let (mut reproduced, mut flagged) = (0, 0);
    for (path, entry) in &campaign.crashes {
        let name = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                flagged += 1;
                writeln!(out, "{name}: unreadable, {e}")?;
                continue;
            }
        };
        let result = triage(
            std::slice::from_ref(entry),
            &campaign.recording,
            &factory,
            step_budget,
        )?;
        match result[0].verdict {
            Reproduction::Reproduced => {
                reproduced += 1;
                writeln!(out, "{name}: {} reproduced", entry.fault)?;
            }
            Reproduction::Unreproducible { got } => {
                flagged += 1;
                let got = got.map_or_else(|| "branch not reached".to_string(), |s| s.to_string());
                writeln!(out, "{name}: {} flaky, got {got}", entry.fault)?;
            }
        }
    }
    writeln!(out, "{reproduced} reproduced, {flagged} flagged")?;
    Ok(0)
}
