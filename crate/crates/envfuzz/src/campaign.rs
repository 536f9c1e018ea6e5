//! Campaign directories.
//!
//! ```text
//! out/
//!   recording.etf            the recording the campaign ran on
//!   stats.json               CampaignStats
//!   report.txt               human-readable summary
//!   corpus/<seq>/seed_<n>.bin
//!   crashes/crash_<n>.json   CrashFile
//! ```
//!
//! Everything except the `timing` object of `stats.json` is a pure function
//! of the recording, target and configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use envfuzz_core::engine::{Campaign, CampaignConfig, StopReason};
use envfuzz_core::replay::DivergenceLog;
use envfuzz_core::trace::{CrashEntry, Fault, Recording};
use serde::{Deserialize, Serialize};

use crate::etf::{decode_recording, encode_recording, EtfError};

pub const RECORDING_FILE: &str = "recording.etf";
pub const STATS_FILE: &str = "stats.json";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Debug, thiserror::Error)]
pub enum CampaignIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Recording { path: PathBuf, source: EtfError },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CampaignIoError + '_ {
    move |source| CampaignIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_file(path: &Path) -> Result<String, CampaignIoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_file(path: &Path, data: impl AsRef<[u8]>) -> Result<(), CampaignIoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, data).map_err(io_err(path))
}

pub fn load_recording(path: &Path) -> Result<Recording, CampaignIoError> {
    decode_recording(&read_file(path)?).map_err(|source| CampaignIoError::Recording {
        path: path.to_path_buf(),
        source,
    })
}

/// The configuration a campaign ran with, as stored in `stats.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigStats {
    pub seed: u64,
    pub max_passes: Option<u64>,
    pub max_execs: Option<u64>,
    pub time_budget_ms: Option<u64>,
    pub step_budget: u64,
    pub no_relaxed: bool,
    pub no_feedback: bool,
}

impl From<&CampaignConfig> for ConfigStats {
    fn from(c: &CampaignConfig) -> Self {
        ConfigStats {
            seed: c.seed,
            max_passes: c.max_passes,
            max_execs: c.max_execs,
            time_budget_ms: c.time_budget_ms,
            step_budget: c.step_budget,
            no_relaxed: c.no_relaxed,
            no_feedback: c.no_feedback,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergenceStats {
    pub reordered_io: u64,
    pub extraneous_output: u64,
    pub eof_served: u64,
    pub non_io_emulated: u64,
    pub non_io_failed: u64,
    pub forced_exit: u64,
}

impl From<&DivergenceLog> for DivergenceStats {
    fn from(d: &DivergenceLog) -> Self {
        DivergenceStats {
            reordered_io: d.reordered_io,
            extraneous_output: d.extraneous_output,
            eof_served: d.eof_served,
            non_io_emulated: d.non_io_emulated,
            non_io_failed: d.non_io_failed,
            forced_exit: d.forced_exit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashStats {
    pub file: String,
    pub fault: String,
    pub branch_seq: u64,
    pub dedup_key: String,
    /// Execution count at which the crash was first seen.
    pub found_at: u64,
}

/// Wall-clock figures; the only nondeterministic part of the stats.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: u64,
    pub execs_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub target: String,
    pub config: ConfigStats,
    pub stop: String,
    pub passes: u64,
    pub executions: u64,
    pub spine_execs: u64,
    pub branch_execs: u64,
    pub interesting: u64,
    pub prefix_reexecutions: u64,
    pub coverage_slots: usize,
    pub states: usize,
    pub transitions: usize,
    pub spine_status: Option<String>,
    pub spine_digest: String,
    pub divergence: DivergenceStats,
    pub corpus_sizes: BTreeMap<u64, usize>,
    pub crash_classes: BTreeMap<String, usize>,
    pub crashes: Vec<CrashStats>,
    pub timing: Timing,
}

fn stop_name(s: StopReason) -> &'static str {
    match s {
        StopReason::Passes => "passes",
        StopReason::Executions => "executions",
        StopReason::Time => "time",
    }
}

pub fn key_hex(key: u64) -> String {
    format!("{key:016x}")
}

fn crash_file_name(n: usize) -> String {
    format!("crash_{n}.json")
}

impl CampaignStats {
    pub fn new(target: &str, cfg: &CampaignConfig, campaign: &Campaign) -> Self {
        let r = &campaign.report;
        let mut crash_classes = BTreeMap::new();
        for c in &campaign.crashes {
            *crash_classes
                .entry(c.fault.as_str().to_string())
                .or_insert(0) += 1;
        }
        let crashes = campaign
            .crashes
            .iter()
            .enumerate()
            .map(|(n, c)| CrashStats {
                file: crash_file_name(n),
                fault: c.fault.as_str().into(),
                branch_seq: c.branch_seq,
                dedup_key: key_hex(c.dedup_key),
                found_at: r.crash_found_at.get(&c.dedup_key).copied().unwrap_or(0),
            })
            .collect();
        CampaignStats {
            target: target.into(),
            config: cfg.into(),
            stop: stop_name(r.stop).into(),
            passes: r.passes,
            executions: r.execs(),
            spine_execs: r.spine_execs,
            branch_execs: r.branch_execs,
            interesting: r.interesting,
            prefix_reexecutions: r.prefix_reexecutions,
            coverage_slots: r.coverage_slots,
            states: r.states,
            transitions: r.transitions,
            spine_status: r.spine_status.map(|s| s.to_string()),
            spine_digest: key_hex(r.spine_digest),
            divergence: (&r.divergence).into(),
            corpus_sizes: r.corpus_sizes.clone(),
            crash_classes,
            crashes,
            timing: Timing {
                elapsed_ms: r.elapsed_ms,
                execs_per_sec: r.execs_per_sec(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("stats serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "target              {}", self.target);
        let _ = writeln!(s, "seed                {}", self.config.seed);
        let mode = match (self.config.no_relaxed, self.config.no_feedback) {
            (false, false) => "default",
            (true, false) => "no-relaxed",
            (false, true) => "no-feedback",
            (true, true) => "no-relaxed, no-feedback",
        };
        let _ = writeln!(s, "mode                {mode}");
        let _ = writeln!(s, "stopped on          {}", self.stop);
        let _ = writeln!(s, "passes              {}", self.passes);
        let _ = writeln!(
            s,
            "executions          {} ({} spine, {} branch)",
            self.executions, self.spine_execs, self.branch_execs
        );
        let _ = writeln!(
            s,
            "throughput          {:.0} exec/s over {} ms",
            self.timing.execs_per_sec, self.timing.elapsed_ms
        );
        let _ = writeln!(s, "interesting         {}", self.interesting);
        let _ = writeln!(s, "coverage slots      {}", self.coverage_slots);
        let _ = writeln!(
            s,
            "states              {} ({} transitions)",
            self.states, self.transitions
        );
        if let Some(st) = &self.spine_status {
            let _ = writeln!(s, "spine status        {st}");
        }
        let d = &self.divergence;
        let _ = writeln!(
            s,
            "divergence          reordered {} / extra output {} / eof {} / emulated {} / failed {} / forced exit {}",
            d.reordered_io, d.extraneous_output, d.eof_served, d.non_io_emulated, d.non_io_failed, d.forced_exit
        );
        let _ = writeln!(s, "corpus sizes");
        for (seq, n) in &self.corpus_sizes {
            let _ = writeln!(s, "  record {seq:<6} {n}");
        }
        let _ = writeln!(s, "crashes             {}", self.crashes.len());
        for c in &self.crashes {
            let _ = writeln!(
                s,
                "  {:<16} {:<11} record {:<4} exec {}",
                c.file, c.fault, c.branch_seq, c.found_at
            );
        }
        s
    }
}

/// On-disk form of a [`CrashEntry`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashFile {
    pub fault: String,
    pub branch_seq: u64,
    pub relaxed: bool,
    /// Record seq to hex payload.
    pub payloads: BTreeMap<u64, String>,
    pub dedup_key: String,
}

impl From<&CrashEntry> for CrashFile {
    fn from(e: &CrashEntry) -> Self {
        CrashFile {
            fault: e.fault.as_str().into(),
            branch_seq: e.branch_seq,
            relaxed: e.relaxed,
            payloads: e
                .mutated_payloads
                .iter()
                .map(|(&k, v)| (k, hex::encode(v)))
                .collect(),
            dedup_key: key_hex(e.dedup_key),
        }
    }
}

impl CrashFile {
    pub fn to_entry(&self) -> Result<CrashEntry, String> {
        let fault =
            Fault::parse(&self.fault).ok_or_else(|| format!("unknown fault `{}`", self.fault))?;
        let dedup_key =
            u64::from_str_radix(&self.dedup_key, 16).map_err(|e| format!("bad dedup key: {e}"))?;
        let mutated_payloads = self
            .payloads
            .iter()
            .map(|(&k, v)| {
                hex::decode(v)
                    .map(|b| (k, b))
                    .map_err(|e| format!("record {k}: {e}"))
            })
            .collect::<Result<_, _>>()?;
        Ok(CrashEntry {
            fault,
            branch_seq: self.branch_seq,
            relaxed: self.relaxed,
            mutated_payloads,
            dedup_key,
        })
    }
}

pub fn load_crash(path: &Path) -> Result<CrashEntry, CampaignIoError> {
    let file: CrashFile =
        serde_json::from_str(&read_file(path)?).map_err(|source| CampaignIoError::Json {
            path: path.to_path_buf(),
            source,
        })?;
    file.to_entry().map_err(|reason| CampaignIoError::Invalid {
        path: path.to_path_buf(),
        reason,
    })
}

/// Writes the full campaign directory and returns the stats written.
pub fn write_campaign(
    dir: &Path,
    recording: &Recording,
    cfg: &CampaignConfig,
    campaign: &Campaign,
) -> Result<CampaignStats, CampaignIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join(RECORDING_FILE), encode_recording(recording))?;
    for (seq, corpus) in &campaign.corpora {
        for (n, seed) in corpus.seeds.iter().enumerate() {
            write_file(
                &dir.join("corpus")
                    .join(seq.to_string())
                    .join(format!("seed_{n}.bin")),
                &seed.data,
            )?;
        }
    }
    let crash_dir = dir.join("crashes");
    fs::create_dir_all(&crash_dir).map_err(io_err(&crash_dir))?;
    for (n, entry) in campaign.crashes.iter().enumerate() {
        let json = serde_json::to_string_pretty(&CrashFile::from(entry)).expect("crash serializes");
        write_file(&crash_dir.join(crash_file_name(n)), json + "\n")?;
    }
    let stats = CampaignStats::new(&recording.target, cfg, campaign);
    write_file(&dir.join(STATS_FILE), stats.to_json())?;
    write_file(&dir.join(REPORT_FILE), stats.render_text())?;
    Ok(stats)
}

/// A campaign directory read back from disk.
#[derive(Debug)]
pub struct CampaignDir {
    pub recording: Recording,
    pub stats: CampaignStats,
    /// Crash files in index order, with their parsed entries.
    pub crashes: Vec<(PathBuf, Result<CrashEntry, CampaignIoError>)>,
}

pub fn read_stats(dir: &Path) -> Result<CampaignStats, CampaignIoError> {
    let path = dir.join(STATS_FILE);
    CampaignStats::from_json(&read_file(&path)?)
        .map_err(|source| CampaignIoError::Json { path, source })
}

/// Reads a campaign directory. Unparseable crash files are returned as
/// errors in place so triage can flag them.
pub fn read_campaign(dir: &Path) -> Result<CampaignDir, CampaignIoError> {
    let stats = read_stats(dir)?;
    let recording = load_recording(&dir.join(RECORDING_FILE))?;
    let crash_dir = dir.join("crashes");
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    if crash_dir.is_dir() {
        for entry in fs::read_dir(&crash_dir).map_err(io_err(&crash_dir))? {
            let path = entry.map_err(io_err(&crash_dir))?.path();
            let n = path
                .file_name()
                .and_then(|f| f.to_str())
                .and_then(|f| f.strip_prefix("crash_"))
                .and_then(|f| f.strip_suffix(".json"))
                .and_then(|n| n.parse().ok());
            if let Some(n) = n {
                files.push((n, path));
            }
        }
    }
    files.sort();
    let crashes = files
        .into_iter()
        .map(|(_, p)| {
            let e = load_crash(&p);
            (p, e)
        })
        .collect();
    Ok(CampaignDir {
        recording,
        stats,
        crashes,
    })
}
