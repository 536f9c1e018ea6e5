//! Record and recording data model.
//!
//! A [`Recording`] is the ordered sequence of every interaction a target had
//! with its environment. Each interaction is one [`Record`], classified by
//! [`classify`] so that recorder, replayer and engine agree on which records
//! are inputs (mutation targets), outputs (state evidence), readiness queries
//! or lifecycle events.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::hash::Fnv64;

/// Current on-disk format version.
pub const FORMAT_VERSION: u32 = 1;

/// Path prefixes whose payloads are never mutated.
pub const IMMUTABLE_PREFIXES: [&str; 3] = ["/proc/", "/dev/", "self-pipe:"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SyscallClass {
    Input,
    Output,
    Readiness,
    Lifecycle,
    Other,
}

const CLASS_TABLE: &[(&str, SyscallClass)] = &[
    ("read", SyscallClass::Input),
    ("recv", SyscallClass::Input),
    ("recvfrom", SyscallClass::Input),
    ("recvmsg", SyscallClass::Input),
    ("pread", SyscallClass::Input),
    ("write", SyscallClass::Output),
    ("send", SyscallClass::Output),
    ("sendto", SyscallClass::Output),
    ("sendmsg", SyscallClass::Output),
    ("pwrite", SyscallClass::Output),
    ("poll", SyscallClass::Readiness),
    ("select", SyscallClass::Readiness),
    ("epoll_wait", SyscallClass::Readiness),
    ("open", SyscallClass::Lifecycle),
    ("close", SyscallClass::Lifecycle),
    ("socket", SyscallClass::Lifecycle),
    ("accept", SyscallClass::Lifecycle),
    ("connect", SyscallClass::Lifecycle),
    ("exit", SyscallClass::Lifecycle),
];

/// Maps a syscall name to its class. Unknown names are `Other`.
pub fn classify(sys: &str) -> SyscallClass {
    CLASS_TABLE
        .iter()
        .find(|(name, _)| *name == sys)
        .map(|&(_, class)| class)
        .unwrap_or(SyscallClass::Other)
}

/// Whether the first integer argument of `sys` is a file descriptor.
pub fn takes_fd(sys: &str) -> bool {
    matches!(classify(sys), SyscallClass::Input | SyscallClass::Output) || sys == "close"
}

impl SyscallClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SyscallClass::Input => "input",
            SyscallClass::Output => "output",
            SyscallClass::Readiness => "readiness",
            SyscallClass::Lifecycle => "lifecycle",
            SyscallClass::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "input" => SyscallClass::Input,
            "output" => SyscallClass::Output,
            "readiness" => SyscallClass::Readiness,
            "lifecycle" => SyscallClass::Lifecycle,
            "other" => SyscallClass::Other,
            _ => return None,
        })
    }

    /// Input and Output records carry a byte buffer.
    pub fn has_buf(self) -> bool {
        matches!(self, SyscallClass::Input | SyscallClass::Output)
    }
}

impl fmt::Display for SyscallClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One intercepted interaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub seq: u64,
    pub tid: u32,
    pub sys: String,
    pub fd: Option<i64>,
    pub args: Vec<i64>,
    pub buf: Option<Vec<u8>>,
    pub ret: i64,
    pub class: SyscallClass,
    pub mutable: bool,
}

impl Record {
    /// Builds a record with its class derived from `sys`. `mutable` starts
    /// out as "is an input"; [`Recording`] narrows it using the fd table.
    pub fn new(
        seq: u64,
        tid: u32,
        sys: impl Into<String>,
        fd: Option<i64>,
        args: Vec<i64>,
        buf: Option<Vec<u8>>,
        ret: i64,
    ) -> Self {
        let sys = sys.into();
        let class = classify(&sys);
        Record {
            seq,
            tid,
            mutable: class == SyscallClass::Input,
            sys,
            fd,
            args,
            buf,
            ret,
            class,
        }
    }

    pub fn is_input(&self) -> bool {
        self.class == SyscallClass::Input
    }

    pub fn is_output(&self) -> bool {
        self.class == SyscallClass::Output
    }

    pub fn payload(&self) -> &[u8] {
        self.buf.as_deref().unwrap_or(&[])
    }

    /// Poll records store their entries as flat `[fd, events, revents]` triples.
    pub fn poll_triples(&self) -> impl Iterator<Item = (i64, u8, u8)> + '_ {
        self.args
            .chunks_exact(3)
            .map(|c| (c[0], c[1] as u8, c[2] as u8))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceError {
    #[error("record {index}: seq {found} out of order (expected {expected})")]
    SeqGap {
        index: usize,
        expected: u64,
        found: u64,
    },
    #[error("record {seq}: class {found} does not match classify({sys}) = {expected}")]
    ClassMismatch {
        seq: u64,
        sys: String,
        expected: SyscallClass,
        found: SyscallClass,
    },
    #[error("record {seq}: buffer presence does not match class {class}")]
    BufPresence { seq: u64, class: SyscallClass },
    #[error("record {seq}: input ret {ret} does not match buffer length {len}")]
    InputLength { seq: u64, ret: i64, len: usize },
    #[error("record {seq}: {sys} requires a file descriptor")]
    MissingFd { seq: u64, sys: String },
}

/// The ordered sequence of records plus metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recording {
    pub version: u32,
    pub target: String,
    pub meta: BTreeMap<String, String>,
    pub records: Vec<Record>,
}

impl Recording {
    pub fn new(target: impl Into<String>) -> Self {
        Recording {
            version: FORMAT_VERSION,
            target: target.into(),
            meta: BTreeMap::new(),
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record, assigning the next dense `seq`.
    pub fn push(&mut self, mut record: Record) -> u64 {
        let seq = self.records.len() as u64;
        record.seq = seq;
        record.mutable = record.is_input() && !self.fd_is_immutable(record.fd);
        self.records.push(record);
        seq
    }

    /// Declares the path backing `fd`; stored in `meta` as `fd.<n>.path`.
    pub fn set_fd_path(&mut self, fd: i64, path: &str) {
        self.meta.insert(fd_path_key(fd), path.to_string());
        self.refresh_mutability();
    }

    pub fn fd_path(&self, fd: i64) -> Option<&str> {
        self.meta.get(&fd_path_key(fd)).map(String::as_str)
    }

    fn fd_is_immutable(&self, fd: Option<i64>) -> bool {
        fd.and_then(|fd| self.fd_path(fd))
            .is_some_and(is_immutable_path)
    }

    /// Recomputes every record's `mutable` flag from class and fd table.
    pub fn refresh_mutability(&mut self) {
        let flags: Vec<bool> = self
            .records
            .iter()
            .map(|r| r.is_input() && !self.fd_is_immutable(r.fd))
            .collect();
        for (r, m) in self.records.iter_mut().zip(flags) {
            r.mutable = m;
        }
    }

    pub fn input_records(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.is_input())
    }

    /// Checks the structural invariants every recording must satisfy.
    pub fn validate(&self) -> Result<(), TraceError> {
        for (index, r) in self.records.iter().enumerate() {
            if r.seq != index as u64 {
                return Err(TraceError::SeqGap {
                    index,
                    expected: index as u64,
                    found: r.seq,
                });
            }
            let expected = classify(&r.sys);
            if r.class != expected {
                return Err(TraceError::ClassMismatch {
                    seq: r.seq,
                    sys: r.sys.clone(),
                    expected,
                    found: r.class,
                });
            }
            if r.class.has_buf() != r.buf.is_some() {
                return Err(TraceError::BufPresence {
                    seq: r.seq,
                    class: r.class,
                });
            }
            if takes_fd(&r.sys) && r.fd.is_none() {
                return Err(TraceError::MissingFd {
                    seq: r.seq,
                    sys: r.sys.clone(),
                });
            }
            if r.is_input() && r.ret >= 0 && r.ret as usize != r.payload().len() {
                return Err(TraceError::InputLength {
                    seq: r.seq,
                    ret: r.ret,
                    len: r.payload().len(),
                });
            }
        }
        Ok(())
    }
}

pub fn fd_path_key(fd: i64) -> String {
    alloc::format!("fd.{fd}.path")
}

pub fn is_immutable_path(path: &str) -> bool {
    IMMUTABLE_PREFIXES.iter().any(|p| path.starts_with(p))
}

/// Scheduling statistics for one seed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeedStats {
    pub times_chosen: u64,
    /// Consecutive schedulings that produced something interesting.
    pub novel_streak: u32,
    /// Consecutive schedulings that produced nothing interesting.
    pub stale_streak: u32,
    /// Total interesting branches credited to this seed.
    pub novelty_credit: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seed {
    pub data: Vec<u8>,
    pub stats: SeedStats,
}

/// Per-input-record corpus of interaction payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedCorpus {
    pub record_seq: u64,
    pub seeds: Vec<Seed>,
}

impl SeedCorpus {
    /// A corpus holding exactly the record's own payload.
    pub fn from_record(record: &Record) -> Self {
        SeedCorpus {
            record_seq: record.seq,
            seeds: alloc::vec![Seed {
                data: record.payload().to_vec(),
                stats: SeedStats::default(),
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn contains(&self, data: &[u8]) -> bool {
        self.seeds.iter().any(|s| s.data == data)
    }

    /// Adds a payload unless an identical one is present.
    pub fn insert(&mut self, data: Vec<u8>) -> bool {
        if self.contains(&data) {
            return false;
        }
        self.seeds.push(Seed {
            data,
            stats: SeedStats::default(),
        });
        true
    }
}

/// One [`SeedCorpus`] per input record, keyed by record seq.
pub type Corpora = BTreeMap<u64, SeedCorpus>;

pub fn initial_corpora(recording: &Recording) -> Corpora {
    recording
        .input_records()
        .map(|r| (r.seq, SeedCorpus::from_record(r)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultClass {
    Arithmetic,
    Memory,
    Assertion,
}

impl FaultClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FaultClass::Arithmetic => "arithmetic",
            FaultClass::Memory => "memory",
            FaultClass::Assertion => "assertion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "arithmetic" => FaultClass::Arithmetic,
            "memory" => FaultClass::Memory,
            "assertion" => FaultClass::Assertion,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fault {
    Crash(FaultClass),
    Hang,
}

impl Fault {
    pub fn as_str(self) -> &'static str {
        match self {
            Fault::Crash(c) => c.as_str(),
            Fault::Hang => "hang",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "hang" {
            Some(Fault::Hang)
        } else {
            FaultClass::parse(s).map(Fault::Crash)
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A self-contained reproducer for a crashing or hanging branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrashEntry {
    pub fault: Fault,
    /// Seq of the input record the branch was forked at.
    pub branch_seq: u64,
    /// Whether the branch ran under relaxed replay.
    pub relaxed: bool,
    /// Every payload served in place of a recorded one, keyed by record seq.
    pub mutated_payloads: BTreeMap<u64, Vec<u8>>,
    pub dedup_key: u64,
}

/// Dedup key over fault class, last mutated record and the last eight edge ids.
pub fn crash_dedup_key(fault: Fault, last_mutated_seq: u64, edge_ids: &[u32]) -> u64 {
    let mut h = Fnv64::new();
    h.write(fault.as_str().as_bytes());
    h.write_u64(last_mutated_seq);
    let tail = &edge_ids[edge_ids.len().saturating_sub(8)..];
    for &id in tail {
        h.write(&id.to_le_bytes());
    }
    h.finish()
}
