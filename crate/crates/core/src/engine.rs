//! The campaign loop.
//!
//! Each pass replays the recording faithfully (the spine). At every input
//! record the process is snapshotted and, for every seed of that record's
//! corpus, `energy` mutant branches are run from the snapshot under relaxed
//! replay. Crashing branches go to the crash corpus, interesting ones grow
//! the record's seed corpus. Then the spine consumes the record and moves on.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::feedback::{edge_slot, fold_edges, CoverageMap, Feedback};
use crate::hash::Fnv64;
use crate::mutation::{energy, mutate, update_stats, Rng};
use crate::replay::{
    call_matches, faithful_step, BranchResponse, DivergenceLog, RelaxedReplay, ReplayError,
};
use crate::targets::{
    CallKind, EnvCall, Process, Reply, Snapshot, Step, StepError, TargetStatus, DEFAULT_STEP_BUDGET,
};
use crate::trace::{
    crash_dedup_key, initial_corpora, Corpora, CrashEntry, Fault, FaultClass, Record, Recording,
};

/// Chance (num, den) that a later input pop in a branch is mutated too.
pub const FURTHER_MUTATION: (u32, u32) = (1, 4);

/// Milliseconds since the campaign started.
pub trait Clock {
    fn elapsed_ms(&self) -> u64;
}

/// A clock that never advances; wall-clock budgets never expire.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn elapsed_ms(&self) -> u64 {
        0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CampaignConfig {
    pub seed: u64,
    pub max_passes: Option<u64>,
    pub max_execs: Option<u64>,
    pub time_budget_ms: Option<u64>,
    pub step_budget: u64,
    pub no_relaxed: bool,
    pub no_feedback: bool,
    /// Forces every seed's energy; 0 disables branching.
    pub energy_override: Option<u32>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seed: 0,
            max_passes: Some(1),
            max_execs: None,
            time_budget_ms: None,
            step_budget: DEFAULT_STEP_BUDGET,
            no_relaxed: false,
            no_feedback: false,
            energy_override: None,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_passes.is_none() && self.max_execs.is_none() && self.time_budget_ms.is_none() {
            return Err(EngineError::Unbounded);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExecStatus {
    Exited(i64),
    Crashed(FaultClass),
    Hung,
    /// Ended by the replayer: strict-mode divergence or a forced exit.
    Aborted,
}

impl ExecStatus {
    pub fn fault(self) -> Option<Fault> {
        match self {
            ExecStatus::Crashed(c) => Some(Fault::Crash(c)),
            ExecStatus::Hung => Some(Fault::Hang),
            _ => None,
        }
    }
}

impl From<TargetStatus> for ExecStatus {
    fn from(s: TargetStatus) -> Self {
        match s {
            TargetStatus::Exited(c) => ExecStatus::Exited(c),
            TargetStatus::Crashed(c) => ExecStatus::Crashed(c),
            TargetStatus::Hung => ExecStatus::Hung,
        }
    }
}

impl core::fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ExecStatus::Exited(c) => write!(f, "exited({c})"),
            ExecStatus::Crashed(c) => write!(f, "crashed({})", c.as_str()),
            ExecStatus::Hung => f.write_str("hung"),
            ExecStatus::Aborted => f.write_str("aborted"),
        }
    }
}

/// Result of one execution (spine or branch).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    pub coverage: CoverageMap,
    pub states: Vec<u32>,
    pub divergence: DivergenceLog,
    /// Payloads served in place of recorded ones, keyed by record seq.
    pub mutated: BTreeMap<u64, Vec<u8>>,
    /// Slot ids of the last eight edges executed.
    pub last_edges: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("target error: {0}")]
    Step(#[from] StepError),
    #[error("recording is empty")]
    EmptyRecording,
    #[error("campaign has no pass, execution or time limit")]
    Unbounded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StopReason {
    #[default]
    Passes,
    Executions,
    Time,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CampaignReport {
    pub passes: u64,
    pub spine_execs: u64,
    pub branch_execs: u64,
    pub interesting: u64,
    /// Faithful executions of a record beyond the first within a pass.
    pub prefix_reexecutions: u64,
    pub divergence: DivergenceLog,
    pub coverage_slots: usize,
    pub states: usize,
    pub transitions: usize,
    pub corpus_sizes: BTreeMap<u64, usize>,
    /// Crash dedup key to the execution count at which it was first seen.
    pub crash_found_at: BTreeMap<u64, u64>,
    pub spine_status: Option<ExecStatus>,
    /// Digest of the last spine; equals [`replay_plain`]'s digest.
    pub spine_digest: u64,
    pub stop: StopReason,
    pub elapsed_ms: u64,
}

impl CampaignReport {
    pub fn execs(&self) -> u64 {
        self.spine_execs + self.branch_execs
    }

    pub fn execs_per_sec(&self) -> f64 {
        if self.elapsed_ms == 0 {
            0.0
        } else {
            self.execs() as f64 * 1000.0 / self.elapsed_ms as f64
        }
    }
}

/// Full campaign state after a run.
#[derive(Clone, Debug)]
pub struct Campaign {
    pub report: CampaignReport,
    pub corpora: Corpora,
    pub crashes: Vec<CrashEntry>,
    pub feedback: Feedback,
}

impl Campaign {
    pub fn crash_keys(&self) -> Vec<u64> {
        self.crashes.iter().map(|c| c.dedup_key).collect()
    }
}

/// Running digest of an env-call/reply sequence.
#[derive(Clone, Debug, Default)]
struct Digest(Fnv64);

impl Digest {
    fn call(&mut self, call: &EnvCall, reply: &Reply) {
        let h = &mut self.0;
        h.write(call.sys.as_bytes());
        h.write_u64(call.tid as u64);
        h.write_i64(call.fd.unwrap_or(-1));
        for &a in &call.args {
            h.write_i64(a);
        }
        if let CallKind::Output { data } = &call.kind {
            h.write(data);
        }
        match reply {
            Reply::Data(d) => h.write(d),
            Reply::Ret(r) => h.write_i64(*r),
            Reply::Ready { count, revents } => {
                h.write_i64(*count);
                for r in revents {
                    h.write(&[r.bits()]);
                }
            }
        }
    }

    fn finish(&mut self, status: ExecStatus) -> u64 {
        let mut tail = alloc::string::String::new();
        let _ = core::fmt::write(&mut tail, format_args!("{status}"));
        self.0.write(tail.as_bytes());
        self.0.finish()
    }
}

/// Outcome of a faithful replay of a whole recording.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlainReplay {
    pub status: ExecStatus,
    pub calls: Vec<EnvCall>,
    pub digest: u64,
    pub divergence: DivergenceLog,
    pub edges: Vec<(u32, u32)>,
    pub outputs: Vec<(i64, Vec<u8>)>,
}

/// Replays `recording` faithfully against `target`. A target still running
/// when the recording ends (a recording cut short by its step budget) ends
/// the replay as hung.
pub fn replay_plain(
    recording: &Recording,
    mut target: Process,
) -> Result<PlainReplay, EngineError> {
    let mut digest = Digest::default();
    let mut calls = Vec::new();
    let mut reply = None;
    let mut idx = 0;
    let status = loop {
        match target.step(reply.take())? {
            Step::Finished(s) => {
                if idx < recording.len() {
                    return Err(ReplayError::SpineIncomplete {
                        remaining: recording.len() - idx,
                    }
                    .into());
                }
                break ExecStatus::from(s);
            }
            Step::Call(call) => {
                let Some(rec) = recording.records.get(idx) else {
                    break ExecStatus::Hung;
                };
                let r = faithful_step(rec, &call)?;
                digest.call(&call, &r);
                calls.push(call);
                reply = Some(r);
                idx += 1;
            }
        }
    };
    Ok(PlainReplay {
        status,
        calls,
        digest: digest.finish(status),
        divergence: DivergenceLog::default(),
        edges: target.edges().to_vec(),
        outputs: target.outputs().to_vec(),
    })
}

/// One branch: its process state after the run plus what the replayer saw.
struct BranchRun {
    process: Process,
    status: ExecStatus,
    divergence: DivergenceLog,
    mutated: BTreeMap<u64, Vec<u8>>,
}

/// Runs a branch from `snapshot`, whose pending call is the one that
/// matched `suffix[0]`. `substitute` may replace the payload of any input
/// record popped in the branch; substitutions are logged.
fn run_branch(
    snapshot: &Snapshot,
    call: &EnvCall,
    suffix: &[Record],
    relaxed: bool,
    substitute: &mut dyn FnMut(&Record) -> Option<Vec<u8>>,
) -> Result<BranchRun, EngineError> {
    let mut process = snapshot.restore();
    let mut mutated = BTreeMap::new();
    let mut hook = |r: &Record| {
        let p = substitute(r);
        if let Some(p) = &p {
            mutated.insert(r.seq, p.clone());
        }
        p
    };
    let mut call = call.clone();
    let (status, divergence) = if relaxed {
        let mut rr = RelaxedReplay::new(suffix);
        loop {
            let reply = match rr.respond(&call, &mut hook) {
                BranchResponse::Reply(r) => r,
                BranchResponse::Exit => break (ExecStatus::Aborted, rr.log),
            };
            match process.step(Some(reply))? {
                Step::Call(c) => call = c,
                Step::Finished(s) => break (s.into(), rr.log),
            }
        }
    } else {
        let mut pos = 0;
        loop {
            let Some(reply) = strict_respond(suffix.get(pos), &call, &mut hook) else {
                break (ExecStatus::Aborted, DivergenceLog::default());
            };
            pos += 1;
            match process.step(Some(reply))? {
                Step::Call(c) => call = c,
                Step::Finished(s) => break (s.into(), DivergenceLog::default()),
            }
        }
    };
    Ok(BranchRun {
        process,
        status,
        divergence,
        mutated,
    })
}

/// Global-order branch replay: the call must match the next record.
fn strict_respond(
    rec: Option<&Record>,
    call: &EnvCall,
    hook: &mut dyn FnMut(&Record) -> Option<Vec<u8>>,
) -> Option<Reply> {
    let rec = rec?;
    if !call_matches(rec, call) {
        return None;
    }
    Some(match &call.kind {
        CallKind::Input { capacity } => {
            let mut data = hook(rec).unwrap_or_else(|| rec.payload().to_vec());
            data.truncate(*capacity);
            Reply::Data(data)
        }
        CallKind::Output { data } => Reply::Ret(data.len() as i64),
        _ => faithful_step(rec, call).ok()?,
    })
}

fn last_edge_slots(edges: &[(u32, u32)]) -> Vec<u32> {
    edges[edges.len().saturating_sub(8)..]
        .iter()
        .map(|&(p, c)| edge_slot(p, c) as u32)
        .collect()
}

fn outcome_of(run: BranchRun, feedback: &mut Feedback) -> ExecOutcome {
    let p = &run.process;
    let states = feedback
        .states
        .state_sequence(p.outputs().iter().map(|(_, d)| d.as_slice()));
    ExecOutcome {
        status: run.status,
        coverage: fold_edges(p.edges()),
        states,
        divergence: run.divergence,
        mutated: run.mutated,
        last_edges: last_edge_slots(p.edges()),
    }
}

struct Limits<'c> {
    cfg: &'c CampaignConfig,
    clock: &'c dyn Clock,
}

impl Limits<'_> {
    fn reached(&self, execs: u64) -> Option<StopReason> {
        if self.cfg.max_execs.is_some_and(|m| execs >= m) {
            return Some(StopReason::Executions);
        }
        if self
            .cfg
            .time_budget_ms
            .is_some_and(|t| self.clock.elapsed_ms() >= t)
        {
            return Some(StopReason::Time);
        }
        None
    }
}

struct State<'a> {
    recording: &'a Recording,
    cfg: &'a CampaignConfig,
    corpora: Corpora,
    crashes: Vec<CrashEntry>,
    feedback: Feedback,
    report: CampaignReport,
}

impl State<'_> {
    fn record_crash(&mut self, out: &ExecOutcome, fault: Fault, branch_seq: u64) {
        let last = out
            .mutated
            .keys()
            .next_back()
            .copied()
            .unwrap_or(branch_seq);
        let key = crash_dedup_key(fault, last, &out.last_edges);
        if self.crashes.iter().any(|c| c.dedup_key == key) {
            return;
        }
        self.report.crash_found_at.insert(key, self.report.execs());
        self.crashes.push(CrashEntry {
            fault,
            branch_seq,
            relaxed: !self.cfg.no_relaxed,
            mutated_payloads: out.mutated.clone(),
            dedup_key: key,
        });
    }

    /// All branches forked at record `idx`. Returns a stop reason if a
    /// limit was hit part way.
    fn fork_at(
        &mut self,
        idx: usize,
        snapshot: &Snapshot,
        call: &EnvCall,
        pass: u64,
        limits: &Limits<'_>,
    ) -> Result<Option<StopReason>, EngineError> {
        let recording = self.recording;
        let rec = &recording.records[idx];
        let suffix = &recording.records[idx..];
        let seeds_at_start = self.corpora.get(&rec.seq).map_or(0, |c| c.len());
        let mut branch_no = 0u64;
        for s in 0..seeds_at_start {
            let stats = &self.corpora[&rec.seq].seeds[s].stats;
            let e = self.cfg.energy_override.unwrap_or_else(|| energy(stats));
            let mut found = 0;
            for _ in 0..e {
                if let Some(stop) = limits.reached(self.report.execs()) {
                    return Ok(Some(stop));
                }
                let mut rng = Rng::for_branch(self.cfg.seed, rec.seq, pass, branch_no);
                branch_no += 1;
                let corpora = &self.corpora;
                let corpus = &corpora[&rec.seq];
                let seed = &corpus.seeds[s].data;
                let first = if rec.mutable {
                    mutate(seed, corpus, &mut rng)
                } else {
                    rec.payload().to_vec()
                };
                let mut first = Some(first);
                let mut substitute = |r: &Record| {
                    if r.seq == rec.seq {
                        return first.take();
                    }
                    let c = corpora.get(&r.seq).filter(|_| r.mutable)?;
                    rng.chance(FURTHER_MUTATION.0, FURTHER_MUTATION.1)
                        .then(|| mutate(r.payload(), c, &mut rng))
                };
                let run = run_branch(
                    snapshot,
                    call,
                    suffix,
                    !self.cfg.no_relaxed,
                    &mut substitute,
                )?;
                self.report.branch_execs += 1;
                let out = outcome_of(run, &mut self.feedback);
                self.report.divergence.add(&out.divergence);
                match out.status.fault() {
                    Some(fault) => self.record_crash(&out, fault, rec.seq),
                    None => {
                        if self.feedback.is_interesting(&out.coverage, &out.states) {
                            self.report.interesting += 1;
                            found += 1;
                            if rec.mutable {
                                let payload =
                                    out.mutated.get(&rec.seq).cloned().unwrap_or_default();
                                if let Some(c) = self.corpora.get_mut(&rec.seq) {
                                    c.insert(payload);
                                }
                            }
                        }
                    }
                }
            }
            if let Some(c) = self.corpora.get_mut(&rec.seq) {
                update_stats(&mut c.seeds[s].stats, found);
            }
        }
        Ok(None)
    }

    /// One spine walk with branching.
    fn pass(
        &mut self,
        target: Process,
        pass: u64,
        limits: &Limits<'_>,
    ) -> Result<Option<StopReason>, EngineError> {
        let recording = self.recording;
        let mut process = target;
        process.set_budget(self.cfg.step_budget);
        self.report.spine_execs += 1;
        let mut faithful = alloc::vec![0u32; recording.len()];
        let mut digest = Digest::default();
        let mut reply = None;
        let mut idx = 0;
        let status = loop {
            match process.step(reply.take())? {
                Step::Finished(s) => {
                    if idx < recording.len() {
                        return Err(ReplayError::SpineIncomplete {
                            remaining: recording.len() - idx,
                        }
                        .into());
                    }
                    break ExecStatus::from(s);
                }
                Step::Call(call) => {
                    let Some(rec) = recording.records.get(idx) else {
                        break ExecStatus::Hung;
                    };
                    let r = faithful_step(rec, &call)?;
                    if rec.is_input() && self.corpora.contains_key(&rec.seq) {
                        let snap = process.snapshot();
                        if let Some(stop) = self.fork_at(idx, &snap, &call, pass, limits)? {
                            return Ok(Some(stop));
                        }
                    }
                    digest.call(&call, &r);
                    faithful[idx] += 1;
                    reply = Some(r);
                    idx += 1;
                }
            }
        };
        self.report.prefix_reexecutions += faithful
            .iter()
            .map(|&n| n.saturating_sub(1) as u64)
            .sum::<u64>();
        self.report.spine_status = Some(status);
        self.report.spine_digest = digest.finish(status);
        Ok(None)
    }
}

/// Runs a campaign over `recording`. `factory` must return fresh instances
/// of the recorded target.
pub fn fuzz_campaign(
    recording: &Recording,
    factory: &dyn Fn() -> Process,
    cfg: &CampaignConfig,
    clock: &dyn Clock,
) -> Result<Campaign, EngineError> {
    cfg.validate()?;
    if recording.is_empty() {
        return Err(EngineError::EmptyRecording);
    }
    let mut st = State {
        recording,
        cfg,
        corpora: initial_corpora(recording),
        crashes: Vec::new(),
        feedback: Feedback::new(!cfg.no_feedback),
        report: CampaignReport::default(),
    };
    let limits = Limits { cfg, clock };
    let max_passes = cfg.max_passes.unwrap_or(u64::MAX);

    if max_passes > 0 && limits.reached(0).is_none() {
        // calibrate the global maps with the unmutated execution
        let mut target = factory();
        target.set_budget(cfg.step_budget);
        let plain = replay_plain(recording, target)?;
        st.report.spine_execs += 1;
        let states = st
            .feedback
            .states
            .state_sequence(plain.outputs.iter().map(|(_, d)| d.as_slice()));
        st.feedback.virgin.merge(&fold_edges(&plain.edges));
        st.feedback.states.merge_transitions(&states);
        st.report.spine_status = Some(plain.status);
        st.report.spine_digest = plain.digest;
    }

    let mut stop = StopReason::Passes;
    let mut pass = 0;
    while pass < max_passes {
        if let Some(s) = limits.reached(st.report.execs()) {
            stop = s;
            break;
        }
        if let Some(s) = st.pass(factory(), pass, &limits)? {
            stop = s;
            break;
        }
        pass += 1;
        st.report.passes = pass;
    }

    let mut report = st.report;
    report.stop = stop;
    report.coverage_slots = st.feedback.virgin.population();
    report.states = st.feedback.states.states();
    report.transitions = st.feedback.states.transitions();
    report.corpus_sizes = st.corpora.iter().map(|(&k, c)| (k, c.len())).collect();
    report.elapsed_ms = clock.elapsed_ms();
    Ok(Campaign {
        report,
        corpora: st.corpora,
        crashes: st.crashes,
        feedback: st.feedback,
    })
}

/// Re-executes a crash entry: faithful spine up to its branch record, then
/// the branch with the entry's payload map.
pub fn replay_crash(
    entry: &CrashEntry,
    recording: &Recording,
    mut target: Process,
    step_budget: u64,
) -> Result<Option<ExecOutcome>, EngineError> {
    let Some(branch_idx) = recording
        .records
        .iter()
        .position(|r| r.seq == entry.branch_seq && r.is_input())
    else {
        return Ok(None);
    };
    target.set_budget(step_budget);
    let mut reply = None;
    let mut idx = 0;
    loop {
        match target.step(reply.take())? {
            Step::Finished(_) => return Ok(None),
            Step::Call(call) => {
                let rec = &recording.records[idx];
                if idx == branch_idx {
                    if !call_matches(rec, &call) {
                        return Ok(None);
                    }
                    let snap = target.snapshot();
                    let mut substitute = |r: &Record| entry.mutated_payloads.get(&r.seq).cloned();
                    let run = run_branch(
                        &snap,
                        &call,
                        &recording.records[idx..],
                        entry.relaxed,
                        &mut substitute,
                    )?;
                    let mut fb = Feedback::new(false);
                    return Ok(Some(outcome_of(run, &mut fb)));
                }
                reply = Some(faithful_step(rec, &call)?);
                idx += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reproduction {
    Reproduced,
    /// The fault did not recur; `got` is what happened instead, if anything ran.
    Unreproducible {
        got: Option<ExecStatus>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriageResult {
    pub dedup_key: u64,
    pub fault: Fault,
    pub verdict: Reproduction,
}

/// Replays every crash entry and checks that its fault class recurs.
pub fn triage(
    entries: &[CrashEntry],
    recording: &Recording,
    factory: &dyn Fn() -> Process,
    step_budget: u64,
) -> Result<Vec<TriageResult>, EngineError> {
    entries
        .iter()
        .map(|e| {
            let out = replay_crash(e, recording, factory(), step_budget)?;
            let got = out.map(|o| o.status);
            let verdict = if got.and_then(ExecStatus::fault) == Some(e.fault) {
                Reproduction::Reproduced
            } else {
                Reproduction::Unreproducible { got }
            };
            Ok(TriageResult {
                dedup_key: e.dedup_key,
                fault: e.fault,
                verdict,
            })
        })
        .collect()
}
