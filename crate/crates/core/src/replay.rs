//! Faithful and relaxed replay.
//!
//! Along the spine every env-call is answered from the next record of the
//! recording, in global order, and any mismatch is an integrity error. Inside
//! a branch the unconsumed suffix is split into per-fd miniqueues and calls
//! are answered from those, so I/O on different descriptors may be served in
//! a different order than recorded.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use crate::targets::{CallKind, EnvCall, PollEntry, PollEvents, Reply};
use crate::trace::{classify, Record, SyscallClass};

/// Error code returned by failed non-I/O calls (`ENOSYS`).
pub const ENOSYS: i64 = -38;

/// Identical failing calls tolerated in a row before the branch is ended.
pub const MAX_FAIL_STREAK: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplayMode {
    Spine,
    Branch,
}

/// Divergence events observed while answering calls of one execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DivergenceLog {
    pub reordered_io: u64,
    pub extraneous_output: u64,
    pub eof_served: u64,
    pub non_io_emulated: u64,
    pub non_io_failed: u64,
    pub forced_exit: u64,
}

impl DivergenceLog {
    pub fn total(&self) -> u64 {
        self.reordered_io
            + self.extraneous_output
            + self.eof_served
            + self.non_io_emulated
            + self.non_io_failed
            + self.forced_exit
    }

    pub fn is_zero(&self) -> bool {
        self.total() == 0
    }

    pub fn add(&mut self, other: &DivergenceLog) {
        self.reordered_io += other.reordered_io;
        self.extraneous_output += other.extraneous_output;
        self.eof_served += other.eof_served;
        self.non_io_emulated += other.non_io_emulated;
        self.non_io_failed += other.non_io_failed;
        self.forced_exit += other.forced_exit;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error(
        "spine mismatch at seq {seq}: recorded {expected_sys}(fd {expected_fd:?}), target issued {found_sys}(fd {found_fd:?})"
    )]
    SpineMismatch {
        seq: u64,
        expected_sys: String,
        expected_fd: Option<i64>,
        found_sys: &'static str,
        found_fd: Option<i64>,
    },
    #[error("spine exhausted: target issued {found_sys} after the last recorded interaction")]
    SpineExhausted { found_sys: &'static str },
    #[error(
        "spine ended early: target finished with {remaining} recorded interactions unconsumed"
    )]
    SpineIncomplete { remaining: usize },
}

/// Whether `call` is the same interaction as `record` (same name and fd,
/// and for polls the same descriptor set).
pub fn call_matches(record: &Record, call: &EnvCall) -> bool {
    if record.sys != call.sys || record.fd != call.fd {
        return false;
    }
    match &call.kind {
        CallKind::Poll { fds } => {
            fds.len() * 3 == record.args.len()
                && fds
                    .iter()
                    .zip(record.poll_triples())
                    .all(|(e, (fd, ev, _))| e.fd == fd && e.events.bits() == ev)
        }
        _ => true,
    }
}

/// Answers `call` with exactly what `record` captured.
pub fn faithful_step(record: &Record, call: &EnvCall) -> Result<Reply, ReplayError> {
    if !call_matches(record, call) {
        return Err(ReplayError::SpineMismatch {
            seq: record.seq,
            expected_sys: record.sys.clone(),
            expected_fd: record.fd,
            found_sys: call.sys,
            found_fd: call.fd,
        });
    }
    Ok(match &call.kind {
        CallKind::Input { .. } => Reply::Data(record.payload().to_vec()),
        CallKind::Poll { .. } => Reply::Ready {
            count: record.ret,
            revents: record
                .poll_triples()
                .map(|(_, _, r)| PollEvents(r))
                .collect(),
        },
        CallKind::Output { .. } | CallKind::Plain => Reply::Ret(record.ret),
    })
}

#[derive(Clone, Debug)]
struct QEntry {
    /// Index into the suffix.
    idx: usize,
    /// Bytes still to serve after a short read.
    rest: Option<Vec<u8>>,
}

/// An input record taken off a miniqueue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Popped<'r> {
    pub record: &'r Record,
    /// `None` for a fresh record; the unserved remainder after a short read.
    pub rest: Option<Vec<u8>>,
}

/// The unconsumed suffix of a recording split into per-fd queues.
#[derive(Clone, Debug)]
pub struct MiniqueueMap<'a> {
    suffix: &'a [Record],
    queues: BTreeMap<i64, VecDeque<QEntry>>,
    others: VecDeque<usize>,
    hup: BTreeSet<i64>,
}

/// Splits `suffix` by fd, preserving relative order within each fd. Records
/// without an fd or that are not I/O are kept aside for the non-I/O policy.
pub fn build_miniqueues(suffix: &[Record]) -> MiniqueueMap<'_> {
    let mut queues: BTreeMap<i64, VecDeque<QEntry>> = BTreeMap::new();
    let mut others = VecDeque::new();
    for (idx, r) in suffix.iter().enumerate() {
        match (r.class, r.fd) {
            (SyscallClass::Input | SyscallClass::Output, Some(fd)) => {
                queues
                    .entry(fd)
                    .or_default()
                    .push_back(QEntry { idx, rest: None });
            }
            _ => others.push_back(idx),
        }
    }
    MiniqueueMap {
        suffix,
        queues,
        others,
        hup: BTreeSet::new(),
    }
}

impl<'a> MiniqueueMap<'a> {
    /// Head of `Q[fd]`; `None` when empty or hung up.
    pub fn head(&self, fd: i64) -> Option<&'a Record> {
        if self.hup.contains(&fd) {
            return None;
        }
        self.queues
            .get(&fd)
            .and_then(|q| q.front())
            .map(|e| &self.suffix[e.idx])
    }

    pub fn queue_len(&self, fd: i64) -> usize {
        self.queues.get(&fd).map_or(0, VecDeque::len)
    }

    pub fn fds(&self) -> impl Iterator<Item = i64> + '_ {
        self.queues.keys().copied()
    }

    /// Records still queued for `fd`, head first.
    pub fn queue(&self, fd: i64) -> Vec<&'a Record> {
        self.queues
            .get(&fd)
            .map(|q| q.iter().map(|e| &self.suffix[e.idx]).collect())
            .unwrap_or_default()
    }

    /// Marks `fd` as hung up: polls report HUP and reads return EOF.
    pub fn hang_up(&mut self, fd: i64) {
        self.hup.insert(fd);
    }

    pub fn reopen(&mut self, fd: i64) {
        self.hup.remove(&fd);
    }

    pub fn is_hung_up(&self, fd: i64) -> bool {
        self.hup.contains(&fd) || self.queue_len(fd) == 0
    }

    /// Every queued record (I/O and aside) back in seq order.
    pub fn merged(&self) -> Vec<Record> {
        let mut idxs: Vec<usize> = self
            .queues
            .values()
            .flat_map(|q| q.iter().map(|e| e.idx))
            .chain(self.others.iter().copied())
            .collect();
        idxs.sort_by_key(|&i| self.suffix[i].seq);
        idxs.into_iter().map(|i| self.suffix[i].clone()).collect()
    }

    /// Fd to reorder when a poll would block: among polled fds with
    /// non-empty queues the one whose head has the smallest seq, else the
    /// smallest-seq head across all queues.
    fn pick(&self, fds: &[PollEntry]) -> Option<i64> {
        let polled = fds
            .iter()
            .filter_map(|e| self.head(e.fd).map(|r| (r.seq, e.fd)))
            .min();
        polled
            .or_else(|| {
                self.queues
                    .keys()
                    .filter_map(|&fd| self.head(fd).map(|r| (r.seq, fd)))
                    .min()
            })
            .map(|(_, fd)| fd)
    }

    /// Promotes the earliest record in `Q[fd]` whose class answers `wanted`
    /// to the head; if none does, drops the head. Returns false if the
    /// queue was empty.
    fn reorder(&mut self, fd: i64, wanted: PollEvents) -> bool {
        let Some(q) = self.queues.get_mut(&fd) else {
            return false;
        };
        let suffix = self.suffix;
        let matches = |e: &QEntry| match suffix[e.idx].class {
            SyscallClass::Input => wanted.contains(PollEvents::IN),
            SyscallClass::Output => wanted.contains(PollEvents::OUT),
            _ => false,
        };
        match q.iter().position(matches) {
            Some(pos) => {
                let e = q.remove(pos).expect("position in range");
                q.push_front(e);
                true
            }
            None => q.pop_front().is_some(),
        }
    }

    /// Emulated `poll`: fills `revents` from the current queue heads and
    /// returns the number of entries with non-zero `revents`. Never blocks.
    pub fn emulate_poll(&mut self, fds: &mut [PollEntry], log: &mut DivergenceLog) -> i64 {
        loop {
            let mut ready = 0;
            let mut hung = 0;
            for e in fds.iter_mut() {
                match self.head(e.fd) {
                    None => {
                        e.revents = PollEvents::HUP;
                        hung += 1;
                    }
                    Some(r) => {
                        let avail = if r.is_input() {
                            PollEvents::IN
                        } else {
                            PollEvents::OUT
                        };
                        e.revents = e.events & avail;
                        if !e.revents.is_empty() {
                            ready += 1;
                        }
                    }
                }
            }
            if ready > 0 || hung > 0 || fds.is_empty() {
                return ready + hung;
            }
            let Some(fd) = self.pick(fds) else {
                return 0;
            };
            let wanted = fds
                .iter()
                .filter(|e| e.fd == fd)
                .fold(PollEvents::NONE, |acc, e| acc | e.events);
            self.reorder(fd, wanted);
            log.reordered_io += 1;
        }
    }

    /// Takes the next input record for `fd`, reordering past output heads.
    /// `None` means end-of-file.
    pub fn pop_input(&mut self, fd: i64, log: &mut DivergenceLog) -> Option<Popped<'a>> {
        loop {
            let head = self.head(fd)?;
            if head.is_input() {
                break;
            }
            self.reorder(fd, PollEvents::IN);
            log.reordered_io += 1;
        }
        let e = self.queues.get_mut(&fd)?.pop_front()?;
        Some(Popped {
            record: &self.suffix[e.idx],
            rest: e.rest,
        })
    }

    /// Serves `payload` (from a record popped off `Q[fd]`) to a read of
    /// `capacity` bytes, re-queueing the unserved tail at the head.
    fn serve(
        &mut self,
        fd: i64,
        popped_idx: usize,
        mut payload: Vec<u8>,
        capacity: usize,
    ) -> Vec<u8> {
        if payload.len() > capacity {
            let rest = payload.split_off(capacity);
            self.queues.entry(fd).or_default().push_front(QEntry {
                idx: popped_idx,
                rest: Some(rest),
            });
        }
        payload
    }

    /// Emulated input: implicit poll, then pop and serve. `substitute` may
    /// replace the payload of a freshly popped record (mutation); it is not
    /// consulted for short-read remainders.
    pub fn emulate_input_with<F>(
        &mut self,
        fd: i64,
        capacity: usize,
        log: &mut DivergenceLog,
        mut substitute: F,
    ) -> (Vec<u8>, i64)
    where
        F: FnMut(&Record) -> Option<Vec<u8>>,
    {
        let Some(popped) = self.pop_input(fd, log) else {
            log.eof_served += 1;
            return (Vec::new(), 0);
        };
        let idx = (popped.record.seq - self.suffix[0].seq) as usize;
        let payload = match popped.rest {
            Some(rest) => rest,
            None => substitute(popped.record).unwrap_or_else(|| popped.record.payload().to_vec()),
        };
        let bytes = self.serve(fd, idx, payload, capacity);
        let n = bytes.len() as i64;
        (bytes, n)
    }

    pub fn emulate_input(
        &mut self,
        fd: i64,
        capacity: usize,
        log: &mut DivergenceLog,
    ) -> (Vec<u8>, i64) {
        self.emulate_input_with(fd, capacity, log, |_| None)
    }

    /// Emulated output: consumes a matching output head if there is one and
    /// always reports the full length written.
    pub fn emulate_output(&mut self, fd: i64, bytes: &[u8], log: &mut DivergenceLog) -> i64 {
        match self.head(fd) {
            Some(r) if r.is_output() => {
                self.queues.get_mut(&fd).and_then(VecDeque::pop_front);
            }
            _ => log.extraneous_output += 1,
        }
        bytes.len() as i64
    }

    /// Consumes the earliest aside record for the same call name and fd,
    /// returning its value.
    fn take_other(&mut self, call: &EnvCall) -> Option<i64> {
        let pos = self.others.iter().position(|&i| {
            let r = &self.suffix[i];
            r.sys == call.sys && r.fd == call.fd
        })?;
        let idx = self.others.remove(pos)?;
        Some(self.suffix[idx].ret)
    }
}

/// How a non-I/O call is handled inside a branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    /// Produce a plausible synthetic result.
    Emulate,
    /// Hand to the host; the scripted runtime answers with success.
    Forward,
    /// Fail with `ENOSYS`.
    Fail,
    /// End the branch.
    Exit,
}

const POLICY_TABLE: &[(&str, Policy)] = &[
    ("close", Policy::Emulate),
    ("exit", Policy::Emulate),
    ("open", Policy::Emulate),
    ("socket", Policy::Emulate),
    ("accept", Policy::Emulate),
    ("connect", Policy::Emulate),
    ("getpid", Policy::Emulate),
    ("gettid", Policy::Emulate),
    ("getuid", Policy::Emulate),
    ("time", Policy::Emulate),
    ("clock_gettime", Policy::Emulate),
    ("sched_yield", Policy::Emulate),
    ("nanosleep", Policy::Emulate),
    ("brk", Policy::Forward),
    ("mmap", Policy::Forward),
    ("munmap", Policy::Forward),
    ("mprotect", Policy::Forward),
    ("madvise", Policy::Forward),
];

pub fn policy_for(sys: &str) -> Policy {
    POLICY_TABLE
        .iter()
        .find(|(name, _)| *name == sys)
        .map_or(Policy::Fail, |&(_, p)| p)
}

/// Response to a call inside a branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BranchResponse {
    Reply(Reply),
    /// The branch is terminated without answering.
    Exit,
}

/// Relaxed replay state for one branch.
#[derive(Clone, Debug)]
pub struct RelaxedReplay<'a> {
    pub queues: MiniqueueMap<'a>,
    pub log: DivergenceLog,
    fail_streak: Option<(&'static str, Vec<i64>, u32)>,
}

impl<'a> RelaxedReplay<'a> {
    pub fn new(suffix: &'a [Record]) -> Self {
        RelaxedReplay {
            queues: build_miniqueues(suffix),
            log: DivergenceLog::default(),
            fail_streak: None,
        }
    }

    /// Answers any call. `substitute` is offered each fresh input record.
    pub fn respond<F>(&mut self, call: &EnvCall, substitute: F) -> BranchResponse
    where
        F: FnMut(&Record) -> Option<Vec<u8>>,
    {
        if !matches!(call.kind, CallKind::Plain) {
            self.fail_streak = None;
        }
        let reply = match &call.kind {
            CallKind::Input { capacity } => {
                let fd = call.fd.unwrap_or(-1);
                let (bytes, _) =
                    self.queues
                        .emulate_input_with(fd, *capacity, &mut self.log, substitute);
                Reply::Data(bytes)
            }
            CallKind::Output { data } => Reply::Ret(self.queues.emulate_output(
                call.fd.unwrap_or(-1),
                data,
                &mut self.log,
            )),
            CallKind::Poll { fds } => {
                let mut fds = fds.clone();
                let count = self.queues.emulate_poll(&mut fds, &mut self.log);
                Reply::Ready {
                    count,
                    revents: fds.iter().map(|e| e.revents).collect(),
                }
            }
            CallKind::Plain => return self.emulate_other(call),
        };
        BranchResponse::Reply(reply)
    }

    /// Applies the non-I/O policy table to `call`.
    pub fn emulate_other(&mut self, call: &EnvCall) -> BranchResponse {
        let ret = match policy_for(call.sys) {
            Policy::Emulate => self.emulate_lifecycle(call),
            Policy::Forward => Some((0, false)),
            Policy::Fail => None,
            Policy::Exit => {
                self.log.forced_exit += 1;
                return BranchResponse::Exit;
            }
        };
        match ret {
            Some((ret, recorded)) => {
                self.fail_streak = None;
                if !recorded {
                    self.log.non_io_emulated += 1;
                }
                BranchResponse::Reply(Reply::Ret(ret))
            }
            None => {
                let streak = match &mut self.fail_streak {
                    Some((sys, args, n)) if *sys == call.sys && *args == call.args => {
                        *n += 1;
                        *n
                    }
                    slot => {
                        *slot = Some((call.sys, call.args.clone(), 1));
                        1
                    }
                };
                if streak > MAX_FAIL_STREAK {
                    self.log.forced_exit += 1;
                    BranchResponse::Exit
                } else {
                    self.log.non_io_failed += 1;
                    BranchResponse::Reply(Reply::Ret(ENOSYS))
                }
            }
        }
    }

    /// Result for an emulated call, and whether it came from a matching
    /// recorded call rather than being synthesized.
    fn emulate_lifecycle(&mut self, call: &EnvCall) -> Option<(i64, bool)> {
        let recorded = self.queues.take_other(call);
        match call.sys {
            "close" => {
                if let Some(fd) = call.fd {
                    self.queues.hang_up(fd);
                }
                Some((0, recorded.is_some()))
            }
            "open" | "socket" | "accept" | "connect" => {
                let ret = recorded?;
                if ret >= 0 && call.sys != "connect" {
                    self.queues.reopen(ret);
                }
                Some((ret, true))
            }
            _ => Some((recorded.unwrap_or(0), recorded.is_some())),
        }
    }
}

/// Classification used by relaxed replay; shared with the trace table.
pub fn is_io(sys: &str) -> bool {
    matches!(classify(sys), SyscallClass::Input | SyscallClass::Output)
}
