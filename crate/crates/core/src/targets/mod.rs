//! Deterministic scripted-target runtime.
//!
//! Targets are ordinary Rust state machines ([`Fiber`]s) that reach their
//! environment only by yielding [`EnvCall`]s. A [`Process`] owns one or more
//! fibers, runs exactly one of them at a time, and switches round-robin at
//! env-call boundaries. Cloning a process is a snapshot: the clone and the
//! original evolve independently.
//!
//! # Writing a target
//!
//! * Implement [`Fiber::resume`]. It receives the reply to the previous call
//!   (`None` on the first resume) and must return after doing a bounded
//!   amount of work, yielding the next call, finishing, or faulting.
//! * Call [`FiberCx::block`] on entry to each basic block. Block ids are small
//!   integers chosen by the author; edges are formed from consecutive blocks
//!   of the same fiber, starting from the implicit entry block `0`.
//! * Terminate the process with [`EnvCall::exit`]. A fiber that returns
//!   [`Yield::Done`] ends only itself; the process exits with code 0 once all
//!   fibers are done.
//! * Signal faults with [`Yield::Fault`] instead of panicking.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::fmt;

use crate::trace::{classify, FaultClass, SyscallClass};

mod calc;
mod config_parser;
mod echo_server;

pub use calc::Calc;
pub use config_parser::ConfigParser;
pub use echo_server::EchoServer;

/// Default env-step budget per execution.
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

/// Names accepted by [`bundled_target`].
pub const BUNDLED_TARGETS: [&str; 3] = ["calc", "echo_server", "config_parser"];

/// Poll event bits, using the Linux `pollfd` values.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PollEvents(pub u8);

impl PollEvents {
    pub const NONE: PollEvents = PollEvents(0);
    pub const IN: PollEvents = PollEvents(0x01);
    pub const OUT: PollEvents = PollEvents(0x04);
    pub const HUP: PollEvents = PollEvents(0x10);

    pub fn contains(self, other: PollEvents) -> bool {
        self.0 & other.0 == other.0 && other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl core::ops::BitOr for PollEvents {
    type Output = PollEvents;
    fn bitor(self, rhs: PollEvents) -> PollEvents {
        PollEvents(self.0 | rhs.0)
    }
}

impl core::ops::BitAnd for PollEvents {
    type Output = PollEvents;
    fn bitand(self, rhs: PollEvents) -> PollEvents {
        PollEvents(self.0 & rhs.0)
    }
}

impl fmt::Debug for PollEvents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (bit, name) in [(Self::IN, "IN"), (Self::OUT, "OUT"), (Self::HUP, "HUP")] {
            if self.contains(bit) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        if first {
            f.write_str("0")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PollEntry {
    pub fd: i64,
    pub events: PollEvents,
    pub revents: PollEvents,
}

impl PollEntry {
    pub fn new(fd: i64, events: PollEvents) -> Self {
        PollEntry {
            fd,
            events,
            revents: PollEvents::NONE,
        }
    }
}

/// Class-specific part of an env-call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CallKind {
    Input { capacity: usize },
    Output { data: Vec<u8> },
    Poll { fds: Vec<PollEntry> },
    Plain,
}

/// One call across the environment boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvCall {
    pub tid: u32,
    pub sys: &'static str,
    pub fd: Option<i64>,
    pub args: Vec<i64>,
    pub kind: CallKind,
}

impl EnvCall {
    fn input(sys: &'static str, fd: i64, capacity: usize) -> Self {
        EnvCall {
            tid: 0,
            sys,
            fd: Some(fd),
            args: alloc::vec![capacity as i64],
            kind: CallKind::Input { capacity },
        }
    }

    fn output(sys: &'static str, fd: i64, data: &[u8]) -> Self {
        EnvCall {
            tid: 0,
            sys,
            fd: Some(fd),
            args: alloc::vec![data.len() as i64],
            kind: CallKind::Output {
                data: data.to_vec(),
            },
        }
    }

    pub fn read(fd: i64, capacity: usize) -> Self {
        Self::input("read", fd, capacity)
    }

    pub fn recv(fd: i64, capacity: usize) -> Self {
        Self::input("recv", fd, capacity)
    }

    pub fn write(fd: i64, data: &[u8]) -> Self {
        Self::output("write", fd, data)
    }

    pub fn send(fd: i64, data: &[u8]) -> Self {
        Self::output("send", fd, data)
    }

    pub fn poll(fds: Vec<PollEntry>) -> Self {
        EnvCall {
            tid: 0,
            sys: "poll",
            fd: None,
            args: Vec::new(),
            kind: CallKind::Poll { fds },
        }
    }

    pub fn close(fd: i64) -> Self {
        EnvCall {
            tid: 0,
            sys: "close",
            fd: Some(fd),
            args: Vec::new(),
            kind: CallKind::Plain,
        }
    }

    pub fn exit(code: i64) -> Self {
        EnvCall {
            tid: 0,
            sys: "exit",
            fd: None,
            args: alloc::vec![code],
            kind: CallKind::Plain,
        }
    }

    /// Any call without a buffer or poll set (lifecycle and everything else).
    pub fn plain(sys: &'static str, args: Vec<i64>) -> Self {
        EnvCall {
            tid: 0,
            sys,
            fd: None,
            args,
            kind: CallKind::Plain,
        }
    }

    pub fn class(&self) -> SyscallClass {
        classify(self.sys)
    }

    pub fn is_exit(&self) -> bool {
        self.sys == "exit"
    }

    pub fn exit_code(&self) -> i64 {
        self.args.first().copied().unwrap_or(0)
    }

    /// Checks that the payload variant matches the syscall class.
    pub fn is_well_formed(&self) -> bool {
        matches!(
            (self.class(), &self.kind),
            (SyscallClass::Input, CallKind::Input { .. })
                | (SyscallClass::Output, CallKind::Output { .. })
                | (SyscallClass::Readiness, CallKind::Poll { .. })
                | (
                    SyscallClass::Lifecycle | SyscallClass::Other,
                    CallKind::Plain
                )
        ) && (!matches!(self.kind, CallKind::Input { .. } | CallKind::Output { .. })
            || self.fd.is_some())
    }
}

/// The environment's answer to an [`EnvCall`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    /// Return value of an output, lifecycle or other call.
    Ret(i64),
    /// Bytes served to an input call; an empty buffer is end-of-file.
    Data(Vec<u8>),
    /// Poll result: number of ready entries and `revents` per entry.
    Ready {
        count: i64,
        revents: Vec<PollEvents>,
    },
}

impl Reply {
    pub fn ret(&self) -> i64 {
        match self {
            Reply::Ret(r) => *r,
            Reply::Data(d) => d.len() as i64,
            Reply::Ready { count, .. } => *count,
        }
    }

    fn answers(&self, kind: &CallKind) -> bool {
        match (self, kind) {
            (Reply::Data(_), CallKind::Input { .. }) => true,
            (Reply::Ret(_), CallKind::Output { .. } | CallKind::Plain) => true,
            (Reply::Ready { revents, .. }, CallKind::Poll { fds }) => revents.len() == fds.len(),
            _ => false,
        }
    }
}

/// What a fiber does when it stops running.
pub enum Yield {
    Call(EnvCall),
    Done,
    Fault(FaultClass),
}

/// Coverage hooks available to a running fiber.
pub struct FiberCx<'a> {
    edges: &'a mut Vec<(u32, u32)>,
    last_block: &'a mut u32,
}

impl FiberCx<'_> {
    /// Marks entry into basic block `id`.
    #[inline]
    pub fn block(&mut self, id: u32) {
        self.edges.push((*self.last_block, id));
        *self.last_block = id;
    }
}

pub trait Fiber: Send {
    fn resume(&mut self, cx: &mut FiberCx<'_>, reply: Option<Reply>) -> Yield;

    fn box_clone(&self) -> Box<dyn Fiber>;
}

impl<T: Fiber + Clone + 'static> From<T> for Box<dyn Fiber> {
    fn from(f: T) -> Self {
        Box::new(f)
    }
}

struct FiberSlot {
    tid: u32,
    fiber: Box<dyn Fiber>,
    last_block: u32,
    reply: Option<Reply>,
    done: bool,
}

impl Clone for FiberSlot {
    fn clone(&self) -> Self {
        FiberSlot {
            tid: self.tid,
            fiber: self.fiber.box_clone(),
            last_block: self.last_block,
            reply: self.reply.clone(),
            done: self.done,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TargetStatus {
    Exited(i64),
    Crashed(FaultClass),
    Hung,
}

impl TargetStatus {
    pub fn fault(self) -> Option<crate::trace::Fault> {
        match self {
            TargetStatus::Exited(_) => None,
            TargetStatus::Crashed(c) => Some(crate::trace::Fault::Crash(c)),
            TargetStatus::Hung => Some(crate::trace::Fault::Hang),
        }
    }
}

impl fmt::Display for TargetStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetStatus::Exited(c) => write!(f, "exited({c})"),
            TargetStatus::Crashed(c) => write!(f, "crashed({})", c.as_str()),
            TargetStatus::Hung => f.write_str("hung"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Call(EnvCall),
    Finished(TargetStatus),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StepError {
    #[error("reply {reply:?} does not answer pending {sys} call")]
    MismatchedReply { sys: &'static str, reply: Reply },
    #[error("missing reply to pending {0} call")]
    MissingReply(&'static str),
    #[error("reply given but no call is pending")]
    UnexpectedReply,
    #[error("process already finished: {0}")]
    Finished(TargetStatus),
    #[error("fiber {tid} yielded malformed {sys} call")]
    MalformedCall { tid: u32, sys: &'static str },
}

#[derive(Clone, Debug)]
struct Pending {
    fiber: usize,
    sys: &'static str,
    kind: CallKind,
    exit_code: Option<i64>,
}

/// Full observable result of an execution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetOutcome {
    pub status: TargetStatus,
    pub edges: Vec<(u32, u32)>,
    pub outputs: Vec<(i64, Vec<u8>)>,
}

/// A running scripted target: fibers, scheduler cursor, coverage and outputs.
#[derive(Clone)]
pub struct Process {
    name: &'static str,
    fibers: Vec<FiberSlot>,
    cursor: usize,
    pending: Option<Pending>,
    edges: Vec<(u32, u32)>,
    outputs: Vec<(i64, Vec<u8>)>,
    steps: u64,
    budget: u64,
    status: Option<TargetStatus>,
}

/// A frozen [`Process`]; restoring never affects the snapshot.
#[derive(Clone)]
pub struct Snapshot(Process);

impl Snapshot {
    pub fn restore(&self) -> Process {
        self.0.clone()
    }
}

impl fmt::Debug for Process {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Process")
            .field("name", &self.name)
            .field("fibers", &self.fibers.len())
            .field("steps", &self.steps)
            .field("status", &self.status)
            .finish()
    }
}

impl Process {
    pub fn new(name: &'static str, main: Box<dyn Fiber>) -> Self {
        Self::with_fibers(name, alloc::vec![main])
    }

    /// Fibers get tids `0..n` in the given order; scheduling starts at tid 0.
    pub fn with_fibers(name: &'static str, fibers: Vec<Box<dyn Fiber>>) -> Self {
        Process {
            name,
            fibers: fibers
                .into_iter()
                .enumerate()
                .map(|(tid, fiber)| FiberSlot {
                    tid: tid as u32,
                    fiber,
                    last_block: 0,
                    reply: None,
                    done: false,
                })
                .collect(),
            cursor: 0,
            pending: None,
            edges: Vec::new(),
            outputs: Vec::new(),
            steps: 0,
            budget: DEFAULT_STEP_BUDGET,
            status: None,
        }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn set_budget(&mut self, budget: u64) {
        self.budget = budget;
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn status(&self) -> Option<TargetStatus> {
        self.status
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn outputs(&self) -> &[(i64, Vec<u8>)] {
        &self.outputs
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot(self.clone())
    }

    pub fn outcome(&self) -> Option<TargetOutcome> {
        self.status.map(|status| TargetOutcome {
            status,
            edges: self.edges.clone(),
            outputs: self.outputs.clone(),
        })
    }

    /// Delivers `reply` to the pending call (or starts the process when
    /// `reply` is `None` and nothing is pending) and runs until the next
    /// env-call or termination.
    pub fn step(&mut self, reply: Option<Reply>) -> Result<Step, StepError> {
        if let Some(status) = self.status {
            return Err(StepError::Finished(status));
        }
        match (self.pending.take(), reply) {
            (Some(p), Some(reply)) => {
                if !reply.answers(&p.kind) {
                    let sys = p.sys;
                    self.pending = Some(p);
                    return Err(StepError::MismatchedReply { sys, reply });
                }
                if let Some(code) = p.exit_code {
                    return Ok(self.finish(TargetStatus::Exited(code)));
                }
                self.fibers[p.fiber].reply = Some(reply);
                self.cursor = p.fiber + 1;
            }
            (Some(p), None) => {
                let sys = p.sys;
                self.pending = Some(p);
                return Err(StepError::MissingReply(sys));
            }
            (None, Some(_)) => return Err(StepError::UnexpectedReply),
            (None, None) => {}
        }

        loop {
            if self.steps >= self.budget {
                return Ok(self.finish(TargetStatus::Hung));
            }
            let Some(idx) = self.next_runnable() else {
                return Ok(self.finish(TargetStatus::Exited(0)));
            };
            let slot = &mut self.fibers[idx];
            let reply = slot.reply.take();
            let mut cx = FiberCx {
                edges: &mut self.edges,
                last_block: &mut slot.last_block,
            };
            match slot.fiber.resume(&mut cx, reply) {
                Yield::Call(mut call) => {
                    call.tid = slot.tid;
                    if !call.is_well_formed() {
                        return Err(StepError::MalformedCall {
                            tid: call.tid,
                            sys: call.sys,
                        });
                    }
                    self.steps += 1;
                    if let CallKind::Output { data } = &call.kind {
                        self.outputs.push((call.fd.unwrap_or(-1), data.clone()));
                    }
                    self.pending = Some(Pending {
                        fiber: idx,
                        sys: call.sys,
                        kind: call.kind.clone(),
                        exit_code: call.is_exit().then(|| call.exit_code()),
                    });
                    return Ok(Step::Call(call));
                }
                Yield::Done => {
                    slot.done = true;
                    self.cursor = idx + 1;
                }
                Yield::Fault(class) => {
                    return Ok(self.finish(TargetStatus::Crashed(class)));
                }
            }
        }
    }

    fn next_runnable(&self) -> Option<usize> {
        let n = self.fibers.len();
        (0..n)
            .map(|k| (self.cursor + k) % n)
            .find(|&i| !self.fibers[i].done)
    }

    fn finish(&mut self, status: TargetStatus) -> Step {
        self.status = Some(status);
        self.pending = None;
        Step::Finished(status)
    }

    /// Drives the process to completion, answering each call with `env`.
    pub fn run_with<F>(&mut self, mut env: F) -> Result<TargetStatus, StepError>
    where
        F: FnMut(&EnvCall) -> Reply,
    {
        let mut reply = None;
        loop {
            match self.step(reply.take())? {
                Step::Call(call) => reply = Some(env(&call)),
                Step::Finished(status) => return Ok(status),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown target `{0}` (available: calc, echo_server, config_parser)")]
pub struct UnknownTarget(pub alloc::string::String);

/// A fresh instance of one of the bundled targets.
pub fn bundled_target(name: &str) -> Result<Process, UnknownTarget> {
    Ok(match name {
        "calc" => Process::new("calc", Calc::default().into()),
        "echo_server" => Process::new("echo_server", EchoServer::default().into()),
        "config_parser" => Process::new("config_parser", ConfigParser::default().into()),
        other => return Err(UnknownTarget(other.into())),
    })
}

/// Helper for targets that emit a fixed tail of calls, ignoring their replies.
#[derive(Clone, Debug, Default)]
pub(crate) struct Tail(Vec<EnvCall>);

impl Tail {
    pub(crate) fn set(&mut self, calls: Vec<EnvCall>) -> Yield {
        self.0 = calls;
        self.0.reverse();
        self.next().unwrap_or(Yield::Done)
    }

    pub(crate) fn next(&mut self) -> Option<Yield> {
        self.0.pop().map(Yield::Call)
    }
}
