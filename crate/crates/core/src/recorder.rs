//! Phase one: run a target against a scripted environment and log every
//! interaction.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use crate::targets::{
    CallKind, EnvCall, PollEvents, Process, Reply, Step, StepError, TargetStatus,
};
use crate::trace::{initial_corpora, Corpora, Record, Recording};

/// One environment source, as seen by the target through a file descriptor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FdSource {
    pub kind: String,
    pub path: Option<String>,
    /// Byte strings served, in order, to input calls on this fd.
    pub stimuli: Vec<Vec<u8>>,
}

/// The concrete environment a recording is taken in.
///
/// Readiness is answered truthfully: `IN` while stimuli are pending, `HUP`
/// once they are exhausted, `OUT` whenever requested.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnvScript {
    pub fds: BTreeMap<i64, FdSource>,
}

impl EnvScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn source(mut self, fd: i64, kind: &str, path: Option<&str>, stimuli: &[&[u8]]) -> Self {
        self.fds.insert(
            fd,
            FdSource {
                kind: kind.into(),
                path: path.map(Into::into),
                stimuli: stimuli.iter().map(|s| s.to_vec()).collect(),
            },
        );
        self
    }
}

/// The reference environment shipped with each bundled target.
pub fn bundled_script(name: &str) -> Option<EnvScript> {
    Some(match name {
        "calc" => EnvScript::new()
            .source(
                0,
                "file",
                Some("/etc/calc.conf"),
                &[b"mode=simple\nprecision=6\n"],
            )
            .source(3, "socket", Some("socket:ui"), &[b"1+2=", b"close"]),
        "echo_server" => EnvScript::new().source(
            4,
            "socket",
            Some("socket:client"),
            &[b"HELO alice\r\n", b"ECHO hello\r\n", b"PING\r\n"],
        ),
        "config_parser" => EnvScript::new().source(
            0,
            "file",
            Some("/etc/app.conf"),
            &[b"name=demo\nlist=a,b,c\nlevel=3\n"],
        ),
        _ => return None,
    })
}

/// Result of a recording session.
#[derive(Clone, Debug)]
pub struct Recorded {
    pub recording: Recording,
    pub status: TargetStatus,
    pub corpora: Corpora,
}

impl Recorded {
    /// A recording cut short by the step budget.
    pub fn hung(&self) -> bool {
        self.status == TargetStatus::Hung
    }
}

struct LiveEnv {
    queues: BTreeMap<i64, VecDeque<Vec<u8>>>,
}

impl LiveEnv {
    fn serve(&mut self, fd: i64, capacity: usize) -> Vec<u8> {
        let Some(q) = self.queues.get_mut(&fd) else {
            return Vec::new();
        };
        match q.pop_front() {
            Some(mut chunk) => {
                if chunk.len() > capacity {
                    let rest = chunk.split_off(capacity);
                    q.push_front(rest);
                }
                chunk
            }
            None => Vec::new(),
        }
    }

    fn pending(&self, fd: i64) -> bool {
        self.queues.get(&fd).is_some_and(|q| !q.is_empty())
    }
}

/// Runs `target` against `env`, producing one record per env-call.
pub fn record(mut target: Process, env: &EnvScript) -> Result<Recorded, StepError> {
    let mut recording = Recording::new(target.name());
    for (&fd, src) in &env.fds {
        recording
            .meta
            .insert(alloc::format!("fd.{fd}.kind"), src.kind.clone());
        if let Some(path) = &src.path {
            recording.set_fd_path(fd, path);
        }
    }
    let mut live = LiveEnv {
        queues: env
            .fds
            .iter()
            .map(|(&fd, src)| (fd, src.stimuli.iter().cloned().collect()))
            .collect(),
    };

    let mut reply = None;
    let status = loop {
        match target.step(reply.take())? {
            Step::Finished(status) => break status,
            Step::Call(call) => {
                let (r, record) = answer(&mut live, &call);
                recording.push(record);
                reply = Some(r);
            }
        }
    };
    let corpora = initial_corpora(&recording);
    Ok(Recorded {
        recording,
        status,
        corpora,
    })
}

fn answer(live: &mut LiveEnv, call: &EnvCall) -> (Reply, Record) {
    let mk = |args: Vec<i64>, buf: Option<Vec<u8>>, ret: i64| {
        Record::new(0, call.tid, call.sys, call.fd, args, buf, ret)
    };
    match &call.kind {
        CallKind::Input { capacity } => {
            let data = live.serve(call.fd.unwrap_or(-1), *capacity);
            let ret = data.len() as i64;
            let rec = mk(call.args.clone(), Some(data.clone()), ret);
            (Reply::Data(data), rec)
        }
        CallKind::Output { data } => {
            let ret = data.len() as i64;
            (
                Reply::Ret(ret),
                mk(call.args.clone(), Some(data.clone()), ret),
            )
        }
        CallKind::Poll { fds } => {
            let revents: Vec<PollEvents> = fds
                .iter()
                .map(|e| {
                    let mut r = e.events & PollEvents::OUT;
                    if live.pending(e.fd) {
                        r = r | (e.events & PollEvents::IN);
                    } else {
                        r = r | PollEvents::HUP;
                    }
                    r
                })
                .collect();
            let count = revents.iter().filter(|r| !r.is_empty()).count() as i64;
            let args = fds
                .iter()
                .zip(&revents)
                .flat_map(|(e, r)| [e.fd, e.events.bits() as i64, r.bits() as i64])
                .collect();
            (Reply::Ready { count, revents }, mk(args, None, count))
        }
        CallKind::Plain => (Reply::Ret(0), mk(call.args.clone(), None, 0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::bundled_target;
    use crate::trace::SyscallClass;

    pub(crate) fn calc_script() -> EnvScript {
        EnvScript::new()
            .source(0, "file", Some("/etc/calc.conf"), &[b"mode=simple\n"])
            .source(3, "socket", Some("socket:ui"), &[b"1+2=", b"close"])
    }

    #[test]
    fn calc_recording_has_seven_records() {
        let rec = record(bundled_target("calc").unwrap(), &calc_script()).unwrap();
        assert_eq!(rec.status, TargetStatus::Exited(0));
        let names: Vec<_> = rec
            .recording
            .records
            .iter()
            .map(|r| r.sys.as_str())
            .collect();
        assert_eq!(
            names,
            ["read", "send", "recv", "send", "recv", "write", "exit"]
        );
        rec.recording.validate().unwrap();
        assert_eq!(
            rec.recording.records[0].buf.as_deref(),
            Some(&b"mode=simple\n"[..])
        );
        assert_eq!(rec.recording.records[0].ret, 12);
        assert_eq!(
            rec.recording.records[3].buf.as_deref(),
            Some(&b"result: 3\n"[..])
        );
        // corpora: one singleton per input record, holding its payload
        assert_eq!(rec.corpora.len(), 3);
        for r in rec.recording.input_records() {
            let c = &rec.corpora[&r.seq];
            assert_eq!(c.seeds.len(), 1);
            assert_eq!(c.seeds[0].data, r.payload());
        }
    }

    #[test]
    fn immediate_exit_records_single_exit() {
        #[derive(Clone)]
        struct Quit;
        impl crate::targets::Fiber for Quit {
            fn resume(
                &mut self,
                _cx: &mut crate::targets::FiberCx<'_>,
                _r: Option<Reply>,
            ) -> crate::targets::Yield {
                crate::targets::Yield::Call(EnvCall::exit(0))
            }
            fn box_clone(&self) -> alloc::boxed::Box<dyn crate::targets::Fiber> {
                alloc::boxed::Box::new(self.clone())
            }
        }
        let rec = record(Process::new("quit", Quit.into()), &EnvScript::new()).unwrap();
        assert_eq!(rec.recording.len(), 1);
        assert_eq!(rec.recording.records[0].sys, "exit");
        assert_eq!(rec.recording.records[0].class, SyscallClass::Lifecycle);
    }

    #[test]
    fn echo_server_triples_and_hangup() {
        let env = EnvScript::new().source(
            4,
            "socket",
            Some("socket:client"),
            &[b"HELO alice\r\n", b"ECHO hello\r\n", b"PING\r\n"],
        );
        let rec = record(bundled_target("echo_server").unwrap(), &env).unwrap();
        let rs = &rec.recording.records;
        assert_eq!(rs.len(), 12);
        for k in 0..3 {
            assert_eq!(rs[3 * k].sys, "poll");
            assert_eq!(rs[3 * k].args, [4, 1, 1]);
            assert_eq!(rs[3 * k + 1].sys, "recv");
            assert_eq!(rs[3 * k + 2].sys, "send");
        }
        assert_eq!(rs[9].args, [4, 1, PollEvents::HUP.bits() as i64]);
    }

    #[test]
    fn immutable_paths_clear_mutable_flag() {
        let env = EnvScript::new().source(0, "file", Some("/proc/self/cmdline"), &[b"list=a\n"]);
        let rec = record(bundled_target("config_parser").unwrap(), &env).unwrap();
        assert!(rec.recording.input_records().all(|r| !r.mutable));
    }

    #[test]
    fn step_budget_cuts_recording() {
        let rec = record(
            bundled_target("calc").unwrap().with_budget(3),
            &calc_script(),
        )
        .unwrap();
        assert!(rec.hung());
        assert_eq!(rec.recording.len(), 3);
    }
}
