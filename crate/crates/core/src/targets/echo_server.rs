//! Line-oriented echo server on socket fd 4.
//!
//! Loop: `poll([4])`, `recv(4)`, `send(4, reply)`. A hang-up or EOF closes
//! the socket and exits. Recognised commands (`HELO`, `PING`, `STAT`, `ECHO`,
//! `QUIT`) are matched byte by byte so each matched prefix is its own block;
//! anything else is echoed back verbatim.
//!
//! Planted bug: a message longer than 16 bytes that starts with `FF FF`
//! is copied into a 16-byte header buffer (memory fault).

use alloc::boxed::Box;
use alloc::vec::Vec;

use super::{EnvCall, Fiber, FiberCx, PollEntry, PollEvents, Reply, Tail, Yield};
use crate::trace::FaultClass;

const SOCK: i64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum State {
    #[default]
    Start,
    Polled,
    Received,
    Sent,
    Tail,
}

#[derive(Clone, Debug, Default)]
pub struct EchoServer {
    state: State,
    greeted: bool,
    messages: u32,
    tail: Tail,
}

/// Matches `word` against the front of `msg`, one block per matched byte.
fn keyword(cx: &mut FiberCx<'_>, msg: &[u8], word: &[u8], base: u32) -> bool {
    for (i, &w) in word.iter().enumerate() {
        if msg.get(i).map(u8::to_ascii_uppercase) != Some(w) {
            return false;
        }
        cx.block(base + i as u32);
    }
    true
}

impl EchoServer {
    fn poll(&mut self) -> Yield {
        self.state = State::Polled;
        Yield::Call(EnvCall::poll(alloc::vec![PollEntry::new(
            SOCK,
            PollEvents::IN
        )]))
    }

    fn shutdown(&mut self, code: i64) -> Yield {
        self.state = State::Tail;
        self.tail
            .set(alloc::vec![EnvCall::close(SOCK), EnvCall::exit(code)])
    }

    fn handle(&mut self, cx: &mut FiberCx<'_>, msg: &[u8]) -> Yield {
        cx.block(20);
        if msg.is_empty() {
            cx.block(21);
            return self.shutdown(0);
        }
        if msg[0] == 0xff {
            cx.block(22);
            if msg.get(1) == Some(&0xff) {
                cx.block(23);
                if msg.len() > 16 {
                    return Yield::Fault(FaultClass::Memory);
                }
                cx.block(24);
            }
        }
        self.messages += 1;
        let body = msg
            .strip_suffix(b"\r\n")
            .or_else(|| msg.strip_suffix(b"\n"))
            .unwrap_or(msg);
        let mut out = Vec::new();
        if keyword(cx, body, b"HELO", 100) {
            let name = body.get(5..).unwrap_or(&[]);
            if name.len() >= 3 {
                cx.block(110);
                self.greeted = true;
                out.extend_from_slice(b"250 hello ");
                out.extend_from_slice(name);
            } else {
                cx.block(111);
                out.extend_from_slice(b"501 name too short");
            }
        } else if keyword(cx, body, b"QUIT", 190) {
            cx.block(200);
            self.state = State::Tail;
            return self.tail.set(alloc::vec![
                EnvCall::send(SOCK, b"221 bye\r\n"),
                EnvCall::close(SOCK),
                EnvCall::exit(0),
            ]);
        } else if !self.greeted {
            cx.block(120);
            out.extend_from_slice(b"503 say HELO first");
        } else if keyword(cx, body, b"PING", 130) {
            cx.block(140);
            out.extend_from_slice(b"PONG");
        } else if keyword(cx, body, b"STAT", 150) {
            cx.block(160);
            out.extend_from_slice(b"211 messages=");
            out.push(b'0' + (self.messages % 10) as u8);
        } else if keyword(cx, body, b"ECHO", 170) {
            cx.block(180);
            out.extend_from_slice(b"200 ");
            out.extend_from_slice(body.get(5..).unwrap_or(&[]));
        } else {
            cx.block(210);
            out.extend_from_slice(body);
        }
        out.extend_from_slice(b"\r\n");
        self.state = State::Sent;
        Yield::Call(EnvCall::send(SOCK, &out))
    }
}

impl Fiber for EchoServer {
    fn resume(&mut self, cx: &mut FiberCx<'_>, reply: Option<Reply>) -> Yield {
        match self.state {
            State::Start => {
                cx.block(1);
                self.poll()
            }
            State::Polled => {
                cx.block(2);
                let revents = match &reply {
                    Some(Reply::Ready { revents, .. }) => {
                        revents.first().copied().unwrap_or_default()
                    }
                    _ => PollEvents::NONE,
                };
                if revents.contains(PollEvents::IN) {
                    cx.block(3);
                    self.state = State::Received;
                    Yield::Call(EnvCall::recv(SOCK, 256))
                } else if revents.contains(PollEvents::HUP) {
                    cx.block(4);
                    self.shutdown(0)
                } else {
                    cx.block(5);
                    self.poll()
                }
            }
            State::Received => {
                let msg = match reply {
                    Some(Reply::Data(d)) => d,
                    _ => Vec::new(),
                };
                self.handle(cx, &msg)
            }
            State::Sent => {
                cx.block(6);
                self.poll()
            }
            State::Tail => self.tail.next().unwrap_or(Yield::Done),
        }
    }

    fn box_clone(&self) -> Box<dyn Fiber> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::run;
    use super::super::{CallKind, TargetStatus};
    use super::*;

    #[test]
    fn three_messages_then_hangup() {
        let (p, status, calls) = run(
            "echo_server",
            &[(4, &[b"HELO alice\r\n", b"ECHO hello\r\n", b"PING\r\n"])],
        );
        assert_eq!(status, TargetStatus::Exited(0));
        let names: Vec<_> = calls.iter().map(|c| c.sys).collect();
        assert_eq!(
            names,
            [
                "poll", "recv", "send", "poll", "recv", "send", "poll", "recv", "send", "poll",
                "close", "exit"
            ]
        );
        let outs: Vec<_> = p.outputs().iter().map(|(_, d)| d.clone()).collect();
        assert_eq!(
            outs,
            [
                b"250 hello alice\r\n".to_vec(),
                b"200 hello\r\n".to_vec(),
                b"PONG\r\n".to_vec()
            ]
        );
    }

    #[test]
    fn ff_ff_prefix_longer_than_16_crashes() {
        let mut msg = alloc::vec![0xff, 0xff];
        msg.extend_from_slice(&[b'x'; 15]);
        let (_, status, _) = run("echo_server", &[(4, &[&msg])]);
        assert_eq!(status, TargetStatus::Crashed(FaultClass::Memory));
        msg.pop();
        let (_, status, _) = run("echo_server", &[(4, &[&msg])]);
        assert_eq!(status, TargetStatus::Exited(0));
    }

    #[test]
    fn unknown_messages_are_echoed_after_helo() {
        let (_, _, calls) = run("echo_server", &[(4, &[b"HELO bob\n", b"whatever\n"])]);
        let sends: Vec<_> = calls
            .iter()
            .filter_map(|c| match &c.kind {
                CallKind::Output { data } => Some(data.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(sends[1], b"whatever\r\n");
    }

    #[test]
    fn quit_closes_and_exits() {
        let (_, status, calls) = run("echo_server", &[(4, &[b"QUIT\r\n", b"PING\r\n"])]);
        assert_eq!(status, TargetStatus::Exited(0));
        assert_eq!(calls.last().unwrap().sys, "exit");
        assert_eq!(calls.iter().filter(|c| c.sys == "recv").count(), 1);
    }
}
