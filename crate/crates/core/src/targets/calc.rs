//! Calculator with a configuration file on fd 0 and a UI socket on fd 3.
//!
//! Happy path: `read(0)` config, `send(3)` UI init, `recv(3)` expression,
//! `send(3)` result, `recv(3)` close command, `write(1)` goodbye, `exit(0)`.
//!
//! Planted bugs:
//! * division (or modulo) by zero: arithmetic fault;
//! * a first config line longer than 64 bytes: memory fault;
//! * a close command before any expression was evaluated: assertion fault.
//!   Invalid expressions are silently ignored, so this is only reachable
//!   when the close command is delivered out of its recorded order.

use alloc::boxed::Box;
use alloc::vec::Vec;

use super::{EnvCall, Fiber, FiberCx, Reply, Tail, Yield};
use crate::trace::FaultClass;

const CONFIG_LINE_MAX: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum State {
    #[default]
    Start,
    Config,
    InitSent,
    Command,
    ResultSent,
    Tail,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum Mode {
    #[default]
    Simple,
    Scientific,
}

#[derive(Clone, Debug, Default)]
pub struct Calc {
    state: State,
    mode: Mode,
    evaluated: bool,
    tail: Tail,
}

impl Calc {
    fn config(&mut self, cx: &mut FiberCx<'_>, data: &[u8]) -> Yield {
        cx.block(10);
        if data.is_empty() {
            cx.block(11);
            return self.finish(&[
                EnvCall::write(2, b"calc: missing config\n"),
                EnvCall::exit(2),
            ]);
        }
        let line = data.split(|&b| b == b'\n').next().unwrap_or(&[]);
        let mut buf = [0u8; CONFIG_LINE_MAX];
        for (i, &b) in line.iter().enumerate() {
            cx.block(12);
            if i >= CONFIG_LINE_MAX {
                return Yield::Fault(FaultClass::Memory);
            }
            buf[i] = b;
        }
        let Some(eq) = line.iter().position(|&b| b == b'=') else {
            cx.block(13);
            return self.finish(&[EnvCall::write(2, b"calc: bad config\n"), EnvCall::exit(2)]);
        };
        let (key, value) = (&line[..eq], &line[eq + 1..]);
        if key == b"mode" {
            cx.block(14);
            if value == b"scientific" {
                cx.block(15);
                self.mode = Mode::Scientific;
            } else if value == b"simple" {
                cx.block(16);
            } else {
                cx.block(17);
            }
        } else {
            cx.block(18);
        }
        self.state = State::InitSent;
        Yield::Call(EnvCall::send(3, b"UI:init\n"))
    }

    fn command(&mut self, cx: &mut FiberCx<'_>, data: &[u8]) -> Yield {
        cx.block(20);
        if data.is_empty() {
            cx.block(21);
            return self.finish(&[EnvCall::exit(1)]);
        }
        if data.starts_with(b"close") {
            cx.block(22);
            if !self.evaluated {
                return Yield::Fault(FaultClass::Assertion);
            }
            cx.block(23);
            return self.finish(&[EnvCall::write(1, b"goodbye\n"), EnvCall::exit(0)]);
        }
        match self.evaluate(cx, data) {
            Ok(Some(value)) => {
                cx.block(24);
                self.evaluated = true;
                self.state = State::ResultSent;
                let mut out = b"result: ".to_vec();
                out.extend_from_slice(&format_i64(value));
                out.push(b'\n');
                Yield::Call(EnvCall::send(3, &out))
            }
            Ok(None) => {
                // ignored input, keep listening
                cx.block(25);
                Yield::Call(EnvCall::recv(3, 64))
            }
            Err(fault) => Yield::Fault(fault),
        }
    }

    fn evaluate(&self, cx: &mut FiberCx<'_>, data: &[u8]) -> Result<Option<i64>, FaultClass> {
        let mut rest = data;
        let Some(lhs) = number(cx, &mut rest) else {
            cx.block(30);
            return Ok(None);
        };
        let Some((&op, tail)) = rest.split_first() else {
            cx.block(31);
            return Ok(None);
        };
        rest = tail;
        let Some(rhs) = number(cx, &mut rest) else {
            cx.block(32);
            return Ok(None);
        };
        match rest.first() {
            Some(b'=') => cx.block(33),
            Some(_) => cx.block(34),
            None => cx.block(35),
        }
        let value = match op {
            b'+' => {
                cx.block(40);
                lhs.wrapping_add(rhs)
            }
            b'-' => {
                cx.block(41);
                lhs.wrapping_sub(rhs)
            }
            b'*' => {
                cx.block(42);
                lhs.wrapping_mul(rhs)
            }
            b'/' => {
                cx.block(43);
                if rhs == 0 {
                    return Err(FaultClass::Arithmetic);
                }
                lhs / rhs
            }
            b'%' if self.mode == Mode::Scientific => {
                cx.block(44);
                if rhs == 0 {
                    return Err(FaultClass::Arithmetic);
                }
                lhs % rhs
            }
            b'^' if self.mode == Mode::Scientific => {
                cx.block(45);
                lhs.wrapping_pow((rhs & 63) as u32)
            }
            _ => {
                cx.block(46);
                return Ok(None);
            }
        };
        Ok(Some(value))
    }

    fn finish(&mut self, calls: &[EnvCall]) -> Yield {
        self.state = State::Tail;
        self.tail.set(calls.to_vec())
    }
}

/// Parses up to 9 decimal digits from the front of `rest`.
fn number(cx: &mut FiberCx<'_>, rest: &mut &[u8]) -> Option<i64> {
    let mut value = 0i64;
    let mut digits = 0;
    while let Some((&b, tail)) = rest.split_first() {
        if !b.is_ascii_digit() || digits == 9 {
            break;
        }
        cx.block(50);
        value = value * 10 + (b - b'0') as i64;
        digits += 1;
        *rest = tail;
    }
    (digits > 0).then_some(value)
}

fn format_i64(v: i64) -> Vec<u8> {
    let mut out = Vec::new();
    let neg = v < 0;
    let mut u = v.unsigned_abs();
    loop {
        out.push(b'0' + (u % 10) as u8);
        u /= 10;
        if u == 0 {
            break;
        }
    }
    if neg {
        out.push(b'-');
    }
    out.reverse();
    out
}

impl Fiber for Calc {
    fn resume(&mut self, cx: &mut FiberCx<'_>, reply: Option<Reply>) -> Yield {
        let data = match &reply {
            Some(Reply::Data(d)) => d.as_slice(),
            _ => &[],
        };
        match self.state {
            State::Start => {
                cx.block(1);
                self.state = State::Config;
                Yield::Call(EnvCall::read(0, 256))
            }
            State::Config => self.config(cx, data),
            State::InitSent | State::ResultSent => {
                cx.block(2);
                self.state = State::Command;
                Yield::Call(EnvCall::recv(3, 64))
            }
            State::Command => self.command(cx, data),
            State::Tail => self.tail.next().unwrap_or(Yield::Done),
        }
    }

    fn box_clone(&self) -> Box<dyn Fiber> {
        Box::new(self.clone())
    }
}
