//! `key=value` configuration reader on fd 0.
//!
//! Reads fd 0 in 64-byte chunks until end-of-file, parses every line, writes
//! a one-line summary to fd 1 and exits. Comma-separated values are stored
//! into a fixed table of nine items.
//!
//! Planted bug: the item index is never checked, so a value containing more
//! than eight commas writes past the table (memory fault).

use alloc::boxed::Box;
use alloc::vec::Vec;

use super::{EnvCall, Fiber, FiberCx, Reply, Tail, Yield};
use crate::trace::FaultClass;

const ITEM_SLOTS: usize = 9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
enum State {
    #[default]
    Start,
    Reading,
    Tail,
}

#[derive(Clone, Debug, Default)]
pub struct ConfigParser {
    state: State,
    data: Vec<u8>,
    tail: Tail,
}

#[derive(Default)]
struct Summary {
    keys: u32,
    items: u32,
    errors: u32,
    level: u32,
}

fn parse_line(cx: &mut FiberCx<'_>, line: &[u8], sum: &mut Summary) -> Result<(), FaultClass> {
    cx.block(20);
    if line.is_empty() || line[0] == b'#' {
        cx.block(21);
        return Ok(());
    }
    let Some(eq) = line.iter().position(|&b| b == b'=') else {
        cx.block(22);
        sum.errors += 1;
        return Ok(());
    };
    let (key, value) = (&line[..eq], &line[eq + 1..]);
    if key.is_empty() || !key.iter().all(|b| b.is_ascii_alphanumeric() || *b == b'_') {
        cx.block(23);
        sum.errors += 1;
        return Ok(());
    }
    sum.keys += 1;
    match key {
        b"name" => cx.block(30),
        b"list" => cx.block(31),
        b"mode" => cx.block(32),
        b"level" => {
            cx.block(33);
            let mut n = 0u32;
            for &b in value {
                if !b.is_ascii_digit() {
                    cx.block(34);
                    sum.errors += 1;
                    break;
                }
                n = n.saturating_mul(10).saturating_add((b - b'0') as u32);
            }
            if n > 9 {
                cx.block(35);
            }
            sum.level = n;
        }
        _ => cx.block(36),
    }

    let mut table: [&[u8]; ITEM_SLOTS] = [&[]; ITEM_SLOTS];
    for (index, item) in value.split(|&b| b == b',').enumerate() {
        cx.block(100 + index.min(ITEM_SLOTS) as u32);
        if index >= ITEM_SLOTS {
            return Err(FaultClass::Memory);
        }
        table[index] = item;
        sum.items += 1;
    }
    if table.iter().any(|item| item.is_empty()) && sum.items > 1 {
        cx.block(37);
    }
    Ok(())
}

impl ConfigParser {
    fn finish(&mut self, cx: &mut FiberCx<'_>) -> Yield {
        cx.block(10);
        let mut sum = Summary::default();
        let data = core::mem::take(&mut self.data);
        for line in data.split(|&b| b == b'\n') {
            if let Err(fault) = parse_line(cx, line, &mut sum) {
                return Yield::Fault(fault);
            }
        }
        let mut out = Vec::new();
        let (fd, code) = if sum.errors > 0 {
            cx.block(11);
            out.extend_from_slice(b"error: ");
            (2, 1)
        } else {
            cx.block(12);
            out.extend_from_slice(b"ok: ");
            (1, 0)
        };
        for (label, value) in [
            (&b"keys="[..], sum.keys),
            (b" items=", sum.items),
            (b" level=", sum.level),
        ] {
            out.extend_from_slice(label);
            push_u32(&mut out, value);
        }
        out.push(b'\n');
        self.state = State::Tail;
        self.tail
            .set(alloc::vec![EnvCall::write(fd, &out), EnvCall::exit(code)])
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    let start = out.len();
    let mut v = v;
    loop {
        out.push(b'0' + (v % 10) as u8);
        v /= 10;
        if v == 0 {
            break;
        }
    }
    out[start..].reverse();
}

impl Fiber for ConfigParser {
    fn resume(&mut self, cx: &mut FiberCx<'_>, reply: Option<Reply>) -> Yield {
        match self.state {
            State::Start => {
                cx.block(1);
                self.state = State::Reading;
                Yield::Call(EnvCall::read(0, 64))
            }
            State::Reading => {
                let chunk = match reply {
                    Some(Reply::Data(d)) => d,
                    _ => Vec::new(),
                };
                if chunk.is_empty() {
                    return self.finish(cx);
                }
                cx.block(2);
                self.data.extend_from_slice(&chunk);
                Yield::Call(EnvCall::read(0, 64))
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
    use super::super::TargetStatus;
    use super::*;

    #[test]
    fn parses_and_summarises() {
        let (p, status, calls) = run(
            "config_parser",
            &[(0, &[b"name=demo\nlist=a,b,c\nlevel=3\n"])],
        );
        assert_eq!(status, TargetStatus::Exited(0));
        let names: Vec<_> = calls.iter().map(|c| c.sys).collect();
        assert_eq!(names, ["read", "read", "write", "exit"]);
        assert_eq!(p.outputs()[0].1, b"ok: keys=3 items=5 level=3\n");
    }

    #[test]
    fn eight_commas_fit_nine_crash() {
        let (_, status, _) = run("config_parser", &[(0, &[b"list=1,2,3,4,5,6,7,8,9\n"])]);
        assert_eq!(status, TargetStatus::Exited(0));
        let (_, status, _) = run("config_parser", &[(0, &[b"list=1,2,3,4,5,6,7,8,9,10\n"])]);
        assert_eq!(status, TargetStatus::Crashed(FaultClass::Memory));
    }

    #[test]
    fn input_spanning_reads_is_joined() {
        let (_, status, calls) = run(
            "config_parser",
            &[(0, &[b"list=a,b,", b"c,d,e,f,g,h,i,j\n"])],
        );
        assert_eq!(status, TargetStatus::Crashed(FaultClass::Memory));
        assert_eq!(calls.iter().filter(|c| c.sys == "read").count(), 3);
    }

    #[test]
    fn malformed_lines_report_errors() {
        let (p, status, _) = run("config_parser", &[(0, &[b"garbage\n"])]);
        assert_eq!(status, TargetStatus::Exited(1));
        assert_eq!(p.outputs()[0].0, 2);
    }
}
