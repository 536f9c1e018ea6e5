//! Importer for the line-oriented text trace format.
//!
//! ```text
//! 0 0 read(0, "quit\n", 100) = 5
//! 1 0 write(1, "bye", 3) = 3
//! 2 0 poll(4, 1, 1) = 1
//! 3 0 exit(0) = 0
//! ```
//!
//! Each line is `SEQ TID NAME(ARGS) = RET`. Arguments are integers or
//! double-quoted strings with C escapes (`\n`, `\t`, `\r`, `\0`, `\xNN`, `\\`,
//! `\"`). For calls that take a descriptor the first integer is the fd; the
//! string argument of an input or output call is its buffer. Blank lines and
//! lines starting with `#` are skipped. Sequence numbers are renumbered.

use envfuzz_core::trace::{classify, takes_fd, Record, Recording, SyscallClass};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}, column {column}: {reason}")]
pub struct ImportError {
    pub line: usize,
    pub column: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Imported {
    pub recording: Recording,
    /// Lines naming a call outside the classification table.
    pub unknown_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Arg {
    Int(i64),
    Str(Vec<u8>),
}

struct Cursor<'a> {
    s: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, reason: impl Into<String>) -> Result<T, ImportError> {
        Err(ImportError {
            line: self.line,
            column: self.pos + 1,
            reason: reason.into(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c == b' ' || c == b'\t') {
            self.pos += 1;
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), ImportError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{}`", c as char))
        }
    }

    fn int(&mut self) -> Result<i64, ImportError> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.pos += 1;
        }
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
        match text.parse() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.err("expected an integer")
            }
        }
    }

    fn name(&mut self) -> Result<String, ImportError> {
        self.skip_ws();
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == b'_')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return self.err("expected a call name");
        }
        Ok(String::from_utf8_lossy(&self.s[start..self.pos]).into_owned())
    }

    fn string(&mut self) -> Result<Vec<u8>, ImportError> {
        self.expect(b'"')?;
        let mut out = Vec::new();
        loop {
            let Some(c) = self.peek() else {
                return self.err("unterminated string");
            };
            self.pos += 1;
            match c {
                b'"' => return Ok(out),
                b'\\' => {
                    let Some(e) = self.peek() else {
                        return self.err("unterminated escape");
                    };
                    self.pos += 1;
                    match e {
                        b'n' => out.push(b'\n'),
                        b't' => out.push(b'\t'),
                        b'r' => out.push(b'\r'),
                        b'0' => out.push(0),
                        b'\\' => out.push(b'\\'),
                        b'"' => out.push(b'"'),
                        b'x' => {
                            let hex = self.s.get(self.pos..self.pos + 2).unwrap_or(&[]);
                            match std::str::from_utf8(hex)
                                .ok()
                                .and_then(|h| u8::from_str_radix(h, 16).ok())
                            {
                                Some(b) if hex.len() == 2 => {
                                    out.push(b);
                                    self.pos += 2;
                                }
                                _ => return self.err("bad \\x escape"),
                            }
                        }
                        _ => {
                            self.pos -= 1;
                            return self.err(format!("unknown escape `\\{}`", e as char));
                        }
                    }
                }
                _ => out.push(c),
            }
        }
    }

    fn args(&mut self) -> Result<Vec<Arg>, ImportError> {
        self.expect(b'(')?;
        let mut args = Vec::new();
        self.skip_ws();
        if self.peek() == Some(b')') {
            self.pos += 1;
            return Ok(args);
        }
        loop {
            self.skip_ws();
            args.push(if self.peek() == Some(b'"') {
                Arg::Str(self.string()?)
            } else {
                Arg::Int(self.int()?)
            });
            self.skip_ws();
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b')') => {
                    self.pos += 1;
                    return Ok(args);
                }
                _ => return self.err("expected `,` or `)`"),
            }
        }
    }
}

fn parse_line(text: &str, line: usize) -> Result<Record, ImportError> {
    let mut c = Cursor {
        s: text.as_bytes(),
        pos: 0,
        line,
    };
    c.int()?;
    let tid = c.int()?;
    let tid = u32::try_from(tid).or_else(|_| c.err("thread id out of range"))?;
    let sys = c.name()?;
    let args_at = c.pos;
    let args = c.args()?;
    c.expect(b'=')?;
    let ret = c.int()?;
    c.skip_ws();
    if c.pos != c.s.len() {
        return c.err("trailing text after return value");
    }

    let class = classify(&sys);
    let mut ints = args.iter().filter_map(|a| match a {
        Arg::Int(v) => Some(*v),
        Arg::Str(_) => None,
    });
    let fd = if takes_fd(&sys) {
        match ints.next() {
            Some(fd) => Some(fd),
            None => {
                c.pos = args_at;
                return c.err(format!("{sys} needs a file descriptor argument"));
            }
        }
    } else {
        None
    };
    let rest: Vec<i64> = ints.collect();
    let mut strings = args.iter().filter_map(|a| match a {
        Arg::Str(s) => Some(s.clone()),
        Arg::Int(_) => None,
    });
    let buf = match class {
        SyscallClass::Input | SyscallClass::Output => Some(strings.next().unwrap_or_default()),
        _ => None,
    };
    if class == SyscallClass::Input && ret >= 0 && buf.as_ref().map_or(0, Vec::len) as i64 != ret {
        c.pos = args_at;
        return c.err(format!(
            "{sys} returned {ret} but its buffer holds {} bytes",
            buf.map_or(0, |b| b.len())
        ));
    }
    Ok(Record::new(0, tid, sys, fd, rest, buf, ret))
}

pub fn import_text_trace(text: &str, target: &str) -> Result<Imported, ImportError> {
    let mut recording = Recording::new(target);
    let mut unknown_calls = 0;
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let r = parse_line(line.trim_end(), i + 1)?;
        if r.class == SyscallClass::Other {
            unknown_calls += 1;
        }
        recording.push(r);
    }
    Ok(Imported {
        recording,
        unknown_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_line() {
        let imp = import_text_trace("0 0 read(0, \"quit\\n\", 100) = 5\n", "t").unwrap();
        let r = &imp.recording.records[0];
        assert_eq!(r.sys, "read");
        assert_eq!(r.fd, Some(0));
        assert_eq!(r.buf.as_deref(), Some(&b"quit\n"[..]));
        assert_eq!(r.ret, 5);
        assert_eq!(r.class, SyscallClass::Input);
        assert_eq!(r.args, [100]);
    }

    #[test]
    fn empty_input() {
        let imp = import_text_trace("", "t").unwrap();
        assert!(imp.recording.is_empty());
        assert_eq!(imp.unknown_calls, 0);
    }

    #[test]
    fn seq_is_renumbered_and_unknowns_counted() {
        let text = "7 0 getpid() = 41\n# comment\n\n9 1 frobnicate(1, 2) = -38\n12 0 exit(0) = 0\n";
        let imp = import_text_trace(text, "t").unwrap();
        let seqs: Vec<u64> = imp.recording.records.iter().map(|r| r.seq).collect();
        assert_eq!(seqs, [0, 1, 2]);
        assert_eq!(imp.unknown_calls, 2);
        assert_eq!(imp.recording.records[1].tid, 1);
        imp.recording.validate().unwrap();
    }

    #[test]
    fn escapes() {
        let imp = import_text_trace(r#"0 0 recv(3, "a\tb\x00\\\"\xff", 64) = 7"#, "t").unwrap();
        assert_eq!(imp.recording.records[0].payload(), b"a\tb\0\\\"\xff");
    }

    #[test]
    fn malformed_line_is_named() {
        let mut lines: Vec<String> = (0..10)
            .map(|i| format!("{i} 0 write(1, \"x\", 1) = 1"))
            .collect();
        lines[6] = "6 0 write(1, \"x\" 1) = 1".into();
        let err = import_text_trace(&lines.join("\n"), "t").unwrap_err();
        assert_eq!(err.line, 7);
        assert_eq!(err.column, 18);
    }

    #[test]
    fn input_length_must_match() {
        let err = import_text_trace("0 0 read(0, \"abc\", 10) = 5", "t").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn poll_and_close() {
        let imp = import_text_trace("0 0 poll(4, 1, 1) = 1\n1 0 close(4) = 0", "t").unwrap();
        let rs = &imp.recording.records;
        assert_eq!((rs[0].fd, rs[0].args.clone()), (None, vec![4, 1, 1]));
        assert_eq!((rs[1].fd, rs[1].args.clone()), (Some(4), vec![]));
    }
}
