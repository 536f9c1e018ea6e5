//! ETF: the JSON Lines trace format.
//!
//! ```text
//! {"etf":1,"target":"calc","meta":{"fd.0.path":"/etc/calc.conf"}}
//! {"seq":0,"tid":0,"sys":"read","fd":0,"args":[256],"buf":"6d6f64653d...","ret":12,"class":"input"}
//! ```
//!
//! One header line, then one line per record. Keys appear in a fixed order,
//! `buf` is lowercase hex and present only for input and output records.

use std::collections::BTreeMap;

use envfuzz_core::trace::{Record, Recording, SyscallClass, TraceError, FORMAT_VERSION};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EtfError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("unsupported trace format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("missing header line")]
    MissingHeader,
    #[error(transparent)]
    Invalid(#[from] TraceError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    etf: u64,
    target: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    seq: u64,
    tid: u32,
    sys: String,
    fd: Option<i64>,
    args: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    buf: Option<String>,
    ret: i64,
    class: String,
}

pub fn encode_recording(rec: &Recording) -> String {
    let mut out = serde_json::to_string(&Header {
        etf: rec.version as u64,
        target: rec.target.clone(),
        meta: rec.meta.clone(),
    })
    .expect("header serializes");
    out.push('\n');
    for r in &rec.records {
        let line = Line {
            seq: r.seq,
            tid: r.tid,
            sys: r.sys.clone(),
            fd: r.fd,
            args: r.args.clone(),
            buf: r.buf.as_deref().map(hex::encode),
            ret: r.ret,
            class: r.class.as_str().to_string(),
        };
        out.push_str(&serde_json::to_string(&line).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn decode_recording(text: &str) -> Result<Recording, EtfError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(EtfError::MissingHeader)?;
    let header_value: serde_json::Value =
        serde_json::from_str(first).map_err(|e| EtfError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?;
    match header_value.get("etf").and_then(serde_json::Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(found) => return Err(EtfError::Version { found }),
        None => {
            return Err(EtfError::Malformed {
                line: 1,
                reason: "header has no numeric `etf` version".into(),
            })
        }
    }
    let header: Header = serde_json::from_value(header_value).map_err(|e| EtfError::Malformed {
        line: 1,
        reason: e.to_string(),
    })?;

    let mut rec = Recording::new(header.target);
    rec.meta = header.meta;
    for (i, text) in lines {
        let line = i + 1;
        let bad = |reason: String| EtfError::Malformed { line, reason };
        let l: Line = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let class = SyscallClass::parse(&l.class)
            .ok_or_else(|| bad(format!("unknown class `{}`", l.class)))?;
        let buf = l
            .buf
            .map(|h| hex::decode(&h).map_err(|e| bad(format!("bad hex in buf: {e}"))))
            .transpose()?;
        let mut r = Record::new(l.seq, l.tid, l.sys, l.fd, l.args, buf, l.ret);
        if r.class != class {
            return Err(bad(format!(
                "class `{}` does not match `{}` for {}",
                class, r.class, r.sys
            )));
        }
        r.mutable = false;
        rec.records.push(r);
    }
    rec.refresh_mutability();
    rec.validate()?;
    Ok(rec)
}
