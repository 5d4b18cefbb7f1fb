//! Line-oriented trace format, one event per line:
//!
//! ```text
//! <pid> open <path> [<fd>]
//! <pid> read <fd> <size>
//! <pid> write <fd> <size> <payload>
//! <pid> mmap <length>
//! <pid> fork <child_pid>
//! <pid> close <fd>
//! <pid> exit <status>
//! ```
//!
//! Paths and payloads use the C-style escapes of [`crate::protocol::escape`].
//! Blank lines and lines starting with `#` are skipped.

use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

use super::{Action, EventKind, EventSource, ProcessEvent};
use crate::protocol::escape;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("trace read failed: {0}")]
    Io(#[from] io::Error),
}

fn parse_err(line: usize, reason: impl Into<String>) -> TraceError {
    TraceError::Parse { line, reason: reason.into() }
}

/// Parses one trace line. `line_no` is only used in errors.
pub fn parse_event(text: &str, line_no: usize) -> Result<ProcessEvent, TraceError> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let num = |i: usize, what: &str| -> Result<i64, TraceError> {
        let tok = toks.get(i).ok_or_else(|| parse_err(line_no, format!("missing {what}")))?;
        tok.parse::<i64>().map_err(|_| parse_err(line_no, format!("{what} {tok:?} is not a number")))
    };
    let positive = |i: usize, what: &str| -> Result<u64, TraceError> {
        match num(i, what)? {
            n if n > 0 => Ok(n as u64),
            n => Err(parse_err(line_no, format!("{what} must be positive, got {n}"))),
        }
    };
    let fd = |i: usize| -> Result<i32, TraceError> {
        i32::try_from(num(i, "fd")?)
            .ok()
            .filter(|fd| *fd >= 0)
            .ok_or_else(|| parse_err(line_no, "fd out of range"))
    };
    let arity = |n: usize| -> Result<(), TraceError> {
        if toks.len() == n {
            Ok(())
        } else {
            Err(parse_err(line_no, format!("expected {} fields, found {}", n, toks.len())))
        }
    };
    let pid = u32::try_from(num(0, "pid")?).map_err(|_| parse_err(line_no, "pid out of range"))?;
    let kind = toks.get(1).ok_or_else(|| parse_err(line_no, "missing event kind"))?;
    let kind = match *kind {
        "open" => {
            if toks.len() != 3 && toks.len() != 4 {
                return Err(parse_err(line_no, "open takes a path and an optional fd"));
            }
            let raw = escape::unescape(toks[2]).map_err(|e| parse_err(line_no, e.to_string()))?;
            let path = String::from_utf8(raw).map_err(|_| parse_err(line_no, "path is not UTF-8"))?;
            let fd = if toks.len() == 4 { Some(fd(3)?) } else { None };
            EventKind::Open { path, fd }
        }
        "read" => {
            arity(4)?;
            EventKind::Read { fd: fd(2)?, size: positive(3, "size")? }
        }
        "write" => {
            arity(5)?;
            let size = positive(3, "size")?;
            let payload = escape::unescape(toks[4]).map_err(|e| parse_err(line_no, e.to_string()))?;
            if payload.len() as u64 != size {
                return Err(parse_err(line_no, format!("write size {size} but payload has {} bytes", payload.len())));
            }
            EventKind::Write { fd: fd(2)?, payload }
        }
        "mmap" => {
            arity(3)?;
            EventKind::Mmap { length: positive(2, "length")? }
        }
        "fork" => {
            arity(3)?;
            let child = u32::try_from(num(2, "child pid")?).map_err(|_| parse_err(line_no, "child pid out of range"))?;
            EventKind::Fork { child }
        }
        "close" => {
            arity(3)?;
            EventKind::Close { fd: fd(2)? }
        }
        "exit" => {
            arity(3)?;
            let status = i32::try_from(num(2, "status")?).map_err(|_| parse_err(line_no, "status out of range"))?;
            EventKind::Exit { status }
        }
        other => return Err(parse_err(line_no, format!("unknown event kind {other:?}"))),
    };
    Ok(ProcessEvent { pid, kind })
}

/// Renders an event in trace format.
pub fn format_event(event: &ProcessEvent) -> String {
    let pid = event.pid;
    match &event.kind {
        EventKind::Open { path, fd: None } => format!("{pid} open {}", escape::escape(path.as_bytes())),
        EventKind::Open { path, fd: Some(fd) } => format!("{pid} open {} {fd}", escape::escape(path.as_bytes())),
        EventKind::Read { fd, size } => format!("{pid} read {fd} {size}"),
        EventKind::Write { fd, payload } => format!("{pid} write {fd} {} {}", payload.len(), escape::escape(payload)),
        EventKind::Mmap { length } => format!("{pid} mmap {length}"),
        EventKind::Fork { child } => format!("{pid} fork {child}"),
        EventKind::Close { fd } => format!("{pid} close {fd}"),
        EventKind::Exit { status } => format!("{pid} exit {status}"),
    }
}

/// Replays a recorded trace in file order.
pub struct TraceReplay<R> {
    reader: R,
    line_no: usize,
}

impl<R: BufRead> TraceReplay<R> {
    pub fn new(reader: R) -> Self {
        TraceReplay { reader, line_no: 0 }
    }
}

impl<'a> TraceReplay<&'a [u8]> {
    pub fn from_text(text: &'a str) -> Self {
        TraceReplay::new(text.as_bytes())
    }
}

pub fn trace_replay_source(path: &Path) -> io::Result<TraceReplay<BufReader<File>>> {
    Ok(TraceReplay::new(BufReader::new(File::open(path)?)))
}

impl<R: BufRead> Iterator for TraceReplay<R> {
    type Item = Result<ProcessEvent, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut line = String::new();
        loop {
            line.clear();
            match self.reader.read_line(&mut line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line_no += 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Some(parse_event(trimmed, self.line_no));
        }
    }
}

impl<R: BufRead> EventSource for TraceReplay<R> {
    fn next_event(&mut self, _last: Option<&Action>) -> Option<Result<ProcessEvent, TraceError>> {
        self.next()
    }
}
