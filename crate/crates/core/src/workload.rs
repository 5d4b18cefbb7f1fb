//! The banking demo workload: each record is one account balance, and the
//! replica writes back the balance plus one.

use crate::protocol::{escape, ReplicaId};
use crate::wrapper::{Action, EventKind, EventSource, ProcessEvent, SessionConfig, TraceError};

/// Balances start just above this value: record `i` holds `BASE + 1 + i`.
pub const BASE_BALANCE: u64 = 200;

/// Path of the balance store as replicas see it.
pub const INPUT_PATH: &str = "accounts";
/// Path of the result file as replicas see it.
pub const OUTPUT_PATH: &str = "accounts.new";

/// Digits per balance for an `n`-record store, wide enough for the largest
/// incremented balance.
pub fn balance_width(n: u64) -> usize {
    (BASE_BALANCE + n + 1).to_string().len()
}

/// Bytes per record: the zero-padded balance plus a newline.
pub fn record_bytes(n: u64) -> u64 {
    balance_width(n) as u64 + 1
}

/// The fixed-size input store holding balances `201 ..= 200 + n`.
pub fn bank_store(n: u64) -> Vec<u8> {
    let width = balance_width(n);
    (1..=n).flat_map(|i| format!("{:0width$}\n", BASE_BALANCE + i).into_bytes()).collect()
}

/// The replica's computation on one record.
pub fn increment_record(record: &[u8]) -> Option<Vec<u8>> {
    let text = std::str::from_utf8(record).ok()?;
    let digits = text.strip_suffix('\n')?;
    let value: u64 = digits.parse().ok()?;
    Some(format!("{:0width$}\n", value + 1, width = digits.len()).into_bytes())
}

/// The independent oracle: every input balance incremented, as sorted text
/// lines.
pub fn expected_output(input: &[u8]) -> Vec<u64> {
    let mut v: Vec<u64> = input
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| std::str::from_utf8(l).expect("ascii").parse::<u64>().expect("numeric") + 1)
        .collect();
    v.sort_unstable();
    v
}

/// Parses an output file into sorted balances.
pub fn parse_balances(output: &[u8]) -> Option<Vec<u64>> {
    let mut v = Vec::new();
    for line in output.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        v.push(std::str::from_utf8(line).ok()?.parse().ok()?);
    }
    v.sort_unstable();
    Some(v)
}

pub fn session_config(replica: ReplicaId, n: u64) -> SessionConfig {
    SessionConfig {
        replica,
        input_path: INPUT_PATH.into(),
        output_path: Some(OUTPUT_PATH.into()),
        record_bytes: Some(record_bytes(n)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    OpenInput,
    OpenOutput,
    Read,
    Write,
    CloseInput,
    CloseOutput,
    Exit,
    Done,
}

/// A replica of the bank program as an interactive event source: it reads
/// one record at a time and writes back each balance plus one.
#[derive(Debug, Clone)]
pub struct BankReplica {
    pid: u32,
    read_size: u64,
    step: Step,
    pending_writes: Vec<Vec<u8>>,
    /// Records the replica has processed.
    pub processed: u64,
}

impl BankReplica {
    pub fn new(pid: u32, record_bytes: u64) -> Self {
        BankReplica { pid, read_size: record_bytes, step: Step::OpenInput, pending_writes: Vec::new(), processed: 0 }
    }

    /// A replica that asks for `read_size` bytes per read, as a buffered
    /// runtime would.
    pub fn with_read_size(mut self, read_size: u64) -> Self {
        self.read_size = read_size;
        self
    }

    fn ev(&self, kind: EventKind) -> Option<Result<ProcessEvent, TraceError>> {
        Some(Ok(ProcessEvent::new(self.pid, kind)))
    }

    /// A resumed replica continues after its stored state; the new session
    /// needs the store opened again.
    pub fn resume_on_new_host(&mut self) {
        if !matches!(self.step, Step::Done | Step::Exit) {
            self.step = Step::OpenInput;
        }
    }
}

impl EventSource for BankReplica {
    fn next_event(&mut self, last: Option<&Action>) -> Option<Result<ProcessEvent, TraceError>> {
        if let Some(Action::Substituted { payload, records, .. }) = last {
            if *records == 0 {
                self.step = Step::CloseInput;
            } else {
                let size = payload.len() / *records as usize;
                for rec in payload.chunks(size.max(1)) {
                    match increment_record(rec) {
                        Some(out) => self.pending_writes.push(out),
                        None => {
                            return Some(Err(TraceError::Parse {
                                line: 0,
                                reason: format!("record {} is not a balance", escape::escape(rec)),
                            }))
                        }
                    }
                }
                self.processed += *records;
                self.step = Step::Write;
            }
        }
        loop {
            match self.step {
                Step::OpenInput => {
                    self.step = Step::OpenOutput;
                    return self.ev(EventKind::Open { path: INPUT_PATH.into(), fd: Some(3) });
                }
                Step::OpenOutput => {
                    self.step = Step::Read;
                    return self.ev(EventKind::Open { path: OUTPUT_PATH.into(), fd: Some(4) });
                }
                Step::Read => return self.ev(EventKind::Read { fd: 3, size: self.read_size }),
                Step::Write => {
                    if self.pending_writes.is_empty() {
                        self.step = Step::Read;
                        continue;
                    }
                    let payload = self.pending_writes.remove(0);
                    return self.ev(EventKind::Write { fd: 4, payload });
                }
                Step::CloseInput => {
                    self.step = Step::CloseOutput;
                    return self.ev(EventKind::Close { fd: 3 });
                }
                Step::CloseOutput => {
                    self.step = Step::Exit;
                    return self.ev(EventKind::Close { fd: 4 });
                }
                Step::Exit => {
                    self.step = Step::Done;
                    return self.ev(EventKind::Exit { status: 0 });
                }
                Step::Done => return None,
            }
        }
    }
}
