//! The single server-side data storage.
//!
//! A [`RecordStore`] hands each record to exactly one requesting replica,
//! serializes write-back into the output, filters duplicate opens and
//! closes from replicas, and reports [`ReadOutcome::EndOfData`] once every
//! record has been dispensed.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{HostId, ReplicaId};

mod index_buffer;
mod layout;
mod merge;

pub use index_buffer::{BufferedRecord, IndexBuffer};
pub use layout::{parse_offset_table, LayoutSpec, RecordLayout};
pub use merge::{merge_outputs, MergePolicy};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store input {path} cannot be opened: {source}")]
    StoreMissing { path: PathBuf, source: io::Error },
    #[error("store is closed")]
    StoreClosed,
    #[error("close without a matching open")]
    NotOpen,
    #[error("i/o failure: {0}")]
    IoFailure(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid store config: {0}")]
    InvalidConfig(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("store does not accept appends")]
    NotDynamic,
    #[error("merge command `{command}` failed: {detail}")]
    MergeCommandFailed { command: String, detail: String },
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::IoFailure(e.to_string())
    }
}

/// Result of one `read_next`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadOutcome {
    Record(Vec<u8>),
    /// No record is left and the store will not grow.
    EndOfData,
    /// No record is available yet but the store still accepts appends.
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordStatus {
    Undispensed,
    Dispensed(ReplicaId),
    Written,
}

/// Store configuration as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    pub input_path: PathBuf,
    /// Defaults to the input path with `.out` appended.
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    pub layout: LayoutSpec,
    /// Index Buffer refill depth; 0 serves every read from storage.
    #[serde(default)]
    pub prefetch: usize,
    /// Rewrite the output in record-index order at the final close.
    #[serde(default)]
    pub reorder_output: bool,
    /// The input may grow during the run until `mark_final`.
    #[serde(default)]
    pub dynamic: bool,
}

impl StoreConfig {
    pub fn new(input_path: impl Into<PathBuf>, layout: LayoutSpec) -> Self {
        StoreConfig { input_path: input_path.into(), output_path: None, layout, prefetch: 0, reorder_output: false, dynamic: false }
    }

    pub fn from_toml(text: &str) -> Result<Self, StoreError> {
        toml::from_str(text).map_err(|e| StoreError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StoreError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative paths in a config file are relative to that file.
        if let Some(dir) = path.parent() {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            rebase(&mut cfg.input_path);
            if let Some(out) = cfg.output_path.as_mut() {
                rebase(out);
            }
            if let LayoutSpec::Index(p) = &mut cfg.layout {
                rebase(p);
            }
        }
        Ok(cfg)
    }

    pub fn resolved_output(&self) -> PathBuf {
        self.output_path.clone().unwrap_or_else(|| {
            let mut s = self.input_path.clone().into_os_string();
            s.push(".out");
            s.into()
        })
    }
}

/// Options for stores built in code rather than from a config file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreOptions {
    pub prefetch: usize,
    pub reorder_output: bool,
    pub dynamic: bool,
    /// Write results over the input records (fixed-size layouts only).
    pub in_place: bool,
}

enum Input {
    File { path: PathBuf, handle: Option<File>, writable: bool },
    Memory(Vec<u8>),
}

impl Input {
    fn open(&mut self) -> Result<(), StoreError> {
        if let Input::File { path, handle, writable } = self {
            let f = OpenOptions::new()
                .read(true)
                .write(*writable)
                .open(&*path)
                .map_err(|source| StoreError::StoreMissing { path: path.clone(), source })?;
            *handle = Some(f);
        }
        Ok(())
    }

    fn close(&mut self) {
        if let Input::File { handle, .. } = self {
            *handle = None;
        }
    }

    fn file(&mut self) -> Result<&mut File, StoreError> {
        match self {
            Input::File { handle: Some(f), .. } => Ok(f),
            Input::File { handle: None, .. } => Err(StoreError::StoreClosed),
            Input::Memory(_) => unreachable!("memory input has no file"),
        }
    }

    fn len(&mut self) -> Result<u64, StoreError> {
        match self {
            Input::Memory(b) => Ok(b.len() as u64),
            Input::File { .. } => Ok(self.file()?.metadata()?.len()),
        }
    }

    fn read_span(&mut self, offset: u64, len: u64) -> Result<Vec<u8>, StoreError> {
        match self {
            Input::Memory(b) => {
                let (s, e) = (offset as usize, (offset + len) as usize);
                b.get(s..e)
                    .map(<[u8]>::to_vec)
                    .ok_or_else(|| StoreError::IoFailure(format!("span {s}..{e} outside store")))
            }
            Input::File { .. } => {
                let f = self.file()?;
                f.seek(SeekFrom::Start(offset))?;
                let mut buf = vec![0; len as usize];
                f.read_exact(&mut buf)?;
                Ok(buf)
            }
        }
    }

    fn write_at(&mut self, offset: u64, bytes: &[u8]) -> Result<(), StoreError> {
        match self {
            Input::Memory(b) => {
                b[offset as usize..offset as usize + bytes.len()].copy_from_slice(bytes);
                Ok(())
            }
            Input::File { .. } => {
                let f = self.file()?;
                f.seek(SeekFrom::Start(offset))?;
                f.write_all(bytes)?;
                Ok(())
            }
        }
    }

    fn append(&mut self, bytes: &[u8]) -> Result<(), StoreError> {
        match self {
            Input::Memory(b) => b.extend_from_slice(bytes),
            Input::File { path, handle, .. } => match handle {
                Some(f) => {
                    f.seek(SeekFrom::End(0))?;
                    f.write_all(bytes)?;
                }
                None => OpenOptions::new().append(true).open(&*path)?.write_all(bytes)?,
            },
        }
        Ok(())
    }
}

enum Sink {
    File { path: PathBuf, handle: Option<BufWriter<File>>, created: bool },
    Memory(Vec<u8>),
    InPlace,
}

struct Output {
    sink: Sink,
    /// Present when the output is reordered by record index at final close.
    held: Option<Vec<(Option<usize>, Vec<u8>)>>,
    writes: u64,
}

impl Output {
    fn open(&mut self) -> Result<(), StoreError> {
        if let Sink::File { path, handle, created } = &mut self.sink {
            let f = if *created {
                OpenOptions::new().append(true).open(&*path)?
            } else {
                *created = true;
                File::create(&*path)?
            };
            *handle = Some(BufWriter::new(f));
        }
        Ok(())
    }

    fn write(&mut self, bytes: &[u8]) -> Result<(), StoreError> {
        match &mut self.sink {
            Sink::File { handle: Some(w), .. } => w.write_all(bytes)?,
            Sink::File { handle: None, .. } => return Err(StoreError::IoFailure("output is closed".into())),
            Sink::Memory(v) => v.extend_from_slice(bytes),
            Sink::InPlace => unreachable!("in-place writes go to the input"),
        }
        Ok(())
    }

    fn close(&mut self) -> Result<(), StoreError> {
        if let Some(held) = &self.held {
            let mut sorted: Vec<_> = held.clone();
            // Unattributed writes keep arrival order after the indexed ones.
            sorted.sort_by_key(|(idx, _)| idx.unwrap_or(usize::MAX));
            let bytes: Vec<u8> = sorted.into_iter().flat_map(|(_, p)| p).collect();
            match &mut self.sink {
                Sink::File { path, handle, .. } => {
                    *handle = None;
                    std::fs::write(&*path, &bytes)?;
                }
                Sink::Memory(v) => *v = bytes,
                Sink::InPlace => {}
            }
        }
        if let Sink::File { handle, .. } = &mut self.sink {
            if let Some(mut w) = handle.take() {
                w.flush()?;
            }
        }
        Ok(())
    }
}

struct State {
    input: Input,
    layout: RecordLayout,
    table: Vec<(u64, u64)>,
    table_built: bool,
    scanned_to: u64,
    status: Vec<RecordStatus>,
    cursor: usize,
    open_count: u32,
    finalized: bool,
    dynamic: bool,
    in_place: bool,
    buffer: IndexBuffer,
    in_flight: HashMap<ReplicaId, VecDeque<usize>>,
    per_replica: BTreeMap<ReplicaId, u64>,
    storage_reads: u64,
    storage_opens: u64,
}

impl State {
    fn build_table(&mut self) -> Result<(), StoreError> {
        let len = self.input.len()?;
        match &self.layout {
            RecordLayout::Indexed(table) => {
                layout::validate_table(table, len)?;
                self.table = table.clone();
                self.scanned_to = len;
            }
            &RecordLayout::FixedSize(size) if !self.dynamic || self.finalized => {
                // Extents follow from the length alone.
                if len % size != 0 {
                    return Err(StoreError::LayoutMismatch(format!(
                        "store length {len} is not a multiple of the {size}-byte record size"
                    )));
                }
                self.table = (0..len / size).map(|i| (i * size, size)).collect();
                self.scanned_to = len;
            }
            _ => {
                self.table.clear();
                self.scanned_to = 0;
                self.extend_table()?;
            }
        }
        self.status.resize(self.table.len(), RecordStatus::Undispensed);
        self.table_built = true;
        Ok(())
    }

    /// Extracts records from bytes past `scanned_to`.
    fn extend_table(&mut self) -> Result<(), StoreError> {
        let len = self.input.len()?;
        if len <= self.scanned_to {
            return Ok(());
        }
        let bytes = self.input.read_span(self.scanned_to, len - self.scanned_to)?;
        let last = !self.dynamic || self.finalized;
        let (recs, tail) = match &self.layout {
            RecordLayout::FixedSize(size) => {
                // Only whole records; a partial tail waits for more bytes.
                let whole = bytes.len() as u64 / size * size;
                if last && whole != bytes.len() as u64 {
                    return Err(StoreError::LayoutMismatch(format!(
                        "store length {len} is not a multiple of the {size}-byte record size"
                    )));
                }
                let (r, _) = layout::split_records(&self.layout, self.scanned_to, &bytes[..whole as usize], last)?;
                (r, bytes.len() - whole as usize)
            }
            _ => layout::split_records(&self.layout, self.scanned_to, &bytes, last)?,
        };
        self.scanned_to = len - tail as u64;
        self.table.extend(recs);
        self.status.resize(self.table.len(), RecordStatus::Undispensed);
        Ok(())
    }

    fn counter_step(&self, len: usize) -> u64 {
        match self.layout {
            RecordLayout::Delimited(_) => 1,
            _ => len as u64,
        }
    }

    fn remaining(&self) -> usize {
        self.table.len() - self.cursor
    }

    /// Loads up to `n` records past the buffered ones with one storage read.
    fn fill(&mut self, n: usize) -> Result<usize, StoreError> {
        let first = self.cursor + self.buffer.len();
        let last = (first + n).min(self.table.len());
        if first >= last {
            return Ok(0);
        }
        let span_start = self.table[first].0;
        let span_end = self.table[last - 1].0 + self.table[last - 1].1;
        let bytes = self.input.read_span(span_start, span_end - span_start)?;
        self.storage_reads += 1;
        for i in first..last {
            let (off, len) = self.table[i];
            let s = (off - span_start) as usize;
            self.buffer.push(BufferedRecord { index: i, bytes: bytes[s..s + len as usize].to_vec() });
        }
        Ok(last - first)
    }
}

/// The server data storage shared by all replicas.
pub struct RecordStore {
    state: Mutex<State>,
    output: Mutex<Output>,
    output_path: Option<PathBuf>,
}

impl std::fmt::Debug for RecordStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.lock();
        f.debug_struct("RecordStore")
            .field("records", &s.table.len())
            .field("cursor", &s.cursor)
            .field("open_count", &s.open_count)
            .finish()
    }
}

impl RecordStore {
    pub fn from_config(cfg: &StoreConfig) -> Result<Self, StoreError> {
        let layout = match &cfg.layout {
            LayoutSpec::Fixed(n) => RecordLayout::FixedSize(*n),
            LayoutSpec::Delim(b) => RecordLayout::Delimited(*b),
            LayoutSpec::Index(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| StoreError::InvalidConfig(format!("offset table {}: {e}", p.display())))?;
                RecordLayout::Indexed(parse_offset_table(&text)?)
            }
        };
        let output = cfg.resolved_output();
        let in_place = output == cfg.input_path;
        let opts = StoreOptions { prefetch: cfg.prefetch, reorder_output: cfg.reorder_output, dynamic: cfg.dynamic, in_place };
        let input = Input::File { path: cfg.input_path.clone(), handle: None, writable: in_place || cfg.dynamic };
        let sink = if in_place { Sink::InPlace } else { Sink::File { path: output.clone(), handle: None, created: false } };
        Self::build(input, sink, layout, opts, Some(output))
    }

    /// A store over bytes held in memory; the output is also kept in memory.
    pub fn in_memory(bytes: Vec<u8>, layout: RecordLayout, opts: StoreOptions) -> Result<Self, StoreError> {
        let sink = if opts.in_place { Sink::InPlace } else { Sink::Memory(Vec::new()) };
        Self::build(Input::Memory(bytes), sink, layout, opts, None)
    }

    fn build(input: Input, sink: Sink, layout: RecordLayout, opts: StoreOptions, output_path: Option<PathBuf>) -> Result<Self, StoreError> {
        if opts.in_place && !matches!(layout, RecordLayout::FixedSize(_)) {
            return Err(StoreError::InvalidConfig("in-place output requires a fixed-size layout".into()));
        }
        if let RecordLayout::FixedSize(0) = layout {
            return Err(StoreError::InvalidConfig("record size must be positive".into()));
        }
        let state = State {
            input,
            layout,
            table: Vec::new(),
            table_built: false,
            scanned_to: 0,
            status: Vec::new(),
            cursor: 0,
            open_count: 0,
            finalized: !opts.dynamic,
            dynamic: opts.dynamic,
            in_place: opts.in_place,
            buffer: IndexBuffer::new(opts.prefetch),
            in_flight: HashMap::new(),
            per_replica: BTreeMap::new(),
            storage_reads: 0,
            storage_opens: 0,
        };
        let output = Output { sink, held: opts.reorder_output.then(Vec::new), writes: 0 };
        Ok(RecordStore { state: Mutex::new(state), output: Mutex::new(output), output_path })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn lock_output(&self) -> MutexGuard<'_, Output> {
        self.output.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// The first open touches the storage; later ones only bump the count.
    pub fn open_store(&self, replica: ReplicaId) -> Result<u32, StoreError> {
        let mut s = self.lock();
        if s.open_count == 0 {
            s.input.open()?;
            if !s.table_built {
                if let Err(e) = s.build_table() {
                    s.input.close();
                    return Err(e);
                }
            }
            let mut out = self.lock_output();
            if let Err(e) = out.open() {
                s.input.close();
                return Err(e);
            }
            s.storage_opens += 1;
            log::debug!("replica {replica} opened the store");
        } else {
            log::trace!("replica {replica} open filtered");
        }
        s.open_count += 1;
        Ok(s.open_count)
    }

    /// Dispenses the next undispensed record to `replica`.
    ///
    /// `size` is the byte count the replica asked for. It must be positive;
    /// a size that differs from the record size is the wrapper's concern.
    pub fn read_next(&self, replica: ReplicaId, size: u64) -> Result<ReadOutcome, StoreError> {
        if size == 0 {
            return Err(StoreError::InvalidRequest("read of zero bytes".into()));
        }
        let mut s = self.lock();
        if s.open_count == 0 {
            return Err(StoreError::StoreClosed);
        }
        if s.buffer.is_empty() && s.buffer.capacity() > 0 {
            let depth = s.buffer.capacity();
            s.fill(depth)?;
        }
        let idx = s.cursor;
        let bytes = if let Some(len) = s.buffer.peek().map(|r| r.bytes.len()) {
            let step = s.counter_step(len);
            let rec = s.buffer.take(step).expect("peeked");
            debug_assert_eq!(rec.index, idx);
            rec.bytes
        } else if idx < s.table.len() {
            let (off, len) = s.table[idx];
            let b = s.input.read_span(off, len)?;
            s.storage_reads += 1;
            b
        } else if s.finalized {
            return Ok(ReadOutcome::EndOfData);
        } else {
            return Ok(ReadOutcome::Pending);
        };
        debug_assert_eq!(s.status[idx], RecordStatus::Undispensed);
        s.status[idx] = RecordStatus::Dispensed(replica);
        s.cursor += 1;
        s.in_flight.entry(replica).or_default().push_back(idx);
        *s.per_replica.entry(replica).or_default() += 1;
        Ok(ReadOutcome::Record(bytes))
    }

    /// Appends `payload` to the output. Writes from all replicas are applied
    /// one at a time in arrival order.
    pub fn write_back(&self, replica: ReplicaId, payload: &[u8]) -> Result<(), StoreError> {
        let mut s = self.lock();
        if s.open_count == 0 {
            return Err(StoreError::IoFailure("write to a closed store".into()));
        }
        let idx = s.in_flight.get_mut(&replica).and_then(VecDeque::pop_front);
        if s.in_place {
            let Some(idx) = idx else {
                return Err(StoreError::InvalidRequest(format!("replica {replica} holds no record to overwrite")));
            };
            let (off, len) = s.table[idx];
            if payload.len() as u64 != len {
                s.in_flight.get_mut(&replica).expect("popped").push_front(idx);
                return Err(StoreError::LayoutMismatch(format!(
                    "in-place write of {} bytes over a {len}-byte record",
                    payload.len()
                )));
            }
            s.input.write_at(off, payload)?;
            s.status[idx] = RecordStatus::Written;
            self.lock_output().writes += 1;
            return Ok(());
        }
        let mut out = self.lock_output();
        if let Some(held) = out.held.as_mut() {
            held.push((idx, payload.to_vec()));
        } else if let Err(e) = out.write(payload) {
            if let Some(idx) = idx {
                s.in_flight.get_mut(&replica).expect("popped").push_front(idx);
            }
            return Err(e);
        }
        out.writes += 1;
        if let Some(idx) = idx {
            s.status[idx] = RecordStatus::Written;
        }
        Ok(())
    }

    /// The last close closes the storage and flushes the output.
    pub fn close_store(&self, replica: ReplicaId) -> Result<u32, StoreError> {
        let mut s = self.lock();
        if s.open_count == 0 {
            return Err(StoreError::NotOpen);
        }
        s.open_count -= 1;
        if s.open_count == 0 {
            s.input.close();
            s.buffer.clear();
            self.lock_output().close()?;
            log::debug!("replica {replica} closed the store");
        }
        Ok(s.open_count)
    }

    /// Loads up to `n` upcoming records into the Index Buffer. Requires the
    /// store to be open.
    pub fn prefetch(&self, n: usize) -> Result<usize, StoreError> {
        let mut s = self.lock();
        if s.open_count == 0 {
            return Err(StoreError::StoreClosed);
        }
        s.fill(n)
    }

    /// Adds records to a dynamic store.
    pub fn append(&self, bytes: &[u8]) -> Result<(), StoreError> {
        let mut s = self.lock();
        if !s.dynamic || s.finalized {
            return Err(StoreError::NotDynamic);
        }
        if let RecordLayout::Indexed(_) = s.layout {
            if bytes.is_empty() {
                return Ok(());
            }
            let base = s.input.len()?;
            s.input.append(bytes)?;
            if let RecordLayout::Indexed(t) = &mut s.layout {
                t.push((base, bytes.len() as u64));
            }
            if s.table_built {
                s.table.push((base, bytes.len() as u64));
                s.status.push(RecordStatus::Undispensed);
                s.scanned_to = base + bytes.len() as u64;
            }
            return Ok(());
        }
        s.input.append(bytes)?;
        if s.table_built {
            s.extend_table()?;
        }
        Ok(())
    }

    /// Declares that no more appends will come; EndOfData becomes final.
    pub fn mark_final(&self) -> Result<(), StoreError> {
        let mut s = self.lock();
        if s.finalized {
            return Ok(());
        }
        s.finalized = true;
        if s.table_built && !matches!(s.layout, RecordLayout::Indexed(_)) {
            s.extend_table()?;
        }
        Ok(())
    }

    pub fn open_count(&self) -> u32 {
        self.lock().open_count
    }

    pub fn is_open(&self) -> bool {
        self.open_count() > 0
    }

    /// Records known so far (0 before the first open).
    pub fn total(&self) -> usize {
        self.lock().table.len()
    }

    /// Records not yet dispensed.
    pub fn remaining(&self) -> usize {
        self.lock().remaining()
    }

    pub fn dispensed(&self) -> usize {
        self.lock().cursor
    }

    pub fn record_status(&self) -> Vec<RecordStatus> {
        self.lock().status.clone()
    }

    /// Record size for fixed-size layouts.
    pub fn record_bytes(&self) -> Option<u64> {
        match self.lock().layout {
            RecordLayout::FixedSize(n) => Some(n),
            _ => None,
        }
    }

    pub fn counter(&self) -> u64 {
        self.lock().buffer.counter()
    }

    pub fn buffered(&self) -> usize {
        self.lock().buffer.len()
    }

    /// Times the storage itself was read (bulk prefetches count once).
    pub fn storage_reads(&self) -> u64 {
        self.lock().storage_reads
    }

    /// Times the underlying storage was actually opened.
    pub fn storage_opens(&self) -> u64 {
        self.lock().storage_opens
    }

    pub fn writes(&self) -> u64 {
        self.lock_output().writes
    }

    pub fn dispensed_by(&self, replica: ReplicaId) -> u64 {
        self.lock().per_replica.get(&replica).copied().unwrap_or(0)
    }

    pub fn per_replica_counts(&self) -> BTreeMap<ReplicaId, u64> {
        self.lock().per_replica.clone()
    }

    /// Output bytes of an in-memory store, or of the input for in-place ones.
    pub fn output_bytes(&self) -> Option<Vec<u8>> {
        let mut s = self.lock();
        let out = self.lock_output();
        match &out.sink {
            Sink::Memory(v) => Some(v.clone()),
            Sink::InPlace => match &s.input {
                Input::Memory(b) => Some(b.clone()),
                Input::File { .. } => {
                    let len = s.input.len().ok()?;
                    s.input.read_span(0, len).ok()
                }
            },
            Sink::File { .. } => None,
        }
    }

    pub fn output_path(&self) -> Option<&Path> {
        self.output_path.as_deref()
    }
}

/// Per-replica statistics in the `host ID#<n>` / `<k> records` shape.
pub fn format_stats(host: HostId, records: u64) -> String {
    format!("host ID#{host}\n{records} records\n")
}

pub fn write_stats_log(path: &Path, host: HostId, records: u64) -> io::Result<()> {
    std::fs::write(path, format_stats(host, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::sync::Arc;

    const A: ReplicaId = ReplicaId(1);
    const B: ReplicaId = ReplicaId(2);

    fn balances(range: std::ops::RangeInclusive<u32>) -> Vec<u8> {
        range.flat_map(|n| format!("{n}\n").into_bytes()).collect()
    }

    fn fixed(bytes: Vec<u8>, size: u64, opts: StoreOptions) -> RecordStore {
        RecordStore::in_memory(bytes, RecordLayout::FixedSize(size), opts).unwrap()
    }

    fn rec(s: &str) -> ReadOutcome {
        ReadOutcome::Record(s.as_bytes().to_vec())
    }

    #[test]
    fn first_open_opens_later_opens_are_filtered() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("accounts");
        std::fs::write(&input, balances(101..=105)).unwrap();
        let store = RecordStore::from_config(&StoreConfig::new(&input, LayoutSpec::Fixed(4))).unwrap();
        assert_eq!(store.open_store(A).unwrap(), 1);
        assert_eq!(store.storage_opens(), 1);
        assert_eq!(store.open_store(B).unwrap(), 2);
        assert_eq!(store.storage_opens(), 1);
    }

    #[test]
    fn missing_input_is_reported_at_first_open() {
        let dir = tempfile::tempdir().unwrap();
        let store = RecordStore::from_config(&StoreConfig::new(dir.path().join("nope"), LayoutSpec::Fixed(4))).unwrap();
        assert!(matches!(store.open_store(A), Err(StoreError::StoreMissing { .. })));
        assert_eq!(store.open_count(), 0);
    }

    #[test]
    fn dispenses_in_order_then_end_of_data() {
        let store = fixed(balances(101..=105), 4, StoreOptions::default());
        store.open_store(A).unwrap();
        assert_eq!(store.read_next(A, 4).unwrap(), rec("101\n"));
        assert_eq!(store.read_next(B, 4).unwrap(), rec("102\n"));
        assert_eq!(store.read_next(A, 4).unwrap(), rec("103\n"));
        store.read_next(A, 4).unwrap();
        store.read_next(A, 4).unwrap();
        assert_eq!(store.read_next(A, 4).unwrap(), ReadOutcome::EndOfData);
        assert_eq!(store.read_next(B, 4).unwrap(), ReadOutcome::EndOfData);
    }

    #[test]
    fn empty_store_ends_immediately() {
        let store = fixed(Vec::new(), 4, StoreOptions::default());
        store.open_store(A).unwrap();
        assert_eq!(store.read_next(A, 4).unwrap(), ReadOutcome::EndOfData);
    }

    #[test]
    fn read_after_final_close_fails() {
        let store = fixed(balances(101..=102), 4, StoreOptions::default());
        store.open_store(A).unwrap();
        store.close_store(A).unwrap();
        assert!(matches!(store.read_next(A, 4), Err(StoreError::StoreClosed)));
        assert!(matches!(store.write_back(A, b"1\n"), Err(StoreError::IoFailure(_))));
        assert!(matches!(store.close_store(A), Err(StoreError::NotOpen)));
        assert!(matches!(store.read_next(A, 0), Err(StoreError::InvalidRequest(_))));
    }

    #[test]
    fn two_replicas_interleaved_cover_every_record_once() {
        let input = balances(201..=400);
        let store = fixed(input.clone(), 4, StoreOptions::default());
        store.open_store(A).unwrap();
        store.open_store(B).unwrap();
        let mut got: Vec<Vec<u8>> = Vec::new();
        let (mut a, mut b) = (BTreeSet::new(), BTreeSet::new());
        for i in 0..200 {
            let who = if i % 3 == 0 { B } else { A };
            let ReadOutcome::Record(r) = store.read_next(who, 4).unwrap() else { panic!("ran dry") };
            if who == A { a.insert(r.clone()) } else { b.insert(r.clone()) };
            got.push(r);
        }
        assert!(a.is_disjoint(&b));
        // Oracle: sequential read of the input.
        let expected: BTreeSet<Vec<u8>> = input.chunks(4).map(<[u8]>::to_vec).collect();
        let union: BTreeSet<Vec<u8>> = a.union(&b).cloned().collect();
        assert_eq!(union, expected);
        assert_eq!(got.len(), 200);
    }

    #[test]
    fn writes_are_appended_in_arrival_order() {
        let store = fixed(balances(230..=231), 4, StoreOptions::default());
        store.open_store(A).unwrap();
        store.read_next(A, 4).unwrap();
        store.write_back(A, b"231\n").unwrap();
        store.write_back(B, b"x\n").unwrap();
        assert_eq!(store.output_bytes().unwrap(), b"231\nx\n");
        assert_eq!(store.record_status()[0], RecordStatus::Written);
    }

    #[test]
    fn concurrent_writes_never_interleave() {
        let store = Arc::new(fixed(Vec::new(), 4, StoreOptions::default()));
        store.open_store(A).unwrap();
        let payloads: Vec<String> = (0..8).map(|t| format!("{}\n", char::from(b'a' + t).to_string().repeat(64))).collect();
        std::thread::scope(|s| {
            for (t, p) in payloads.iter().enumerate() {
                let store = &store;
                s.spawn(move || {
                    for _ in 0..50 {
                        store.write_back(ReplicaId(t as u64), p.as_bytes()).unwrap();
                    }
                });
            }
        });
        let out = String::from_utf8(store.output_bytes().unwrap()).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 400);
        for line in lines {
            assert!(payloads.iter().any(|p| p.trim_end() == line), "torn line {line:?}");
        }
    }

    #[test]
    fn last_close_closes_and_flushes() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("accounts");
        std::fs::write(&input, balances(101..=103)).unwrap();
        let cfg = StoreConfig::new(&input, LayoutSpec::Fixed(4));
        let store = RecordStore::from_config(&cfg).unwrap();
        store.open_store(A).unwrap();
        store.open_store(B).unwrap();
        store.read_next(A, 4).unwrap();
        store.write_back(A, b"102\n").unwrap();
        assert_eq!(store.close_store(A).unwrap(), 1);
        assert!(store.is_open());
        assert_eq!(store.read_next(B, 4).unwrap(), rec("102\n"));
        assert_eq!(store.close_store(B).unwrap(), 0);
        assert!(!store.is_open());
        assert_eq!(std::fs::read(cfg.resolved_output()).unwrap(), b"102\n");
    }

    #[test]
    fn reopen_after_close_keeps_cursor_and_output() {
        let store = fixed(balances(101..=103), 4, StoreOptions::default());
        store.open_store(A).unwrap();
        store.read_next(A, 4).unwrap();
        store.write_back(A, b"102\n").unwrap();
        store.close_store(A).unwrap();
        store.open_store(B).unwrap();
        assert_eq!(store.read_next(B, 4).unwrap(), rec("102\n"));
        assert_eq!(store.storage_opens(), 2);
    }

    #[test]
    fn prefetched_reads_touch_no_storage() {
        let store = fixed(balances(201..=400), 4, StoreOptions::default());
        store.open_store(A).unwrap();
        assert_eq!(store.prefetch(100).unwrap(), 100);
        assert_eq!(store.buffered(), 100);
        let before = store.storage_reads();
        for _ in 0..100 {
            store.read_next(A, 4).unwrap();
        }
        assert_eq!(store.storage_reads(), before);
        assert_eq!(store.counter(), 400);
        store.read_next(A, 4).unwrap();
        assert_eq!(store.storage_reads(), before + 1);
    }

    #[test]
    fn prefetch_clamps_at_end_of_store() {
        let store = fixed(balances(201..=240), 4, StoreOptions::default());
        store.open_store(A).unwrap();
        assert_eq!(store.prefetch(100).unwrap(), 40);
    }

    #[test]
    fn counter_advances_by_record_size() {
        let store = fixed(balances(201..=210), 4, StoreOptions { prefetch: 8, ..Default::default() });
        store.open_store(A).unwrap();
        assert_eq!(store.counter(), 0);
        store.read_next(A, 4).unwrap();
        assert_eq!(store.counter(), 4);
    }

    #[test]
    fn delimited_counter_counts_entries() {
        let store = RecordStore::in_memory(b"a\nbb\nccc\n".to_vec(), RecordLayout::Delimited(b'\n'), StoreOptions { prefetch: 4, ..Default::default() }).unwrap();
        store.open_store(A).unwrap();
        assert_eq!(store.read_next(A, 10).unwrap(), rec("a\n"));
        assert_eq!(store.read_next(A, 10).unwrap(), rec("bb\n"));
        assert_eq!(store.counter(), 2);
        assert_eq!(store.total(), 3);
    }

    #[test]
    fn indexed_layout_reads_extents() {
        let store = RecordStore::in_memory(b"hello world".to_vec(), RecordLayout::Indexed(vec![(0, 5), (6, 5)]), StoreOptions::default()).unwrap();
        store.open_store(A).unwrap();
        assert_eq!(store.read_next(A, 5).unwrap(), rec("hello"));
        assert_eq!(store.read_next(A, 5).unwrap(), rec("world"));
        assert_eq!(store.read_next(A, 5).unwrap(), ReadOutcome::EndOfData);

        let bad = RecordStore::in_memory(b"abc".to_vec(), RecordLayout::Indexed(vec![(0, 4)]), StoreOptions::default()).unwrap();
        assert!(matches!(bad.open_store(A), Err(StoreError::LayoutMismatch(_))));
    }

    #[test]
    fn fixed_layout_requires_whole_records() {
        let store = fixed(b"12345".to_vec(), 4, StoreOptions::default());
        assert!(matches!(store.open_store(A), Err(StoreError::LayoutMismatch(_))));
        assert!(!store.is_open());
    }

    #[test]
    fn in_place_overwrites_dispensed_record() {
        let store = fixed(balances(101..=103), 4, StoreOptions { in_place: true, ..Default::default() });
        store.open_store(A).unwrap();
        store.read_next(A, 4).unwrap();
        store.read_next(B, 4).unwrap();
        store.write_back(B, b"103\n").unwrap();
        store.write_back(A, b"102\n").unwrap();
        assert_eq!(store.output_bytes().unwrap(), b"102\n103\n103\n");
        assert!(matches!(store.write_back(A, b"1\n"), Err(StoreError::InvalidRequest(_))));
        assert!(RecordStore::in_memory(vec![], RecordLayout::Delimited(b'\n'), StoreOptions { in_place: true, ..Default::default() }).is_err());
    }

    #[test]
    fn reorder_sorts_output_by_record_index() {
        let store = fixed(balances(101..=103), 4, StoreOptions { reorder_output: true, ..Default::default() });
        store.open_store(A).unwrap();
        store.read_next(A, 4).unwrap();
        store.read_next(B, 4).unwrap();
        store.read_next(A, 4).unwrap();
        store.write_back(B, b"103\n").unwrap();
        store.write_back(A, b"102\n").unwrap();
        store.write_back(A, b"104\n").unwrap();
        store.close_store(A).unwrap();
        assert_eq!(store.output_bytes().unwrap(), b"102\n103\n104\n");
    }

    #[test]
    fn dynamic_store_waits_for_final() {
        let store = RecordStore::in_memory(b"1\n".to_vec(), RecordLayout::Delimited(b'\n'), StoreOptions { dynamic: true, ..Default::default() }).unwrap();
        store.open_store(A).unwrap();
        assert_eq!(store.read_next(A, 2).unwrap(), rec("1\n"));
        assert_eq!(store.read_next(A, 2).unwrap(), ReadOutcome::Pending);
        store.append(b"2\n3").unwrap();
        assert_eq!(store.read_next(A, 2).unwrap(), rec("2\n"));
        assert_eq!(store.read_next(A, 2).unwrap(), ReadOutcome::Pending);
        store.mark_final().unwrap();
        assert_eq!(store.read_next(A, 2).unwrap(), rec("3"));
        assert_eq!(store.read_next(A, 2).unwrap(), ReadOutcome::EndOfData);
        assert!(matches!(store.append(b"4\n"), Err(StoreError::NotDynamic)));
    }

    #[test]
    fn dynamic_fixed_and_indexed_appends() {
        let store = fixed(Vec::new(), 2, StoreOptions { dynamic: true, ..Default::default() });
        store.open_store(A).unwrap();
        store.append(b"1\n2").unwrap();
        assert_eq!(store.total(), 1);
        store.append(b"\n").unwrap();
        assert_eq!(store.total(), 2);
        store.mark_final().unwrap();

        let idx = RecordStore::in_memory(Vec::new(), RecordLayout::Indexed(vec![]), StoreOptions { dynamic: true, ..Default::default() }).unwrap();
        idx.append(b"abc").unwrap();
        idx.open_store(A).unwrap();
        idx.append(b"de").unwrap();
        idx.mark_final().unwrap();
        assert_eq!(idx.read_next(A, 3).unwrap(), rec("abc"));
        assert_eq!(idx.read_next(A, 3).unwrap(), rec("de"));
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg = StoreConfig::from_toml("input_path = \"accounts\"\nlayout = \"fixed:4\"\nprefetch = 64\n").unwrap();
        assert_eq!(cfg.layout, LayoutSpec::Fixed(4));
        assert_eq!(cfg.prefetch, 64);
        assert_eq!(cfg.resolved_output(), PathBuf::from("accounts.out"));
        assert!(StoreConfig::from_toml("input_path = \"a\"\nlayout = \"fixed:0\"\n").is_err());
        assert!(StoreConfig::from_toml("input_path = \"a\"\nlayout = \"fixed:4\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn stats_log_shape() {
        assert_eq!(format_stats(HostId(0), 43), "host ID#0\n43 records\n");
    }

    mod interleavings {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Read(u64),
            Prefetch(usize),
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![4 => (0u64..4).prop_map(Op::Read), 1 => (1usize..6).prop_map(Op::Prefetch)]
        }

        proptest! {
            #[test]
            fn exactly_once_and_conservation(records in 0u32..=20, prefetch in 0usize..5, ops in proptest::collection::vec(op(), 0..80)) {
                let store = fixed(if records == 0 { vec![] } else { balances(100..=99 + records) }, 4, StoreOptions { prefetch, ..Default::default() });
                store.open_store(A).unwrap();
                let total = records as usize;
                let mut seen = BTreeSet::new();
                let mut done = false;
                let mut buffered_dispenses = 0u64;
                for op in ops {
                    match op {
                        Op::Read(r) => {
                            let was_buffered = store.buffered() > 0 || prefetch > 0;
                            match store.read_next(ReplicaId(r), 4).unwrap() {
                                ReadOutcome::Record(b) => {
                                    prop_assert!(!done, "record after end of data");
                                    prop_assert!(seen.insert(b), "record dispensed twice");
                                    if was_buffered { buffered_dispenses += 1; }
                                }
                                ReadOutcome::EndOfData => done = true,
                                ReadOutcome::Pending => prop_assert!(false, "static store pending"),
                            }
                        }
                        Op::Prefetch(n) => { store.prefetch(n).unwrap(); }
                    }
                    prop_assert_eq!(store.dispensed() + store.remaining(), total);
                    prop_assert!(store.counter() <= buffered_dispenses * 4);
                }
                if done {
                    prop_assert_eq!(seen.len(), total);
                }
            }
        }
    }
}
