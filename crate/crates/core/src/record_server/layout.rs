use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::StoreError;

/// How the input store splits into records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordLayout {
    FixedSize(u64),
    /// Each record ends with (and includes) the delimiter byte. A trailing
    /// chunk without a delimiter counts as a record once the store is final.
    Delimited(u8),
    /// Explicit `(offset, length)` extents.
    Indexed(Vec<(u64, u64)>),
}

/// Layout as written in a config file: `fixed:<bytes>`, `delim:<hex byte>`,
/// or `index:<path to offset table>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayoutSpec {
    Fixed(u64),
    Delim(u8),
    Index(std::path::PathBuf),
}

impl FromStr for LayoutSpec {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StoreError::InvalidConfig(format!("bad layout {s:?}"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "fixed" => match arg.parse::<u64>() {
                Ok(n) if n > 0 => Ok(LayoutSpec::Fixed(n)),
                _ => Err(bad()),
            },
            "delim" => {
                let hex = arg.trim_start_matches("0x");
                if hex.is_empty() || hex.len() > 2 {
                    return Err(bad());
                }
                u8::from_str_radix(hex, 16).map(LayoutSpec::Delim).map_err(|_| bad())
            }
            "index" if !arg.is_empty() => Ok(LayoutSpec::Index(arg.into())),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for LayoutSpec {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LayoutSpec> for String {
    fn from(l: LayoutSpec) -> String {
        l.to_string()
    }
}

impl fmt::Display for LayoutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayoutSpec::Fixed(n) => write!(f, "fixed:{n}"),
            LayoutSpec::Delim(b) => write!(f, "delim:{b:02x}"),
            LayoutSpec::Index(p) => write!(f, "index:{}", p.display()),
        }
    }
}

/// Parses an offset table: one `offset length` pair per line.
pub fn parse_offset_table(text: &str) -> Result<Vec<(u64, u64)>, StoreError> {
    let mut table = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let pair = (it.next(), it.next(), it.next());
        let (Some(off), Some(len), None) = pair else {
            return Err(StoreError::InvalidConfig(format!("offset table line {}: expected `offset length`", i + 1)));
        };
        let parse = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| StoreError::InvalidConfig(format!("offset table line {}: {s:?} is not a number", i + 1)))
        };
        table.push((parse(off)?, parse(len)?));
    }
    Ok(table)
}

/// Splits `bytes` (which start at absolute offset `base`) into record extents.
/// Returns the extents and the number of trailing bytes not yet forming a
/// complete record.
pub(super) fn split_records(layout: &RecordLayout, base: u64, bytes: &[u8], last: bool) -> Result<(Vec<(u64, u64)>, usize), StoreError> {
    match layout {
        RecordLayout::FixedSize(size) => {
            let size = *size;
            let len = bytes.len() as u64;
            if !len.is_multiple_of(size) {
                return Err(StoreError::LayoutMismatch(format!(
                    "store length {len} is not a multiple of the {size}-byte record size"
                )));
            }
            Ok(((0..len / size).map(|i| (base + i * size, size)).collect(), 0))
        }
        RecordLayout::Delimited(delim) => {
            let mut out = Vec::new();
            let mut start = 0usize;
            for (i, &b) in bytes.iter().enumerate() {
                if b == *delim {
                    out.push((base + start as u64, (i + 1 - start) as u64));
                    start = i + 1;
                }
            }
            let tail = bytes.len() - start;
            if tail > 0 && last {
                out.push((base + start as u64, tail as u64));
                return Ok((out, 0));
            }
            Ok((out, tail))
        }
        RecordLayout::Indexed(_) => unreachable!("indexed stores carry their own table"),
    }
}

/// Checks that an offset table is strictly increasing, non-overlapping,
/// non-empty per entry, and inside a store of `store_len` bytes.
pub(super) fn validate_table(table: &[(u64, u64)], store_len: u64) -> Result<(), StoreError> {
    let mut prev_end: Option<u64> = None;
    for (i, &(off, len)) in table.iter().enumerate() {
        let end = off.checked_add(len).filter(|_| len > 0);
        let Some(end) = end else {
            return Err(StoreError::LayoutMismatch(format!("index entry {i} has zero length")));
        };
        if end > store_len {
            return Err(StoreError::LayoutMismatch(format!("index entry {i} ends at {end}, past the {store_len}-byte store")));
        }
        if let Some(p) = prev_end {
            if off < p {
                return Err(StoreError::LayoutMismatch(format!("index entry {i} overlaps or precedes its predecessor")));
            }
        }
        prev_end = Some(end);
    }
    Ok(())
}
