//! In-memory array of prefetched records with a monotone address counter.
//!
//! The counter starts at the buffer's base address. Every dispense hands out
//! the entry at the counter and advances it by that entry's size, so after
//! `k` dispenses of fixed-size `s` records the counter sits at `k * s`.

use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BufferedRecord {
    /// Position of the record in the store.
    pub index: usize,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct IndexBuffer {
    entries: VecDeque<BufferedRecord>,
    capacity: usize,
    counter: u64,
    loaded: u64,
}

impl IndexBuffer {
    /// `capacity` is the refill depth used when the buffer drains.
    pub fn new(capacity: usize) -> Self {
        IndexBuffer { entries: VecDeque::new(), capacity, counter: 0, loaded: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Entries buffered and not yet dispensed.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total entries ever loaded.
    pub fn loaded(&self) -> u64 {
        self.loaded
    }

    pub fn push(&mut self, record: BufferedRecord) {
        debug_assert!(self.entries.back().is_none_or(|b| b.index + 1 == record.index));
        self.loaded += 1;
        self.entries.push_back(record);
    }

    /// Hands out the entry at the counter and advances the counter by `step`.
    pub fn take(&mut self, step: u64) -> Option<BufferedRecord> {
        let rec = self.entries.pop_front()?;
        self.counter += step;
        Some(rec)
    }

    pub fn peek(&self) -> Option<&BufferedRecord> {
        self.entries.front()
    }

    /// Drops buffered entries without moving the counter.
    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_advances_by_size() {
        let mut buf = IndexBuffer::new(8);
        for i in 0..3 {
            buf.push(BufferedRecord { index: i, bytes: vec![b'x'; 4] });
        }
        assert_eq!(buf.counter(), 0);
        let first = buf.take(4).unwrap();
        assert_eq!(first.index, 0);
        assert_eq!(buf.counter(), 4);
        buf.take(4);
        buf.take(4);
        assert_eq!(buf.counter(), 12);
        assert!(buf.take(4).is_none());
        assert_eq!(buf.counter(), 12);
    }
}
