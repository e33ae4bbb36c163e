//! Discrete-event primitives: a virtual clock in nanoseconds and an event
//! queue with deterministic tie-breaking by insertion order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::transport::netmodel::SimNanos;

struct Entry<E> {
    time: SimNanos,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap, we pop earliest first
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Time-ordered event queue; events at equal times fire in insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn schedule(&mut self, time: SimNanos, event: E) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Entry { time, seq, event });
    }

    pub fn next_time(&self) -> Option<SimNanos> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn pop(&mut self) -> Option<(SimNanos, E)> {
        self.heap.pop().map(|e| (e.time, e.event))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

/// Append-only log of simulation happenings, used to compare runs for
/// determinism and to debug event interleavings.
#[derive(Debug, Default)]
pub struct EventLog {
    pub enabled: bool,
    lines: Vec<String>,
}

impl EventLog {
    pub fn new(enabled: bool) -> Self {
        EventLog {
            enabled,
            lines: Vec::new(),
        }
    }

    pub fn push(&mut self, time: SimNanos, line: impl AsRef<str>) {
        if self.enabled {
            self.lines.push(format!("{} {}", time, line.as_ref()));
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn dump(&self) -> String {
        self.lines.join("\n")
    }
}
