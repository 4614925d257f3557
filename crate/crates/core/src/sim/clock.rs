//! Simulated clock: a priority queue of events ordered by (time, sequence).
//! Same seed, same schedule, same order — always.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Scheduled<T> {
    time_ms: u64,
    seq: u64,
    payload: T,
}

impl<T: Eq> Ord for Scheduled<T> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time_ms, self.seq).cmp(&(other.time_ms, other.seq))
    }
}

impl<T: Eq> PartialOrd for Scheduled<T> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue<T: Eq> {
    heap: BinaryHeap<Reverse<Scheduled<T>>>,
    next_seq: u64,
    now_ms: u64,
}

impl<T: Eq> EventQueue<T> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now_ms: 0,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Schedules an event. Times in the past are clamped to now so the clock
    /// never runs backwards.
    pub fn schedule(&mut self, time_ms: u64, payload: T) {
        let time_ms = time_ms.max(self.now_ms);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Scheduled {
            time_ms,
            seq,
            payload,
        }));
    }

    pub fn pop(&mut self) -> Option<(u64, T)> {
        let Reverse(event) = self.heap.pop()?;
        self.now_ms = event.time_ms;
        Some((event.time_ms, event.payload))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_pop_in_time_then_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(10, "b");
        q.schedule(5, "a");
        q.schedule(10, "c");
        assert_eq!(q.pop(), Some((5, "a")));
        assert_eq!(q.pop(), Some((10, "b")));
        assert_eq!(q.pop(), Some((10, "c")));
        assert_eq!(q.pop(), None);
    }

    #[test]
    fn time_never_decreases() {
        let mut q = EventQueue::new();
        q.schedule(10, 1u32);
        assert_eq!(q.pop(), Some((10, 1)));
        q.schedule(3, 2); // clamped to now
        assert_eq!(q.pop(), Some((10, 2)));
        assert_eq!(q.now_ms(), 10);
    }
}
