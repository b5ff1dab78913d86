//! Bounded rehearsal memory with a reservoir per class.
//!
//! Capacity is shared evenly among the classes seen so far. Each class keeps
//! a uniform sample of its stream (Algorithm R); when a new class arrives
//! the older reservoirs shrink by random eviction.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::taskgen::Sample;

#[derive(Debug, Clone, Default)]
struct Reservoir {
    items: Vec<Sample>,
    seen: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    classes: BTreeMap<usize, Reservoir>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            classes: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(|r| r.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slots allotted to the `rank`-th class out of `n`.
    fn quota(&self, rank: usize, n: usize) -> usize {
        self.capacity / n + usize::from(rank < self.capacity % n)
    }

    fn rebalance(&mut self, rng: &mut impl Rng) {
        let n = self.classes.len();
        let quotas: Vec<usize> = (0..n).map(|r| self.quota(r, n)).collect();
        for (r, q) in self.classes.values_mut().zip(quotas) {
            while r.items.len() > q {
                let i = rng.gen_range(0..r.items.len());
                r.items.swap_remove(i);
            }
        }
    }

    pub fn insert(&mut self, sample: &Sample, rng: &mut impl Rng) {
        if self.capacity == 0 {
            return;
        }
        let new_class = !self.classes.contains_key(&sample.class_id);
        self.classes.entry(sample.class_id).or_default();
        if new_class {
            self.rebalance(rng);
        }
        let n = self.classes.len();
        let rank = self.classes.keys().position(|c| *c == sample.class_id).expect("present");
        let quota = self.quota(rank, n);
        let r = self.classes.get_mut(&sample.class_id).expect("present");
        r.seen += 1;
        if r.items.len() < quota {
            r.items.push(sample.clone());
        } else if quota > 0 {
            let j = rng.gen_range(0..r.seen);
            if (j as usize) < quota {
                r.items[j as usize] = sample.clone();
            }
        }
        debug_assert!(self.len() <= self.capacity);
    }

    /// Uniform draw over everything stored.
    pub fn sample<'a>(&'a self, rng: &mut impl Rng) -> Option<&'a Sample> {
        let n = self.len();
        if n == 0 {
            return None;
        }
        let mut i = rng.gen_range(0..n);
        for r in self.classes.values() {
            if i < r.items.len() {
                return Some(&r.items[i]);
            }
            i -= r.items.len();
        }
        None
    }

    pub fn per_class(&self) -> BTreeMap<usize, usize> {
        self.classes.iter().map(|(c, r)| (*c, r.items.len())).collect()
    }
}

/// Which stream positions fed each training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AccessLog {
    pub entries: Vec<AccessEntry>,
    pub max_buffer_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccessEntry {
    pub task_position: usize,
    pub step: usize,
    pub current: usize,
    pub replayed: usize,
    /// Samples whose task sits earlier in the stream than the current one.
    pub from_earlier_tasks: usize,
}

impl AccessLog {
    /// True when no step saw data from an earlier task.
    pub fn isolated(&self) -> bool {
        self.entries.iter().all(|e| e.from_earlier_tasks == 0)
    }
}
