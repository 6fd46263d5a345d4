//! Prioritised experience replay over a flat ring with a sum tree.

use thiserror::Error;

use crate::numerics::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("buffer holds {size} transitions, {batch} requested")]
    NotReady { size: usize, batch: usize },
    #[error("invalid transition: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub high_action: Vec<f64>,
    pub low_action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub step_in_option: usize,
    /// Control time of `state`; the generator may depend on it.
    pub time: f64,
}

impl Transition {
    fn check(&self) -> Result<(), ReplayError> {
        let finite = self
            .state
            .iter()
            .chain(&self.high_action)
            .chain(&self.low_action)
            .chain(&self.next_state)
            .all(|v| v.is_finite())
            && self.reward.is_finite();
        if !finite {
            return Err(ReplayError::Invalid("non-finite field".into()));
        }
        Ok(())
    }
}

/// Handle to a stored transition; goes stale once the slot is overwritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleIndex {
    pub slot: usize,
    pub serial: u64,
}

pub const PRIORITY_EXPONENT: f64 = 0.6;
pub const IS_EXPONENT: f64 = 0.4;
pub const EPSILON_PRIORITY: f64 = 1e-3;
pub const DEFAULT_CAPACITY: usize = 100_000;

/// Binary sum tree over `capacity` leaves.
#[derive(Clone, Debug)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    fn set(&mut self, i: usize, v: f64) {
        let mut k = i + self.leaves;
        self.nodes[k] = v;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[i + self.leaves]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf whose cumulative interval contains `mass`.
    fn find(&self, mut mass: f64) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if mass < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                mass -= left;
                k = 2 * k + 1;
            }
        }
        k - self.leaves
    }
}

#[derive(Clone, Debug)]
pub struct PrioritizedBuffer {
    capacity: usize,
    items: Vec<Transition>,
    serials: Vec<u64>,
    priorities: Vec<f64>,
    tree: SumTree,
    next: usize,
    pushed: u64,
    priority_exponent: f64,
    is_exponent: f64,
    stale_updates: u64,
    max_priority: f64,
}

impl PrioritizedBuffer {
    pub fn new(capacity: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::Argument("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            serials: Vec::new(),
            priorities: Vec::new(),
            tree: SumTree::new(capacity),
            next: 0,
            pushed: 0,
            priority_exponent: PRIORITY_EXPONENT,
            is_exponent: IS_EXPONENT,
            stale_updates: 0,
            max_priority: 1.0,
        })
    }

    pub fn with_exponents(mut self, priority: f64, importance: f64) -> Self {
        self.priority_exponent = priority;
        self.is_exponent = importance;
        for i in 0..self.items.len() {
            self.tree.set(i, self.priorities[i].powf(priority));
        }
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    /// Largest priority seen so far; new transitions are usually pushed with it.
    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    pub fn push(&mut self, t: Transition, priority: f64) -> Result<SampleIndex, ReplayError> {
        t.check()?;
        let p = if priority.is_finite() {
            priority.max(EPSILON_PRIORITY)
        } else {
            EPSILON_PRIORITY
        };
        let slot = self.next;
        let serial = self.pushed;
        if self.items.len() < self.capacity {
            self.items.push(t);
            self.serials.push(serial);
            self.priorities.push(p);
        } else {
            self.items[slot] = t;
            self.serials[slot] = serial;
            self.priorities[slot] = p;
        }
        self.tree.set(slot, p.powf(self.priority_exponent));
        self.max_priority = self.max_priority.max(p);
        self.next = (slot + 1) % self.capacity;
        self.pushed += 1;
        Ok(SampleIndex { slot, serial })
    }

    pub fn get(&self, idx: SampleIndex) -> Option<&Transition> {
        (idx.slot < self.items.len() && self.serials[idx.slot] == idx.serial).then(|| &self.items[idx.slot])
    }

    pub fn priority(&self, idx: SampleIndex) -> Option<f64> {
        self.get(idx).map(|_| self.priorities[idx.slot])
    }

    /// Probability that `idx` is drawn by a single sample.
    pub fn probability(&self, idx: SampleIndex) -> Option<f64> {
        self.get(idx).map(|_| self.tree.get(idx.slot) / self.tree.total())
    }

    /// Draws `batch` indices with replacement. Weights are `(N·P(i))^{−b}`
    /// divided by their batch maximum.
    pub fn sample(&self, batch: usize, rng: &mut RngStream) -> Result<(Vec<SampleIndex>, Vec<f64>), ReplayError> {
        let n = self.items.len();
        if batch == 0 || n < batch {
            return Err(ReplayError::NotReady { size: n, batch });
        }
        let total = self.tree.total();
        let mut idx = Vec::with_capacity(batch);
        let mut weights = Vec::with_capacity(batch);
        for _ in 0..batch {
            let slot = self.tree.find(rng.uniform(0.0, total)).min(n - 1);
            let p = self.tree.get(slot) / total;
            idx.push(SampleIndex {
                slot,
                serial: self.serials[slot],
            });
            weights.push((n as f64 * p).powf(-self.is_exponent));
        }
        let wmax = weights.iter().cloned().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= wmax;
        }
        Ok((idx, weights))
    }

    /// Sets the priority to `|td| + violation + ε`. Stale handles are
    /// counted and ignored.
    pub fn update_priority(&mut self, idx: SampleIndex, td_error: f64, violation: f64) {
        if self.get(idx).is_none() {
            self.stale_updates += 1;
            return;
        }
        let mut p = td_error.abs() + violation.max(0.0) + EPSILON_PRIORITY;
        if !p.is_finite() {
            p = self.max_priority;
        }
        self.priorities[idx.slot] = p;
        self.max_priority = self.max_priority.max(p);
        self.tree.set(idx.slot, p.powf(self.priority_exponent));
    }

    /// The high-level window holding `idx`: consecutive transitions from its
    /// option start, up to `horizon` steps, stopping at a terminal or at the
    /// next option boundary. `None` when any part has been evicted.
    pub fn option_window(&self, idx: SampleIndex, horizon: usize) -> Option<Vec<&Transition>> {
        let t = self.get(idx)?;
        let start_serial = idx.serial.checked_sub(t.step_in_option as u64)?;
        let mut out = Vec::with_capacity(horizon);
        for k in 0..horizon as u64 {
            let serial = start_serial + k;
            if serial >= self.pushed {
                break;
            }
            let slot = (idx.slot as i64 + (serial as i64 - idx.serial as i64)).rem_euclid(self.capacity as i64) as usize;
            let item = self.get(SampleIndex { slot, serial })?;
            if item.step_in_option != k as usize {
                if k == 0 {
                    return None;
                }
                break;
            }
            out.push(item);
            if item.done {
                break;
            }
        }
        (!out.is_empty()).then_some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(r: f64, step: usize) -> Transition {
        Transition {
            state: vec![r],
            high_action: vec![0.0],
            low_action: vec![0.0],
            reward: r,
            next_state: vec![r + 1.0],
            done: false,
            step_in_option: step,
            time: 0.0,
        }
    }

    #[test]
    fn push_and_evict() {
        let mut b = PrioritizedBuffer::new(2).unwrap();
        let first = b.push(tr(0.0, 0), 1.0).unwrap();
        assert_eq!(b.len(), 1);
        b.push(tr(1.0, 0), 1.0).unwrap();
        b.push(tr(2.0, 0), 1.0).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.get(first).is_none());
        b.update_priority(first, 1.0, 0.0);
        assert_eq!(b.stale_updates(), 1);
    }

    #[test]
    fn priority_floor_and_updates() {
        let mut b = PrioritizedBuffer::new(4).unwrap();
        let i = b.push(tr(0.0, 0), 0.0).unwrap();
        assert_eq!(b.priority(i), Some(EPSILON_PRIORITY));
        b.update_priority(i, 0.0, 0.0);
        assert!((b.priority(i).unwrap() - 1e-3).abs() < 1e-15);
        b.update_priority(i, 2.0, 0.5);
        assert!((b.priority(i).unwrap() - 2.501).abs() < 1e-12);
        b.update_priority(i, -2.0, 0.0);
        assert!((b.priority(i).unwrap() - 2.001).abs() < 1e-12);
    }

    #[test]
    fn two_item_probabilities() {
        let mut b = PrioritizedBuffer::new(8).unwrap().with_exponents(1.0, 0.4);
        let a = b.push(tr(0.0, 0), 1.0).unwrap();
        let c = b.push(tr(1.0, 0), 3.0).unwrap();
        assert!((b.probability(a).unwrap() - 0.25).abs() < 1e-12);
        assert!((b.probability(c).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn equal_priorities_give_unit_weights() {
        let mut b = PrioritizedBuffer::new(8).unwrap();
        for k in 0..5 {
            b.push(tr(k as f64, 0), 2.0).unwrap();
        }
        let mut rng = RngStream::new(0, 0);
        let (_, w) = b.sample(5, &mut rng).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(matches!(b.sample(6, &mut rng), Err(ReplayError::NotReady { .. })));
    }

    #[test]
    fn option_windows() {
        let mut b = PrioritizedBuffer::new(16).unwrap();
        let mut ids = Vec::new();
        for k in 0..7 {
            ids.push(b.push(tr(k as f64, k % 3), 1.0).unwrap());
        }
        let w = b.option_window(ids[4], 3).unwrap();
        let rewards: Vec<f64> = w.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 5.0]);
        let tail = b.option_window(ids[6], 3).unwrap();
        assert_eq!(tail.len(), 1);
    }
}
