use rand::Rng;

use super::sum_tree::SumTree;
use crate::codec::{Reader, Writer};
use crate::error::{usage, Result};
use crate::rng::MemrRng;

/// A real environment transition with its sampling priority.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvTransition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub priority: f64,
}

/// Identifies one write into a ring slot. A handle goes stale once the slot
/// is overwritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SlotHandle {
    pub slot: usize,
    pub stamp: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledState {
    pub handle: SlotHandle,
    /// `P(i) = p_i^alpha / sum_k p_k^alpha` at sampling time.
    pub probability: f64,
    /// `(N P(i))^-beta`, divided by the largest raw weight in the batch.
    pub weight: f64,
}

/// Normalized importance-sampling weights `(n P_i)^-beta / max_j (n P_j)^-beta`.
pub fn importance_weights(probabilities: &[f64], n: usize, beta: f64) -> Vec<f64> {
    let raw: Vec<f64> = probabilities
        .iter()
        .map(|p| (n as f64 * p).powf(-beta))
        .collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    raw.into_iter().map(|w| w / max).collect()
}

/// Prioritized ring buffer of real transitions. Leaf `k` of the sum tree
/// holds `priority_k^alpha` for occupied slots and zero otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvReplayBuffer {
    capacity: usize,
    alpha: f64,
    eps: f64,
    data: Vec<EnvTransition>,
    stamps: Vec<u64>,
    next: usize,
    writes: u64,
    tree: SumTree,
    stale_updates: u64,
}

impl EnvReplayBuffer {
    pub fn new(capacity: usize, alpha: f64, eps: f64) -> Result<Self> {
        if capacity == 0 {
            return usage("env buffer capacity must be positive");
        }
        if !(0.0..=1.0).contains(&alpha) {
            return usage(format!("alpha must lie in [0, 1], got {alpha}"));
        }
        if !(eps > 0.0) {
            return usage(format!("priority eps must be positive, got {eps}"));
        }
        Ok(Self {
            capacity,
            alpha,
            eps,
            data: Vec::with_capacity(capacity.min(1 << 20)),
            stamps: Vec::new(),
            next: 0,
            writes: 0,
            tree: SumTree::new(capacity),
            stale_updates: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    /// Occupied transitions in slot order.
    pub fn transitions(&self) -> &[EnvTransition] {
        &self.data
    }

    pub fn get(&self, slot: usize) -> &EnvTransition {
        &self.data[slot]
    }

    pub fn is_current(&self, handle: SlotHandle) -> bool {
        handle.slot < self.data.len() && self.stamps[handle.slot] == handle.stamp
    }

    /// Number of priority writes skipped because their slot had been
    /// overwritten since sampling.
    pub fn stale_updates(&self) -> u64 {
        self.stale_updates
    }

    pub fn probability(&self, slot: usize) -> f64 {
        self.tree.leaf(slot) / self.tree.total()
    }

    fn leaf_value(&self, priority: f64) -> f64 {
        priority.max(self.eps).powf(self.alpha)
    }

    /// Stores `t`, overwriting the oldest slot when full. The stored priority
    /// is clamped at `eps`.
    pub fn add(&mut self, mut t: EnvTransition) -> usize {
        t.priority = t.priority.max(self.eps);
        let slot = self.next;
        let leaf = self.leaf_value(t.priority);
        if slot == self.data.len() {
            self.data.push(t);
            self.stamps.push(self.writes);
        } else {
            self.data[slot] = t;
            self.stamps[slot] = self.writes;
        }
        self.writes += 1;
        self.tree.set(slot, leaf);
        self.next = (self.next + 1) % self.capacity;
        slot
    }

    pub fn handle(&self, slot: usize) -> SlotHandle {
        SlotHandle {
            slot,
            stamp: self.stamps[slot],
        }
    }

    /// Draws `m` slots with probability proportional to `priority^alpha`,
    /// one from each of `m` equal strata of the cumulative mass.
    pub fn sample_states(&self, m: usize, beta: f64, rng: &mut MemrRng) -> Result<Vec<SampledState>> {
        if self.is_empty() {
            return usage("cannot sample from an empty env buffer");
        }
        if m == 0 {
            return usage("sample size must be positive");
        }
        if !(0.0..=1.0).contains(&beta) {
            return usage(format!("beta must lie in [0, 1], got {beta}"));
        }
        let total = self.tree.total();
        let stratum = total / m as f64;
        let mut slots = Vec::with_capacity(m);
        for i in 0..m {
            let u = (i as f64 + rng.random::<f64>()) * stratum;
            let slot = self.tree.find(u).min(self.data.len() - 1);
            slots.push(slot);
        }
        let probs: Vec<f64> = slots.iter().map(|&s| self.tree.leaf(s) / total).collect();
        let weights = importance_weights(&probs, self.len(), beta);
        Ok(slots
            .into_iter()
            .zip(probs)
            .zip(weights)
            .map(|((slot, probability), weight)| SampledState {
                handle: self.handle(slot),
                probability,
                weight,
            })
            .collect())
    }

    /// Uniform draw with replacement, ignoring priorities.
    pub fn sample_uniform(&self, k: usize, rng: &mut MemrRng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return usage("cannot sample from an empty env buffer");
        }
        Ok((0..k).map(|_| rng.random_range(0..self.data.len())).collect())
    }

    /// Writes `max(eps, p)^alpha` for each current handle. Stale handles are
    /// skipped and counted.
    pub fn update_priorities(&mut self, updates: &[(SlotHandle, f64)]) {
        for &(handle, p) in updates {
            if !self.is_current(handle) {
                self.stale_updates += 1;
                continue;
            }
            let p = p.max(self.eps);
            self.data[handle.slot].priority = p;
            let leaf = self.leaf_value(p);
            self.tree.set(handle.slot, leaf);
        }
    }

    pub fn write(&self, w: &mut Writer) {
        w.put_u64(self.capacity as u64);
        w.put_f64(self.alpha);
        w.put_f64(self.eps);
        w.put_u64(self.next as u64);
        w.put_u64(self.writes);
        w.put_u64(self.stale_updates);
        w.put_u64(self.data.len() as u64);
        for (t, stamp) in self.data.iter().zip(&self.stamps) {
            w.put_u64(*stamp);
            w.put_f64s(&t.state);
            w.put_f64s(&t.action);
            w.put_f64s(&t.next_state);
            w.put_f64(t.reward);
            w.put_bool(t.done);
            w.put_f64(t.priority);
        }
        // Leaves are stored verbatim so sampling resumes bit-for-bit.
        w.put_f64s(&self.tree.leaves()[..self.data.len()]);
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self> {
        let capacity = r.usize()?;
        let alpha = r.f64()?;
        let eps = r.f64()?;
        let mut buf = Self::new(capacity, alpha, eps).map_err(|e| r.error(e.to_string()))?;
        buf.next = r.usize()?;
        buf.writes = r.u64()?;
        buf.stale_updates = r.u64()?;
        let n = r.usize()?;
        if n > capacity || buf.next >= capacity {
            return Err(r.error("env buffer size exceeds capacity"));
        }
        for _ in 0..n {
            buf.stamps.push(r.u64()?);
            buf.data.push(EnvTransition {
                state: r.f64s()?,
                action: r.f64s()?,
                next_state: r.f64s()?,
                reward: r.f64()?,
                done: r.bool()?,
                priority: r.f64()?,
            });
        }
        let leaves = r.f64s()?;
        if leaves.len() != n {
            return Err(r.error("sum-tree leaf count does not match buffer size"));
        }
        buf.tree = SumTree::rebuild(&leaves, capacity);
        Ok(buf)
    }
}
