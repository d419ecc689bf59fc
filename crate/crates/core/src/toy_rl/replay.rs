use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batch::SampleBatch;
use super::RlError;

pub const DEFAULT_ALPHA: f64 = 0.6;
pub const DEFAULT_BETA: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
struct Transition {
    obs: Vec<f64>,
    action: usize,
    reward: f64,
    done: bool,
    next_obs: Vec<f64>,
    policy_version: u64,
}

/// Binary tree over a fixed number of leaves where each inner node holds
/// `combine(left, right)`.
#[derive(Debug, Clone)]
struct SegmentTree {
    leaves: usize,
    nodes: Vec<f64>,
    combine: fn(f64, f64) -> f64,
}

impl SegmentTree {
    fn new(capacity: usize, neutral: f64, combine: fn(f64, f64) -> f64) -> Self {
        let leaves = capacity.next_power_of_two();
        SegmentTree {
            leaves,
            nodes: vec![neutral; 2 * leaves],
            combine,
        }
    }

    fn set(&mut self, slot: usize, value: f64) {
        let mut i = slot + self.leaves;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = (self.combine)(self.nodes[2 * i], self.nodes[2 * i + 1]);
        }
    }

    fn root(&self) -> f64 {
        self.nodes[1]
    }

    fn get(&self, slot: usize) -> f64 {
        self.nodes[slot + self.leaves]
    }

    /// Leaf whose prefix-sum interval contains `mass` (sum trees only).
    fn find_prefix(&self, mut mass: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let left = self.nodes[2 * i];
            if mass < left {
                i *= 2;
            } else {
                mass -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

/// Counters kept by a [`PrioritizedReplayBuffer`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub added: u64,
    pub evicted: u64,
    pub sampled: u64,
    pub priority_updates: u64,
    pub stale_updates: u64,
}

/// Rows drawn from a replay buffer with the ids and importance weights
/// needed to update their priorities later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledBatch {
    pub batch: SampleBatch,
    pub ids: Vec<u64>,
    pub weights: Vec<f64>,
}

/// Fixed-capacity buffer of single transitions, sampled with probability
/// proportional to `priority^alpha`. The oldest entry is evicted first.
#[derive(Debug, Clone)]
pub struct PrioritizedReplayBuffer {
    capacity: usize,
    alpha: f64,
    beta: f64,
    slots: Vec<Option<(u64, Transition)>>,
    sum_tree: SegmentTree,
    min_tree: SegmentTree,
    next_id: u64,
    max_priority: f64,
    priorities: Vec<f64>,
    len: usize,
    stats: ReplayStats,
}

impl PrioritizedReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, RlError> {
        Self::with_params(capacity, DEFAULT_ALPHA, DEFAULT_BETA)
    }

    pub fn with_params(capacity: usize, alpha: f64, beta: f64) -> Result<Self, RlError> {
        if capacity == 0 {
            return Err(RlError::Config("replay capacity must be positive".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) || !(beta >= 0.0 && beta.is_finite()) {
            return Err(RlError::Config(format!("invalid alpha={alpha} or beta={beta}")));
        }
        Ok(PrioritizedReplayBuffer {
            capacity,
            alpha,
            beta,
            slots: vec![None; capacity],
            sum_tree: SegmentTree::new(capacity, 0.0, |a, b| a + b),
            min_tree: SegmentTree::new(capacity, f64::INFINITY, f64::min),
            next_id: 0,
            max_priority: 1.0,
            priorities: vec![0.0; capacity],
            len: 0,
            stats: ReplayStats::default(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stats(&self) -> ReplayStats {
        self.stats
    }

    /// Stores every row of `batch` as its own transition at the highest
    /// priority seen so far. Returns the assigned ids.
    pub fn add(&mut self, batch: &SampleBatch) -> Result<Vec<u64>, RlError> {
        self.insert(batch, None)
    }

    /// Inserts every step of `batch` with the given priority.
    pub fn add_with_priority(&mut self, batch: &SampleBatch, priority: f64) -> Result<Vec<u64>, RlError> {
        if !(priority > 0.0 && priority.is_finite()) {
            return Err(RlError::Priority(priority));
        }
        self.insert(batch, Some(priority))
    }

    fn insert(&mut self, batch: &SampleBatch, priority: Option<f64>) -> Result<Vec<u64>, RlError> {
        batch.validate()?;
        let priority = priority.unwrap_or(self.max_priority);
        self.max_priority = self.max_priority.max(priority);
        let mut ids = Vec::with_capacity(batch.count());
        for t in 0..batch.count() {
            let id = self.next_id;
            self.next_id += 1;
            let slot = (id % self.capacity as u64) as usize;
            if self.slots[slot].is_some() {
                self.stats.evicted += 1;
            } else {
                self.len += 1;
            }
            self.slots[slot] = Some((
                id,
                Transition {
                    obs: batch.obs[t].clone(),
                    action: batch.actions[t],
                    reward: batch.rewards[t],
                    done: batch.dones[t],
                    next_obs: batch.next_obs[t].clone(),
                    policy_version: batch.policy_version,
                },
            ));
            self.set_priority(slot, priority);
            self.stats.added += 1;
            ids.push(id);
        }
        Ok(ids)
    }

    fn set_priority(&mut self, slot: usize, priority: f64) {
        self.priorities[slot] = priority;
        let scaled = priority.powf(self.alpha);
        self.sum_tree.set(slot, scaled);
        self.min_tree.set(slot, scaled);
    }

    /// Current (unscaled) priority of the entry with `id`.
    pub fn priority(&self, id: u64) -> Option<f64> {
        self.live_slot(id).map(|slot| self.priorities[slot])
    }

    /// Sampling probability of the entry with `id`, if it is still stored.
    pub fn probability(&self, id: u64) -> Option<f64> {
        let slot = self.live_slot(id)?;
        Some(self.sum_tree.get(slot) / self.sum_tree.root())
    }

    fn live_slot(&self, id: u64) -> Option<usize> {
        let slot = (id % self.capacity as u64) as usize;
        match &self.slots[slot] {
            Some((stored, _)) if *stored == id => Some(slot),
            _ => None,
        }
    }

    /// Draws `n` entries with replacement.
    pub fn sample<R: Rng>(&mut self, n: usize, rng: &mut R) -> Result<SampledBatch, RlError> {
        if self.is_empty() {
            return Err(RlError::EmptyBuffer);
        }
        if n == 0 {
            return Err(RlError::Config("sample size must be positive".into()));
        }
        let total = self.sum_tree.root();
        let count = self.len as f64;
        let max_weight = (count * self.min_tree.root() / total).powf(-self.beta);
        let mut out = SampleBatch::builder(u64::MAX, 0);
        let mut ids = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let mut slot = self.sum_tree.find_prefix(rng.gen::<f64>() * total);
            // Rounding at the upper end can land on an empty leaf.
            while self.slots.get(slot).is_none_or(Option::is_none) {
                slot = slot.saturating_sub(1);
            }
            let (id, tr) = self.slots[slot].as_ref().expect("occupied slot");
            let p = self.sum_tree.get(slot) / total;
            weights.push((count * p).powf(-self.beta) / max_weight);
            ids.push(*id);
            out.policy_version = out.policy_version.min(tr.policy_version);
            out.push(tr.obs.clone(), tr.action, tr.reward, tr.done, tr.next_obs.clone());
        }
        self.stats.sampled += n as u64;
        Ok(SampledBatch {
            batch: out,
            ids,
            weights,
        })
    }

    /// Sets new priorities. Ids that were already evicted are skipped; the
    /// return value counts the updates that were applied.
    pub fn update_priorities(&mut self, ids: &[u64], priorities: &[f64]) -> Result<usize, RlError> {
        if ids.len() != priorities.len() {
            return Err(RlError::Shape(format!("{} ids but {} priorities", ids.len(), priorities.len())));
        }
        if let Some(bad) = priorities.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(RlError::Priority(*bad));
        }
        let mut applied = 0;
        for (&id, &p) in ids.iter().zip(priorities) {
            match self.live_slot(id) {
                Some(slot) => {
                    self.set_priority(slot, p);
                    self.max_priority = self.max_priority.max(p);
                    applied += 1;
                }
                None => self.stats.stale_updates += 1,
            }
        }
        self.stats.priority_updates += applied as u64;
        Ok(applied)
    }

    /// Ids currently stored, oldest first.
    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.slots.iter().flatten().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(n: usize, start: usize) -> SampleBatch {
        let mut b = SampleBatch::builder(0, 0);
        for i in 0..n {
            let x = (start + i) as f64;
            b.push(vec![x], 0, x, false, vec![x + 1.0]);
        }
        b
    }

    #[test]
    fn fifo_eviction() {
        let mut buf = PrioritizedReplayBuffer::new(3).unwrap();
        buf.add(&rows(5, 0)).unwrap();
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.ids(), vec![2, 3, 4]);
        assert_eq!(buf.stats().evicted, 2);
    }

    #[test]
    fn empty_sample_is_an_error() {
        let mut buf = PrioritizedReplayBuffer::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample(2, &mut rng), Err(RlError::EmptyBuffer)));
    }

    #[test]
    fn bad_priorities_are_rejected() {
        let mut buf = PrioritizedReplayBuffer::new(4).unwrap();
        let ids = buf.add(&rows(2, 0)).unwrap();
        assert!(matches!(buf.update_priorities(&ids, &[1.0, 0.0]), Err(RlError::Priority(_))));
        assert!(matches!(buf.update_priorities(&ids, &[f64::NAN, 1.0]), Err(RlError::Priority(_))));
        assert!(matches!(buf.update_priorities(&ids, &[-1.0, 1.0]), Err(RlError::Priority(_))));
    }

    #[test]
    fn stale_ids_are_skipped() {
        let mut buf = PrioritizedReplayBuffer::new(2).unwrap();
        buf.add(&rows(4, 0)).unwrap();
        assert_eq!(buf.update_priorities(&[0, 1, 3], &[2.0, 2.0, 2.0]).unwrap(), 1);
        assert_eq!(buf.stats().stale_updates, 2);
    }

    #[test]
    fn probabilities_follow_scaled_priorities() {
        let mut buf = PrioritizedReplayBuffer::with_params(8, 0.5, 0.4).unwrap();
        let ids = buf.add(&rows(2, 0)).unwrap();
        buf.update_priorities(&ids, &[9.0, 1.0]).unwrap();
        assert!((buf.probability(0).unwrap() - 0.75).abs() < 1e-12);
        assert!((buf.probability(1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn weights_are_normalized_to_one_at_the_rarest_item() {
        let mut buf = PrioritizedReplayBuffer::with_params(8, 1.0, 0.4).unwrap();
        let ids = buf.add(&rows(2, 0)).unwrap();
        buf.update_priorities(&ids, &[3.0, 1.0]).unwrap();
        let s = buf.sample(200, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (id, w) in s.ids.iter().zip(&s.weights) {
            // N * P = 2 * 0.75 = 1.5 for the frequent item, 0.5 for the rare one
            let expected = if *id == 0 { (1.5f64 / 0.5).powf(-0.4) } else { 1.0 };
            assert!((w - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn new_items_take_the_max_priority() {
        let mut buf = PrioritizedReplayBuffer::with_params(8, 1.0, 0.4).unwrap();
        buf.add(&rows(1, 0)).unwrap();
        buf.update_priorities(&[0], &[5.0]).unwrap();
        buf.add(&rows(1, 1)).unwrap();
        assert!((buf.probability(1).unwrap() - 0.5).abs() < 1e-12);
    }
}
