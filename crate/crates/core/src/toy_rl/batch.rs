use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RlError;

/// Column-oriented block of environment steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Last row of a rollout cut off by the horizon rather than by `done`.
    #[serde(default)]
    pub truncated: Vec<bool>,
    /// Observation after each step; equal to the terminal observation on
    /// steps that end an episode.
    pub next_obs: Vec<Vec<f64>>,
    /// Version of the weights that chose the actions.
    pub policy_version: u64,
    /// Local adaptation steps the producing worker had applied on top of
    /// `policy_version` (zero unless the worker adapts its own weights).
    pub adaptation: u32,
}

impl SampleBatch {
    pub fn count(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks that every column has the same non-zero length.
    pub fn validate(&self) -> Result<(), RlError> {
        let n = self.actions.len();
        if n == 0 {
            return Err(RlError::Shape("sample batch is empty".into()));
        }
        let lens = [
            self.obs.len(),
            self.rewards.len(),
            self.dones.len(),
            self.truncated.len(),
            self.next_obs.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(RlError::Shape(format!(
                "column lengths disagree: actions={n}, obs/rewards/dones/truncated/next_obs={lens:?}"
            )));
        }
        Ok(())
    }

    /// Row-wise concatenation in input order. The result carries the oldest
    /// policy version among the inputs.
    pub fn concat(batches: &[SampleBatch]) -> Result<SampleBatch, RlError> {
        let first = batches
            .first()
            .ok_or_else(|| RlError::Shape("nothing to concatenate".into()))?;
        let total = batches.iter().map(SampleBatch::count).sum();
        let mut out = SampleBatch {
            obs: Vec::with_capacity(total),
            actions: Vec::with_capacity(total),
            rewards: Vec::with_capacity(total),
            dones: Vec::with_capacity(total),
            truncated: Vec::with_capacity(total),
            next_obs: Vec::with_capacity(total),
            policy_version: first.policy_version,
            adaptation: first.adaptation,
        };
        for b in batches {
            out.obs.extend(b.obs.iter().cloned());
            out.actions.extend_from_slice(&b.actions);
            out.rewards.extend_from_slice(&b.rewards);
            out.dones.extend_from_slice(&b.dones);
            out.truncated.extend_from_slice(&b.truncated);
            out.next_obs.extend(b.next_obs.iter().cloned());
            out.policy_version = out.policy_version.min(b.policy_version);
            out.adaptation = out.adaptation.min(b.adaptation);
        }
        Ok(out)
    }

    /// Rows `[start, end)` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> SampleBatch {
        SampleBatch {
            obs: self.obs[start..end].to_vec(),
            actions: self.actions[start..end].to_vec(),
            rewards: self.rewards[start..end].to_vec(),
            dones: self.dones[start..end].to_vec(),
            truncated: self.truncated[start..end].to_vec(),
            next_obs: self.next_obs[start..end].to_vec(),
            policy_version: self.policy_version,
            adaptation: self.adaptation,
        }
    }

    /// Undiscounted reward-to-go of every row, restarting at each episode end
    /// and at each truncated row, so concatenated rollout fragments do not
    /// leak reward into one another.
    pub fn returns_to_go(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.count()];
        let mut acc = 0.0;
        for t in (0..self.count()).rev() {
            if self.dones[t] || self.truncated[t] {
                acc = 0.0;
            }
            acc += self.rewards[t];
            out[t] = acc;
        }
        out
    }

    pub(crate) fn builder(policy_version: u64, adaptation: u32) -> SampleBatch {
        SampleBatch {
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            truncated: Vec::new(),
            next_obs: Vec::new(),
            policy_version,
            adaptation,
        }
    }

    pub(crate) fn push(&mut self, obs: Vec<f64>, action: usize, reward: f64, done: bool, next_obs: Vec<f64>) {
        self.obs.push(obs);
        self.actions.push(action);
        self.rewards.push(reward);
        self.dones.push(done);
        self.truncated.push(false);
        self.next_obs.push(next_obs);
    }
}

pub type PolicyId = String;

pub const DEFAULT_POLICY: &str = "default";

/// Steps of several agents, grouped by the policy that controls them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MultiAgentBatch {
    pub policy_batches: BTreeMap<PolicyId, SampleBatch>,
}

impl MultiAgentBatch {
    pub fn count(&self) -> usize {
        self.policy_batches.values().map(SampleBatch::count).sum()
    }

    /// Steps of `policy`, if any.
    pub fn select(&self, policy: &str) -> Option<&SampleBatch> {
        self.policy_batches.get(policy)
    }

    pub fn into_policy(mut self, policy: &str) -> Option<SampleBatch> {
        self.policy_batches.remove(policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rewards: &[f64], dones: &[bool], version: u64) -> SampleBatch {
        let mut b = SampleBatch::builder(version, 0);
        for (i, (&r, &d)) in rewards.iter().zip(dones).enumerate() {
            b.push(vec![i as f64], i % 2, r, d, vec![i as f64 + 1.0]);
        }
        b
    }

    #[test]
    fn concat_preserves_column_order() {
        let a = batch(&[0.0, 1.0], &[false, true], 3);
        let b = batch(&[0.5], &[false], 2);
        let c = SampleBatch::concat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.count(), 3);
        assert_eq!(c.rewards, vec![0.0, 1.0, 0.5]);
        assert_eq!(c.dones, vec![false, true, false]);
        assert_eq!(c.obs, vec![vec![0.0], vec![1.0], vec![0.0]]);
        assert_eq!(c.policy_version, 2);
        c.validate().unwrap();
    }

    #[test]
    fn concat_of_nothing_is_an_error() {
        assert!(matches!(SampleBatch::concat(&[]), Err(RlError::Shape(_))));
    }

    #[test]
    fn returns_restart_at_episode_boundaries() {
        let b = batch(&[0.0, 0.0, 1.0, 0.0, 2.0], &[false, false, true, false, false], 0);
        assert_eq!(b.returns_to_go(), vec![1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn validate_rejects_ragged_columns() {
        let mut b = batch(&[0.0, 1.0], &[false, true], 0);
        b.rewards.pop();
        assert!(b.validate().is_err());
        assert!(SampleBatch::builder(0, 0).validate().is_err());
    }
}
