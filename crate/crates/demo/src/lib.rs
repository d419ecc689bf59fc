//! Browser bindings for a few single-threaded pieces of the library: the
//! weighted union schedule, prioritized replay sampling and the reference
//! A2C trainer on the chain environment.

use actorflow::algorithms::AlgorithmConfig;
use actorflow::oracle::{oracle_train, OracleAlgo};
use actorflow::pariter::WeightedRoundRobin;
use actorflow::toy_rl::{PrioritizedReplayBuffer, SampleBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Child index chosen at each of the first `pulls` steps of a weighted union.
#[wasm_bindgen]
pub fn union_schedule(weights: Vec<f64>, pulls: u32) -> Result<Vec<u32>, JsError> {
    let mut rr = WeightedRoundRobin::new(&weights).map_err(js_err)?;
    Ok((0..pulls).map(|_| rr.next_index() as u32).collect())
}

/// Empirical sampling frequency of each item after `draws` draws, followed
/// by the target `p^alpha / sum p^alpha` for each item.
#[wasm_bindgen]
pub fn replay_frequencies(priorities: Vec<f64>, alpha: f64, draws: u32, seed: u64) -> Result<Vec<f64>, JsError> {
    let mut buf = PrioritizedReplayBuffer::with_params(priorities.len().max(1), alpha, 0.4).map_err(js_err)?;
    let item = SampleBatch {
        obs: vec![vec![0.0]],
        actions: vec![0],
        rewards: vec![0.0],
        dones: vec![true],
        truncated: vec![false],
        next_obs: vec![vec![0.0]],
        policy_version: 0,
        adaptation: 0,
    };
    let mut ids = Vec::with_capacity(priorities.len());
    for &p in &priorities {
        ids.push(buf.add_with_priority(&item, p).map_err(js_err)?[0]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = buf.sample(draws.max(1) as usize, &mut rng).map_err(js_err)?;
    let mut counts = vec![0u32; ids.len()];
    for id in sampled.ids {
        if let Some(slot) = ids.iter().position(|&x| x == id) {
            counts[slot] += 1;
        }
    }
    let z: f64 = priorities.iter().map(|p| p.powf(alpha)).sum();
    let mut out: Vec<f64> = counts.iter().map(|&c| c as f64 / draws.max(1) as f64).collect();
    out.extend(priorities.iter().map(|p| p.powf(alpha) / z));
    Ok(out)
}

/// Mean episode reward per iteration of the reference A2C trainer (NaN
/// before the first finished episode).
#[wasm_bindgen]
pub fn a2c_curve(n_states: usize, workers: usize, lr: f64, iters: u32, seed: u64) -> Result<Vec<f64>, JsError> {
    let cfg = AlgorithmConfig {
        n_states,
        num_workers: workers,
        lr,
        seed,
        ..AlgorithmConfig::default()
    };
    cfg.validate(actorflow::algorithms::Algo::A2c).map_err(js_err)?;
    let run = oracle_train(OracleAlgo::A2c, &cfg, iters as usize).map_err(js_err)?;
    Ok(run.records.iter().map(|r| r.mean_episode_reward.unwrap_or(f64::NAN)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_alternates_for_equal_weights() {
        assert_eq!(union_schedule(vec![1.0, 1.0], 4).unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn frequencies_track_the_target() {
        let out = replay_frequencies(vec![1.0, 3.0], 1.0, 20_000, 1).unwrap();
        assert!((out[1] - 0.75).abs() < 0.02);
        assert_eq!(out[3], 0.75);
    }

    #[test]
    fn curve_has_one_point_per_iteration() {
        assert_eq!(a2c_curve(6, 2, 3.0, 30, 0).unwrap().len(), 30);
    }
}
