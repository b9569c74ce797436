//! Episodic experience replay. Episodes are stored fully unrolled and every
//! step carries the behaviour-policy metadata recorded at collection time:
//! each agent's own action probability and the joint probability of the other
//! agents' actions. Those stored probabilities are immutable history — they
//! are exactly what the importance-sampling correction divides by later.

use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::{BufRead, Write};

/// Tolerance for the product-consistency gate on stored probabilities.
pub const PI_PRODUCT_TOL: f64 = 1e-9;

/// One augmented replay tuple. `obs[a]` is agent a's (possibly
/// fingerprint-augmented) observation at decision time; `pi_own[a]` the
/// probability with which agent a took `actions[a]`; `pi_others[a]` the joint
/// probability of the other agents' actions, i.e. `Π_{i≠a} pi_own[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub pi_own: Vec<f64>,
    pub pi_others: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// A fully unrolled episode plus its collection metadata: the training
/// episode index `t_c` at which it was gathered and the exploration rate in
/// force at that time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    pub t_c: usize,
    pub collection_epsilon: f64,
}

impl Episode {
    pub fn n_agents(&self) -> usize {
        self.steps.first().map_or(0, |s| s.actions.len())
    }

    fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Replay("episode has no steps".into()));
        }
        let n = self.n_agents();
        for (t, step) in self.steps.iter().enumerate() {
            if step.obs.len() != n
                || step.actions.len() != n
                || step.pi_own.len() != n
                || step.pi_others.len() != n
            {
                return Err(Error::Replay(format!("step {t} has inconsistent agent arity")));
            }
            for (a, p) in step.pi_own.iter().enumerate() {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(Error::Replay(format!(
                        "step {t}: behaviour probability {p} for agent {a} outside (0, 1]"
                    )));
                }
            }
            for (a, p) in step.pi_others.iter().enumerate() {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(Error::Replay(format!(
                        "step {t}: joint other-agent probability {p} for agent {a} outside (0, 1]"
                    )));
                }
                // Empty product for n = 1 is 1.0.
                let product: f64 = step
                    .pi_own
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != a)
                    .map(|(_, q)| q)
                    .product();
                if (p - product).abs() > PI_PRODUCT_TOL {
                    return Err(Error::Replay(format!(
                        "step {t}: stored π₋ₐ {p} disagrees with product {product} for agent {a}"
                    )));
                }
            }
            let is_last = t + 1 == self.steps.len();
            if step.terminal != is_last {
                return Err(Error::Replay(
                    "episodes must end with exactly one terminal step".into(),
                ));
            }
        }
        Ok(())
    }
}

/// FIFO ring of episodes. Capacity 1 expresses the no-replay baseline
/// (train only on the newest episode).
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    episodes: VecDeque<Episode>,
    capacity: usize,
}

/// Default capacity: spans both fresh and stale policy regimes within a
/// standard training budget.
pub const DEFAULT_CAPACITY: usize = 500;

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be at least 1".into()));
        }
        Ok(ReplayMemory {
            episodes: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Appends an episode, evicting the oldest when over capacity. Malformed
    /// episodes (probabilities outside (0, 1], inconsistent products, missing
    /// or misplaced terminal) are rejected with a diagnostic.
    pub fn store(&mut self, ep: Episode) -> Result<()> {
        ep.validate()?;
        if let Some(last) = self.episodes.back() {
            if ep.t_c < last.t_c {
                return Err(Error::Replay(format!(
                    "collection index must be nondecreasing: {} after {}",
                    ep.t_c, last.t_c
                )));
            }
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
        Ok(())
    }

    /// Draws `b` episodes uniformly with replacement. Returns `None` when the
    /// memory is empty so the trainer can skip the update.
    pub fn sample<R: Rng>(&self, b: usize, rng: &mut R) -> Option<Vec<&Episode>> {
        if self.episodes.is_empty() {
            return None;
        }
        Some(
            (0..b)
                .map(|_| &self.episodes[rng.gen_range(0..self.episodes.len())])
                .collect(),
        )
    }

    /// Serialises the buffer as line-delimited JSON, one episode per line.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        for ep in &self.episodes {
            serde_json::to_writer(&mut w, ep)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Restores a buffer previously written by [`ReplayMemory::dump`].
    pub fn restore<R: BufRead>(r: R, capacity: usize) -> Result<Self> {
        let mut mem = ReplayMemory::new(capacity)?;
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            mem.store(serde_json::from_str(&line)?)?;
        }
        Ok(mem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(t_c: usize, n_agents: usize, len: usize, p: f64) -> Episode {
        let steps = (0..len)
            .map(|t| {
                let pi_own = vec![p; n_agents];
                let pi_others = vec![p.powi(n_agents as i32 - 1); n_agents];
                EpisodeStep {
                    obs: vec![vec![t as f64]; n_agents],
                    actions: vec![0; n_agents],
                    pi_own,
                    pi_others,
                    reward: 1.0,
                    terminal: t + 1 == len,
                }
            })
            .collect();
        Episode {
            steps,
            t_c,
            collection_epsilon: 0.5,
        }
    }

    #[test]
    fn eviction_is_fifo() {
        let mut mem = ReplayMemory::new(2).unwrap();
        mem.store(episode(0, 2, 3, 0.5)).unwrap(); // A
        mem.store(episode(1, 2, 3, 0.5)).unwrap(); // B
        mem.store(episode(2, 2, 3, 0.5)).unwrap(); // C evicts A
        let t_cs: Vec<usize> = mem.iter().map(|e| e.t_c).collect();
        assert_eq!(t_cs, vec![1, 2]);
    }

    #[test]
    fn inconsistent_product_is_rejected() {
        let mut ep = episode(0, 3, 2, 0.5);
        // Perturb one stored joint probability well past the tolerance.
        ep.steps[0].pi_others[1] += 1e-6 + PI_PRODUCT_TOL;
        let mut mem = ReplayMemory::new(4).unwrap();
        assert!(mem.store(ep).is_err());
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        let mut mem = ReplayMemory::new(4).unwrap();
        let mut ep = episode(0, 2, 2, 0.5);
        ep.steps[1].pi_own[0] = 0.0;
        ep.steps[1].pi_others[1] = 1.0; // keep the product consistent if it got that far
        assert!(mem.store(ep).is_err());
        let mut ep = episode(0, 2, 2, 0.5);
        ep.steps[0].pi_own[0] = 1.2;
        assert!(mem.store(ep).is_err());
    }

    #[test]
    fn single_agent_stores_empty_product_as_one() {
        let ep = episode(0, 1, 2, 0.25);
        assert_eq!(ep.steps[0].pi_others, vec![1.0]);
        let mut mem = ReplayMemory::new(2).unwrap();
        mem.store(ep).unwrap();
    }

    #[test]
    fn misplaced_terminal_is_rejected() {
        let mut mem = ReplayMemory::new(4).unwrap();
        let mut ep = episode(0, 2, 3, 0.5);
        ep.steps[0].terminal = true;
        assert!(mem.store(ep).is_err());
        let mut ep = episode(0, 2, 3, 0.5);
        ep.steps[2].terminal = false;
        assert!(mem.store(ep).is_err());
    }

    #[test]
    fn sampling_an_singleton_memory_repeats_it() {
        let mut mem = ReplayMemory::new(4).unwrap();
        mem.store(episode(0, 2, 2, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = mem.sample(3, &mut rng).unwrap();
        assert_eq!(batch.len(), 3);
        assert!(batch.iter().all(|e| e.t_c == 0));
    }

    #[test]
    fn empty_memory_signals_not_ready() {
        let mem = ReplayMemory::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(mem.sample(2, &mut rng).is_none());
    }

    #[test]
    fn sampling_is_uniform_by_chi_square() {
        let mut mem = ReplayMemory::new(16).unwrap();
        for t in 0..10 {
            mem.store(episode(t, 2, 2, 0.5)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000usize;
        let mut counts = [0usize; 10];
        let batch = mem.sample(n, &mut rng).unwrap();
        for ep in batch {
            counts[ep.t_c] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| {
                let d = *c as f64 - expected;
                d * d / expected
            })
            .sum();
        // χ² critical value at p = 0.01 with 9 degrees of freedom.
        assert!(chi2 < 21.666, "χ² = {chi2} exceeds the 1% critical value");
    }

    #[test]
    fn sampling_does_not_mutate_storage() {
        let mut mem = ReplayMemory::new(4).unwrap();
        mem.store(episode(0, 2, 3, 0.5)).unwrap();
        let before: Vec<Episode> = mem.iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _ = mem.sample(8, &mut rng).unwrap();
        let after: Vec<Episode> = mem.iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn dump_restore_preserves_probabilities_to_high_fidelity() {
        let mut mem = ReplayMemory::new(8).unwrap();
        for t in 0..5 {
            let mut ep = episode(t, 3, 4, 0.3777777777777771 + t as f64 * 1e-13);
            ep.collection_epsilon = 0.123456789012345;
            mem.store(ep).unwrap();
        }
        let mut buf = Vec::new();
        mem.dump(&mut buf).unwrap();
        let back = ReplayMemory::restore(&buf[..], 8).unwrap();
        assert_eq!(back.len(), mem.len());
        for (a, b) in mem.iter().zip(back.iter()) {
            assert_eq!(a.t_c, b.t_c);
            for (sa, sb) in a.steps.iter().zip(&b.steps) {
                for (pa, pb) in sa.pi_own.iter().zip(&sb.pi_own) {
                    assert!(((pa - pb) / pa).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn order_is_insertion_order_truncated_to_capacity() {
        let mut mem = ReplayMemory::new(3).unwrap();
        for t in 0..7 {
            mem.store(episode(t, 2, 2, 0.5)).unwrap();
        }
        let t_cs: Vec<usize> = mem.iter().map(|e| e.t_c).collect();
        assert_eq!(t_cs, vec![4, 5, 6]);
    }
}
