//! Independent Q-learning agents: epsilon schedule, action selection with
//! recorded behaviour probabilities, TD targets against a frozen copy of the
//! network, importance-weighted replay corrections and fingerprint-augmented
//! observations.

pub mod policy;
pub mod tabular;
pub mod train;

pub use policy::{
    act, anneal_epsilon, fingerprint_augment, importance_weight, td_target, IsWeightState,
};
pub use tabular::{PartnerSchedule, TabularConfig, TabularTrainer};
pub use train::{compute_pi_current, EpisodeOutcome, EvalStats, Trainer};

use crate::nn::ModelKind;
use crate::{Error, Result};

/// Everything a training run needs to know. Method arms differ only through
/// the three boolean flags; nothing else may branch per method.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_episodes: usize,
    pub e_max: usize,
    /// Replay on/off. Off is expressed as capacity 1: train only on the
    /// newest episode.
    pub replay: bool,
    pub is_correction: bool,
    pub fingerprint: bool,
    pub model: ModelKind,
    pub n_agents: usize,
    pub capacity: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Copy the online parameters into the target network every this many
    /// training episodes.
    pub target_period: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    /// Rewards are scaled by this factor inside TD targets only; stored and
    /// reported returns stay in raw environment units.
    pub reward_scale: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Diagnostic mode: run the whole importance-sampling code path but force
    /// every applied weight to exactly 1.0. Used to verify flag isolation.
    pub force_unit_weights: bool,
}

impl TrainConfig {
    pub fn defaults(model: ModelKind, n_agents: usize, seed: u64) -> Self {
        TrainConfig {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.02,
            epsilon_anneal_episodes: 1500,
            e_max: 2500,
            replay: true,
            is_correction: false,
            fingerprint: false,
            model,
            n_agents,
            capacity: crate::replay::DEFAULT_CAPACITY,
            clip_lo: 0.01,
            clip_hi: 2.0,
            target_period: 100,
            hidden_dim: crate::nn::HIDDEN_DIM,
            lr: crate::nn::optim::DEFAULT_LR,
            reward_scale: 0.025,
            grad_clip: 10.0,
            seed,
            force_unit_weights: false,
        }
    }

    /// Episodes per training batch, the 30/n rule.
    pub fn batch_size(&self) -> usize {
        (30 / self.n_agents.max(1)).max(1)
    }

    /// Replay capacity with the no-replay baseline folded in.
    pub fn effective_capacity(&self) -> usize {
        if self.replay {
            self.capacity
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        if self.epsilon_end > self.epsilon_start
            || !(0.0..=1.0).contains(&self.epsilon_start)
            || !(0.0..=1.0).contains(&self.epsilon_end)
        {
            return Err(Error::Config("epsilon schedule endpoints out of order".into()));
        }
        if self.epsilon_anneal_episodes == 0 {
            return Err(Error::Config("anneal horizon must be positive".into()));
        }
        if self.n_agents == 0 {
            return Err(Error::Config("need at least one agent".into()));
        }
        if self.clip_lo <= 0.0 || self.clip_hi < self.clip_lo {
            return Err(Error::Config("weight clip bounds must satisfy 0 < lo ≤ hi".into()));
        }
        if self.capacity == 0 || self.target_period == 0 {
            return Err(Error::Config("capacity and target period must be positive".into()));
        }
        if self.lr <= 0.0 || self.reward_scale <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("lr, reward scale and grad clip must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_size_follows_the_thirty_over_n_rule() {
        let mut cfg = TrainConfig::defaults(ModelKind::Ff, 3, 0);
        assert_eq!(cfg.batch_size(), 10);
        cfg.n_agents = 5;
        assert_eq!(cfg.batch_size(), 6);
        cfg.n_agents = 2;
        assert_eq!(cfg.batch_size(), 15);
        cfg.n_agents = 40;
        assert_eq!(cfg.batch_size(), 1);
    }

    #[test]
    fn no_replay_forces_capacity_one() {
        let mut cfg = TrainConfig::defaults(ModelKind::Ff, 3, 0);
        cfg.replay = false;
        assert_eq!(cfg.effective_capacity(), 1);
        cfg.replay = true;
        assert_eq!(cfg.effective_capacity(), crate::replay::DEFAULT_CAPACITY);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = TrainConfig::defaults(ModelKind::Ff, 3, 0);
        cfg.gamma = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::defaults(ModelKind::Ff, 3, 0);
        cfg.epsilon_end = 2.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::defaults(ModelKind::Ff, 3, 0);
        cfg.clip_lo = 0.0;
        assert!(cfg.validate().is_err());
    }
}
