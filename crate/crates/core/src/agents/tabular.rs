//! Tabular independent Q-learning on the cooperative matrix game, against a
//! scripted partner whose policy may switch mid-training. This is the
//! setting where replay staleness is exactly quantifiable: the learner's
//! fixed point can be compared against the value-iteration oracle, with and
//! without the importance-sampling correction.
//!
//! Episodes are single transitions (the start state is drawn uniformly), so
//! the learned table targets the one-step expectation — the γ = 0 case where
//! the stale-replay fixed point has a closed form.

use super::policy::{act, importance_weight, IsWeightState};
use super::TrainConfig;
use crate::analysis::{MetricPoint, MetricSeries};
use crate::env::matrix::{exact_q, sup_distance, MatrixGame};
use crate::nn::ModelKind;
use crate::replay::{Episode, EpisodeStep, ReplayMemory};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The partner's scripted policy over training: an initial per-state
/// distribution, optionally replaced wholesale at a switch episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PartnerSchedule {
    pub initial: Vec<Vec<f64>>,
    pub switch: Option<(usize, Vec<Vec<f64>>)>,
}

impl PartnerSchedule {
    pub fn fixed(policy: Vec<Vec<f64>>) -> Self {
        PartnerSchedule {
            initial: policy,
            switch: None,
        }
    }

    pub fn switching(initial: Vec<Vec<f64>>, at: usize, then: Vec<Vec<f64>>) -> Self {
        PartnerSchedule {
            initial,
            switch: Some((at, then)),
        }
    }

    pub fn policy_at(&self, e: usize) -> &Vec<Vec<f64>> {
        match &self.switch {
            Some((at, then)) if e >= *at => then,
            _ => &self.initial,
        }
    }

    pub fn final_policy(&self) -> &Vec<Vec<f64>> {
        match &self.switch {
            Some((_, then)) => then,
            None => &self.initial,
        }
    }

    /// Phase index of a collection episode: 0 before the switch, 1 after.
    pub fn phase(&self, t_c: usize) -> usize {
        match &self.switch {
            Some((at, _)) if t_c >= *at => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TabularConfig {
    pub game: MatrixGame,
    pub partner: PartnerSchedule,
    /// Collection episodes (one transition each).
    pub episodes: usize,
    /// Constant learner exploration rate.
    pub epsilon: f64,
    pub is_correction: bool,
    pub capacity: usize,
    pub batch: usize,
    /// Run a training batch after every collected episode.
    pub train_interleaved: bool,
    /// Additional uniform-replay batches after collection finishes,
    /// evaluated under the final partner policy.
    pub offline_iters: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub seed: u64,
    pub force_unit_weights: bool,
}

impl TabularConfig {
    pub fn new(game: MatrixGame, partner: PartnerSchedule, seed: u64) -> Self {
        TabularConfig {
            game,
            partner,
            episodes: 800,
            epsilon: 0.5,
            is_correction: false,
            capacity: 2000,
            batch: 15,
            train_interleaved: true,
            offline_iters: 0,
            clip_lo: 0.01,
            clip_hi: 2.0,
            seed,
            force_unit_weights: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1]".into()));
        }
        if self.batch == 0 || self.capacity == 0 {
            return Err(Error::Config("batch and capacity must be positive".into()));
        }
        for policy in [&self.partner.initial]
            .into_iter()
            .chain(self.partner.switch.iter().map(|(_, p)| p))
        {
            if policy.len() != self.game.n_states {
                return Err(Error::Config("partner policy must cover every state".into()));
            }
            for dist in policy {
                let sum: f64 = dist.iter().sum();
                if dist.len() != self.game.n_actions || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config("partner policy rows must be distributions".into()));
                }
            }
        }
        Ok(())
    }
}

/// Weighted sample-average Q-learner: each (state, action) cell keeps the
/// running weighted mean of its targets, so the table converges to the
/// weighted fixed point rather than hovering at a constant step size.
pub struct TabularTrainer {
    pub cfg: TabularConfig,
    pipeline_cfg: TrainConfig,
    pub q: Vec<Vec<f64>>,
    weight_mass: Vec<Vec<f64>>,
    /// Drawn-sample counts per (state, action), split by partner phase.
    phase_draws: Vec<Vec<[u64; 2]>>,
    pub replay: ReplayMemory,
    pub ws: IsWeightState,
    rng: ChaCha8Rng,
    pub episodes_collected: usize,
    window_reward: (f64, u64),
    window_loss: (f64, u64),
    window_weight: (f64, u64),
}

impl TabularTrainer {
    pub fn new(cfg: TabularConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pipeline_cfg = TrainConfig::defaults(ModelKind::Ff, 2, cfg.seed);
        pipeline_cfg.clip_lo = cfg.clip_lo;
        pipeline_cfg.clip_hi = cfg.clip_hi;
        let (s, u) = (cfg.game.n_states, cfg.game.n_actions);
        Ok(TabularTrainer {
            q: vec![vec![0.0; u]; s],
            weight_mass: vec![vec![0.0; u]; s],
            phase_draws: vec![vec![[0, 0]; u]; s],
            replay: ReplayMemory::new(cfg.capacity)?,
            ws: IsWeightState::new(),
            rng: ChaCha8Rng::seed_from_u64(super::train::derive_seed(cfg.seed, 0x7AB)),
            episodes_collected: 0,
            window_reward: (0.0, 0),
            window_loss: (0.0, 0),
            window_weight: (0.0, 0),
            pipeline_cfg,
            cfg,
        })
    }

    fn sample_partner_action(&mut self, policy: &[Vec<f64>], s: usize) -> usize {
        let draw: f64 = self.rng.gen();
        let mut acc = 0.0;
        for (u, p) in policy[s].iter().enumerate() {
            acc += p;
            if draw < acc {
                return u;
            }
        }
        policy[s].len() - 1
    }

    /// Collects one single-transition episode and stores it.
    pub fn collect_episode(&mut self, e: usize) -> Result<()> {
        let game = self.cfg.game.clone();
        let s = self.rng.gen_range(0..game.n_states);
        let legal = vec![true; game.n_actions];
        let q_row = self.q[s].clone();
        let (u0, p0) = act(&q_row, self.cfg.epsilon, &legal, &mut self.rng)?;
        let policy = self.cfg.partner.policy_at(e).clone();
        let u1 = self.sample_partner_action(&policy, s);
        let p1 = policy[s][u1];
        let reward = game.reward(s, u0, u1);
        self.window_reward.0 += reward;
        self.window_reward.1 += 1;
        let step = EpisodeStep {
            obs: vec![vec![s as f64], vec![s as f64]],
            actions: vec![u0, u1],
            pi_own: vec![p0, p1],
            pi_others: vec![p1, p0],
            reward,
            terminal: true,
        };
        self.replay.store(Episode {
            steps: vec![step],
            t_c: e,
            collection_epsilon: self.cfg.epsilon,
        })?;
        self.episodes_collected = self.episodes_collected.max(e + 1);
        Ok(())
    }

    /// One batch of uniform replay draws, each applied as a weighted
    /// sample-average update. `e_now` fixes which partner policy counts as
    /// current for the importance ratio.
    pub fn train_batch(&mut self, e_now: usize) -> Result<()> {
        let batch: Vec<Episode> = match self.replay.sample(self.cfg.batch, &mut self.rng) {
            Some(refs) => refs.into_iter().cloned().collect(),
            None => return Ok(()),
        };
        let current = self.cfg.partner.policy_at(e_now).clone();
        for ep in &batch {
            let step = &ep.steps[0];
            let s = step.obs[0][0] as usize;
            let (u0, u1) = (step.actions[0], step.actions[1]);
            let pi_stored = step.pi_others[0];
            let w = if self.cfg.is_correction {
                let pi_now = current[s][u1];
                let w = importance_weight(pi_stored, pi_now, 2, &self.pipeline_cfg, &mut self.ws)?;
                if self.cfg.force_unit_weights {
                    1.0
                } else {
                    w
                }
            } else {
                1.0
            };
            let y = step.reward;
            self.weight_mass[s][u0] += w;
            let delta = y - self.q[s][u0];
            self.q[s][u0] += w / self.weight_mass[s][u0] * delta;
            self.phase_draws[s][u0][self.cfg.partner.phase(ep.t_c)] += 1;
            self.window_loss.0 += w * delta * delta;
            self.window_loss.1 += 1;
            self.window_weight.0 += w;
            self.window_weight.1 += 1;
        }
        Ok(())
    }

    fn drain_window(&mut self) -> (f64, f64, f64) {
        let reward = if self.window_reward.1 > 0 {
            self.window_reward.0 / self.window_reward.1 as f64
        } else {
            0.0
        };
        let loss = if self.window_loss.1 > 0 {
            self.window_loss.0 / self.window_loss.1 as f64
        } else {
            0.0
        };
        let weight = if self.window_weight.1 > 0 {
            self.window_weight.0 / self.window_weight.1 as f64
        } else {
            1.0
        };
        self.window_reward = (0.0, 0);
        self.window_loss = (0.0, 0);
        self.window_weight = (0.0, 0);
        (reward, loss, weight)
    }

    /// The full protocol: interleaved collect/train over the episode budget,
    /// then any configured offline passes under the final partner policy.
    pub fn run(&mut self, eval_every: usize) -> Result<MetricSeries> {
        let mut metrics = MetricSeries::default();
        for e in 0..self.cfg.episodes {
            self.collect_episode(e)?;
            if self.cfg.train_interleaved {
                self.train_batch(e)?;
            }
            if (e + 1) % eval_every == 0 || e + 1 == self.cfg.episodes {
                let (reward, loss, weight) = self.drain_window();
                metrics.points.push(MetricPoint {
                    episode: e + 1,
                    win_rate: 0.0,
                    mean_return: reward,
                    mean_td_loss: loss,
                    mean_is_weight: weight,
                });
            }
        }
        for _ in 0..self.cfg.offline_iters {
            self.train_batch(self.cfg.episodes)?;
        }
        Ok(metrics)
    }

    /// Sup-norm distance between the learned table and the value-iteration
    /// oracle under the given partner policy.
    pub fn distance_to_exact(&self, partner: &[Vec<f64>]) -> Result<f64> {
        let oracle = exact_q(&self.cfg.game, partner, 1e-10)?;
        Ok(sup_distance(&self.q, &oracle))
    }

    /// Closed-form fixed point of the *uncorrected* learner: for each cell,
    /// the drawn-sample phase mixture of the two partners' exact one-step
    /// values, with the mixture rate read off the recorded draw counts.
    pub fn mixture_table(&self) -> Vec<Vec<f64>> {
        let q_a = self.cfg.game.expected_payoff_table(&self.cfg.partner.initial);
        let q_b = self.cfg.game.expected_payoff_table(self.cfg.partner.final_policy());
        (0..self.cfg.game.n_states)
            .map(|s| {
                (0..self.cfg.game.n_actions)
                    .map(|u| {
                        let [a, b] = self.phase_draws[s][u];
                        let total = a + b;
                        if total == 0 {
                            return 0.5 * (q_a[s][u] + q_b[s][u]);
                        }
                        let lambda = a as f64 / total as f64;
                        lambda * q_a[s][u] + (1.0 - lambda) * q_b[s][u]
                    })
                    .collect()
            })
            .collect()
    }

    /// Fraction of drawn samples that came from the pre-switch phase.
    pub fn phase_a_fraction(&self) -> f64 {
        let mut a = 0u64;
        let mut total = 0u64;
        for row in &self.phase_draws {
            for cell in row {
                a += cell[0];
                total += cell[0] + cell[1];
            }
        }
        if total == 0 {
            0.0
        } else {
            a as f64 / total as f64
        }
    }
}

/// The two scripted partner policies used by the staleness studies. The
/// importance ratios they induce (≈0.54 and ≈1.86) stay inside the default
/// clip interval, so the correction is exact rather than truncated.
pub fn study_partners(n_states: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let a = vec![vec![0.65, 0.35]; n_states];
    let b = vec![vec![0.35, 0.65]; n_states];
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_cfg(seed: u64) -> TabularConfig {
        let game = MatrixGame::pinned_two_state();
        let (_, b) = study_partners(game.n_states);
        TabularConfig::new(game, PartnerSchedule::fixed(b), seed)
    }

    #[test]
    fn stationary_partner_converges_to_the_oracle_with_and_without_is() {
        for is_correction in [false, true] {
            let mut cfg = base_cfg(42);
            cfg.is_correction = is_correction;
            cfg.episodes = 600;
            cfg.offline_iters = 2000;
            let mut tr = TabularTrainer::new(cfg).unwrap();
            tr.run(200).unwrap();
            let partner = tr.cfg.partner.final_policy().clone();
            let d = tr.distance_to_exact(&partner).unwrap();
            assert!(d < 0.05, "is={is_correction}: distance {d}");
        }
    }

    #[test]
    fn stationary_ratios_keep_unit_weights_exactly() {
        let mut cfg = base_cfg(7);
        cfg.is_correction = true;
        cfg.episodes = 100;
        let mut tr = TabularTrainer::new(cfg).unwrap();
        tr.run(100).unwrap();
        // With a fixed partner, every ratio is exactly 1 and the running
        // average never leaves 1.
        assert_eq!(tr.ws.running_average(), 1.0);
    }

    #[test]
    fn switching_partner_separates_corrected_from_uncorrected() {
        let game = MatrixGame::pinned_two_state();
        let (pa, pb) = study_partners(game.n_states);
        let schedule = PartnerSchedule::switching(pa, 500, pb.clone());
        let exact_b = exact_q(&game, &pb, 1e-10).unwrap();

        let mut corrected_q = None;
        let mut plain = None;
        for is_correction in [true, false] {
            let mut cfg = TabularConfig::new(game.clone(), schedule.clone(), 11);
            cfg.is_correction = is_correction;
            cfg.episodes = 1000;
            cfg.train_interleaved = false;
            cfg.offline_iters = 4000;
            let mut tr = TabularTrainer::new(cfg).unwrap();
            tr.run(500).unwrap();
            if is_correction {
                corrected_q = Some(tr.distance_to_exact(&pb).unwrap());
            } else {
                let mix = tr.mixture_table();
                plain = Some((
                    sup_distance(&tr.q, &mix),
                    sup_distance(&mix, &exact_b),
                    tr.phase_a_fraction(),
                ));
            }
        }
        let corrected = corrected_q.unwrap();
        let (plain_vs_mix, mix_gap, lambda) = plain.unwrap();
        assert!(corrected < 0.05, "corrected distance {corrected}");
        assert!(plain_vs_mix < 0.05, "plain-vs-mixture distance {plain_vs_mix}");
        // The analytic staleness gap is large compared to both tolerances.
        assert!(mix_gap > 0.2, "mixture gap {mix_gap}");
        assert!((lambda - 0.5).abs() < 0.05, "phase balance {lambda}");
    }

    #[test]
    fn forced_unit_weights_match_plain_updates() {
        let game = MatrixGame::pinned_two_state();
        let (pa, pb) = study_partners(game.n_states);
        let schedule = PartnerSchedule::switching(pa, 100, pb);
        let run = |is_correction: bool, force: bool| -> Vec<Vec<f64>> {
            let mut cfg = TabularConfig::new(game.clone(), schedule.clone(), 23);
            cfg.is_correction = is_correction;
            cfg.force_unit_weights = force;
            cfg.episodes = 200;
            cfg.offline_iters = 500;
            let mut tr = TabularTrainer::new(cfg).unwrap();
            tr.run(100).unwrap();
            tr.q
        };
        let forced = run(true, true);
        let plain = run(false, false);
        assert_eq!(forced, plain);
    }

    #[test]
    fn partner_schedule_switches_at_the_declared_episode() {
        let (pa, pb) = study_partners(2);
        let sched = PartnerSchedule::switching(pa.clone(), 10, pb.clone());
        assert_eq!(sched.policy_at(9), &pa);
        assert_eq!(sched.policy_at(10), &pb);
        assert_eq!(sched.phase(9), 0);
        assert_eq!(sched.phase(10), 1);
        assert_eq!(sched.final_policy(), &pb);
    }
}
