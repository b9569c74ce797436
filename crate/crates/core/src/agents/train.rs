//! The training loop for neural independent Q-learners on the skirmish
//! simulator: collect one episode per training step, store it, sample a
//! batch of full episodes and descend the (optionally importance-weighted)
//! squared TD error, with per-agent networks and frozen target copies.

use super::policy::{
    act, action_probability, anneal_epsilon, fingerprint_augment, greedy_action, importance_weight,
    td_target, IsWeightState,
};
use super::TrainConfig;
use crate::analysis::{MetricPoint, MetricSeries};
use crate::env::skirmish::{reset_with, step, EnvState, SkirmishConfig};
use crate::env::trace::{initial_record, step_record, TraceRecord};
use crate::env::ActionSpec;
use crate::nn::{
    clip_global_norm, gru_backward, gru_forward_traced, gru_step, mlp_backward, mlp_forward,
    mlp_forward_traced, FfTrace, Gradients, GruState, GruTrace, ModelKind, Optimizer, ParamSet,
};
use crate::replay::{Episode, EpisodeStep, ReplayMemory};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64-style stream derivation so every consumer of randomness gets
/// its own deterministic seed from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_NET: u64 = 0x100;
const STREAM_ACTIONS: u64 = 0x200;
const STREAM_ENV: u64 = 0x300;
const STREAM_EVAL: u64 = 0x400;

/// Outcome of one collected episode.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOutcome {
    pub raw_return: f64,
    pub victory: bool,
    pub length: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    pub win_rate: f64,
    pub mean_return: f64,
}

/// Per-batch accounting used for metrics.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub loss_terms: u64,
    pub weight_sum: f64,
    pub weight_terms: u64,
}

/// A step is live for an agent while the agent itself is alive. Dead agents
/// are forced to noop with probability 1 and see an all-zero base
/// observation, which is exactly the test applied here.
fn step_active(step: &EpisodeStep, agent: usize, base_dim: usize) -> bool {
    step.obs[agent][..base_dim].iter().any(|v| *v != 0.0)
}

/// Re-evaluates every step of a stored episode under the current networks
/// and the current exploration rate, returning `π₋ₐ(u₋ₐ)` per step and agent
/// for the actions actually taken. Recurrent hidden states are re-unrolled
/// from the stored observation sequences. Steps where an agent was dead keep
/// that agent's deterministic probability of 1.
pub fn compute_pi_current(
    nets: &[ParamSet],
    episode: &Episode,
    eps_now: f64,
    base_dim: usize,
) -> Vec<Vec<f64>> {
    let qs: Vec<Vec<Vec<f64>>> = nets
        .iter()
        .enumerate()
        .map(|(a, net)| forward_episode_qs(net, episode, a))
        .collect();
    let own = pi_own_from_qs(&qs, episode, eps_now, base_dim);
    pi_others_from_own(&own)
}

fn pi_own_from_qs(
    qs: &[Vec<Vec<f64>>],
    episode: &Episode,
    eps_now: f64,
    base_dim: usize,
) -> Vec<Vec<f64>> {
    let n = episode.n_agents();
    let n_actions = qs[0][0].len();
    let legal = vec![true; n_actions];
    episode
        .steps
        .iter()
        .enumerate()
        .map(|(t, step)| {
            (0..n)
                .map(|i| {
                    if step_active(step, i, base_dim) {
                        action_probability(&qs[i][t], eps_now, &legal, step.actions[i])
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect()
}

fn pi_others_from_own(own: &[Vec<f64>]) -> Vec<Vec<f64>> {
    own.iter()
        .map(|row| {
            (0..row.len())
                .map(|a| {
                    row.iter()
                        .enumerate()
                        .filter(|(i, _)| *i != a)
                        .map(|(_, p)| p)
                        .product()
                })
                .collect()
        })
        .collect()
}

/// Q-values for one agent over a whole stored episode, without keeping a
/// backward trace.
fn forward_episode_qs(net: &ParamSet, episode: &Episode, agent: usize) -> Vec<Vec<f64>> {
    match net.kind {
        ModelKind::Ff => episode
            .steps
            .iter()
            .map(|s| mlp_forward(net, &s.obs[agent]))
            .collect(),
        ModelKind::Rnn => {
            let mut h = GruState::zeros(net.hidden_dim);
            episode
                .steps
                .iter()
                .map(|s| {
                    let (q, h2) = gru_step(net, &h, &s.obs[agent]);
                    h = h2;
                    q
                })
                .collect()
        }
    }
}

enum EpisodeTrace {
    Ff(Vec<FfTrace>),
    Gru(GruTrace),
}

fn forward_episode_traced(
    net: &ParamSet,
    episode: &Episode,
    agent: usize,
) -> (Vec<Vec<f64>>, EpisodeTrace) {
    match net.kind {
        ModelKind::Ff => {
            let mut qs = Vec::with_capacity(episode.steps.len());
            let mut traces = Vec::with_capacity(episode.steps.len());
            for s in &episode.steps {
                let (q, tr) = mlp_forward_traced(net, &s.obs[agent]);
                qs.push(q);
                traces.push(tr);
            }
            (qs, EpisodeTrace::Ff(traces))
        }
        ModelKind::Rnn => {
            let seq: Vec<Vec<f64>> = episode.steps.iter().map(|s| s.obs[agent].clone()).collect();
            let (qs, trace) = gru_forward_traced(net, &seq);
            (qs, EpisodeTrace::Gru(trace))
        }
    }
}

fn backward_episode(
    net: &ParamSet,
    trace: &EpisodeTrace,
    upstream: &[Vec<f64>],
    grads: &mut Gradients,
) {
    match trace {
        EpisodeTrace::Ff(traces) => mlp_backward(net, traces, upstream, grads),
        EpisodeTrace::Gru(trace) => gru_backward(net, trace, upstream, grads),
    }
}

/// Per-step, per-agent loss weights for a batch. All ones when the
/// importance correction is off; otherwise the full recorded-probability
/// pipeline, with the running average advanced in a fixed deterministic
/// order (episode, then step, then agent). The diagnostic
/// `force_unit_weights` mode runs the pipeline and then overrides every
/// weight with exactly 1.0.
pub fn compute_batch_weights(
    nets: &[ParamSet],
    batch: &[Episode],
    cfg: &TrainConfig,
    ws: &mut IsWeightState,
    eps_now: f64,
    base_dim: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(batch.len());
    for ep in batch {
        let n = ep.n_agents();
        if !cfg.is_correction {
            out.push(vec![vec![1.0; n]; ep.steps.len()]);
            continue;
        }
        let pi_now = compute_pi_current(nets, ep, eps_now, base_dim);
        let mut per_ep = Vec::with_capacity(ep.steps.len());
        for (t, step) in ep.steps.iter().enumerate() {
            let mut per_step = Vec::with_capacity(n);
            for a in 0..n {
                let w = if step_active(step, a, base_dim) {
                    let w = importance_weight(step.pi_others[a], pi_now[t][a], n, cfg, ws)?;
                    if cfg.force_unit_weights {
                        1.0
                    } else {
                        w
                    }
                } else {
                    1.0
                };
                per_step.push(w);
            }
            per_ep.push(per_step);
        }
        out.push(per_ep);
    }
    Ok(out)
}

/// Loss and gradients for a batch of full episodes: per-step squared TD
/// errors against the frozen targets, multiplied by the supplied weights,
/// summed over steps, episodes and agents. Gradients flow through the whole
/// unroll (BPTT for recurrent models). Steps where an agent was dead are
/// excluded from that agent's loss.
pub fn batch_loss_and_grads(
    nets: &[ParamSet],
    targets: &[ParamSet],
    batch: &[Episode],
    weights: &[Vec<Vec<f64>>],
    cfg: &TrainConfig,
    base_dim: usize,
) -> (f64, u64, Vec<Gradients>, f64, u64) {
    let n = nets.len();
    let mut grads: Vec<Gradients> = nets.iter().map(|p| p.zero_grads()).collect();
    let mut loss_sum = 0.0;
    let mut loss_terms = 0u64;
    let mut weight_sum = 0.0;
    let mut weight_terms = 0u64;
    for (ep, ep_weights) in batch.iter().zip(weights) {
        let len = ep.steps.len();
        for a in 0..n {
            let (qs, trace) = forward_episode_traced(&nets[a], ep, a);
            let target_qs = forward_episode_qs(&targets[a], ep, a);
            let mut upstream = vec![vec![0.0; nets[a].n_actions]; len];
            for (t, s) in ep.steps.iter().enumerate() {
                if !step_active(s, a, base_dim) {
                    continue;
                }
                let r = s.reward * cfg.reward_scale;
                let y = if s.terminal {
                    r
                } else {
                    td_target(r, &target_qs[t + 1], false, cfg.gamma)
                };
                let w = ep_weights[t][a];
                let delta = y - qs[t][s.actions[a]];
                loss_sum += w * delta * delta;
                loss_terms += 1;
                weight_sum += w;
                weight_terms += 1;
                upstream[t][s.actions[a]] = -2.0 * w * delta;
            }
            backward_episode(&nets[a], &trace, &upstream, &mut grads[a]);
        }
    }
    (loss_sum, loss_terms, grads, weight_sum, weight_terms)
}

/// Full training state for one run on the skirmish simulator.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub env_cfg: SkirmishConfig,
    pub nets: Vec<ParamSet>,
    pub targets: Vec<ParamSet>,
    opts: Vec<Optimizer>,
    pub ws: IsWeightState,
    pub replay: ReplayMemory,
    action_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    pub nonfinite_incidents: usize,
    window: BatchStats,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, env_cfg: SkirmishConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.n_agents != env_cfg.n_allies {
            return Err(Error::Config(format!(
                "config declares {} agents but the scenario has {} allies",
                cfg.n_agents, env_cfg.n_allies
            )));
        }
        if cfg.n_agents < 2 {
            return Err(Error::Config("skirmish scenarios need at least two agents".into()));
        }
        let input_dim = env_cfg.obs_dim() + if cfg.fingerprint { 2 } else { 0 };
        let n_actions = env_cfg.n_actions();
        let mut nets = Vec::with_capacity(cfg.n_agents);
        for a in 0..cfg.n_agents {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_NET + a as u64));
            let net = match cfg.model {
                ModelKind::Ff => ParamSet::new_ff(input_dim, cfg.hidden_dim, n_actions, &mut rng)?,
                ModelKind::Rnn => ParamSet::new_gru(input_dim, cfg.hidden_dim, n_actions, &mut rng)?,
            };
            nets.push(net);
        }
        let targets = nets.clone();
        let opts = (0..cfg.n_agents).map(|_| Optimizer::rmsprop(cfg.lr)).collect();
        let replay = ReplayMemory::new(cfg.effective_capacity())?;
        Ok(Trainer {
            action_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ACTIONS)),
            sample_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_ACTIONS + 1)),
            cfg,
            env_cfg,
            nets,
            targets,
            opts,
            ws: IsWeightState::new(),
            replay: replay,
            nonfinite_incidents: 0,
            window: BatchStats::default(),
        })
    }

    /// Observation width before fingerprint augmentation.
    pub fn base_dim(&self) -> usize {
        self.env_cfg.obs_dim()
    }

    fn agent_input(&self, base: &[f64], eps: f64, e: usize) -> Vec<f64> {
        if self.cfg.fingerprint {
            fingerprint_augment(base, eps, e, self.cfg.e_max)
        } else {
            base.to_vec()
        }
    }

    /// Plays one epsilon-greedy episode under the current parameters and
    /// returns it augmented with behaviour probabilities, ready to store.
    pub fn collect_episode(&mut self, e: usize) -> Result<(Episode, EpisodeOutcome)> {
        let eps = anneal_epsilon(e, &self.cfg);
        let env_seed = derive_seed(self.cfg.seed, STREAM_ENV.wrapping_add(e as u64));
        let (mut state, mut obs) = reset_with(self.env_cfg.clone(), env_seed)?;
        let n = self.cfg.n_agents;
        let n_actions = self.env_cfg.n_actions();
        let legal = vec![true; n_actions];
        let noop = n_actions - 1;
        let mut hidden: Vec<GruState> =
            (0..n).map(|_| GruState::zeros(self.cfg.hidden_dim)).collect();
        let mut steps = Vec::new();
        let mut raw_return = 0.0;
        let mut victory = false;
        loop {
            let mut inputs = Vec::with_capacity(n);
            let mut actions = Vec::with_capacity(n);
            let mut pi_own = Vec::with_capacity(n);
            for a in 0..n {
                let input = self.agent_input(&obs[a].features, eps, e);
                let alive = state.units[a].alive;
                let (action, p) = if alive {
                    let q = match self.cfg.model {
                        ModelKind::Ff => mlp_forward(&self.nets[a], &input),
                        ModelKind::Rnn => {
                            let (q, h2) = gru_step(&self.nets[a], &hidden[a], &input);
                            hidden[a] = h2;
                            q
                        }
                    };
                    act(&q, eps, &legal, &mut self.action_rng)?
                } else {
                    // Dead agents are forced to noop deterministically; the
                    // recurrent state still advances over the zero input so
                    // replay re-unrolls stay aligned.
                    if self.cfg.model == ModelKind::Rnn {
                        let (_, h2) = gru_step(&self.nets[a], &hidden[a], &input);
                        hidden[a] = h2;
                    }
                    (noop, 1.0)
                };
                inputs.push(input);
                actions.push(action);
                pi_own.push(p);
            }
            let pi_others: Vec<f64> = (0..n)
                .map(|a| {
                    pi_own
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != a)
                        .map(|(_, p)| p)
                        .product()
                })
                .collect();
            let specs: Vec<ActionSpec> = actions
                .iter()
                .map(|&idx| ActionSpec::from_index(idx, self.env_cfg.n_enemies))
                .collect::<Result<_>>()?;
            let res = step(&state, &specs)?;
            raw_return += res.reward;
            victory = res.victory;
            steps.push(EpisodeStep {
                obs: inputs,
                actions,
                pi_own,
                pi_others,
                reward: res.reward,
                terminal: res.terminal,
            });
            state = res.state;
            obs = res.observations;
            if res.terminal {
                break;
            }
        }
        let length = steps.len();
        Ok((
            Episode {
                steps,
                t_c: e,
                collection_epsilon: eps,
            },
            EpisodeOutcome {
                raw_return,
                victory,
                length,
            },
        ))
    }

    /// Samples a batch and applies one optimizer step per agent. Returns the
    /// batch statistics, or `None` when the memory is empty or the loss came
    /// out non-finite (the incident is counted and the update skipped).
    pub fn train_on_batch(&mut self, e: usize) -> Result<Option<BatchStats>> {
        let b = self.cfg.batch_size();
        let batch: Vec<Episode> = match self.replay.sample(b, &mut self.sample_rng) {
            Some(refs) => refs.into_iter().cloned().collect(),
            None => return Ok(None),
        };
        let eps_now = anneal_epsilon(e, &self.cfg);
        let base_dim = self.base_dim();
        let weights = compute_batch_weights(
            &self.nets,
            &batch,
            &self.cfg,
            &mut self.ws,
            eps_now,
            base_dim,
        )?;
        let (loss_sum, loss_terms, mut grads, weight_sum, weight_terms) = batch_loss_and_grads(
            &self.nets,
            &self.targets,
            &batch,
            &weights,
            &self.cfg,
            base_dim,
        );
        if !loss_sum.is_finite() {
            self.nonfinite_incidents += 1;
            return Ok(None);
        }
        for (a, g) in grads.iter_mut().enumerate() {
            clip_global_norm(g, self.cfg.grad_clip);
            if !self.opts[a].step(&mut self.nets[a], g)? {
                self.nonfinite_incidents += 1;
            }
        }
        let stats = BatchStats {
            loss_sum,
            loss_terms,
            weight_sum,
            weight_terms,
        };
        self.window.loss_sum += stats.loss_sum;
        self.window.loss_terms += stats.loss_terms;
        self.window.weight_sum += stats.weight_sum;
        self.window.weight_terms += stats.weight_terms;
        Ok(Some(stats))
    }

    /// Copies the online parameters into the target networks.
    pub fn sync_targets(&mut self) {
        self.targets = self.nets.clone();
    }

    /// Plays one fully greedy episode on frozen parameters. Returns the raw
    /// return, the victory flag and a replayable trace.
    pub fn play_greedy_episode(
        &self,
        env_seed: u64,
        fp: (f64, usize),
    ) -> Result<(f64, bool, Vec<TraceRecord>)> {
        let (mut state, mut obs) = reset_with(self.env_cfg.clone(), env_seed)?;
        let n = self.cfg.n_agents;
        let n_actions = self.env_cfg.n_actions();
        let legal = vec![true; n_actions];
        let noop = n_actions - 1;
        let mut hidden: Vec<GruState> =
            (0..n).map(|_| GruState::zeros(self.cfg.hidden_dim)).collect();
        let mut records = vec![initial_record(&state)];
        let mut raw_return = 0.0;
        let mut victory = false;
        loop {
            let mut specs = Vec::with_capacity(n);
            for a in 0..n {
                let input = self.agent_input(&obs[a].features, fp.0, fp.1);
                let alive = state.units[a].alive;
                let action = if alive {
                    let q = match self.cfg.model {
                        ModelKind::Ff => mlp_forward(&self.nets[a], &input),
                        ModelKind::Rnn => {
                            let (q, h2) = gru_step(&self.nets[a], &hidden[a], &input);
                            hidden[a] = h2;
                            q
                        }
                    };
                    greedy_action(&q, &legal).expect("legal mask is all true")
                } else {
                    if self.cfg.model == ModelKind::Rnn {
                        let (_, h2) = gru_step(&self.nets[a], &hidden[a], &input);
                        hidden[a] = h2;
                    }
                    noop
                };
                specs.push(ActionSpec::from_index(action, self.env_cfg.n_enemies)?);
            }
            let res = step(&state, &specs)?;
            raw_return += res.reward;
            victory = res.victory;
            records.push(step_record(&res.state, &specs, res.reward, res.terminal));
            state = res.state;
            obs = res.observations;
            if res.terminal {
                break;
            }
        }
        Ok((raw_return, victory, records))
    }

    /// Runs a block of greedy evaluation episodes on frozen parameters.
    /// Evaluation seeds derive from the run seed and the episode index, so
    /// they never perturb the training streams.
    pub fn evaluate(&self, e: usize, n_episodes: usize) -> Result<EvalStats> {
        let eps_fp = anneal_epsilon(e, &self.cfg);
        let mut wins = 0usize;
        let mut total = 0.0;
        for k in 0..n_episodes {
            let env_seed = derive_seed(
                self.cfg.seed,
                STREAM_EVAL
                    .wrapping_add(1 + e as u64)
                    .wrapping_mul(10_007)
                    .wrapping_add(k as u64),
            );
            let (ret, victory, _) = self.play_greedy_episode(env_seed, (eps_fp, e))?;
            if victory {
                wins += 1;
            }
            total += ret;
        }
        Ok(EvalStats {
            win_rate: wins as f64 / n_episodes as f64,
            mean_return: total / n_episodes as f64,
        })
    }

    fn drain_window(&mut self) -> (f64, f64) {
        let loss = if self.window.loss_terms > 0 {
            self.window.loss_sum / self.window.loss_terms as f64
        } else {
            0.0
        };
        let weight = if self.window.weight_terms > 0 {
            self.window.weight_sum / self.window.weight_terms as f64
        } else {
            1.0
        };
        self.window = BatchStats::default();
        (loss, weight)
    }

    /// The standard loop: collect one episode, store it, train on a sampled
    /// batch, copy targets on the configured period, and run a greedy
    /// evaluation block every `eval_every` episodes. Returns the metric
    /// series and whether training collapsed (non-finite parameters).
    pub fn run(
        &mut self,
        episodes: usize,
        eval_every: usize,
        eval_episodes: usize,
    ) -> Result<(MetricSeries, bool)> {
        let mut metrics = MetricSeries::default();
        for e in 0..episodes {
            if e > 0 && e % self.cfg.target_period == 0 {
                self.sync_targets();
            }
            let (episode, _) = self.collect_episode(e)?;
            self.replay.store(episode)?;
            match self.train_on_batch(e) {
                Ok(_) => {}
                Err(Error::NonFinite(_)) => {
                    // Training collapse: surface what we have, flagged.
                    return Ok((metrics, true));
                }
                Err(err) => return Err(err),
            }
            if (e + 1) % eval_every == 0 || e + 1 == episodes {
                let stats = self.evaluate(e, eval_episodes)?;
                let (mean_td_loss, mean_is_weight) = self.drain_window();
                metrics.points.push(MetricPoint {
                    episode: e + 1,
                    win_rate: stats.win_rate,
                    mean_return: stats.mean_return,
                    mean_td_loss,
                    mean_is_weight,
                });
            }
        }
        Ok((metrics, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Scenario;
    use crate::nn::{grad_check, Dense, Layers, Mat};

    fn tiny_env(n: usize) -> SkirmishConfig {
        let mut cfg = SkirmishConfig::for_scenario(Scenario::M3v3);
        cfg.n_allies = n;
        cfg.n_enemies = n;
        cfg.cd_max = 4;
        cfg.t_max = 20;
        cfg
    }

    fn tiny_cfg(n: usize, model: ModelKind, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::defaults(model, n, seed);
        cfg.hidden_dim = 8;
        cfg
    }

    #[test]
    fn collected_episodes_pass_replay_validation() {
        let mut tr = Trainer::new(tiny_cfg(2, ModelKind::Ff, 3), tiny_env(2)).unwrap();
        for e in 0..3 {
            let (ep, outcome) = tr.collect_episode(e).unwrap();
            assert_eq!(outcome.length, ep.steps.len());
            tr.replay.store(ep).unwrap();
        }
        assert_eq!(tr.replay.len(), 3);
    }

    #[test]
    fn stationarity_limit_gives_unit_ratios() {
        // With unchanged networks and unchanged epsilon, the recomputed
        // probabilities equal the stored ones for every live step.
        let mut tr = Trainer::new(tiny_cfg(2, ModelKind::Rnn, 5), tiny_env(2)).unwrap();
        let e = 40;
        let (ep, _) = tr.collect_episode(e).unwrap();
        let eps = ep.collection_epsilon;
        let base_dim = tr.base_dim();
        let pi_now = compute_pi_current(&tr.nets, &ep, eps, base_dim);
        for (t, step) in ep.steps.iter().enumerate() {
            for a in 0..2 {
                assert!(
                    (pi_now[t][a] - step.pi_others[a]).abs() < 1e-12,
                    "step {t} agent {a}: {} vs {}",
                    pi_now[t][a],
                    step.pi_others[a]
                );
            }
        }
    }

    fn biased_net(input_dim: usize, n_actions: usize, favoured: usize) -> ParamSet {
        let mut ps = ParamSet::zeros(ModelKind::Ff, input_dim, 2, n_actions);
        let mut head = Dense::zeros(n_actions, 2);
        head.b[favoured] = 1.0;
        ps.layers = Layers::Ff {
            l1: Dense::zeros(2, input_dim),
            l2: Dense::zeros(2, 2),
            head,
        };
        ps
    }

    fn hand_episode(actions: Vec<Vec<usize>>, n_actions: usize) -> Episode {
        // Two agents, stored with uniform-ish probabilities; obs are nonzero
        // so every step counts as live.
        let len = actions.len();
        let steps = actions
            .into_iter()
            .enumerate()
            .map(|(t, acts)| EpisodeStep {
                obs: vec![vec![0.5, 0.25]; 2],
                actions: acts,
                pi_own: vec![0.5; 2],
                pi_others: vec![0.5; 2],
                reward: 1.0,
                terminal: t + 1 == len,
            })
            .collect();
        let _ = n_actions;
        Episode {
            steps,
            t_c: 0,
            collection_epsilon: 0.5,
        }
    }

    #[test]
    fn pinned_two_agent_recomputation_fixture() {
        // Nets with a dominating head bias make the greedy action obvious:
        // agent 0 always prefers action 5, agent 1 always prefers action 2.
        // ε = 0.02 over K = 8 actions: greedy 0.9825, otherwise 0.0025.
        let n_actions = 8;
        let nets = vec![biased_net(2, n_actions, 5), biased_net(2, n_actions, 2)];
        let ep = hand_episode(vec![vec![5, 0], vec![1, 2]], n_actions);
        let pi = compute_pi_current(&nets, &ep, 0.02, 2);
        let hi = 1.0 - 0.02 + 0.02 / 8.0;
        let lo = 0.02 / 8.0;
        // π₋ₐ for agent 0 is agent 1's probability and vice versa.
        assert!((pi[0][0] - lo).abs() < 1e-15); // agent 1 took 0, greedy is 2
        assert!((pi[0][1] - hi).abs() < 1e-15); // agent 0 took its greedy 5
        assert!((pi[1][0] - hi).abs() < 1e-15); // agent 1 took its greedy 2
        assert!((pi[1][1] - lo).abs() < 1e-15); // agent 0 took 1, greedy is 5
    }

    #[test]
    fn unit_weights_reduce_to_plain_squared_td_error() {
        let cfg = tiny_cfg(2, ModelKind::Ff, 7);
        let mut tr = Trainer::new(cfg.clone(), tiny_env(2)).unwrap();
        let (ep, _) = tr.collect_episode(0).unwrap();
        let batch = vec![ep];
        let weights = vec![vec![vec![1.0; 2]; batch[0].steps.len()]];
        let base_dim = tr.base_dim();
        let (loss, terms, grads, wsum, wterms) =
            batch_loss_and_grads(&tr.nets, &tr.targets, &batch, &weights, &cfg, base_dim);
        // Independent oracle: recompute the unweighted Eq.-style loss from
        // public forward passes only.
        let mut expect = 0.0;
        let mut expect_terms = 0u64;
        for a in 0..2 {
            let qs: Vec<Vec<f64>> = batch[0]
                .steps
                .iter()
                .map(|s| mlp_forward(&tr.nets[a], &s.obs[a]))
                .collect();
            let tqs: Vec<Vec<f64>> = batch[0]
                .steps
                .iter()
                .map(|s| mlp_forward(&tr.targets[a], &s.obs[a]))
                .collect();
            for (t, s) in batch[0].steps.iter().enumerate() {
                if !step_active(s, a, base_dim) {
                    continue;
                }
                let r = s.reward * cfg.reward_scale;
                let y = if s.terminal {
                    r
                } else {
                    r + cfg.gamma * tqs[t + 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                };
                let d = y - qs[t][s.actions[a]];
                expect += d * d;
                expect_terms += 1;
            }
        }
        assert!((loss - expect).abs() < 1e-9 * expect.abs().max(1.0));
        assert_eq!(terms, expect_terms);
        assert_eq!(wterms, expect_terms);
        assert!((wsum - expect_terms as f64).abs() < 1e-12);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn zero_td_errors_give_zero_loss_and_gradients() {
        let cfg = tiny_cfg(2, ModelKind::Ff, 7);
        let env = tiny_env(2);
        let input_dim = env.obs_dim();
        let nets = vec![
            ParamSet::zeros(ModelKind::Ff, input_dim, 4, env.n_actions()),
            ParamSet::zeros(ModelKind::Ff, input_dim, 4, env.n_actions()),
        ];
        let targets = nets.clone();
        let mut ep = hand_episode(vec![vec![0, 1], vec![2, 3]], env.n_actions());
        for s in &mut ep.steps {
            s.reward = 0.0;
            s.obs = vec![vec![0.5; input_dim]; 2];
        }
        let weights = vec![vec![vec![1.0; 2]; 2]];
        let (loss, _, grads, _, _) =
            batch_loss_and_grads(&nets, &targets, &[ep], &weights, &cfg, input_dim);
        assert_eq!(loss, 0.0);
        for g in grads {
            assert!(g.flatten().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn doubling_weights_doubles_loss_and_gradients() {
        let cfg = tiny_cfg(2, ModelKind::Rnn, 11);
        let mut tr = Trainer::new(cfg.clone(), tiny_env(2)).unwrap();
        let (ep, _) = tr.collect_episode(3).unwrap();
        let batch = vec![ep];
        let base_dim = tr.base_dim();
        let w1 = vec![vec![vec![1.0; 2]; batch[0].steps.len()]];
        let w2 = vec![vec![vec![2.0; 2]; batch[0].steps.len()]];
        let (l1, _, g1, _, _) =
            batch_loss_and_grads(&tr.nets, &tr.targets, &batch, &w1, &cfg, base_dim);
        let (l2, _, g2, _, _) =
            batch_loss_and_grads(&tr.nets, &tr.targets, &batch, &w2, &cfg, base_dim);
        assert!((l2 - 2.0 * l1).abs() < 1e-9 * l1.abs().max(1.0));
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.flatten().iter().zip(b.flatten()) {
                assert!((y - 2.0 * x).abs() < 1e-9 * x.abs().max(1e-9));
            }
        }
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        for (model, seed) in [(ModelKind::Ff, 31u64), (ModelKind::Rnn, 32u64)] {
            let mut cfg = tiny_cfg(2, model, seed);
            cfg.reward_scale = 0.1;
            let mut tr = Trainer::new(cfg.clone(), tiny_env(2)).unwrap();
            let (ep, _) = tr.collect_episode(1).unwrap();
            let batch = vec![ep];
            let base_dim = tr.base_dim();
            let weights = vec![vec![vec![1.0; 2]; batch[0].steps.len()]];
            let (_, _, grads, _, _) =
                batch_loss_and_grads(&tr.nets, &tr.targets, &batch, &weights, &cfg, base_dim);
            // Check agent 0's gradient with the other agent frozen.
            let nets = tr.nets.clone();
            let targets = tr.targets.clone();
            let loss_of = |p: &ParamSet| -> f64 {
                let mut probe = nets.clone();
                probe[0] = p.clone();
                let (l, _, _, _, _) =
                    batch_loss_and_grads(&probe, &targets, &batch, &weights, &cfg, base_dim);
                l
            };
            let err = grad_check(loss_of, &tr.nets[0], &grads[0], 1e-5).unwrap();
            assert!(err < 1e-4, "{model:?}: batch gradient error {err}");
        }
    }

    #[test]
    fn fingerprint_adds_exactly_two_input_dimensions() {
        let env = tiny_env(2);
        let mut cfg = tiny_cfg(2, ModelKind::Ff, 13);
        cfg.fingerprint = true;
        let tr = Trainer::new(cfg, env.clone()).unwrap();
        assert_eq!(tr.nets[0].input_dim, env.obs_dim() + 2);
        let plain = Trainer::new(tiny_cfg(2, ModelKind::Ff, 13), env.clone()).unwrap();
        assert_eq!(plain.nets[0].input_dim, env.obs_dim());
    }

    #[test]
    fn short_run_produces_metrics_and_stays_finite() {
        let mut cfg = tiny_cfg(2, ModelKind::Ff, 17);
        cfg.e_max = 30;
        cfg.epsilon_anneal_episodes = 20;
        let mut tr = Trainer::new(cfg, tiny_env(2)).unwrap();
        let (metrics, collapsed) = tr.run(30, 10, 2).unwrap();
        assert!(!collapsed);
        assert_eq!(metrics.points.len(), 3);
        for net in &tr.nets {
            assert!(net.is_finite());
        }
        assert!(metrics.points.iter().all(|p| p.mean_is_weight == 1.0));
    }

    #[test]
    fn matching_fixed_points_when_is_ratios_are_unit() {
        // Same seed, one run with IS on: with identical nets at replay time
        // and matching epsilon the ratios are 1, so both arms produce the
        // same first-batch weights.
        let env = tiny_env(2);
        let mut cfg = tiny_cfg(2, ModelKind::Ff, 19);
        cfg.is_correction = true;
        let mut tr = Trainer::new(cfg.clone(), env).unwrap();
        let e = 0;
        let (ep, _) = tr.collect_episode(e).unwrap();
        tr.replay.store(ep).unwrap();
        let stats = tr.train_on_batch(e).unwrap().unwrap();
        // ε at collection equals ε now and the nets just produced the data,
        // so every live weight is 1 (ratios are exactly 1 on a fresh state).
        assert!((stats.weight_sum - stats.weight_terms as f64).abs() < 1e-9);
    }
}
