//! The exact-arithmetic pieces of the agent: exploration schedule,
//! epsilon-greedy selection with recorded behaviour probabilities, TD
//! targets, fingerprint augmentation and the importance-weight pipeline.

use super::TrainConfig;
use crate::{Error, Result};
use rand::Rng;

/// Linear anneal from `epsilon_start` to `epsilon_end` over
/// `epsilon_anneal_episodes`, clamped thereafter.
pub fn anneal_epsilon(e: usize, cfg: &TrainConfig) -> f64 {
    let frac = (e as f64 / cfg.epsilon_anneal_episodes as f64).min(1.0);
    cfg.epsilon_start - (cfg.epsilon_start - cfg.epsilon_end) * frac
}

/// Greedy action over legal entries, ties broken by lowest index.
pub fn greedy_action(q: &[f64], legal: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (qv, ok)) in q.iter().zip(legal).enumerate() {
        if !ok {
            continue;
        }
        match best {
            Some(b) if q[b] >= *qv => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Epsilon-greedy selection over the legal actions. Returns the chosen action
/// together with its exact behaviour probability: `1 − ε + ε/K` for the
/// greedy action and `ε/K` otherwise, with `K` the number of legal actions.
pub fn act<R: Rng>(q: &[f64], epsilon: f64, legal: &[bool], rng: &mut R) -> Result<(usize, f64)> {
    assert!(
        (0.0..=1.0).contains(&epsilon),
        "epsilon must lie in [0, 1], got {epsilon}"
    );
    assert_eq!(q.len(), legal.len());
    let k = legal.iter().filter(|l| **l).count();
    let greedy = greedy_action(q, legal)
        .ok_or_else(|| Error::Config("no legal action available".into()))?;
    let explore_p = epsilon / k as f64;
    let chosen = if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let mut pick = rng.gen_range(0..k);
        let mut chosen = greedy;
        for (i, ok) in legal.iter().enumerate() {
            if *ok {
                if pick == 0 {
                    chosen = i;
                    break;
                }
                pick -= 1;
            }
        }
        chosen
    } else {
        greedy
    };
    let p = if chosen == greedy {
        1.0 - epsilon + explore_p
    } else {
        explore_p
    };
    Ok((chosen, p))
}

/// Behaviour probability the current policy assigns to an already-taken
/// action: the same formula `act` reports, evaluated without drawing.
pub fn action_probability(q: &[f64], epsilon: f64, legal: &[bool], action: usize) -> f64 {
    let k = legal.iter().filter(|l| **l).count();
    let greedy = greedy_action(q, legal).expect("at least one legal action");
    if action == greedy {
        1.0 - epsilon + epsilon / k as f64
    } else {
        epsilon / k as f64
    }
}

/// Appends the two fingerprint scalars to an observation: the exploration
/// rate as-is (already in [0, 1]) and the training episode normalised by the
/// budget. Accepts arbitrary `(ε, e)` so evaluation-time sweeps can probe
/// fingerprints the schedule never produced.
pub fn fingerprint_augment(z: &[f64], epsilon: f64, e: usize, e_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(z.len() + 2);
    out.extend_from_slice(z);
    out.push(epsilon);
    out.push(e as f64 / e_max as f64);
    out
}

/// One-step TD target from the frozen network's next-state values.
pub fn td_target(reward: f64, next_q_target: &[f64], terminal: bool, gamma: f64) -> f64 {
    if terminal {
        reward
    } else {
        let best = next_q_target.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        reward + gamma * best
    }
}

/// Running average of post-clip importance weights, kept so applied weights
/// can be divided by it and the overall learning rate stays constant. An
/// exponential moving average with a long memory, initialised at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct IsWeightState {
    avg: f64,
    count: u64,
    decay: f64,
}

impl Default for IsWeightState {
    fn default() -> Self {
        Self::new()
    }
}

impl IsWeightState {
    pub const DECAY: f64 = 0.999;

    pub fn new() -> Self {
        IsWeightState {
            avg: 1.0,
            count: 0,
            decay: Self::DECAY,
        }
    }

    pub fn running_average(&self) -> f64 {
        self.avg
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    fn update(&mut self, clipped: f64) {
        self.avg = self.decay * self.avg + (1.0 - self.decay) * clipped;
        self.count += 1;
    }
}

/// The importance-weight pipeline: raw ratio of current to stored joint
/// other-agent probability, normalised by the number of agents via the
/// `1/(n−1)` exponent, clipped, then divided by the running average of
/// clipped weights (which is updated with the pre-division value).
pub fn importance_weight(
    pi_stored: f64,
    pi_current: f64,
    n_agents: usize,
    cfg: &TrainConfig,
    ws: &mut IsWeightState,
) -> Result<f64> {
    if pi_stored <= 0.0 {
        return Err(Error::Config(format!(
            "stored behaviour probability must be positive, got {pi_stored}"
        )));
    }
    if n_agents < 2 {
        return Err(Error::Config("importance weights need at least two agents".into()));
    }
    let raw = pi_current / pi_stored;
    let normalised = raw.powf(1.0 / (n_agents - 1) as f64);
    let clipped = normalised.clamp(cfg.clip_lo, cfg.clip_hi);
    let weight = clipped / ws.running_average();
    ws.update(clipped);
    Ok(weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TrainConfig {
        TrainConfig::defaults(ModelKind::Ff, 3, 0)
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let cfg = cfg();
        assert_eq!(anneal_epsilon(0, &cfg), 1.0);
        assert!((anneal_epsilon(750, &cfg) - 0.51).abs() < 1e-15);
        assert!((anneal_epsilon(1500, &cfg) - 0.02).abs() < 1e-15);
        assert!((anneal_epsilon(2000, &cfg) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn anneal_is_nonincreasing_and_bounded() {
        let cfg = cfg();
        let mut prev = f64::INFINITY;
        for e in 0..3000 {
            let eps = anneal_epsilon(e, &cfg);
            assert!((0.02..=1.0).contains(&eps));
            assert!(eps <= prev);
            prev = eps;
        }
    }

    #[test]
    fn greedy_at_epsilon_zero_has_probability_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let legal = [true; 4];
        let (a, p) = act(&[0.1, 0.7, 0.3, 0.2], 0.0, &legal, &mut rng).unwrap();
        assert_eq!(a, 1);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn behaviour_probability_formula() {
        // ε = 0.1, K = 5: greedy 0.92, others 0.02.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let legal = [true; 5];
        let q = [0.0, 0.0, 0.9, 0.0, 0.0];
        for _ in 0..50 {
            let (a, p) = act(&q, 0.1, &legal, &mut rng).unwrap();
            if a == 2 {
                assert!((p - 0.92).abs() < 1e-15);
            } else {
                assert!((p - 0.02).abs() < 1e-15);
            }
        }
        // ε = 1, K = 4: uniform 0.25.
        let legal = [true; 4];
        let (_, p) = act(&[1.0, 2.0, 3.0, 4.0], 1.0, &legal, &mut rng).unwrap();
        assert!((p - 0.25).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_break_to_lowest_index() {
        let legal = [true; 4];
        assert_eq!(greedy_action(&[0.5, 0.9, 0.9, 0.1], &legal), Some(1));
        let legal = [false, true, true, true];
        assert_eq!(greedy_action(&[9.0, 0.2, 0.2, 0.2], &legal), Some(1));
    }

    #[test]
    fn all_illegal_mask_is_a_hard_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(act(&[1.0, 2.0], 0.5, &[false, false], &mut rng).is_err());
    }

    #[test]
    fn empirical_frequencies_match_reported_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let q = [0.1, 0.9, 0.3, 0.2, 0.5];
        let legal = [true; 5];
        let epsilon = 0.37;
        let n = 100_000usize;
        let mut counts = [0usize; 5];
        let mut reported = [0.0f64; 5];
        for _ in 0..n {
            let (a, p) = act(&q, epsilon, &legal, &mut rng).unwrap();
            counts[a] += 1;
            reported[a] = p;
        }
        for i in 0..5 {
            let p = if i == 1 {
                1.0 - epsilon + epsilon / 5.0
            } else {
                epsilon / 5.0
            };
            assert!((reported[i] - p).abs() < 1e-15);
            let freq = counts[i] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * sigma,
                "action {i}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn fingerprint_appends_exactly_two_scalars() {
        let z = vec![0.1, 0.2, 0.3];
        let z2 = fingerprint_augment(&z, 0.5, 1250, 2500);
        assert_eq!(z2.len(), z.len() + 2);
        assert_eq!(&z2[..3], &z[..]);
        assert_eq!(&z2[3..], &[0.5, 0.5]);
        // Endpoint: e = e_max.
        let z3 = fingerprint_augment(&z, 0.02, 2500, 2500);
        assert_eq!(&z3[3..], &[0.02, 1.0]);
    }

    #[test]
    fn td_target_cases() {
        assert_eq!(td_target(7.0, &[5.0, 9.0], true, 0.99), 7.0);
        assert_eq!(td_target(3.0, &[5.0, 9.0], false, 0.0), 3.0);
        assert!((td_target(1.0, &[1.0, 2.0], false, 0.99) - 2.98).abs() < 1e-15);
    }

    #[test]
    fn importance_weight_pipeline_examples() {
        let cfg = cfg();
        // Identity ratio on a fresh state → exactly 1.
        let mut ws = IsWeightState::new();
        let w = importance_weight(0.4, 0.4, 3, &cfg, &mut ws).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        // raw 4 → sqrt → 2 → clip 2 → divide by fresh average 1.
        let mut ws = IsWeightState::new();
        let w = importance_weight(0.2, 0.8, 3, &cfg, &mut ws).unwrap();
        assert!((w - 2.0).abs() < 1e-12);
        // Clip floor.
        let mut ws = IsWeightState::new();
        let w = importance_weight(1.0, 0.001, 2, &cfg, &mut ws).unwrap();
        assert!((w - 0.01).abs() < 1e-12);
        // Zero stored probability is a hard error.
        let mut ws = IsWeightState::new();
        assert!(importance_weight(0.0, 0.5, 2, &cfg, &mut ws).is_err());
    }

    #[test]
    fn post_clip_weights_stay_in_bounds_and_mean_converges_to_one() {
        use rand::Rng;
        let cfg = cfg();
        let mut ws = IsWeightState::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..200_000 {
            // Ratios drawn log-uniform, wide enough to engage both clip bounds.
            let log_ratio: f64 = rng.gen_range(-5.0..1.2);
            let pi_stored = 0.3;
            let pi_current = 0.3 * log_ratio.exp();
            let avg_before = ws.running_average();
            let w = importance_weight(pi_stored, pi_current, 2, &cfg, &mut ws).unwrap();
            // Undo the running-average division: the clipped weight itself
            // must lie inside the declared interval.
            let clipped = w * avg_before;
            assert!(clipped >= cfg.clip_lo - 1e-12 && clipped <= cfg.clip_hi + 1e-12);
            sum += w;
            count += 1;
        }
        let mean = sum / count as f64;
        assert!(
            (mean - 1.0).abs() < 0.05,
            "long-run mean of divided weights was {mean}"
        );
    }
}
