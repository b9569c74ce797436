//! A tiny fully cooperative two-player matrix game with explicit payoff and
//! transition tables, plus an exact solver for one agent's optimal Q-values
//! given a fixed partner policy. The solver is the convergence oracle the
//! replay-correction experiments are judged against.

use crate::{Error, Result};
use rand::Rng;

/// Cooperative stochastic game: shared payoff `r(s, u₀, u₁)` and transition
/// table `P(s'|s, u₀, u₁)`. Both agents draw from the same action set.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGame {
    pub n_states: usize,
    pub n_actions: usize,
    /// Indexed `[s][u0][u1]`, flattened.
    payoff: Vec<f64>,
    /// Indexed `[s][u0][u1][s']`, flattened; each row sums to 1.
    trans: Vec<f64>,
    pub gamma: f64,
}

impl MatrixGame {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        payoff: Vec<f64>,
        trans: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_states > 4 || n_actions == 0 || n_actions > 3 {
            return Err(Error::Config(
                "matrix game limited to |S| ≤ 4 and |U| ≤ 3 per agent".into(),
            ));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1), got {gamma}")));
        }
        let joint = n_states * n_actions * n_actions;
        if payoff.len() != joint || trans.len() != joint * n_states {
            return Err(Error::Dim("payoff/transition table sizes are inconsistent".into()));
        }
        for row in 0..joint {
            let sum: f64 = trans[row * n_states..(row + 1) * n_states].iter().sum();
            if (sum - 1.0).abs() > 1e-9 || trans[row * n_states..(row + 1) * n_states].iter().any(|p| *p < 0.0) {
                return Err(Error::Config(format!("transition row {row} is not a distribution")));
            }
        }
        Ok(MatrixGame {
            n_states,
            n_actions,
            payoff,
            trans,
            gamma,
        })
    }

    #[inline]
    pub fn reward(&self, s: usize, u0: usize, u1: usize) -> f64 {
        self.payoff[(s * self.n_actions + u0) * self.n_actions + u1]
    }

    #[inline]
    pub fn transition(&self, s: usize, u0: usize, u1: usize, s2: usize) -> f64 {
        self.trans[((s * self.n_actions + u0) * self.n_actions + u1) * self.n_states + s2]
    }

    pub fn sample_next<R: Rng>(&self, s: usize, u0: usize, u1: usize, rng: &mut R) -> usize {
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        for s2 in 0..self.n_states {
            acc += self.transition(s, u0, u1, s2);
            if draw < acc {
                return s2;
            }
        }
        self.n_states - 1
    }

    /// The pinned two-state game used throughout the replay-correction
    /// studies. γ = 0, uniform transitions; payoffs are chosen so the greedy
    /// action flips between the two scripted partner policies and the
    /// mixture value is well separated from either endpoint.
    pub fn pinned_two_state() -> MatrixGame {
        let payoff = vec![
            // s0: r[u0][u1]
            4.0, 0.0, //
            1.0, 3.0, //
            // s1
            1.0, 3.0, //
            2.0, 0.0, //
        ];
        let trans = vec![0.5; 2 * 2 * 2 * 2];
        MatrixGame::new(2, 2, payoff, trans, 0.0).expect("pinned game is well formed")
    }

    /// Expected one-step payoff `Σ_v π(v|s)·r(s, u, v)`: the γ = 0 Q-table
    /// under a fixed partner, in closed form.
    pub fn expected_payoff_table(&self, partner: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|u| {
                        (0..self.n_actions)
                            .map(|v| partner[s][v] * self.reward(s, u, v))
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }
}

fn validate_partner(game: &MatrixGame, partner: &[Vec<f64>]) -> Result<()> {
    if partner.len() != game.n_states {
        return Err(Error::Dim("partner policy must cover every state".into()));
    }
    for (s, dist) in partner.iter().enumerate() {
        if dist.len() != game.n_actions {
            return Err(Error::Dim(format!("partner policy at state {s} has wrong arity")));
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || dist.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!("partner policy at state {s} is not a distribution")));
        }
    }
    Ok(())
}

/// Value iteration for one agent against a fixed partner policy:
///
/// `Q(s,u) ← Σ_v π(v|s) [ r(s,u,v) + γ Σ_s' P(s'|s,u,v) max_w Q(s',w) ]`
///
/// iterated until the sup-norm change drops below `tol`. The returned table
/// satisfies its own Bellman residual below `tol` by construction.
pub fn exact_q(game: &MatrixGame, partner: &[Vec<f64>], tol: f64) -> Result<Vec<Vec<f64>>> {
    if tol <= 0.0 {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    if game.gamma >= 1.0 {
        return Err(Error::Config("discount must be below 1 for value iteration".into()));
    }
    validate_partner(game, partner)?;
    let mut q = vec![vec![0.0; game.n_actions]; game.n_states];
    for _ in 0..1_000_000 {
        let next = bellman_sweep(game, partner, &q);
        let delta = sup_distance(&next, &q);
        q = next;
        if delta < tol {
            return Ok(q);
        }
    }
    Err(Error::Config("value iteration failed to converge".into()))
}

/// One application of the fixed-partner Bellman operator.
pub fn bellman_sweep(game: &MatrixGame, partner: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let maxes: Vec<f64> = q
        .iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    (0..game.n_states)
        .map(|s| {
            (0..game.n_actions)
                .map(|u| {
                    (0..game.n_actions)
                        .map(|v| {
                            let boot: f64 = (0..game.n_states)
                                .map(|s2| game.transition(s, u, v, s2) * maxes[s2])
                                .sum();
                            partner[s][v] * (game.reward(s, u, v) + game.gamma * boot)
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Sup-norm distance between two Q-tables of identical shape.
pub fn sup_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}
