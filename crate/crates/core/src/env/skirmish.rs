//! The skirmish simulator: two teams of identical ranged units on a small
//! grid. Simultaneous resolution, integer health/cooldown arithmetic and a
//! scripted always-attacking opponent make every trajectory exactly
//! replayable and auditable.

use super::{ActionSpec, Direction, Observation, Scenario, Team, Unit, SLOT_FEATURES};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scenario constants. Defaults mirror a classic ranged-infantry profile
/// while staying integer-valued on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SkirmishConfig {
    pub width: i32,
    pub height: i32,
    pub hp_max: i32,
    pub damage: i32,
    pub cd_max: i32,
    pub attack_range: f64,
    pub sight: f64,
    pub t_max: u32,
    /// Horizontal gap between the two spawn columns.
    pub spawn_gap: i32,
    pub n_allies: usize,
    pub n_enemies: usize,
}

impl SkirmishConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        let n = scenario.team_size();
        SkirmishConfig {
            width: 16,
            height: 16,
            hp_max: 40,
            damage: 6,
            cd_max: 14,
            attack_range: 4.0,
            sight: 8.0,
            t_max: 100,
            spawn_gap: 9,
            n_allies: n,
            n_enemies: n,
        }
    }

    pub fn n_units(&self) -> usize {
        self.n_allies + self.n_enemies
    }

    /// Flat action-space size for this scenario.
    pub fn n_actions(&self) -> usize {
        ActionSpec::space_size(self.n_enemies)
    }

    /// Observation width: one slot per possible unit.
    pub fn obs_dim(&self) -> usize {
        self.n_units() * SLOT_FEATURES
    }

    fn validate(&self) -> Result<()> {
        if self.width <= 0 || self.height <= 0 {
            return Err(Error::Config("arena dimensions must be positive".into()));
        }
        if self.hp_max <= 0 || self.damage <= 0 || self.cd_max < 0 {
            return Err(Error::Config("unit constants must be positive".into()));
        }
        if self.spawn_gap < 1 || self.spawn_gap + 6 >= self.width {
            return Err(Error::Config("spawn gap does not fit the arena".into()));
        }
        let tallest = self.n_allies.max(self.n_enemies) as i32;
        if tallest + 2 > self.height {
            return Err(Error::Config("teams do not fit the arena height".into()));
        }
        Ok(())
    }
}

/// Full simulator state. `step` never draws from the RNG, so the state is a
/// pure value: the stream is consumed only by `reset` (spawn jitter), and its
/// position is part of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub tick: u32,
    pub units: Vec<Unit>,
    pub cfg: SkirmishConfig,
    rng: ChaCha8Rng,
    pub rng_draws: u64,
    /// Attack actions that degraded to noop (invalid/dead/out-of-range target).
    pub degraded_attacks: u64,
}

impl EnvState {
    pub fn allies(&self) -> impl Iterator<Item = &Unit> {
        self.units.iter().filter(|u| u.team == Team::Ally)
    }

    pub fn enemies(&self) -> impl Iterator<Item = &Unit> {
        self.units.iter().filter(|u| u.team == Team::Enemy)
    }

    pub fn all_enemies_dead(&self) -> bool {
        self.enemies().all(|u| !u.alive)
    }

    pub fn all_allies_dead(&self) -> bool {
        self.allies().all(|u| !u.alive)
    }

    /// Builds a state from hand-placed units, for tests and fixtures.
    /// Unit ids must be unique and positive.
    pub fn custom(cfg: SkirmishConfig, units: Vec<Unit>, seed: u64) -> Result<EnvState> {
        cfg.validate()?;
        let mut ids: Vec<u32> = units.iter().map(|u| u.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != units.len() || ids.iter().any(|&id| id == 0) {
            return Err(Error::Config("unit ids must be unique positive integers".into()));
        }
        for u in &units {
            if u.health < 0 || u.health > cfg.hp_max || u.cooldown < 0 || u.cooldown > cfg.cd_max {
                return Err(Error::Config(format!("unit {} outside health/cooldown bounds", u.id)));
            }
        }
        Ok(EnvState {
            tick: 0,
            units,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            rng_draws: 0,
            degraded_attacks: 0,
        })
    }
}

/// Spawns both teams in facing columns. Allies cluster on the west side,
/// enemies one `spawn_gap` to the east so first contact happens a few ticks
/// in. Deterministic given `(scenario, seed)`: the only randomness is a
/// one-cell vertical jitter per team drawn from the seeded stream.
pub fn reset(scenario: Scenario, seed: u64) -> Result<(EnvState, Vec<Observation>)> {
    reset_with(SkirmishConfig::for_scenario(scenario), seed)
}

pub fn reset_with(cfg: SkirmishConfig, seed: u64) -> Result<(EnvState, Vec<Observation>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_draws = 0u64;
    let mut units = Vec::with_capacity(cfg.n_units());
    if cfg.n_units() > 0 {
        let jitter_a: i32 = rng.gen_range(-1..=1);
        let jitter_e: i32 = rng.gen_range(-1..=1);
        rng_draws += 2;
        let ally_x = 3.min(cfg.width - 1);
        let enemy_x = (ally_x + cfg.spawn_gap).min(cfg.width - 1);
        let base_y = |n: usize, jitter: i32| -> i32 {
            ((cfg.height - n as i32) / 2 + jitter).clamp(1, cfg.height - 1 - n as i32)
        };
        let ay = base_y(cfg.n_allies, jitter_a);
        for i in 0..cfg.n_allies {
            units.push(Unit {
                id: (i + 1) as u32,
                team: Team::Ally,
                x: ally_x,
                y: ay + i as i32,
                health: cfg.hp_max,
                cooldown: 0,
                alive: true,
            });
        }
        let ey = base_y(cfg.n_enemies, jitter_e);
        for i in 0..cfg.n_enemies {
            units.push(Unit {
                id: (cfg.n_allies + i + 1) as u32,
                team: Team::Enemy,
                x: enemy_x,
                y: ey + i as i32,
                health: cfg.hp_max,
                cooldown: 0,
                alive: true,
            });
        }
    }
    let state = EnvState {
        tick: 0,
        units,
        cfg,
        rng,
        rng_draws,
        degraded_attacks: 0,
    };
    let obs = all_observations(&state);
    Ok((state, obs))
}

fn all_observations(state: &EnvState) -> Vec<Observation> {
    (0..state.cfg.n_allies).map(|a| observe(state, a)).collect()
}

/// Per-agent observation: for every unit within sight, normalised
/// `(distance, Δx, Δy, health, cooldown)` plus a visibility mask bit. Signed
/// offsets are mapped affinely onto [0, 1] via `(Δ/sight + 1)/2`. A dead
/// observer sees an all-zero vector.
pub fn observe(state: &EnvState, agent_idx: usize) -> Observation {
    let cfg = &state.cfg;
    let mut obs = Observation::zeros(cfg.n_units());
    let Some(me) = state.units.iter().find(|u| u.team == Team::Ally && u.id == (agent_idx + 1) as u32)
    else {
        return obs;
    };
    if !me.alive {
        return obs;
    }
    for (slot, unit) in state.units.iter().enumerate() {
        if !unit.alive {
            continue;
        }
        let d = me.distance_to(unit);
        if d > cfg.sight {
            continue;
        }
        let dx = (unit.x - me.x) as f64;
        let dy = (unit.y - me.y) as f64;
        let base = slot * SLOT_FEATURES;
        obs.features[base] = d / cfg.sight;
        obs.features[base + 1] = (dx / cfg.sight + 1.0) / 2.0;
        obs.features[base + 2] = (dy / cfg.sight + 1.0) / 2.0;
        obs.features[base + 3] = unit.health as f64 / cfg.hp_max as f64;
        obs.features[base + 4] = unit.cooldown as f64 / cfg.cd_max as f64;
        obs.features[base + 5] = 1.0;
    }
    obs
}

/// Internal move/attack intent after target resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Intent {
    Move(Direction),
    /// Attack a concrete unit id (already validated as a declared target).
    Attack(u32),
    Hold,
}

/// Scripted opponent: each enemy attacks the nearest living ally when one is
/// within attack range, otherwise moves one cell along the axis of largest
/// distance toward it. Ties on distance break toward the lowest ally id;
/// equal axis distances prefer the x axis. Deterministic.
pub fn opponent_policy(state: &EnvState) -> Vec<(u32, ActionSpec)> {
    let mut out = Vec::new();
    for enemy in state.enemies().filter(|u| u.alive) {
        let mut nearest: Option<&Unit> = None;
        let mut best = f64::INFINITY;
        for ally in state.allies().filter(|u| u.alive) {
            let d = enemy.distance_to(ally);
            if d < best - 1e-12 || (d < best + 1e-12 && nearest.map_or(true, |n| ally.id < n.id)) {
                best = d;
                nearest = Some(ally);
            }
        }
        let Some(target) = nearest else { continue };
        let action = if best <= state.cfg.attack_range {
            // Report the target as an ally slot index for symmetry with ally
            // actions; the slot is the 0-based index among ally ids.
            ActionSpec::Attack((target.id - 1) as usize)
        } else {
            let dx = target.x - enemy.x;
            let dy = target.y - enemy.y;
            let dir = if dx.abs() >= dy.abs() {
                if dx > 0 { Direction::East } else { Direction::West }
            } else if dy > 0 {
                Direction::North
            } else {
                Direction::South
            };
            ActionSpec::Move(dir)
        };
        out.push((enemy.id, action));
    }
    out
}

/// Outcome of one simulator tick.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: EnvState,
    pub observations: Vec<Observation>,
    pub reward: f64,
    pub terminal: bool,
    /// All enemies dead (the win condition; the health bonus fires on this).
    pub victory: bool,
}

/// Advances the simulator one tick under simultaneous resolution:
/// moves, then attacks for units with zero cooldown and a live target in
/// range, then cooldown decrement, then death cleanup. Reward is the damage
/// dealt to enemy units this tick plus, on victory, the summed health of the
/// surviving team. Pure in `(state, ally_actions)`.
pub fn step(state: &EnvState, ally_actions: &[ActionSpec]) -> Result<StepResult> {
    if ally_actions.len() != state.cfg.n_allies {
        return Err(Error::Config(format!(
            "expected {} ally actions, got {}",
            state.cfg.n_allies,
            ally_actions.len()
        )));
    }
    let mut next = state.clone();
    let cfg = next.cfg.clone();

    // Resolve declared actions into unit intents.
    let mut intents: Vec<(u32, Intent)> = Vec::with_capacity(next.units.len());
    for (idx, action) in ally_actions.iter().enumerate() {
        let id = (idx + 1) as u32;
        let Some(me) = next.units.iter().find(|u| u.id == id) else {
            continue;
        };
        if !me.alive {
            continue;
        }
        let intent = match action {
            ActionSpec::Move(d) => Intent::Move(*d),
            ActionSpec::Attack(slot) => {
                // Enemy slot j is the enemy with the j-th smallest id.
                let target_id = (cfg.n_allies + slot + 1) as u32;
                if *slot >= cfg.n_enemies {
                    next.degraded_attacks += 1;
                    Intent::Hold
                } else {
                    Intent::Attack(target_id)
                }
            }
            ActionSpec::Stop | ActionSpec::Noop => Intent::Hold,
        };
        intents.push((id, intent));
    }
    for (enemy_id, action) in opponent_policy(&next) {
        let intent = match action {
            ActionSpec::Move(d) => Intent::Move(d),
            // Opponent attack slots index allies by 0-based id.
            ActionSpec::Attack(slot) => Intent::Attack((slot + 1) as u32),
            _ => Intent::Hold,
        };
        intents.push((enemy_id, intent));
    }
    intents.sort_by_key(|(id, _)| *id);

    // Movement, sequential in ascending unit id: lower ids win contested
    // cells, the loser's move becomes stop.
    for &(id, intent) in &intents {
        let Intent::Move(dir) = intent else { continue };
        let (dx, dy) = dir.delta();
        let (ux, uy) = {
            let u = next.units.iter().find(|u| u.id == id).unwrap();
            (u.x + dx, u.y + dy)
        };
        let in_bounds = ux >= 0 && ux < cfg.width && uy >= 0 && uy < cfg.height;
        let occupied = next
            .units
            .iter()
            .any(|o| o.alive && o.id != id && o.x == ux && o.y == uy);
        if in_bounds && !occupied {
            let u = next.units.iter_mut().find(|u| u.id == id).unwrap();
            u.x = ux;
            u.y = uy;
        }
    }

    // Attacks: validity is judged once against the post-move positions and
    // the alive set at the start of the phase; all valid shots then land,
    // in ascending attacker id, with damage clamped to remaining health.
    let alive_at_phase: Vec<u32> = next.units.iter().filter(|u| u.alive).map(|u| u.id).collect();
    let mut reward = 0.0f64;
    let mut fired: Vec<u32> = Vec::new();
    for &(id, intent) in &intents {
        let Intent::Attack(target_id) = intent else {
            continue;
        };
        let attacker = next.units.iter().find(|u| u.id == id).unwrap().clone();
        if attacker.cooldown != 0 {
            // Weapon still cycling: a durative attack is simply inert.
            continue;
        }
        let valid = alive_at_phase.contains(&target_id)
            && next
                .units
                .iter()
                .find(|u| u.id == target_id)
                .map(|t| attacker.distance_to(t) <= cfg.attack_range)
                .unwrap_or(false);
        if !valid {
            next.degraded_attacks += 1;
            continue;
        }
        let target = next.units.iter_mut().find(|u| u.id == target_id).unwrap();
        let dealt = cfg.damage.min(target.health);
        target.health -= dealt;
        if target.team == Team::Enemy {
            reward += dealt as f64;
        }
        fired.push(id);
    }
    for id in fired {
        next.units.iter_mut().find(|u| u.id == id).unwrap().cooldown = cfg.cd_max;
    }

    // Cooldown decrement, then death cleanup.
    for u in next.units.iter_mut().filter(|u| u.alive) {
        u.cooldown = (u.cooldown - 1).max(0);
    }
    for u in next.units.iter_mut() {
        if u.health <= 0 {
            u.alive = false;
            u.health = 0;
        }
    }

    next.tick += 1;
    let victory = next.all_enemies_dead();
    let defeat = next.all_allies_dead();
    let timeout = next.tick >= cfg.t_max;
    let terminal = victory || defeat || timeout;
    if victory {
        let bonus: i32 = next.allies().filter(|u| u.alive).map(|u| u.health).sum();
        reward += bonus as f64;
    }

    let observations = all_observations(&next);
    Ok(StepResult {
        state: next,
        observations,
        reward,
        terminal,
        victory,
    })
}
