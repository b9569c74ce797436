//! Deterministic, seedable environments: a grid-world skirmish between two
//! teams of identical ranged units, and a tiny cooperative matrix game with
//! an exact value-iteration oracle.

pub mod matrix;
pub mod skirmish;
pub mod trace;

pub use matrix::{exact_q, MatrixGame};
pub use skirmish::{observe, opponent_policy, reset, step, EnvState, SkirmishConfig, StepResult};
pub use trace::{audit_trace, read_trace, write_trace, TraceRecord, UnitSnapshot};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which side a unit fights on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Team {
    Ally,
    Enemy,
}

/// One combat unit. Ids are positive integers assigned at spawn and stable
/// for the whole episode. Dead units take no actions and are invisible to
/// observations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    pub id: u32,
    pub team: Team,
    pub x: i32,
    pub y: i32,
    pub health: i32,
    pub cooldown: i32,
    pub alive: bool,
}

impl Unit {
    pub fn pos(&self) -> (i32, i32) {
        (self.x, self.y)
    }

    pub fn distance_to(&self, other: &Unit) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Cardinal move directions, one grid cell per tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
    ];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::North => (0, 1),
            Direction::East => (1, 0),
            Direction::South => (0, -1),
            Direction::West => (-1, 0),
        }
    }
}

/// A discrete agent action. Attack targets are enemy *slots*: the j-th slot
/// refers to the enemy with the j-th smallest spawn id, so the action space
/// is fixed for the whole episode even as units die.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpec {
    Move(Direction),
    Attack(usize),
    Stop,
    Noop,
}

impl ActionSpec {
    /// Fixed action-space size: 4 moves + one attack per enemy slot + stop + noop.
    pub fn space_size(n_enemy_slots: usize) -> usize {
        4 + n_enemy_slots + 2
    }

    /// Maps a flat action index onto the action it encodes.
    /// Layout: 0..4 moves (N, E, S, W), then attacks by slot, then stop, noop.
    pub fn from_index(index: usize, n_enemy_slots: usize) -> Result<ActionSpec> {
        let n = Self::space_size(n_enemy_slots);
        if index >= n {
            return Err(Error::Config(format!(
                "action index {index} out of range for |U| = {n}"
            )));
        }
        Ok(match index {
            0 => ActionSpec::Move(Direction::North),
            1 => ActionSpec::Move(Direction::East),
            2 => ActionSpec::Move(Direction::South),
            3 => ActionSpec::Move(Direction::West),
            i if i < 4 + n_enemy_slots => ActionSpec::Attack(i - 4),
            i if i == 4 + n_enemy_slots => ActionSpec::Stop,
            _ => ActionSpec::Noop,
        })
    }

    pub fn to_index(self, n_enemy_slots: usize) -> usize {
        match self {
            ActionSpec::Move(Direction::North) => 0,
            ActionSpec::Move(Direction::East) => 1,
            ActionSpec::Move(Direction::South) => 2,
            ActionSpec::Move(Direction::West) => 3,
            ActionSpec::Attack(slot) => 4 + slot,
            ActionSpec::Stop => 4 + n_enemy_slots,
            ActionSpec::Noop => 5 + n_enemy_slots,
        }
    }
}

impl std::fmt::Display for ActionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActionSpec::Move(Direction::North) => write!(f, "move_n"),
            ActionSpec::Move(Direction::East) => write!(f, "move_e"),
            ActionSpec::Move(Direction::South) => write!(f, "move_s"),
            ActionSpec::Move(Direction::West) => write!(f, "move_w"),
            ActionSpec::Attack(slot) => write!(f, "attack_{slot}"),
            ActionSpec::Stop => write!(f, "stop"),
            ActionSpec::Noop => write!(f, "noop"),
        }
    }
}

/// Number of features per observation slot: distance, relative x, relative y,
/// health, cooldown, visibility mask.
pub const SLOT_FEATURES: usize = 6;

/// Per-agent feature vector: one slot per possible unit in the scenario
/// (allies by ascending id, then enemies by ascending id), each slot holding
/// `(d, Δx, Δy, health, cooldown, mask)` normalised into [0, 1]. Slots for
/// dead or out-of-view units are zero-filled with mask 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn zeros(n_slots: usize) -> Self {
        Observation {
            features: vec![0.0; n_slots * SLOT_FEATURES],
        }
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.features[i * SLOT_FEATURES..(i + 1) * SLOT_FEATURES]
    }

    pub fn n_slots(&self) -> usize {
        self.features.len() / SLOT_FEATURES
    }
}

/// Named scenarios the lab supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    M3v3,
    M5v5,
    Matrix,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Scenario> {
        match s {
            "m3v3" => Ok(Scenario::M3v3),
            "m5v5" => Ok(Scenario::M5v5),
            "matrix" => Ok(Scenario::Matrix),
            other => Err(Error::Config(format!("unknown scenario '{other}'"))),
        }
    }

    pub fn team_size(self) -> usize {
        match self {
            Scenario::M3v3 => 3,
            Scenario::M5v5 => 5,
            Scenario::Matrix => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::M3v3 => "m3v3",
            Scenario::M5v5 => "m5v5",
            Scenario::Matrix => "matrix",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_index_roundtrip_covers_the_whole_space() {
        for slots in [3usize, 5] {
            let n = ActionSpec::space_size(slots);
            assert_eq!(n, 4 + slots + 2);
            for idx in 0..n {
                let a = ActionSpec::from_index(idx, slots).unwrap();
                assert_eq!(a.to_index(slots), idx);
            }
            assert!(ActionSpec::from_index(n, slots).is_err());
        }
    }

    #[test]
    fn scenario_names_parse_back() {
        for s in [Scenario::M3v3, Scenario::M5v5, Scenario::Matrix] {
            assert_eq!(Scenario::parse(s.name()).unwrap(), s);
        }
        assert!(Scenario::parse("m9v9").is_err());
    }
}
