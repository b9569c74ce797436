//! Line-delimited JSON episode traces: one record per tick with the actions
//! taken, the reward and full unit snapshots. Traces support offline replay
//! and the reward-conservation audit.

use super::{ActionSpec, EnvState, Team};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSnapshot {
    pub id: u32,
    pub team: Team,
    pub x: i32,
    pub y: i32,
    pub health: i32,
    pub cooldown: i32,
    pub alive: bool,
}

/// One tick of an episode. The first record of a trace carries tick 0, no
/// actions and the spawn-state snapshots; each later record holds the ally
/// actions applied that tick and the post-resolution state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u32,
    pub actions: Vec<String>,
    pub reward: f64,
    pub terminal: bool,
    pub units: Vec<UnitSnapshot>,
}

pub fn snapshot(state: &EnvState) -> Vec<UnitSnapshot> {
    state
        .units
        .iter()
        .map(|u| UnitSnapshot {
            id: u.id,
            team: u.team,
            x: u.x,
            y: u.y,
            health: u.health,
            cooldown: u.cooldown,
            alive: u.alive,
        })
        .collect()
}

pub fn initial_record(state: &EnvState) -> TraceRecord {
    TraceRecord {
        tick: 0,
        actions: Vec::new(),
        reward: 0.0,
        terminal: false,
        units: snapshot(state),
    }
}

pub fn step_record(
    state_after: &EnvState,
    actions: &[ActionSpec],
    reward: f64,
    terminal: bool,
) -> TraceRecord {
    TraceRecord {
        tick: state_after.tick,
        actions: actions.iter().map(|a| a.to_string()).collect(),
        reward,
        terminal,
        units: snapshot(state_after),
    }
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Replays a trace and checks reward conservation: every tick's reward must
/// equal the health removed from enemy units that tick, plus — when the final
/// tick is a victory — the summed health of surviving allies. Returns the
/// episode's total reward on success.
pub fn audit_trace(records: &[TraceRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Format("empty trace".into()));
    }
    let mut total = 0.0;
    for pair in records.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let mut enemy_drop = 0i64;
        for u in &cur.units {
            if u.team != Team::Enemy {
                continue;
            }
            let before = prev
                .units
                .iter()
                .find(|p| p.id == u.id)
                .ok_or_else(|| Error::Format(format!("unit {} vanished from trace", u.id)))?;
            let drop = i64::from(before.health) - i64::from(u.health);
            if drop < 0 {
                return Err(Error::Format(format!("unit {} gained health", u.id)));
            }
            enemy_drop += drop;
        }
        let victory = cur.units.iter().filter(|u| u.team == Team::Enemy).all(|u| !u.alive);
        let mut expected = enemy_drop as f64;
        if cur.terminal && victory {
            let bonus: i64 = cur
                .units
                .iter()
                .filter(|u| u.team == Team::Ally && u.alive)
                .map(|u| i64::from(u.health))
                .sum();
            expected += bonus as f64;
        }
        if cur.reward != expected {
            return Err(Error::Format(format!(
                "tick {}: recorded reward {} but replay expects {}",
                cur.tick, cur.reward, expected
            )));
        }
        total += cur.reward;
    }
    Ok(total)
}
