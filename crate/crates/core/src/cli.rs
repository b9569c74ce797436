//! The experiment runner: resolves a run specification into configured
//! trainers, executes the collect/store/sample/train loop, and emits every
//! artifact a run produces (metrics, manifest, checkpoint, probe and sweep
//! tables, traces). A sweep orchestrates many independent runs and writes
//! cross-seed comparison tables.

use crate::agents::tabular::{study_partners, PartnerSchedule, TabularConfig, TabularTrainer};
use crate::agents::train::{derive_seed, Trainer};
use crate::agents::{anneal_epsilon, TrainConfig};
use crate::analysis::{
    aggregate, build_probe_dataset, default_eps_grid, fit_probe, value_sweep, write_metrics_csv,
    write_probe_csv, write_sweep_csv, AggregatePoint, MetricSeries,
};
use crate::env::matrix::{exact_q, sup_distance, MatrixGame};
use crate::env::skirmish::SkirmishConfig;
use crate::env::trace::write_trace;
use crate::env::Scenario;
use crate::nn::{write_checkpoint, ModelKind};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// The five method arms. Arms differ only in which flags they set on the
/// training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Noxp,
    Xp,
    XpIs,
    XpFp,
    XpIsFp,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Noxp,
        Method::Xp,
        Method::XpIs,
        Method::XpFp,
        Method::XpIsFp,
    ];

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "noxp" => Ok(Method::Noxp),
            "xp" => Ok(Method::Xp),
            "xp+is" => Ok(Method::XpIs),
            "xp+fp" => Ok(Method::XpFp),
            "xp+is+fp" => Ok(Method::XpIsFp),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected noxp, xp, xp+is, xp+fp, xp+is+fp)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Noxp => "noxp",
            Method::Xp => "xp",
            Method::XpIs => "xp+is",
            Method::XpFp => "xp+fp",
            Method::XpIsFp => "xp+is+fp",
        }
    }

    /// `(replay, is_correction, fingerprint)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Method::Noxp => (false, false, false),
            Method::Xp => (true, false, false),
            Method::XpIs => (true, true, false),
            Method::XpFp => (true, false, true),
            Method::XpIsFp => (true, true, true),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Method::parse(&s).map_err(serde::de::Error::custom)
    }
}

fn model_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Ff => "ff",
        ModelKind::Rnn => "rnn",
    }
}

fn parse_model(s: &str) -> Result<ModelKind> {
    match s {
        "ff" => Ok(ModelKind::Ff),
        "rnn" => Ok(ModelKind::Rnn),
        other => Err(Error::Config(format!("unknown model '{other}' (expected ff or rnn)"))),
    }
}

/// Optional knobs, all overridable from a key=value config file and again
/// from command-line flags (flags win).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub capacity: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub epsilon_end: Option<f64>,
    pub epsilon_anneal: Option<usize>,
    pub clip_lo: Option<f64>,
    pub clip_hi: Option<f64>,
    pub hidden_dim: Option<usize>,
    pub lr: Option<f64>,
    pub reward_scale: Option<f64>,
    pub target_period: Option<usize>,
    pub force_unit_weights: bool,
    // Scenario constants (shared across every method by construction).
    pub cd_max: Option<i32>,
    pub t_max: Option<u32>,
    pub damage: Option<i32>,
    pub hp_max: Option<i32>,
    pub attack_range: Option<f64>,
    pub sight: Option<f64>,
    pub spawn_gap: Option<i32>,
    // Matrix-scenario options.
    pub matrix_switch: Option<bool>,
    pub matrix_switch_at: Option<usize>,
    pub matrix_epsilon: Option<f64>,
    pub matrix_offline_iters: Option<usize>,
}

/// A fully specified run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub scenario: Scenario,
    pub method: Method,
    #[serde(with = "model_serde")]
    pub model: ModelKind,
    pub seed: u64,
    pub episodes: usize,
    pub out: PathBuf,
    #[serde(default)]
    pub overrides: Overrides,
}

mod model_serde {
    use super::*;

    pub fn serialize<S: serde::Serializer>(
        kind: &ModelKind,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(model_name(*kind))
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<ModelKind, D::Error> {
        let s = String::deserialize(d)?;
        parse_model(&s).map_err(serde::de::Error::custom)
    }
}

impl RunSpec {
    /// Resolves the training configuration this spec denotes.
    pub fn train_config(&self) -> TrainConfig {
        let (replay, is_correction, fingerprint) = self.method.flags();
        let n = self.scenario.team_size().max(2);
        let mut cfg = TrainConfig::defaults(self.model, n, self.seed);
        cfg.replay = replay;
        cfg.is_correction = is_correction;
        cfg.fingerprint = fingerprint;
        cfg.e_max = self.episodes.max(1);
        let o = &self.overrides;
        if let Some(v) = o.capacity {
            cfg.capacity = v;
        }
        if let Some(v) = o.epsilon_end {
            cfg.epsilon_end = v;
        }
        if let Some(v) = o.epsilon_anneal {
            cfg.epsilon_anneal_episodes = v;
        }
        if let Some(v) = o.clip_lo {
            cfg.clip_lo = v;
        }
        if let Some(v) = o.clip_hi {
            cfg.clip_hi = v;
        }
        if let Some(v) = o.hidden_dim {
            cfg.hidden_dim = v;
        }
        if let Some(v) = o.lr {
            cfg.lr = v;
        }
        if let Some(v) = o.reward_scale {
            cfg.reward_scale = v;
        }
        if let Some(v) = o.target_period {
            cfg.target_period = v;
        }
        cfg.force_unit_weights = o.force_unit_weights;
        cfg
    }

    /// Resolves the scenario constants, with any config-level tuning applied.
    pub fn env_config(&self) -> SkirmishConfig {
        let mut cfg = SkirmishConfig::for_scenario(self.scenario);
        let o = &self.overrides;
        if let Some(v) = o.cd_max {
            cfg.cd_max = v;
        }
        if let Some(v) = o.t_max {
            cfg.t_max = v;
        }
        if let Some(v) = o.damage {
            cfg.damage = v;
        }
        if let Some(v) = o.hp_max {
            cfg.hp_max = v;
        }
        if let Some(v) = o.attack_range {
            cfg.attack_range = v;
        }
        if let Some(v) = o.sight {
            cfg.sight = v;
        }
        if let Some(v) = o.spawn_gap {
            cfg.spawn_gap = v;
        }
        cfg
    }

    pub fn eval_every(&self) -> usize {
        self.overrides.eval_every.unwrap_or(50)
    }

    pub fn eval_episodes(&self) -> usize {
        self.overrides.eval_episodes.unwrap_or(20)
    }

    pub fn run_label(&self) -> String {
        format!(
            "{}-{}-{}-s{}",
            self.scenario.name(),
            self.method.name(),
            model_name(self.model),
            self.seed
        )
    }
}

/// Everything a finished run hands back to the caller.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: MetricSeries,
    pub collapsed: bool,
    pub probe_r2: Option<f64>,
    pub oracle_distance: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    version: &'static str,
    status: &'static str,
    spec: &'a RunSpec,
    train: TrainEcho,
    env: Option<EnvEcho>,
    matrix: Option<MatrixEcho>,
    outputs: Vec<String>,
    probe_r2: Option<f64>,
    probe_degenerate: Option<bool>,
    oracle: Option<OracleReport>,
    nonfinite_incidents: usize,
}

#[derive(Debug, Serialize)]
struct TrainEcho {
    gamma: f64,
    epsilon_start: f64,
    epsilon_end: f64,
    epsilon_anneal_episodes: usize,
    e_max: usize,
    replay: bool,
    is_correction: bool,
    fingerprint: bool,
    model: String,
    n_agents: usize,
    capacity: usize,
    batch: usize,
    clip_lo: f64,
    clip_hi: f64,
    target_period: usize,
    hidden_dim: usize,
    lr: f64,
    reward_scale: f64,
    grad_clip: f64,
    seed: u64,
    force_unit_weights: bool,
}

impl TrainEcho {
    fn new(cfg: &TrainConfig) -> Self {
        TrainEcho {
            gamma: cfg.gamma,
            epsilon_start: cfg.epsilon_start,
            epsilon_end: cfg.epsilon_end,
            epsilon_anneal_episodes: cfg.epsilon_anneal_episodes,
            e_max: cfg.e_max,
            replay: cfg.replay,
            is_correction: cfg.is_correction,
            fingerprint: cfg.fingerprint,
            model: model_name(cfg.model).to_string(),
            n_agents: cfg.n_agents,
            capacity: cfg.effective_capacity(),
            batch: cfg.batch_size(),
            clip_lo: cfg.clip_lo,
            clip_hi: cfg.clip_hi,
            target_period: cfg.target_period,
            hidden_dim: cfg.hidden_dim,
            lr: cfg.lr,
            reward_scale: cfg.reward_scale,
            grad_clip: cfg.grad_clip,
            seed: cfg.seed,
            force_unit_weights: cfg.force_unit_weights,
        }
    }
}

#[derive(Debug, Serialize)]
struct EnvEcho {
    width: i32,
    height: i32,
    hp_max: i32,
    damage: i32,
    cd_max: i32,
    attack_range: f64,
    sight: f64,
    t_max: u32,
    spawn_gap: i32,
    n_allies: usize,
    n_enemies: usize,
}

impl EnvEcho {
    fn new(cfg: &SkirmishConfig) -> Self {
        EnvEcho {
            width: cfg.width,
            height: cfg.height,
            hp_max: cfg.hp_max,
            damage: cfg.damage,
            cd_max: cfg.cd_max,
            attack_range: cfg.attack_range,
            sight: cfg.sight,
            t_max: cfg.t_max,
            spawn_gap: cfg.spawn_gap,
            n_allies: cfg.n_allies,
            n_enemies: cfg.n_enemies,
        }
    }
}

#[derive(Debug, Serialize)]
struct MatrixEcho {
    episodes: usize,
    epsilon: f64,
    switch_at: Option<usize>,
    offline_iters: usize,
    capacity: usize,
    batch: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    /// Sup-norm distance between the learned table and the value-iteration
    /// fixed point under the final partner policy.
    pub sup_distance: f64,
    pub q_table: Vec<Vec<f64>>,
    pub exact_table: Vec<Vec<f64>>,
    /// For switching partners: the closed-form stale-mixture table and its
    /// gap to the exact table.
    pub mixture_table: Option<Vec<Vec<f64>>>,
    pub mixture_gap: Option<f64>,
    pub phase_a_fraction: Option<f64>,
}

fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Executes one run end to end, writing every artifact into `spec.out`.
pub fn run(spec: &RunSpec) -> Result<RunArtifacts> {
    fs::create_dir_all(&spec.out)?;
    match spec.scenario {
        Scenario::Matrix => run_matrix(spec),
        _ => run_skirmish(spec),
    }
}

fn run_skirmish(spec: &RunSpec) -> Result<RunArtifacts> {
    let cfg = spec.train_config();
    let env_cfg = spec.env_config();
    let mut trainer = Trainer::new(cfg.clone(), env_cfg.clone())?;
    let (metrics, collapsed) = trainer.run(spec.episodes, spec.eval_every(), spec.eval_episodes())?;

    let mut outputs = vec!["manifest.json".to_string(), "metrics.csv".to_string()];
    {
        let file = fs::File::create(spec.out.join("metrics.csv"))?;
        write_metrics_csv(BufWriter::new(file), &metrics)?;
    }
    {
        let file = fs::File::create(spec.out.join("checkpoint.bin"))?;
        write_checkpoint(BufWriter::new(file), &trainer.nets)?;
        outputs.push("checkpoint.bin".to_string());
    }

    // Greedy traces from the final parameters.
    let trace_dir = spec.out.join("traces");
    fs::create_dir_all(&trace_dir)?;
    let final_e = spec.episodes.min(cfg.e_max);
    let fp = (anneal_epsilon(final_e, &cfg), final_e);
    for k in 0..spec.eval_episodes().min(20) {
        let env_seed = derive_seed(cfg.seed, 0xF1A5_0000u64.wrapping_add(k as u64));
        let (_, _, records) = trainer.play_greedy_episode(env_seed, fp)?;
        let file = fs::File::create(trace_dir.join(format!("eval_{k:03}.jsonl")))?;
        write_trace(BufWriter::new(file), &records)?;
    }
    outputs.push("traces/*.jsonl".to_string());

    // Value-vs-fingerprint sweep for fingerprint-trained models.
    if cfg.fingerprint {
        let (_, obs0) = crate::env::skirmish::reset_with(
            env_cfg.clone(),
            derive_seed(cfg.seed, 0x300), // training episode 0 spawn
        )?;
        let sweep = value_sweep(
            &trainer.nets[0],
            &obs0[0].features,
            &default_eps_grid(),
            cfg.e_max,
        )?;
        let file = fs::File::create(spec.out.join("sweep.csv"))?;
        write_sweep_csv(BufWriter::new(file), &sweep)?;
        outputs.push("sweep.csv".to_string());
    }

    // Hidden-state probe for recurrent models.
    let mut probe_r2 = None;
    let mut probe_degenerate = None;
    if cfg.model == ModelKind::Rnn && !trainer.replay.is_empty() {
        let data = build_probe_dataset(&trainer.nets[0], &trainer.replay, 0)?;
        let file = fs::File::create(spec.out.join("probe.csv"))?;
        write_probe_csv(BufWriter::new(file), &data)?;
        outputs.push("probe.csv".to_string());
        let fit = fit_probe(&data)?;
        probe_r2 = Some(fit.r2);
        probe_degenerate = Some(fit.degenerate);
    }

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        status: if collapsed { "failed" } else { "completed" },
        spec,
        train: TrainEcho::new(&cfg),
        env: Some(EnvEcho::new(&env_cfg)),
        matrix: None,
        outputs,
        probe_r2,
        probe_degenerate,
        oracle: None,
        nonfinite_incidents: trainer.nonfinite_incidents,
    };
    write_json(spec.out.join("manifest.json"), &manifest)?;

    Ok(RunArtifacts {
        metrics,
        collapsed,
        probe_r2,
        oracle_distance: None,
    })
}

fn run_matrix(spec: &RunSpec) -> Result<RunArtifacts> {
    let o = &spec.overrides;
    let game = MatrixGame::pinned_two_state();
    let (partner_a, partner_b) = study_partners(game.n_states);
    let schedule = if o.matrix_switch.unwrap_or(false) {
        let at = o.matrix_switch_at.unwrap_or(spec.episodes / 2);
        PartnerSchedule::switching(partner_a, at, partner_b)
    } else {
        PartnerSchedule::fixed(partner_a)
    };
    let (replay, is_correction, _) = spec.method.flags();
    let mut cfg = TabularConfig::new(game.clone(), schedule, spec.seed);
    cfg.episodes = spec.episodes;
    cfg.epsilon = o.matrix_epsilon.unwrap_or(0.5);
    cfg.is_correction = is_correction;
    cfg.capacity = if replay {
        o.capacity.unwrap_or(2000)
    } else {
        1
    };
    cfg.offline_iters = o.matrix_offline_iters.unwrap_or(0);
    if let Some(v) = o.clip_lo {
        cfg.clip_lo = v;
    }
    if let Some(v) = o.clip_hi {
        cfg.clip_hi = v;
    }
    cfg.force_unit_weights = o.force_unit_weights;

    let mut trainer = TabularTrainer::new(cfg.clone())?;
    let metrics = trainer.run(spec.eval_every())?;

    let final_policy = trainer.cfg.partner.final_policy().clone();
    let exact = exact_q(&game, &final_policy, 1e-10)?;
    let distance = sup_distance(&trainer.q, &exact);
    let (mixture_table, mixture_gap, phase_a_fraction) = if trainer.cfg.partner.switch.is_some() {
        let mix = trainer.mixture_table();
        let gap = sup_distance(&mix, &exact);
        (Some(mix), Some(gap), Some(trainer.phase_a_fraction()))
    } else {
        (None, None, None)
    };
    let report = OracleReport {
        sup_distance: distance,
        q_table: trainer.q.clone(),
        exact_table: exact,
        mixture_table,
        mixture_gap,
        phase_a_fraction,
    };

    let mut outputs = vec![
        "manifest.json".to_string(),
        "metrics.csv".to_string(),
        "oracle_report.json".to_string(),
        "qtable.json".to_string(),
    ];
    {
        let file = fs::File::create(spec.out.join("metrics.csv"))?;
        write_metrics_csv(BufWriter::new(file), &metrics)?;
    }
    write_json(spec.out.join("oracle_report.json"), &report)?;
    write_json(spec.out.join("qtable.json"), &trainer.q)?;
    {
        let file = fs::File::create(spec.out.join("replay_dump.jsonl"))?;
        trainer.replay.dump(BufWriter::new(file))?;
        outputs.push("replay_dump.jsonl".to_string());
    }

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        status: "completed",
        spec,
        train: TrainEcho::new(&spec.train_config()),
        env: None,
        matrix: Some(MatrixEcho {
            episodes: trainer.cfg.episodes,
            epsilon: trainer.cfg.epsilon,
            switch_at: trainer.cfg.partner.switch.as_ref().map(|(at, _)| *at),
            offline_iters: trainer.cfg.offline_iters,
            capacity: trainer.cfg.capacity,
            batch: trainer.cfg.batch,
        }),
        outputs,
        probe_r2: None,
        probe_degenerate: None,
        oracle: Some(report.clone()),
        nonfinite_incidents: 0,
    };
    write_json(spec.out.join("manifest.json"), &manifest)?;

    Ok(RunArtifacts {
        metrics,
        collapsed: false,
        probe_r2: None,
        oracle_distance: Some(distance),
    })
}

/// Reads the `spec` block back out of a run manifest, so a run can be
/// reproduced from its own artifacts.
pub fn spec_from_manifest<P: AsRef<Path>>(path: P) -> Result<RunSpec> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let spec = value
        .get("spec")
        .ok_or_else(|| Error::Format("manifest has no spec block".into()))?;
    Ok(serde_json::from_value(spec.clone())?)
}

/// One row of a sweep report.
#[derive(Debug, Clone)]
pub struct SweepGroup {
    pub scenario: Scenario,
    pub method: Method,
    pub model: ModelKind,
    pub points: Vec<AggregatePoint>,
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub groups: Vec<SweepGroup>,
    pub failures: Vec<(String, String)>,
}

/// Runs every spec (process-isolated state, thread-level parallelism) and
/// aggregates the survivors per (scenario, method, model). Failures are
/// recorded and reported, not fatal.
pub fn sweep(specs: &[RunSpec], parallelism: usize) -> Result<SweepReport> {
    {
        let mut outs: Vec<&PathBuf> = specs.iter().map(|s| &s.out).collect();
        outs.sort();
        outs.dedup();
        if outs.len() != specs.len() {
            return Err(Error::Config("sweep specs must have pairwise-distinct output paths".into()));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("could not build thread pool: {e}")))?;
    let results: Vec<(usize, std::result::Result<RunArtifacts, String>)> = pool.install(|| {
        use rayon::prelude::*;
        specs
            .par_iter()
            .enumerate()
            .map(|(i, spec)| {
                let res = run(spec).map_err(|e| e.to_string()).and_then(|art| {
                    if art.collapsed {
                        Err("training collapse (non-finite parameters)".to_string())
                    } else {
                        Ok(art)
                    }
                });
                (i, res)
            })
            .collect()
    });

    let mut report = SweepReport::default();
    let mut by_group: Vec<((Scenario, Method, ModelKind), Vec<MetricSeries>)> = Vec::new();
    for (i, res) in results {
        let spec = &specs[i];
        match res {
            Ok(art) => {
                let key = (spec.scenario, spec.method, spec.model);
                match by_group.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, list)) => list.push(art.metrics),
                    None => by_group.push((key, vec![art.metrics])),
                }
            }
            Err(msg) => report.failures.push((spec.run_label(), msg)),
        }
    }
    for ((scenario, method, model), runs) in by_group {
        if runs.len() < 2 {
            // A single surviving run cannot carry a spread estimate; report
            // it as a degenerate group with zero sems.
            let points = runs
                .first()
                .map(|r| {
                    r.points
                        .iter()
                        .map(|p| AggregatePoint {
                            episode: p.episode,
                            mean_win_rate: p.win_rate,
                            sem_win_rate: 0.0,
                            mean_return: p.mean_return,
                            sem_return: 0.0,
                            runs: 1,
                        })
                        .collect()
                })
                .unwrap_or_default();
            report.groups.push(SweepGroup {
                scenario,
                method,
                model,
                points,
            });
            continue;
        }
        report.groups.push(SweepGroup {
            scenario,
            method,
            model,
            points: aggregate(&runs)?,
        });
    }
    Ok(report)
}

pub fn write_aggregate_csv<W: std::io::Write>(mut w: W, report: &SweepReport) -> Result<()> {
    writeln!(
        w,
        "scenario,method,model,episode,mean_win_rate,sem_win_rate,mean_return,sem_return,runs"
    )?;
    for group in &report.groups {
        for p in &group.points {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                group.scenario.name(),
                group.method.name(),
                model_name(group.model),
                p.episode,
                p.mean_win_rate,
                p.sem_win_rate,
                p.mean_return,
                p.sem_return,
                p.runs
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Command-line front end
// ---------------------------------------------------------------------------

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "iqlab",
    version,
    about = "Multi-agent Q-learning lab: replay stabilisation experiments"
)]
pub struct CliArgs {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand, Debug)]
enum CliCommand {
    /// Execute a single training run and write its artifacts.
    Run(RunArgs),
    /// Execute a grid of runs and write cross-seed comparison tables.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Default)]
struct CommonOverrides {
    /// Plain-text key=value config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long)]
    epsilon_end: Option<f64>,
    #[arg(long)]
    clip_lo: Option<f64>,
    #[arg(long)]
    clip_hi: Option<f64>,
    /// Diagnostic: run the importance-sampling path but apply unit weights.
    #[arg(long, default_value_t = false)]
    force_unit_weights: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: CommonOverrides,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated method list, e.g. `noxp,xp,xp+fp`.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated seed list, e.g. `1,2,3,4,5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[command(flatten)]
    common: CommonOverrides,
}

/// Key=value config file contents, applied beneath command-line flags.
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    entries: Vec<(String, String)>,
}

impl FileConfig {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = fs::read_to_string(&path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {} is not key=value: '{line}'",
                    lineno + 1
                )));
            };
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(FileConfig { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        // Last occurrence wins within the file.
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key '{key}' has invalid value '{raw}'"))),
        }
    }
}

fn merge_overrides(common: &CommonOverrides, file: &FileConfig) -> Result<Overrides> {
    let mut o = Overrides {
        capacity: common.capacity.or(file.get_parsed("capacity")?),
        eval_every: common.eval_every.or(file.get_parsed("eval_every")?),
        eval_episodes: common.eval_episodes.or(file.get_parsed("eval_episodes")?),
        epsilon_end: common.epsilon_end.or(file.get_parsed("epsilon_end")?),
        epsilon_anneal: file.get_parsed("epsilon_anneal")?,
        clip_lo: common.clip_lo.or(file.get_parsed("clip_lo")?),
        clip_hi: common.clip_hi.or(file.get_parsed("clip_hi")?),
        hidden_dim: file.get_parsed("hidden_dim")?,
        lr: file.get_parsed("lr")?,
        reward_scale: file.get_parsed("reward_scale")?,
        target_period: file.get_parsed("target_period")?,
        force_unit_weights: common.force_unit_weights
            || file.get_parsed::<bool>("force_unit_weights")?.unwrap_or(false),
        cd_max: file.get_parsed("cd_max")?,
        t_max: file.get_parsed("t_max")?,
        damage: file.get_parsed("damage")?,
        hp_max: file.get_parsed("hp_max")?,
        attack_range: file.get_parsed("attack_range")?,
        sight: file.get_parsed("sight")?,
        spawn_gap: file.get_parsed("spawn_gap")?,
        matrix_switch: file.get_parsed("matrix_switch")?,
        matrix_switch_at: file.get_parsed("matrix_switch_at")?,
        matrix_epsilon: file.get_parsed("matrix_epsilon")?,
        matrix_offline_iters: file.get_parsed("matrix_offline_iters")?,
    };
    // Normalise: zero eval cadence makes no sense.
    if o.eval_every == Some(0) {
        o.eval_every = None;
    }
    Ok(o)
}

fn require<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required setting: {what}")))
}

fn build_run_spec(args: &RunArgs) -> Result<RunSpec> {
    let file = match &args.common.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let scenario = require(
        args.scenario
            .clone()
            .or_else(|| file.get("scenario").map(str::to_string)),
        "--scenario",
    )?;
    let method = require(
        args.method
            .clone()
            .or_else(|| file.get("method").map(str::to_string)),
        "--method",
    )?;
    let model = args
        .model
        .clone()
        .or_else(|| file.get("model").map(str::to_string))
        .unwrap_or_else(|| "ff".to_string());
    let out = require(
        args.out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from)),
        "--out",
    )?;
    Ok(RunSpec {
        scenario: Scenario::parse(&scenario)?,
        method: Method::parse(&method)?,
        model: parse_model(&model)?,
        seed: args.seed.or(file.get_parsed("seed")?).unwrap_or(0),
        episodes: args
            .episodes
            .or(file.get_parsed("episodes")?)
            .unwrap_or(2500),
        out,
        overrides: merge_overrides(&args.common, &file)?,
    })
}

fn build_sweep_specs(args: &SweepArgs) -> Result<Vec<RunSpec>> {
    let file = match &args.common.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let scenario = Scenario::parse(&require(
        args.scenario
            .clone()
            .or_else(|| file.get("scenario").map(str::to_string)),
        "--scenario",
    )?)?;
    let methods_raw = require(
        args.methods
            .clone()
            .or_else(|| file.get("methods").map(str::to_string)),
        "--methods",
    )?;
    let methods: Vec<Method> = methods_raw
        .split(',')
        .map(|m| Method::parse(m.trim()))
        .collect::<Result<_>>()?;
    let seeds_raw = require(
        args.seeds
            .clone()
            .or_else(|| file.get("seeds").map(str::to_string)),
        "--seeds",
    )?;
    let seeds: Vec<u64> = seeds_raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed '{s}'")))
        })
        .collect::<Result<_>>()?;
    let model = parse_model(
        &args
            .model
            .clone()
            .or_else(|| file.get("model").map(str::to_string))
            .unwrap_or_else(|| "ff".to_string()),
    )?;
    let out = require(
        args.out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from)),
        "--out",
    )?;
    let episodes = args
        .episodes
        .or(file.get_parsed("episodes")?)
        .unwrap_or(2500);
    let overrides = merge_overrides(&args.common, &file)?;
    let mut specs = Vec::new();
    for &method in &methods {
        for &seed in &seeds {
            let mut spec = RunSpec {
                scenario,
                method,
                model,
                seed,
                episodes,
                out: PathBuf::new(),
                overrides: overrides.clone(),
            };
            spec.out = out.join(spec.run_label());
            specs.push(spec);
        }
    }
    Ok(specs)
}

/// Process exit codes: 0 success, 2 usage error, 3 training collapse.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_COLLAPSE: i32 = 3;

/// Entry point used by the binary. Returns the process exit code.
pub fn execute(args: CliArgs) -> i32 {
    match args.command {
        CliCommand::Run(run_args) => {
            let spec = match build_run_spec(&run_args) {
                Ok(spec) => spec,
                Err(err) => {
                    eprintln!("error: {err}");
                    return EXIT_USAGE;
                }
            };
            match run(&spec) {
                Ok(art) if art.collapsed => {
                    eprintln!("run {} collapsed; partial outputs retained", spec.run_label());
                    EXIT_COLLAPSE
                }
                Ok(art) => {
                    if let Some(p) = art.metrics.points.last() {
                        println!(
                            "{}: episode {} win_rate {} mean_return {}",
                            spec.run_label(),
                            p.episode,
                            p.win_rate,
                            p.mean_return
                        );
                    }
                    if let Some(d) = art.oracle_distance {
                        println!("oracle sup-distance: {d}");
                    }
                    EXIT_OK
                }
                Err(Error::Config(msg)) => {
                    eprintln!("error: {msg}");
                    EXIT_USAGE
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    1
                }
            }
        }
        CliCommand::Sweep(sweep_args) => {
            let specs = match build_sweep_specs(&sweep_args) {
                Ok(specs) => specs,
                Err(err) => {
                    eprintln!("error: {err}");
                    return EXIT_USAGE;
                }
            };
            if specs.is_empty() {
                println!("empty sweep: nothing to do");
                return EXIT_OK;
            }
            let out_root = specs[0].out.parent().map(PathBuf::from).unwrap_or_default();
            match sweep(&specs, sweep_args.parallelism) {
                Ok(report) => {
                    for (label, msg) in &report.failures {
                        eprintln!("warning: run {label} failed: {msg}");
                    }
                    let path = out_root.join("aggregate.csv");
                    match fs::File::create(&path)
                        .map_err(Error::from)
                        .and_then(|f| write_aggregate_csv(BufWriter::new(f), &report))
                    {
                        Ok(()) => {
                            for group in &report.groups {
                                if let Some(p) = group.points.last() {
                                    println!(
                                        "{} {} {}: final win_rate {} ± {} over {} runs",
                                        group.scenario.name(),
                                        group.method.name(),
                                        model_name(group.model),
                                        p.mean_win_rate,
                                        p.sem_win_rate,
                                        p.runs
                                    );
                                }
                            }
                            println!("aggregate table: {}", path.display());
                            EXIT_OK
                        }
                        Err(err) => {
                            eprintln!("error: {err}");
                            1
                        }
                    }
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    EXIT_USAGE
                }
            }
        }
    }
}
