//! Subcommand implementations behind the `dronecell` binary. Every output
//! file starts with `#` lines holding the command and the resolved config.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::agent::{self, EpisodeLog, QTable};
use crate::config::{ConfigError, RawConfig, ScenarioConfig, Sweep};
use crate::env::{DroneEnv, EnvModel};
use crate::kpi::{self, Aggregator, KpiSummary, TraceWriter};
use crate::sim::{self, Policy};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CommandError {
    /// Process exit code: 1 for configuration and usage errors, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) | CommandError::Usage(_) => 1,
            CommandError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CommandError {
    CommandError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CommandError {
    CommandError::Usage(e.to_string())
}

/// Inputs common to every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub sweep: Option<String>,
    pub episodes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Train,
    Eval,
}

impl Invocation {
    fn raw(&self) -> Result<RawConfig, CommandError> {
        let mut raw = match &self.config {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::default(),
        };
        if let Some(seed) = self.seed {
            raw.set("seed", toml::Value::Integer(seed as i64))?;
        }
        Ok(raw)
    }

    fn apply_episodes(&self, cfg: &mut ScenarioConfig, phase: Phase) -> Result<(), CommandError> {
        if let Some(n) = self.episodes {
            if n == 0 {
                return Err(usage("--episodes must be positive"));
            }
            match phase {
                Phase::Train => cfg.train.episodes = n,
                Phase::Eval => cfg.eval.episodes = n,
            }
        }
        Ok(())
    }

    /// `(label, config)` per sweep point, or the single resolved config.
    fn scenarios(&self, phase: Phase) -> Result<Vec<(String, ScenarioConfig)>, CommandError> {
        let raw = self.raw()?;
        let mut points = match &self.sweep {
            Some(def) => Sweep::parse(def)?.expand(&raw)?,
            None => vec![("base".to_string(), raw.resolve()?)],
        };
        for (_, cfg) in &mut points {
            self.apply_episodes(cfg, phase)?;
        }
        Ok(points)
    }

    fn out_dir(&self, cfg: &ScenarioConfig) -> Result<PathBuf, CommandError> {
        let dir = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        fs::create_dir_all(&dir).map_err(runtime)?;
        Ok(dir)
    }
}

fn model(cfg: &ScenarioConfig) -> Result<Arc<EnvModel>, CommandError> {
    EnvModel::new(cfg.env()).map_err(|e| CommandError::Config(ConfigError::Parse(e.to_string())))
}

fn create(dir: &Path, name: &str, command: &str, cfg: &ScenarioConfig) -> Result<BufWriter<File>, CommandError> {
    let mut w = BufWriter::new(File::create(dir.join(name)).map_err(runtime)?);
    let header = format!(
        "dronecell {command} (format 1)\nseed = {}\n{}",
        cfg.seed,
        cfg.to_toml()
    );
    kpi::write_comment(&mut w, &header).map_err(runtime)?;
    Ok(w)
}

fn finish(mut w: BufWriter<File>) -> Result<(), CommandError> {
    w.flush().map_err(runtime)
}

/// Identifies the state and action spaces a table was trained for.
pub fn space_fingerprint(model: &EnvModel) -> String {
    let q = &model.cfg.quantizer;
    format!(
        "states={};actions={};bs={};pl={}/{}/{};q={:?};h={:?};v={:?}",
        model.n_states(),
        model.actions.len(),
        model.topology.len(),
        q.pl_min_db,
        q.pl_max_db,
        q.pl_step_db,
        q.queue_edges_packets,
        if q.altitudes_m.is_empty() {
            vec![model.cfg.drone.altitude_m]
        } else {
            q.altitudes_m.clone()
        },
        if q.speeds_mps.is_empty() {
            vec![model.cfg.drone.speed_mps]
        } else {
            q.speeds_mps.clone()
        },
    )
}

pub fn load_policy_for(path: &Path, model: &EnvModel) -> Result<QTable, CommandError> {
    let f = File::open(path)
        .map_err(|e| usage(format!("cannot open policy {}: {e}", path.display())))?;
    let (table, meta) = agent::load_policy(BufReader::new(f)).map_err(runtime)?;
    let want = space_fingerprint(model);
    match meta.get("space") {
        Some(found) if *found == want => Ok(table),
        found => Err(usage(format!(
            "policy {} was trained for a different scenario (space {:?}, expected {want})",
            path.display(),
            found
        ))),
    }
}

fn save_policy_to(path: &Path, table: &QTable, model: &EnvModel, cfg: &ScenarioConfig) -> Result<(), CommandError> {
    let mut meta = BTreeMap::new();
    meta.insert("space".to_string(), space_fingerprint(model));
    meta.insert("seed".to_string(), cfg.seed.to_string());
    meta.insert("episodes".to_string(), cfg.train.episodes.to_string());
    let w = BufWriter::new(File::create(path).map_err(runtime)?);
    agent::save_policy(table, &meta, w).map_err(runtime)
}

fn write_train_log(dir: &Path, name: &str, cfg: &ScenarioConfig, log: &[EpisodeLog]) -> Result<(), CommandError> {
    let w = create(dir, name, "train", cfg)?;
    let mut out = csv::Writer::from_writer(w);
    for row in log {
        out.serialize(row).map_err(runtime)?;
    }
    let w = out.into_inner().map_err(runtime)?;
    finish(w)
}

fn write_kpis(
    dir: &Path,
    prefix: &str,
    command: &str,
    cfg: &ScenarioConfig,
    agg: &Aggregator,
) -> Result<KpiSummary, CommandError> {
    let summary = agg.summary().map_err(runtime)?;
    let mut w = create(dir, &format!("{prefix}_episodes.csv"), command, cfg)?;
    kpi::write_episodes_csv(&mut w, agg).map_err(runtime)?;
    finish(w)?;
    let mut w = create(dir, &format!("{prefix}_summary.csv"), command, cfg)?;
    kpi::write_summary_csv(&mut w, &[(prefix.to_string(), summary.clone())]).map_err(runtime)?;
    finish(w)?;
    write_heatmap(dir, &format!("{prefix}_heatmap.csv"), command, cfg, agg)?;
    Ok(summary)
}

fn write_heatmap(dir: &Path, name: &str, command: &str, cfg: &ScenarioConfig, agg: &Aggregator) -> Result<(), CommandError> {
    let grid = kpi::heatmap(
        agg.episodes(),
        cfg.eval.heatmap_cell_m,
        (cfg.topology.area_width_m, cfg.topology.area_height_m),
    )
    .map_err(|e| CommandError::Config(ConfigError::Parse(e.to_string())))?;
    let mut w = create(dir, name, command, cfg)?;
    grid.write_csv(&mut w).map_err(runtime)?;
    finish(w)
}

fn write_trace(dir: &Path, name: &str, command: &str, cfg: &ScenarioConfig, model: &Arc<EnvModel>, policy: Policy<'_>) -> Result<(), CommandError> {
    let w = create(dir, name, command, cfg)?;
    let mut trace = TraceWriter::new(w).map_err(runtime)?;
    let mut env = DroneEnv::new(Arc::clone(model), cfg.seed);
    for ep in 0..cfg.eval.episodes {
        sim::run_episode(&mut env, policy, cfg.seed, ep, Some(&mut trace)).map_err(runtime)?;
    }
    finish(trace.finish().map_err(runtime)?)
}

fn single(inv: &Invocation, phase: Phase) -> Result<ScenarioConfig, CommandError> {
    if inv.sweep.is_some() {
        return Err(usage("--sweep is only accepted by the sweep and heatmap subcommands"));
    }
    Ok(inv.scenarios(phase)?.remove(0).1)
}

fn train_one(
    cfg: &ScenarioConfig,
    model: &Arc<EnvModel>,
    initial: Option<QTable>,
) -> Result<agent::TrainOutcome, CommandError> {
    sim::train(model, &cfg.train_config(), initial).map_err(runtime)
}

/// Trains a policy (optionally continuing from `--policy`) and writes
/// `policy.txt` and `train_log.csv`.
pub fn cmd_train(inv: &Invocation) -> Result<PathBuf, CommandError> {
    let cfg = single(inv, Phase::Train)?;
    let model = model(&cfg)?;
    let initial = inv
        .policy
        .as_deref()
        .map(|p| load_policy_for(p, &model))
        .transpose()?;
    let dir = inv.out_dir(&cfg)?;
    let outcome = train_one(&cfg, &model, initial)?;
    let path = dir.join("policy.txt");
    save_policy_to(&path, &outcome.table, &model, &cfg)?;
    write_train_log(&dir, "train_log.csv", &cfg, &outcome.log)?;
    Ok(path)
}

/// Evaluates a trained policy; writes episode, summary and heatmap CSVs.
pub fn cmd_eval(inv: &Invocation) -> Result<KpiSummary, CommandError> {
    let cfg = single(inv, Phase::Eval)?;
    let model = model(&cfg)?;
    let path = inv
        .policy
        .as_deref()
        .ok_or_else(|| usage("eval requires --policy"))?;
    let table = load_policy_for(path, &model)?;
    let dir = inv.out_dir(&cfg)?;
    let policy = Policy::Learned {
        table: &table,
        epsilon: cfg.eval.epsilon,
    };
    let agg = sim::evaluate(&model, policy, cfg.eval.episodes, cfg.seed, sim::default_workers());
    if cfg.eval.trace {
        write_trace(&dir, "eval_trace.csv", "eval", &cfg, &model, policy)?;
    }
    write_kpis(&dir, "eval", "eval", &cfg, &agg)
}

/// Runs the RSS benchmark; writes episode, summary and heatmap CSVs.
pub fn cmd_baseline(inv: &Invocation) -> Result<KpiSummary, CommandError> {
    let cfg = single(inv, Phase::Eval)?;
    let model = model(&cfg)?;
    let dir = inv.out_dir(&cfg)?;
    let agg = sim::evaluate(&model, Policy::Baseline, cfg.eval.episodes, cfg.seed, sim::default_workers());
    if cfg.eval.trace {
        write_trace(&dir, "baseline_trace.csv", "baseline", &cfg, &model, Policy::Baseline)?;
    }
    write_kpis(&dir, "baseline", "baseline", &cfg, &agg)
}

/// Trains and evaluates one policy per sweep point and writes
/// `sweep_summary.csv` with one normalized row per point. With `--policy`
/// the same table is evaluated at every point instead of retraining.
pub fn cmd_sweep(inv: &Invocation) -> Result<Vec<(String, KpiSummary)>, CommandError> {
    if inv.sweep.is_none() {
        return Err(usage("sweep requires --sweep name=v1,v2,..."));
    }
    let points = inv.scenarios(Phase::Train)?;
    let dir = inv.out_dir(&points[0].1)?;
    let mut rows = Vec::new();
    for (label, cfg) in points {
        let model = model(&cfg)?;
        let table = match &inv.policy {
            Some(p) => load_policy_for(p, &model)?,
            None => train_one(&cfg, &model, None)?.table,
        };
        let agg = sim::evaluate(
            &model,
            Policy::Learned {
                table: &table,
                epsilon: cfg.eval.epsilon,
            },
            cfg.eval.episodes,
            cfg.seed,
            sim::default_workers(),
        );
        rows.push((label, agg.summary().map_err(runtime)?));
    }
    let base = inv.raw()?.resolve()?;
    let mut w = create(&dir, "sweep_summary.csv", "sweep", &base)?;
    kpi::write_comment(&mut w, &format!("sweep {}", inv.sweep.as_deref().unwrap_or(""))).map_err(runtime)?;
    kpi::write_summary_csv(&mut w, &rows).map_err(runtime)?;
    finish(w)?;
    Ok(rows)
}

/// Writes handover heatmaps: of the policy given by `--policy`, or of the
/// baseline without one. With `--sweep` a policy is trained per point and
/// one `heatmap_<n>.csv` is written per point.
pub fn cmd_heatmap(inv: &Invocation) -> Result<Vec<(String, u64)>, CommandError> {
    let swept = inv.sweep.is_some();
    let points = inv.scenarios(Phase::Eval)?;
    let dir = inv.out_dir(&points[0].1)?;
    let mut totals = Vec::new();
    for (i, (label, cfg)) in points.into_iter().enumerate() {
        let model = model(&cfg)?;
        let table = match (&inv.policy, swept) {
            (Some(p), _) => Some(load_policy_for(p, &model)?),
            (None, true) => Some(train_one(&cfg, &model, None)?.table),
            (None, false) => None,
        };
        let policy = match &table {
            Some(t) => Policy::Learned {
                table: t,
                epsilon: cfg.eval.epsilon,
            },
            None => Policy::Baseline,
        };
        let agg = sim::evaluate(&model, policy, cfg.eval.episodes, cfg.seed, sim::default_workers());
        let name = if swept {
            format!("heatmap_{i}.csv")
        } else {
            "heatmap.csv".to_string()
        };
        write_heatmap(&dir, &name, &format!("heatmap {label}"), &cfg, &agg)?;
        totals.push((label, agg.summary().map_err(runtime)?.total_handovers));
    }
    Ok(totals)
}
