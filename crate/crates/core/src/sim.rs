//! Episode runners shared by the CLI and the tests: training on the drone
//! environment and policy evaluation with per-episode KPI accumulation.

use std::io::Write;
use std::sync::Arc;
use std::thread;

use crate::agent::{self, AgentError, QTable, TrainConfig, TrainOutcome};
use crate::baseline;
use crate::env::{DroneEnv, EnvModel};
use crate::kpi::{Aggregator, AuditLimits, EpisodeKpis, KpiError, TraceWriter};
use crate::rng::{derive_seed, stream_rng, Stream};

/// Decision rule used during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// Epsilon-greedy over a trained table (`epsilon = 0` is pure greedy).
    Learned { table: &'a QTable, epsilon: f64 },
    /// RSS handover with full allocation.
    Baseline,
}

pub fn audit_limits(model: &EnvModel) -> AuditLimits {
    AuditLimits {
        p_max_w: model.cfg.radio.tx_power_max_w,
        n_bs: model.topology.len(),
        min_ho_interval_ttis: u64::from(model.cfg.radio.min_ho_interval_ttis),
    }
}

/// Seed of evaluation episode `episode`. Shared by every policy so that
/// comparisons see the same trajectories and channel draws.
pub fn eval_episode_seed(seed: u64, episode: u64) -> u64 {
    derive_seed(seed, Stream::EvalEpisode, episode)
}

/// Runs one evaluation episode and folds it into an [`EpisodeKpis`].
pub fn run_episode<W: Write>(
    env: &mut DroneEnv,
    policy: Policy<'_>,
    seed: u64,
    episode: u64,
    mut trace: Option<&mut TraceWriter<W>>,
) -> Result<EpisodeKpis, KpiError> {
    let model = Arc::clone(env.model());
    let mut kpis = EpisodeKpis::new(episode, audit_limits(&model));
    let mut rng = stream_rng(seed, Stream::EvalPolicy, episode);
    env.reset(eval_episode_seed(seed, episode));
    loop {
        let obs = env.observation();
        let action = match policy {
            Policy::Baseline => baseline::act(&model, obs),
            Policy::Learned { table, epsilon } => {
                let key = agent::select_action(table, obs.key, obs.feasible, epsilon, &mut rng)
                    .expect("environment always offers an action");
                model.actions.action(key, obs.state.serving_bs)
            }
        };
        let t = env.step(action).expect("policy chose a feasible action");
        kpis.record(&t.record);
        if let Some(w) = trace.as_deref_mut() {
            w.write(episode, &t.record)?;
        }
        if t.done {
            return Ok(kpis);
        }
    }
}

/// Evaluates `episodes` episodes, split over `workers` threads. The result
/// does not depend on the worker count.
pub fn evaluate(
    model: &Arc<EnvModel>,
    policy: Policy<'_>,
    episodes: u64,
    seed: u64,
    workers: usize,
) -> Aggregator {
    let workers = workers.clamp(1, episodes.max(1) as usize) as u64;
    let run = |w: u64| {
        let mut env = DroneEnv::new(Arc::clone(model), seed);
        let mut agg = Aggregator::new();
        for ep in (w..episodes).step_by(workers as usize) {
            let kpis = run_episode::<std::io::Sink>(&mut env, policy, seed, ep, None)
                .expect("no trace writer, no I/O");
            agg.push(kpis).expect("episode ids are unique");
        }
        agg
    };
    if workers == 1 {
        return run(0);
    }
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers).map(|w| s.spawn(move || run(w))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .try_fold(Aggregator::new(), Aggregator::merge)
            .expect("workers cover disjoint episodes")
    })
}

/// Trains on the drone environment, from scratch or from `initial`.
pub fn train(
    model: &Arc<EnvModel>,
    cfg: &TrainConfig,
    initial: Option<QTable>,
) -> Result<TrainOutcome, AgentError> {
    let mut env = DroneEnv::new(Arc::clone(model), cfg.seed);
    match initial {
        Some(t) => agent::train_from(&mut env, t, cfg),
        None => agent::train(&mut env, cfg),
    }
}

pub fn default_workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}
