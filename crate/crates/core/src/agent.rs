//! Tabular Q-learning with experience replay and a periodically refreshed
//! target snapshot.
//!
//! The learning rate of an update at state `s` is `1 / (1 + n/5)` where `n`
//! counts earlier visits to `s`, either decision epochs spent there or replay
//! updates applied to it (see [`VisitCount`]). Bootstrap targets are read from
//! the snapshot, which is refreshed every `snapshot_period` updates.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, stream_rng, Stream};

pub const MAX_ACTIONS: usize = 128;
pub const POLICY_FORMAT_VERSION: u32 = 1;
const POLICY_MAGIC: &str = "dronecell-policy";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no feasible action to choose from")]
    EmptyActionSet,
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a policy file (missing `{POLICY_MAGIC}` header)")]
    BadHeader,
    #[error("policy format version {found} is not supported (expected {POLICY_FORMAT_VERSION})")]
    VersionMismatch { found: String },
    #[error("corrupt policy file at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

/// Set of action keys, at most [`MAX_ACTIONS`] of them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ActionMask(u128);

impl ActionMask {
    pub const EMPTY: Self = Self(0);

    pub fn all(n: usize) -> Self {
        assert!(n <= MAX_ACTIONS);
        if n == MAX_ACTIONS {
            Self(u128::MAX)
        } else {
            Self((1u128 << n) - 1)
        }
    }

    pub fn insert(&mut self, key: usize) {
        assert!(key < MAX_ACTIONS, "action key {key} out of range");
        self.0 |= 1u128 << key;
    }

    pub fn contains(&self, key: usize) -> bool {
        key < MAX_ACTIONS && self.0 & (1u128 << key) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// The `n`-th smallest key in the set.
    pub fn nth(&self, n: usize) -> Option<usize> {
        self.iter().nth(n)
    }

    /// Keys in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let k = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(k)
            }
        })
    }
}

impl FromIterator<usize> for ActionMask {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut m = Self::EMPTY;
        for k in iter {
            m.insert(k);
        }
        m
    }
}

/// Anything that can supply `max_a Q(s, a)` over a set of actions.
pub trait ValueSource {
    fn row(&self, state: usize) -> &[f64];

    fn max_value(&self, state: usize, mask: ActionMask) -> f64 {
        if mask.is_empty() {
            return 0.0;
        }
        let row = self.row(state);
        let mut best = f64::NEG_INFINITY;
        for a in mask.iter() {
            if row[a] > best {
                best = row[a];
            }
        }
        best
    }
}

/// Dense state-action value table with per-state update counts.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    visits: Vec<u64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        assert!(n_actions <= MAX_ACTIONS, "at most {MAX_ACTIONS} actions");
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
            visits: vec![0; n_states],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.n_actions + action]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[state * self.n_actions + action] = value;
    }

    pub fn visits(&self, state: usize) -> u64 {
        self.visits[state]
    }

    pub fn set_visits(&mut self, state: usize, n: u64) {
        self.visits[state] = n;
    }

    pub fn total_visits(&self) -> u64 {
        self.visits.iter().sum()
    }

    /// States that have received at least one update.
    pub fn visited_states(&self) -> usize {
        self.visits.iter().filter(|&&n| n > 0).count()
    }

    pub fn learning_rate(&self, state: usize) -> f64 {
        1.0 / (1.0 + self.visits[state] as f64 / 5.0)
    }

    /// `Q(s,a) <- (1 - lr) Q(s,a) + lr * y`; does not touch the counts.
    pub fn blend(&mut self, state: usize, action: usize, target: f64) -> f64 {
        let lr = self.learning_rate(state);
        let slot = &mut self.values[state * self.n_actions + action];
        *slot = (1.0 - lr) * *slot + lr * target;
        *slot
    }

    pub fn record_visit(&mut self, state: usize) {
        self.visits[state] += 1;
    }

    /// Highest-valued action in `mask`; ties go to the lowest key.
    pub fn greedy(&self, state: usize, mask: ActionMask) -> Option<usize> {
        let row = self.row(state);
        let mut best: Option<(usize, f64)> = None;
        for a in mask.iter() {
            if best.is_none_or(|(_, v)| row[a] > v) {
                best = Some((a, row[a]));
            }
        }
        best.map(|(a, _)| a)
    }
}

impl ValueSource for QTable {
    fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.n_actions..(state + 1) * self.n_actions]
    }
}

/// Frozen copy of a [`QTable`] used for bootstrap targets.
///
/// Refreshing is O(1): a row is copied out of the live table only the first
/// time it is about to be overwritten after a refresh, so rows that were not
/// touched since the refresh are read straight from the live table.
#[derive(Debug, Clone)]
pub struct TargetSnapshot {
    n_actions: usize,
    rows: Vec<f64>,
    row_epoch: Vec<u64>,
    epoch: u64,
}

impl TargetSnapshot {
    pub fn new(live: &QTable) -> Self {
        Self {
            n_actions: live.n_actions,
            rows: vec![0.0; live.values.len()],
            row_epoch: vec![0; live.n_states],
            epoch: 1,
        }
    }

    /// Makes the snapshot equal to the live table as it is now.
    pub fn refresh(&mut self) {
        self.epoch += 1;
    }

    /// Must be called before `live` row `state` is modified.
    pub fn preserve(&mut self, live: &QTable, state: usize) {
        if self.row_epoch[state] != self.epoch {
            let span = state * self.n_actions..(state + 1) * self.n_actions;
            self.rows[span.clone()].copy_from_slice(&live.values[span]);
            self.row_epoch[state] = self.epoch;
        }
    }

    pub fn view<'a>(&'a self, live: &'a QTable) -> SnapshotView<'a> {
        SnapshotView { snap: self, live }
    }
}

pub struct SnapshotView<'a> {
    snap: &'a TargetSnapshot,
    live: &'a QTable,
}

impl ValueSource for SnapshotView<'_> {
    fn row(&self, state: usize) -> &[f64] {
        if self.snap.row_epoch[state] == self.snap.epoch {
            let n = self.snap.n_actions;
            &self.snap.rows[state * n..(state + 1) * n]
        } else {
            self.live.row(state)
        }
    }
}

/// One stored transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub state: u32,
    pub action: u16,
    pub reward: f64,
    pub next_state: u32,
    pub terminal: bool,
    /// Actions feasible at `next_state`; the bootstrap max ranges over these.
    pub next_feasible: ActionMask,
}

/// `y = w` at terminal transitions, else `w + beta * max_x target(s', x)`.
pub fn bootstrap_target<T: ValueSource + ?Sized>(target: &T, exp: &Experience, beta: f64) -> f64 {
    if exp.terminal {
        exp.reward
    } else {
        exp.reward + beta * target.max_value(exp.next_state as usize, exp.next_feasible)
    }
}

/// Applies one Q-learning update of `(s, a)` against `target`.
pub fn q_update<T: ValueSource + ?Sized>(
    table: &mut QTable,
    target: &T,
    exp: &Experience,
    beta: f64,
) -> f64 {
    let y = bootstrap_target(target, exp, beta);
    let q = table.blend(exp.state as usize, exp.action as usize, y);
    table.record_visit(exp.state as usize);
    q
}

/// Uniform with probability `epsilon`, otherwise greedy over `feasible`.
pub fn select_action<R: Rng + ?Sized>(
    table: &QTable,
    state: usize,
    feasible: ActionMask,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize, AgentError> {
    if feasible.is_empty() {
        return Err(AgentError::EmptyActionSet);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        let pick = rng.random_range(0..feasible.len());
        return Ok(feasible.nth(pick).expect("index below set size"));
    }
    Ok(table.greedy(state, feasible).expect("non-empty set"))
}

/// Fixed-capacity ring buffer of experiences.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    items: Vec<Experience>,
    capacity: usize,
    next: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, exp: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(exp);
        } else {
            self.items[self.next] = exp;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.items[i]
    }

    /// Indices of up to `m` distinct stored experiences.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> index::IndexVec {
        index::sample(rng, self.items.len(), m.min(self.items.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Every training action is drawn uniformly from the feasible set.
    Random,
    /// Epsilon-greedy with a per-episode multiplicative epsilon decay.
    EpsilonGreedy,
}

/// What advances the visit count `n` of the `1/(1+n/5)` learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitCount {
    /// Each decision epoch spent in the state.
    Decisions,
    /// Each replay update of the state. With `batch_size` updates per epoch
    /// the rate decays that many times faster and early values freeze.
    Updates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub batch_size: usize,
    pub snapshot_period: u64,
    pub replay_capacity: usize,
    pub episodes: u64,
    pub behavior: Behavior,
    pub epsilon_start: f64,
    pub epsilon_floor: f64,
    pub epsilon_decay: f64,
    pub visit_count: VisitCount,
    /// Filled from the scenario seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.8,
            batch_size: 32,
            snapshot_period: 100,
            replay_capacity: 50_000,
            episodes: 5_000,
            behavior: Behavior::EpsilonGreedy,
            epsilon_start: 1.0,
            epsilon_floor: 0.05,
            epsilon_decay: 0.995,
            visit_count: VisitCount::Decisions,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("batch_size and replay_capacity must be positive");
        }
        if self.snapshot_period == 0 {
            return bad("snapshot_period must be at least 1");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon_start)
            || !unit.contains(&self.epsilon_floor)
            || !unit.contains(&self.epsilon_decay)
        {
            return bad("epsilon_start, epsilon_floor and epsilon_decay must lie in [0, 1]");
        }
        Ok(())
    }

    /// Exploration rate used during episode `episode` (0-based).
    pub fn epsilon(&self, episode: u64) -> f64 {
        match self.behavior {
            Behavior::Random => 1.0,
            Behavior::EpsilonGreedy => {
                let decayed = self.epsilon_start * self.epsilon_decay.powf(episode as f64);
                decayed.max(self.epsilon_floor).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub state: usize,
    pub feasible: ActionMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub reward: f64,
    pub next: Observation,
    pub done: bool,
}

/// Episodic MDP with discrete states and actions.
pub trait Environment {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Bound on `|reward|`, used to check value boundedness.
    fn reward_bound(&self) -> f64;
    fn reset(&mut self, seed: u64) -> Observation;
    /// `action` must be in the feasible set of the current observation.
    fn step(&mut self, action: usize) -> Step;
    fn handovers(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: u64,
    pub steps: u64,
    pub total_reward: f64,
    pub epsilon: f64,
    pub handovers: u64,
    pub updates: u64,
}

/// Incremental trainer: keeps the table, snapshot and replay memory between
/// episodes so training can be resumed.
pub struct Trainer {
    cfg: TrainConfig,
    table: QTable,
    snapshot: TargetSnapshot,
    memory: ReplayMemory,
    rng: ChaCha8Rng,
    updates: u64,
    value_bound: f64,
}

impl Trainer {
    pub fn new(table: QTable, cfg: TrainConfig, reward_bound: f64) -> Result<Self, AgentError> {
        cfg.validate()?;
        let snapshot = TargetSnapshot::new(&table);
        Ok(Self {
            memory: ReplayMemory::new(cfg.replay_capacity),
            rng: stream_rng(cfg.seed, Stream::Agent, 0),
            value_bound: reward_bound / (1.0 - cfg.beta),
            snapshot,
            table,
            cfg,
            updates: 0,
        })
    }

    pub fn table(&self) -> &QTable {
        &self.table
    }

    pub fn into_table(self) -> QTable {
        self.table
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn replay(&mut self) {
        let batch = self.memory.sample(self.cfg.batch_size, &mut self.rng);
        // gathering first lets the scattered memory reads overlap
        let batch: Vec<Experience> = batch.iter().map(|i| *self.memory.get(i)).collect();
        for exp in batch {
            let y = bootstrap_target(&self.snapshot.view(&self.table), &exp, self.cfg.beta);
            self.snapshot.preserve(&self.table, exp.state as usize);
            let q = self.table.blend(exp.state as usize, exp.action as usize, y);
            if self.cfg.visit_count == VisitCount::Updates {
                self.table.record_visit(exp.state as usize);
            }
            assert!(
                q.abs() <= self.value_bound * (1.0 + 1e-9),
                "Q({}, {}) = {q} escaped the bound {}",
                exp.state,
                exp.action,
                self.value_bound
            );
            self.updates += 1;
            if self.updates.is_multiple_of(self.cfg.snapshot_period) {
                self.snapshot.refresh();
            }
        }
    }

    /// Runs one training episode; `episode` selects epsilon and the seed.
    pub fn run_episode<E: Environment>(&mut self, env: &mut E, episode: u64) -> EpisodeLog {
        let epsilon = self.cfg.epsilon(episode);
        let mut obs = env.reset(derive_seed(self.cfg.seed, Stream::TrainEpisode, episode));
        let mut steps = 0;
        let mut total_reward = 0.0;
        loop {
            let action = select_action(&self.table, obs.state, obs.feasible, epsilon, &mut self.rng)
                .expect("environment offered no feasible action");
            let step = env.step(action);
            self.memory.push(Experience {
                state: obs.state as u32,
                action: action as u16,
                reward: step.reward,
                next_state: step.next.state as u32,
                terminal: step.done,
                next_feasible: step.next.feasible,
            });
            self.replay();
            if self.cfg.visit_count == VisitCount::Decisions {
                self.table.record_visit(obs.state);
            }
            steps += 1;
            total_reward += step.reward;
            if step.done {
                break;
            }
            obs = step.next;
        }
        EpisodeLog {
            episode,
            steps,
            total_reward,
            epsilon,
            handovers: env.handovers(),
            updates: self.updates,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub table: QTable,
    pub log: Vec<EpisodeLog>,
}

/// Trains a fresh zero-initialized table for `cfg.episodes` episodes.
pub fn train<E: Environment>(env: &mut E, cfg: &TrainConfig) -> Result<TrainOutcome, AgentError> {
    let table = QTable::new(env.n_states(), env.n_actions());
    train_from(env, table, cfg)
}

/// Continues training from an existing table.
pub fn train_from<E: Environment>(
    env: &mut E,
    table: QTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, AgentError> {
    let mut trainer = Trainer::new(table, cfg.clone(), env.reward_bound())?;
    let log = (0..cfg.episodes)
        .map(|ep| trainer.run_episode(env, ep))
        .collect();
    Ok(TrainOutcome {
        table: trainer.into_table(),
        log,
    })
}

/// Writes the table as versioned text. Values are stored as IEEE-754 bit
/// patterns so a reload is bit-exact; zero entries are omitted.
pub fn save_policy<W: Write>(
    table: &QTable,
    meta: &BTreeMap<String, String>,
    mut w: W,
) -> Result<(), PolicyError> {
    writeln!(w, "{POLICY_MAGIC} v{POLICY_FORMAT_VERSION}")?;
    writeln!(w, "states {}", table.n_states)?;
    writeln!(w, "actions {}", table.n_actions)?;
    for (k, v) in meta {
        writeln!(w, "meta {k} {v}")?;
    }
    for (s, &n) in table.visits.iter().enumerate() {
        if n > 0 {
            writeln!(w, "visits {s} {n}")?;
        }
    }
    for (i, v) in table.values.iter().enumerate() {
        if v.to_bits() != 0 {
            let (s, a) = (i / table.n_actions, i % table.n_actions);
            writeln!(w, "q {s} {a} {:016x}", v.to_bits())?;
        }
    }
    writeln!(w, "end")?;
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`save_policy`].
pub fn load_policy<R: BufRead>(r: R) -> Result<(QTable, BTreeMap<String, String>), PolicyError> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), PolicyError> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(PolicyError::Corrupt {
                line: 0,
                reason: format!("unexpected end of file, expected {what}"),
            }),
        }
    };
    let corrupt = |line: usize, reason: &str| PolicyError::Corrupt {
        line,
        reason: reason.to_string(),
    };

    let (_, header) = next("header")?;
    let version = header
        .strip_prefix(POLICY_MAGIC)
        .map(str::trim)
        .ok_or(PolicyError::BadHeader)?;
    if version != format!("v{POLICY_FORMAT_VERSION}") {
        return Err(PolicyError::VersionMismatch {
            found: version.to_string(),
        });
    }
    let mut dim = |key: &str| -> Result<usize, PolicyError> {
        let (n, l) = next(key)?;
        l.strip_prefix(key)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| corrupt(n, &format!("expected `{key} <count>`")))
    };
    let n_states = dim("states")?;
    let n_actions = dim("actions")?;
    if n_actions > MAX_ACTIONS {
        return Err(corrupt(3, "too many actions"));
    }
    let mut table = QTable::new(n_states, n_actions);
    let mut meta = BTreeMap::new();
    loop {
        let (n, line) = next("`end`")?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("end") => break,
            Some("meta") => {
                let k = parts.next().ok_or_else(|| corrupt(n, "meta without key"))?;
                let v = parts.collect::<Vec<_>>().join(" ");
                meta.insert(k.to_string(), v);
            }
            Some("visits") => {
                let s: usize = parse_field(parts.next(), n, "state")?;
                let c: u64 = parse_field(parts.next(), n, "count")?;
                if s >= n_states {
                    return Err(corrupt(n, "state out of range"));
                }
                table.visits[s] = c;
            }
            Some("q") => {
                let s: usize = parse_field(parts.next(), n, "state")?;
                let a: usize = parse_field(parts.next(), n, "action")?;
                let bits = parts
                    .next()
                    .and_then(|h| u64::from_str_radix(h, 16).ok())
                    .ok_or_else(|| corrupt(n, "bad value bits"))?;
                if s >= n_states || a >= n_actions {
                    return Err(corrupt(n, "entry out of range"));
                }
                table.set(s, a, f64::from_bits(bits));
            }
            _ => return Err(corrupt(n, "unknown record")),
        }
    }
    Ok((table, meta))
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, PolicyError> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| PolicyError::Corrupt {
            line,
            reason: format!("bad {what}"),
        })
}
