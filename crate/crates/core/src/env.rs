//! The drone-crossing MDP: topology, kinematics, terrestrial RRB occupancy,
//! state quantization, action feasibility, reward and the per-TTI step.
//!
//! The agent acts every TTI. Actions that change the serving BS are only
//! feasible on radio-frame boundaries once the minimum handover interval has
//! elapsed, which keeps one Q-table while honouring both decision cadences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, ActionMask, MAX_ACTIONS};
use crate::channel::{self, ChannelError, ChannelRealization, LargeScale, LinkGeometry, Position3D};
use crate::kpi::TtiRecord;
use crate::link::{self, Allocation, LinkBudget, SUBCARRIERS_PER_RRB, SUBCARRIER_BW_HZ};
use crate::rng::{derive_seed, Stream};
use crate::traffic::{self, BufferState, TrafficConfig};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Traffic(#[from] traffic::TrafficError),
    #[error("action {0:?} is not feasible in the current state")]
    Infeasible(Action),
    #[error("the episode has already ended")]
    EpisodeOver,
}

fn config_err(msg: impl Into<String>) -> EnvError {
    EnvError::Config(msg.into())
}

/// Base-station layout and spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    /// `[x, y]` ground coordinates of each BS, meters.
    pub bs_positions: Vec<[f64; 2]>,
    pub bs_height_m: f64,
    pub fc_ghz: f64,
    /// RRBs per BS that may carry the drone (`N_b`).
    pub rrbs_total: u32,
    pub area_width_m: f64,
    pub area_height_m: f64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            bs_positions: vec![[50.0, 100.0], [200.0, 400.0], [450.0, 50.0]],
            bs_height_m: 25.0,
            fc_ghz: 2.0,
            rrbs_total: 4,
            area_width_m: 500.0,
            area_height_m: 500.0,
        }
    }
}

/// Transmitter, receiver and timing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub tx_power_max_w: f64,
    /// Kept for completeness; no modeled quantity consumes it.
    pub circuit_power_w: f64,
    /// Number of power levels `P_max / 2^k`, `k = 0..levels`.
    pub power_levels: u32,
    pub gtx_db: f64,
    pub grx_db: f64,
    pub noise_figure_db: f64,
    /// Interference density on the serving cell, W/Hz per subcarrier.
    pub ext_interference_w_per_hz: f64,
    pub tti_s: f64,
    pub frame_ttis: u32,
    pub min_ho_interval_ttis: u32,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            tx_power_max_w: 0.2,
            circuit_power_w: 0.05,
            power_levels: 4,
            gtx_db: 0.0,
            grx_db: 0.0,
            noise_figure_db: 0.0,
            ext_interference_w_per_hz: 0.0,
            tti_s: 1e-3,
            frame_ttis: 10,
            min_ho_interval_ttis: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DroneConfig {
    pub altitude_m: f64,
    pub speed_mps: f64,
}

impl Default for DroneConfig {
    fn default() -> Self {
        Self {
            altitude_m: 50.0,
            speed_mps: 15.0,
        }
    }
}

/// Reward weights `alpha_s`, `alpha_d`, `alpha_f`, `alpha_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub alpha_f: f64,
    pub alpha_h: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha_s: 0.01,
            alpha_d: 0.5,
            alpha_f: 0.5,
            alpha_h: 0.5,
        }
    }
}

impl RewardWeights {
    /// Largest possible `|reward|`.
    pub fn bound(&self) -> f64 {
        self.alpha_s + self.alpha_d + self.alpha_f + self.alpha_h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub pl_min_db: f64,
    pub pl_max_db: f64,
    pub pl_step_db: f64,
    /// Inclusive upper edges of the queue bins, in packets; the last bin
    /// holds everything above the final edge.
    pub queue_edges_packets: Vec<u64>,
    /// Altitude bin values; empty means just the scenario altitude.
    pub altitudes_m: Vec<f64>,
    /// Speed bin values; empty means just the scenario speed.
    pub speeds_mps: Vec<f64>,
    /// Queue normalizer of the delay reward, in packets.
    pub queue_norm_packets: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            pl_min_db: 60.0,
            pl_max_db: 130.0,
            pl_step_db: 5.0,
            queue_edges_packets: vec![0, 2, 10],
            altitudes_m: Vec::new(),
            speeds_mps: Vec::new(),
            queue_norm_packets: 10,
        }
    }
}

/// Everything that defines the MDP.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub topology: TopologyConfig,
    pub radio: RadioConfig,
    pub traffic: TrafficConfig,
    pub quantizer: QuantizerConfig,
    pub weights: RewardWeights,
    pub drone: DroneConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseStation {
    pub id: usize,
    pub position: Position3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    pub bs: Vec<BaseStation>,
    pub fc_ghz: f64,
    pub rrbs_total: u32,
    pub area: (f64, f64),
}

impl NetworkTopology {
    pub fn from_config(cfg: &TopologyConfig) -> Result<Self, EnvError> {
        if cfg.bs_positions.len() < 2 {
            return Err(config_err("at least two base stations are required"));
        }
        let (w, h) = (cfg.area_width_m, cfg.area_height_m);
        if !(w > 0.0 && h > 0.0) {
            return Err(config_err("area dimensions must be positive"));
        }
        if !(cfg.fc_ghz > 0.0) || !(cfg.bs_height_m > 0.0) {
            return Err(config_err("carrier frequency and BS height must be positive"));
        }
        if cfg.rrbs_total == 0 {
            return Err(config_err("rrbs_total must be at least 1"));
        }
        let bs = cfg
            .bs_positions
            .iter()
            .enumerate()
            .map(|(id, &[x, y])| {
                if (0.0..=w).contains(&x) && (0.0..=h).contains(&y) {
                    Ok(BaseStation {
                        id,
                        position: Position3D::new(x, y, cfg.bs_height_m),
                    })
                } else {
                    Err(config_err(format!("BS {id} at ({x}, {y}) lies outside the area")))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            bs,
            fc_ghz: cfg.fc_ghz,
            rrbs_total: cfg.rrbs_total,
            area: (w, h),
        })
    }

    pub fn len(&self) -> usize {
        self.bs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bs.is_empty()
    }

    /// The BS closest to the area's origin corner.
    pub fn bottom_left(&self) -> usize {
        self.bs
            .iter()
            .min_by(|a, b| {
                a.position
                    .x
                    .hypot(a.position.y)
                    .total_cmp(&b.position.x.hypot(b.position.y))
            })
            .map(|b| b.id)
            .expect("topology has base stations")
    }
}

/// Constant-altitude, constant-velocity crossing of the area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroneKinematics {
    pub altitude_h: f64,
    pub speed_v: f64,
    pub start: Position3D,
    pub heading: (f64, f64),
    pub position: Position3D,
}

impl DroneKinematics {
    pub fn new(altitude_h: f64, speed_v: f64, start_y: f64) -> Self {
        let start = Position3D::new(0.0, start_y, altitude_h);
        Self {
            altitude_h,
            speed_v,
            start,
            heading: (1.0, 0.0),
            position: start,
        }
    }

    /// Position after `tti` steps of length `tti_s`, computed from the start
    /// so no rounding accumulates.
    pub fn advance_to(&mut self, tti: u64, tti_s: f64) {
        let d = self.speed_v * tti_s * tti as f64;
        self.position = Position3D::new(
            self.start.x + self.heading.0 * d,
            self.start.y + self.heading.1 * d,
            self.altitude_h,
        );
    }

    pub fn inside(&self, area: (f64, f64)) -> bool {
        let p = self.position;
        p.x >= 0.0 && p.x < area.0 && p.y >= 0.0 && p.y <= area.1
    }
}

/// Transmit decision for one TTI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Transmit {
        target_bs: usize,
        rrb_count: u32,
        /// Index into [`ActionSpace::power_w`]; 0 is the lowest power.
        power_level: usize,
    },
    /// Stay on the serving BS without transmitting.
    Silent,
}

/// Bijection between [`Action`]s and dense integer keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    n_bs: usize,
    max_rrbs: u32,
    power_w: Vec<f64>,
}

impl ActionSpace {
    pub fn new(n_bs: usize, max_rrbs: u32, p_max_w: f64, levels: u32) -> Result<Self, EnvError> {
        if levels == 0 || max_rrbs == 0 || !(p_max_w > 0.0) {
            return Err(config_err("need at least one power level, one RRB and P_max > 0"));
        }
        let n = n_bs * max_rrbs as usize * levels as usize + 1;
        if n > MAX_ACTIONS {
            return Err(config_err(format!(
                "{n} actions exceed the supported maximum of {MAX_ACTIONS}"
            )));
        }
        // ascending: P_max/2^(L-1), ..., P_max/2, P_max
        let power_w = (0..levels)
            .rev()
            .map(|k| p_max_w / f64::from(1u32 << k))
            .collect();
        Ok(Self {
            n_bs,
            max_rrbs,
            power_w,
        })
    }

    pub fn len(&self) -> usize {
        self.n_bs * self.max_rrbs as usize * self.power_w.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn power_w(&self) -> &[f64] {
        &self.power_w
    }

    pub fn max_power_level(&self) -> usize {
        self.power_w.len() - 1
    }

    pub fn max_rrbs(&self) -> u32 {
        self.max_rrbs
    }

    pub fn silent_key(&self) -> usize {
        self.len() - 1
    }

    /// Dense key of `action` taken while attached to `serving`.
    ///
    /// Targets are encoded as offsets from the serving BS, so key 0 is always
    /// "stay, 1 RRB, lowest power" and a lowest-key tie-break never triggers a
    /// handover by accident.
    pub fn key(&self, action: Action, serving: usize) -> usize {
        match action {
            Action::Silent => self.silent_key(),
            Action::Transmit {
                target_bs,
                rrb_count,
                power_level,
            } => {
                assert!(target_bs < self.n_bs && serving < self.n_bs);
                assert!((1..=self.max_rrbs).contains(&rrb_count));
                assert!(power_level < self.power_w.len());
                let offset = (target_bs + self.n_bs - serving) % self.n_bs;
                (offset * self.max_rrbs as usize + (rrb_count - 1) as usize) * self.power_w.len()
                    + power_level
            }
        }
    }

    pub fn action(&self, key: usize, serving: usize) -> Action {
        assert!(key < self.len(), "action key {key} out of range");
        if key == self.silent_key() {
            return Action::Silent;
        }
        let levels = self.power_w.len();
        let power_level = key % levels;
        let rest = key / levels;
        let offset = rest / self.max_rrbs as usize;
        Action::Transmit {
            target_bs: (serving + offset) % self.n_bs,
            rrb_count: (rest % self.max_rrbs as usize) as u32 + 1,
            power_level,
        }
    }
}

/// Quantized MDP state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EnvState {
    pub h_bin: usize,
    pub v_bin: usize,
    pub serving_bs: usize,
    pub q_bin: usize,
    pub pl_bins: Vec<usize>,
}

/// Unquantized observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawState {
    pub h: f64,
    pub v: f64,
    pub serving_bs: usize,
    pub q_bits: u64,
    pub pl_db: Vec<f64>,
}

/// Deterministic binning of [`RawState`] and the dense state index.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    altitudes: Vec<f64>,
    speeds: Vec<f64>,
    n_bs: usize,
    queue_edges_bits: Vec<u64>,
    pl_min: f64,
    pl_step: f64,
    pl_bins: usize,
}

impl Quantizer {
    pub fn new(
        cfg: &QuantizerConfig,
        drone: &DroneConfig,
        n_bs: usize,
        packet_bits: u64,
    ) -> Result<Self, EnvError> {
        if !(cfg.pl_step_db > 0.0) || !(cfg.pl_max_db > cfg.pl_min_db) {
            return Err(config_err("path-loss quantizer needs pl_max_db > pl_min_db and a positive step"));
        }
        let edges = &cfg.queue_edges_packets;
        if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("queue_edges_packets must start at 0 and increase strictly"));
        }
        let pick = |list: &[f64], own: f64| if list.is_empty() { vec![own] } else { list.to_vec() };
        let pl_bins = ((cfg.pl_max_db - cfg.pl_min_db) / cfg.pl_step_db).ceil() as usize;
        Ok(Self {
            altitudes: pick(&cfg.altitudes_m, drone.altitude_m),
            speeds: pick(&cfg.speeds_mps, drone.speed_mps),
            n_bs,
            queue_edges_bits: edges.iter().map(|e| e * packet_bits).collect(),
            pl_min: cfg.pl_min_db,
            pl_step: cfg.pl_step_db,
            pl_bins,
        })
    }

    pub fn pl_bin_count(&self) -> usize {
        self.pl_bins
    }

    pub fn queue_bin_count(&self) -> usize {
        self.queue_edges_bits.len() + 1
    }

    pub fn n_states(&self) -> usize {
        self.altitudes.len()
            * self.speeds.len()
            * self.n_bs
            * self.queue_bin_count()
            * self.pl_bins.pow(self.n_bs as u32)
    }

    fn nearest(values: &[f64], x: f64) -> usize {
        values
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Bins `raw`; returns the state and how many fields were clamped.
    pub fn quantize(&self, raw: &RawState) -> (EnvState, u32) {
        let mut clamped = 0;
        let q_bin = self
            .queue_edges_bits
            .iter()
            .position(|&edge| raw.q_bits <= edge)
            .unwrap_or(self.queue_edges_bits.len());
        let pl_bins = raw
            .pl_db
            .iter()
            .map(|&pl| {
                let b = ((pl - self.pl_min) / self.pl_step).floor();
                if b < 0.0 || b.is_nan() {
                    clamped += 1;
                    0
                } else if b >= self.pl_bins as f64 {
                    clamped += 1;
                    self.pl_bins - 1
                } else {
                    b as usize
                }
            })
            .collect();
        let state = EnvState {
            h_bin: Self::nearest(&self.altitudes, raw.h),
            v_bin: Self::nearest(&self.speeds, raw.v),
            serving_bs: raw.serving_bs,
            q_bin,
            pl_bins,
        };
        (state, clamped)
    }

    /// Representative raw values of each bin.
    pub fn dequantize(&self, s: &EnvState) -> RawState {
        let edges = &self.queue_edges_bits;
        let q_bits = match s.q_bin {
            0 => 0,
            b if b < edges.len() => edges[b],
            _ => edges[edges.len() - 1] + 1,
        };
        RawState {
            h: self.altitudes[s.h_bin],
            v: self.speeds[s.v_bin],
            serving_bs: s.serving_bs,
            q_bits,
            pl_db: s
                .pl_bins
                .iter()
                .map(|&b| self.pl_min + (b as f64 + 0.5) * self.pl_step)
                .collect(),
        }
    }

    /// Dense mixed-radix index of `s`.
    pub fn key(&self, s: &EnvState) -> usize {
        let mut k = s.h_bin;
        k = k * self.speeds.len() + s.v_bin;
        k = k * self.n_bs + s.serving_bs;
        k = k * self.queue_bin_count() + s.q_bin;
        for &b in &s.pl_bins {
            k = k * self.pl_bins + b;
        }
        k
    }
}

/// Feasible action keys given the serving BS, free RRBs per BS and the
/// handover timer (TTIs until a handover may be issued, 0 = now).
///
/// Staying is always possible: with at least one free RRB at the serving BS
/// the allocation "1 RRB, lowest power" is feasible, otherwise the silent
/// action is offered.
pub fn feasible_actions(
    serving_bs: usize,
    free_rrbs: &[u32],
    ho_timer: u32,
    space: &ActionSpace,
) -> ActionMask {
    let mut mask = ActionMask::EMPTY;
    let levels = space.power_w.len();
    for (bs, &free) in free_rrbs.iter().enumerate() {
        if bs != serving_bs && ho_timer > 0 {
            continue;
        }
        for rrb_count in 1..=free.min(space.max_rrbs) {
            for power_level in 0..levels {
                mask.insert(space.key(
                    Action::Transmit {
                        target_bs: bs,
                        rrb_count,
                        power_level,
                    },
                    serving_bs,
                ));
            }
        }
    }
    if free_rrbs[serving_bs] == 0 {
        mask.insert(space.silent_key());
    }
    mask
}

/// Per-term decomposition of the immediate reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub resource_term: f64,
    pub delay_term: f64,
    pub interference_term: f64,
    pub handover_regret: u8,
    pub total: f64,
}

/// What a step produced, as seen by the reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub q_next_bits: u64,
    pub interference_mw: f64,
    pub rrbs_used: u32,
    pub handover: bool,
}

/// Scales mapping each reward input onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardNorms {
    pub rrbs_total: f64,
    pub queue_bits: f64,
    pub interference_mw: f64,
}

pub fn reward(outcome: &StepOutcome, w: &RewardWeights, norms: &RewardNorms) -> RewardBreakdown {
    let resource_term = 1.0 / (1.0 + f64::from(outcome.rrbs_used) / norms.rrbs_total);
    let delay_term = 1.0 / (1.0 + outcome.q_next_bits as f64 / norms.queue_bits);
    let interference_term = 1.0 / (1.0 + outcome.interference_mw / norms.interference_mw);
    let regret = u8::from(outcome.handover);
    RewardBreakdown {
        resource_term,
        delay_term,
        interference_term,
        handover_regret: regret,
        total: w.alpha_s * resource_term + w.alpha_d * delay_term + w.alpha_f * interference_term
            - w.alpha_h * f64::from(regret),
    }
}

/// Precomputed, immutable description of one scenario.
#[derive(Debug, Clone)]
pub struct EnvModel {
    pub cfg: EnvConfig,
    pub topology: NetworkTopology,
    pub quantizer: Quantizer,
    pub actions: ActionSpace,
    pub norms: RewardNorms,
    pub budget: LinkBudget,
    pub initial_bs: usize,
}

impl EnvModel {
    pub fn new(cfg: EnvConfig) -> Result<Arc<Self>, EnvError> {
        let topology = NetworkTopology::from_config(&cfg.topology)?;
        cfg.traffic.validate()?;
        let h = cfg.drone.altitude_m;
        if !(h > channel::MIN_ALTITUDE_M && h <= channel::MAX_ALTITUDE_M) {
            return Err(config_err(format!("drone altitude {h} m outside (22.5, 300]")));
        }
        if (h - cfg.topology.bs_height_m).abs() < 1.0 {
            return Err(config_err("drone altitude must differ from the BS height by at least 1 m"));
        }
        if !(cfg.drone.speed_mps > 0.0) {
            return Err(config_err("drone speed must be positive"));
        }
        let r = &cfg.radio;
        if !(r.tti_s > 0.0) || r.frame_ttis == 0 {
            return Err(config_err("tti_s and frame_ttis must be positive"));
        }
        let w = &cfg.weights;
        if [w.alpha_s, w.alpha_d, w.alpha_f, w.alpha_h]
            .iter()
            .any(|a| !(a.is_finite() && *a >= 0.0))
        {
            return Err(config_err("reward weights must be finite and non-negative"));
        }
        if cfg.quantizer.queue_norm_packets == 0 {
            return Err(config_err("queue_norm_packets must be positive"));
        }
        let quantizer = Quantizer::new(
            &cfg.quantizer,
            &cfg.drone,
            topology.len(),
            cfg.traffic.packet_bits,
        )?;
        let actions = ActionSpace::new(
            topology.len(),
            topology.rrbs_total,
            r.tx_power_max_w,
            r.power_levels,
        )?;
        let norms = RewardNorms {
            rrbs_total: f64::from(topology.rrbs_total),
            queue_bits: (cfg.quantizer.queue_norm_packets * cfg.traffic.packet_bits) as f64,
            interference_mw: link::dbm_to_mw(
                link::watts_to_dbm(r.tx_power_max_w) + r.gtx_db + r.grx_db
                    - min_path_loss_db(&topology, h)?,
            ),
        };
        let budget = LinkBudget {
            noise_w: link::thermal_noise_w(SUBCARRIER_BW_HZ, r.noise_figure_db),
            ext_interference_w_per_hz: r.ext_interference_w_per_hz,
            antenna_gain_db: r.gtx_db + r.grx_db,
        };
        Ok(Arc::new(Self {
            initial_bs: topology.bottom_left(),
            topology,
            quantizer,
            actions,
            norms,
            budget,
            cfg,
        }))
    }

    pub fn n_states(&self) -> usize {
        self.quantizer.n_states()
    }

    pub fn power_dbm(&self, level: usize) -> f64 {
        link::watts_to_dbm(self.actions.power_w[level])
    }
}

/// Smallest deterministic path loss any drone position at altitude `h` can
/// see: directly above a BS, line-of-sight.
pub fn min_path_loss_db(topology: &NetworkTopology, h: f64) -> Result<f64, EnvError> {
    let mut best = f64::INFINITY;
    for bs in &topology.bs {
        let geom = LinkGeometry {
            d2d: 0.0,
            d3d: (h - bs.position.z).abs(),
            drone_altitude: h,
        };
        best = best.min(channel::path_loss_los(&geom, topology.fc_ghz)?);
    }
    Ok(best)
}

/// Observation presented to a policy at the start of a TTI.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvObservation {
    pub state: EnvState,
    pub key: usize,
    pub feasible: ActionMask,
    pub free_rrbs: Vec<u32>,
    pub ho_timer: u32,
    /// Realized path loss incl. shadowing per BS, dB.
    pub pl_db: Vec<f64>,
}

/// Result of one [`DroneEnv::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub reward: RewardBreakdown,
    pub record: TtiRecord,
    pub done: bool,
}

/// One drone crossing the service area.
#[derive(Debug, Clone)]
pub struct DroneEnv {
    model: Arc<EnvModel>,
    world: ChaCha8Rng,
    fading: ChaCha8Rng,
    kin: DroneKinematics,
    tti: u64,
    serving: usize,
    last_handover: Option<u64>,
    buffer: BufferState,
    large: Vec<LargeScale>,
    frame: u64,
    obs: EnvObservation,
    gains: Vec<f64>,
    arrived_bits: u64,
    served_bits: u64,
    handovers: u64,
    clamped: u64,
    done: bool,
}

impl DroneEnv {
    pub fn new(model: Arc<EnvModel>, seed: u64) -> Self {
        let n = model.topology.len();
        let mut env = Self {
            world: ChaCha8Rng::seed_from_u64(0),
            fading: ChaCha8Rng::seed_from_u64(0),
            kin: DroneKinematics::new(model.cfg.drone.altitude_m, model.cfg.drone.speed_mps, 0.0),
            tti: 0,
            serving: model.initial_bs,
            last_handover: None,
            buffer: BufferState::default(),
            large: vec![
                LargeScale {
                    los: true,
                    shadow_db: 0.0
                };
                n
            ],
            frame: 0,
            obs: EnvObservation {
                state: EnvState {
                    h_bin: 0,
                    v_bin: 0,
                    serving_bs: 0,
                    q_bin: 0,
                    pl_bins: vec![0; n],
                },
                key: 0,
                feasible: ActionMask::EMPTY,
                free_rrbs: vec![0; n],
                ho_timer: 0,
                pl_db: vec![0.0; n],
            },
            gains: Vec::with_capacity(64),
            arrived_bits: 0,
            served_bits: 0,
            handovers: 0,
            clamped: 0,
            done: false,
            model,
        };
        env.reset(seed);
        env
    }

    pub fn model(&self) -> &Arc<EnvModel> {
        &self.model
    }

    /// Starts a new crossing: `x = 0`, uniform `y`, heading `+x`, served by
    /// the bottom-left BS, empty buffer, handover timer expired.
    pub fn reset(&mut self, seed: u64) -> &EnvObservation {
        self.world = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::World, 0));
        self.fading = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Fading, 0));
        let y = self.world.random_range(0.0..=self.model.topology.area.1);
        let d = &self.model.cfg.drone;
        self.kin = DroneKinematics::new(d.altitude_m, d.speed_mps, y);
        self.tti = 0;
        self.serving = self.model.initial_bs;
        self.last_handover = None;
        self.buffer = BufferState::default();
        self.arrived_bits = 0;
        self.served_bits = 0;
        self.handovers = 0;
        self.clamped = 0;
        self.done = false;
        self.draw_large_scale();
        self.observe();
        &self.obs
    }

    pub fn observation(&self) -> &EnvObservation {
        &self.obs
    }

    pub fn tti(&self) -> u64 {
        self.tti
    }

    pub fn position(&self) -> Position3D {
        self.kin.position
    }

    pub fn serving_bs(&self) -> usize {
        self.serving
    }

    pub fn buffer(&self) -> BufferState {
        self.buffer
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn handovers(&self) -> u64 {
        self.handovers
    }

    /// Quantizer clamp events so far in this episode.
    pub fn clamp_events(&self) -> u64 {
        self.clamped
    }

    /// Cumulative `(arrived, served, dropped)` bits of this episode.
    pub fn bit_ledger(&self) -> (u64, u64, u64) {
        (self.arrived_bits, self.served_bits, self.buffer.dropped_bits_cum)
    }

    fn geometry(&self, bs: usize) -> LinkGeometry {
        LinkGeometry::between(&self.kin.position, &self.model.topology.bs[bs].position)
    }

    fn draw_large_scale(&mut self) {
        self.frame = self.tti / u64::from(self.model.cfg.radio.frame_ttis);
        for bs in 0..self.model.topology.len() {
            let g = self.geometry(bs);
            self.large[bs] = channel::sample_large_scale(&g, &mut self.world)
                .expect("altitude validated at model construction");
        }
    }

    fn ho_timer(&self) -> u32 {
        let r = &self.model.cfg.radio;
        let frame = u64::from(r.frame_ttis);
        let earliest = self
            .last_handover
            .map_or(0, |t| t + u64::from(r.min_ho_interval_ttis));
        let mut next = self.tti.max(earliest);
        next = next.div_ceil(frame) * frame;
        (next - self.tti) as u32
    }

    /// Draws this TTI's occupancy and assembles the observation.
    fn observe(&mut self) {
        let m = &self.model;
        let n = m.topology.len();
        let mut free = std::mem::take(&mut self.obs.free_rrbs);
        free.clear();
        free.extend((0..n).map(|_| self.world.random_range(0..=m.topology.rrbs_total)));
        let mut pl = std::mem::take(&mut self.obs.pl_db);
        pl.clear();
        for bs in 0..n {
            let g = self.geometry(bs);
            let ls = self.large[bs];
            let base = channel::path_loss(&g, m.topology.fc_ghz, ls.los)
                .expect("geometry validated at model construction");
            pl.push(base + ls.shadow_db);
        }
        let raw = RawState {
            h: self.kin.altitude_h,
            v: self.kin.speed_v,
            serving_bs: self.serving,
            q_bits: self.buffer.q_bits,
            pl_db: pl,
        };
        let (state, clamped) = m.quantizer.quantize(&raw);
        self.clamped += u64::from(clamped);
        let ho_timer = self.ho_timer();
        self.obs = EnvObservation {
            key: m.quantizer.key(&state),
            feasible: feasible_actions(self.serving, &free, ho_timer, &m.actions),
            state,
            free_rrbs: free,
            ho_timer,
            pl_db: raw.pl_db,
        };
    }

    /// Applies `action` for the current TTI and advances the drone.
    pub fn step(&mut self, action: Action) -> Result<Transition, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let model = Arc::clone(&self.model);
        let radio = &model.cfg.radio;
        if !self.obs.feasible.contains(model.actions.key(action, self.serving)) {
            return Err(EnvError::Infeasible(action));
        }
        let position = self.kin.position;

        // (1) handover bookkeeping
        let handover = matches!(action, Action::Transmit { target_bs, .. } if target_bs != self.serving);
        if let Action::Transmit { target_bs, .. } = action {
            if handover {
                self.buffer = traffic::on_handover(self.buffer, &model.cfg.traffic);
                self.last_handover = Some(self.tti);
                self.serving = target_bs;
                self.handovers += 1;
            }
        }

        // (2)-(3) channel and rate on the serving link
        let u = traffic::arrivals(&model.cfg.traffic, &self.buffer, radio.tti_s, &mut self.world);
        let (rrbs, tx_power_w, rate_bps) = match action {
            Action::Silent => (0, 0.0, 0.0),
            Action::Transmit {
                rrb_count,
                power_level,
                ..
            } => {
                let n_sc = (rrb_count * SUBCARRIERS_PER_RRB) as usize;
                channel::fill_small_scale(&mut self.gains, n_sc, &mut self.fading);
                let ls = self.large[self.serving];
                let chan = ChannelRealization {
                    los: ls.los,
                    path_loss_db: self.obs.pl_db[self.serving] - ls.shadow_db,
                    shadow_db: ls.shadow_db,
                    small_scale_power_gain: std::mem::take(&mut self.gains),
                };
                let alloc = Allocation {
                    serving_bs: self.serving,
                    rrb_count,
                    subcarriers_per_rrb: SUBCARRIERS_PER_RRB,
                    subcarrier_bw_hz: SUBCARRIER_BW_HZ,
                    tx_power_w: model.actions.power_w[power_level],
                };
                let rate = link::uplink_rate(&alloc, &chan, &model.budget)
                    .expect("allocation and channel sized together");
                self.gains = chan.small_scale_power_gain;
                (rrb_count, alloc.tx_power_w, rate)
            }
        };
        let backlog = self.buffer.q_bits + u;
        let capacity = (rate_bps * radio.tti_s).floor();
        let served = if capacity >= backlog as f64 {
            backlog
        } else {
            capacity as u64
        };
        let delay_s = (rrbs > 0).then(|| traffic::expected_delay(backlog, rate_bps));

        // (4) queue
        self.buffer = traffic::advance_queue(self.buffer, u, served, &model.cfg.traffic);
        self.arrived_bits += u;
        self.served_bits += served;

        // (5) interference on every other BS
        let interference_mw = if rrbs > 0 {
            let p_dbm = link::watts_to_dbm(tx_power_w);
            (0..model.topology.len())
                .filter(|&bs| bs != self.serving)
                .map(|bs| {
                    link::dbm_to_mw(link::interference_to_bs(
                        p_dbm,
                        self.obs.pl_db[bs],
                        radio.gtx_db,
                        radio.grx_db,
                    ))
                })
                .sum()
        } else {
            0.0
        };

        // (6) reward
        let breakdown = reward(
            &StepOutcome {
                q_next_bits: self.buffer.q_bits,
                interference_mw,
                rrbs_used: rrbs,
                handover,
            },
            &model.cfg.weights,
            &model.norms,
        );
        let record = TtiRecord {
            tti: self.tti,
            x: position.x,
            y: position.y,
            serving_bs: self.serving,
            handover,
            q_bits: self.buffer.q_bits,
            arrived_bits: u,
            served_bits: served,
            dropped_bits: self.buffer.dropped_bits_cum,
            rate_bps,
            delay_s,
            interference_mw,
            rrbs_used: rrbs,
            free_rrbs_serving: self.obs.free_rrbs[self.serving],
            tx_power_w,
            reward: breakdown,
        };

        // (7) kinematics
        self.tti += 1;
        self.kin.advance_to(self.tti, radio.tti_s);
        self.done = !self.kin.inside(model.topology.area);
        if !self.done {
            if self.tti / u64::from(radio.frame_ttis) != self.frame {
                self.draw_large_scale();
            }
            self.observe();
        }
        Ok(Transition {
            reward: breakdown,
            record,
            done: self.done,
        })
    }
}

impl agent::Environment for DroneEnv {
    fn n_states(&self) -> usize {
        self.model.n_states()
    }

    fn n_actions(&self) -> usize {
        self.model.actions.len()
    }

    fn reward_bound(&self) -> f64 {
        self.model.cfg.weights.bound()
    }

    fn reset(&mut self, seed: u64) -> agent::Observation {
        let obs = DroneEnv::reset(self, seed);
        agent::Observation {
            state: obs.key,
            feasible: obs.feasible,
        }
    }

    fn step(&mut self, action: usize) -> agent::Step {
        let a = self.model.actions.action(action, self.serving);
        let t = DroneEnv::step(self, a).expect("policy chose a feasible action");
        agent::Step {
            reward: t.reward.total,
            next: agent::Observation {
                state: self.obs.key,
                feasible: self.obs.feasible,
            },
            done: t.done,
        }
    }

    fn handovers(&self) -> u64 {
        self.handovers
    }
}
