//! RSS benchmark: hand over when a neighbour is more than 7 dB stronger than
//! the serving BS, and always transmit on every free RRB at full power.

use crate::env::{Action, EnvModel, EnvObservation};

/// Hysteresis of the RSS trigger, dB.
pub const HYSTERESIS_DB: f64 = 7.0;

/// Serving cell and handover timer as seen by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineState {
    pub serving_bs: usize,
    pub ho_timer: u32,
}

/// The benchmark decision for one TTI.
///
/// `max_rrbs` caps the allocation at the action-space limit and
/// `max_power_level` indexes `P_max`.
pub fn baseline_action(
    state: BaselineState,
    rss_dbm: &[f64],
    free_rrbs: &[u32],
    max_rrbs: u32,
    max_power_level: usize,
) -> Action {
    let serving = state.serving_bs;
    let best = rss_dbm
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(serving);
    let mut target = serving;
    if state.ho_timer == 0
        && best != serving
        && rss_dbm[best] - rss_dbm[serving] > HYSTERESIS_DB
        && free_rrbs[best] > 0
    {
        target = best;
    }
    let free = free_rrbs[target].min(max_rrbs);
    if free == 0 {
        return Action::Silent;
    }
    Action::Transmit {
        target_bs: target,
        rrb_count: free,
        power_level: max_power_level,
    }
}

/// Received power at every BS for a `P_max` transmission, dBm.
pub fn rss_dbm(model: &EnvModel, obs: &EnvObservation) -> Vec<f64> {
    let r = &model.cfg.radio;
    let p = model.power_dbm(model.actions.max_power_level());
    obs.pl_db.iter().map(|pl| p - pl + r.gtx_db + r.grx_db).collect()
}

/// Benchmark decision for the current observation.
pub fn act(model: &EnvModel, obs: &EnvObservation) -> Action {
    baseline_action(
        BaselineState {
            serving_bs: obs.state.serving_bs,
            ho_timer: obs.ho_timer,
        },
        &rss_dbm(model, obs),
        &obs.free_rrbs,
        model.actions.max_rrbs(),
        model.actions.max_power_level(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const FREE: [u32; 3] = [4, 4, 4];

    fn target(a: Action) -> Option<usize> {
        match a {
            Action::Transmit { target_bs, .. } => Some(target_bs),
            Action::Silent => None,
        }
    }

    fn st(timer: u32) -> BaselineState {
        BaselineState {
            serving_bs: 0,
            ho_timer: timer,
        }
    }

    #[test]
    fn six_db_is_not_enough() {
        let a = baseline_action(st(0), &[-70.0, -64.0, -80.0], &FREE, 4, 3);
        assert_eq!(target(a), Some(0));
    }

    #[test]
    fn seven_point_one_db_triggers() {
        let a = baseline_action(st(0), &[-70.0, -62.9, -80.0], &FREE, 4, 3);
        assert_eq!(
            a,
            Action::Transmit {
                target_bs: 1,
                rrb_count: 4,
                power_level: 3
            }
        );
    }

    #[test]
    fn ties_stay() {
        let a = baseline_action(st(0), &[-70.0, -70.0, -70.0], &FREE, 4, 3);
        assert_eq!(target(a), Some(0));
    }

    #[test]
    fn timer_blocks_handover() {
        let a = baseline_action(st(4), &[-90.0, -60.0, -80.0], &FREE, 4, 3);
        assert_eq!(target(a), Some(0));
    }

    #[test]
    fn allocates_every_free_rrb() {
        let a = baseline_action(st(0), &[-70.0, -75.0, -80.0], &[2, 4, 4], 4, 3);
        assert_eq!(
            a,
            Action::Transmit {
                target_bs: 0,
                rrb_count: 2,
                power_level: 3
            }
        );
        let silent = baseline_action(st(3), &[-70.0, -75.0, -80.0], &[0, 4, 4], 4, 3);
        assert_eq!(silent, Action::Silent);
    }

    #[test]
    fn full_target_means_stay() {
        let a = baseline_action(st(0), &[-90.0, -60.0, -80.0], &[3, 0, 4], 4, 3);
        assert_eq!(target(a), Some(0));
    }
}
