//! Drone uplink buffer: Poisson application traffic, handover control
//! bursts and the bit-exact queue update with tail drop.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrafficError {
    #[error("traffic parameter `{0}` must be strictly positive")]
    NonPositive(&'static str),
    #[error("application arrival rate must be finite and non-negative, got {0}")]
    BadRate(f64),
}

/// Arrival and buffer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    /// Application packet arrival rate, packets per second.
    pub lambda0: f64,
    pub packet_bits: u64,
    pub ho_packet_bits: u64,
    pub ho_packet_count: u32,
    /// Control burst window after a handover, in TTIs.
    pub ho_window_ttis: u32,
    pub q_max_bits: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.3,
            packet_bits: 2000,
            ho_packet_bits: 1000,
            ho_packet_count: 4,
            ho_window_ttis: 10,
            q_max_bits: 100 * 2000,
        }
    }
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<(), TrafficError> {
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return Err(TrafficError::BadRate(self.lambda0));
        }
        let positive = [
            ("packet_bits", self.packet_bits > 0),
            ("ho_packet_bits", self.ho_packet_bits > 0),
            ("ho_packet_count", self.ho_packet_count > 0),
            ("ho_window_ttis", self.ho_window_ttis > 0),
            ("q_max_bits", self.q_max_bits > 0),
        ];
        match positive.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(TrafficError::NonPositive(name)),
            None => Ok(()),
        }
    }

    /// Control bits due in the TTI at `elapsed` (0-based) inside a window.
    ///
    /// The `ho_packet_count` packets are spread evenly over the window, so
    /// packet `k` lands at offset `floor(k * T_h / count)`.
    pub fn control_bits_at(&self, elapsed: u32) -> u64 {
        let count = u64::from(self.ho_packet_count);
        let window = u64::from(self.ho_window_ttis);
        let elapsed = u64::from(elapsed);
        if elapsed >= window {
            return 0;
        }
        let due = (0..count).filter(|k| k * window / count == elapsed).count() as u64;
        due * self.ho_packet_bits
    }
}

/// Buffer contents and bookkeeping, all in integer bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BufferState {
    pub q_bits: u64,
    pub dropped_bits_cum: u64,
    pub ho_window_remaining: u32,
}

/// Bits arriving during one interval of length `dt` seconds.
///
/// Application data is `Poisson(lambda0 * dt)` packets; while a handover
/// window is open the deterministic control share for this TTI is added.
pub fn arrivals<R: Rng + ?Sized>(
    cfg: &TrafficConfig,
    state: &BufferState,
    dt: f64,
    rng: &mut R,
) -> u64 {
    debug_assert!(dt > 0.0);
    let mean = cfg.lambda0 * dt;
    let packets = if mean > 0.0 {
        Poisson::new(mean)
            .expect("positive finite Poisson mean")
            .sample(rng) as u64
    } else {
        0
    };
    let control = if state.ho_window_remaining > 0 {
        let elapsed = cfg.ho_window_ttis.saturating_sub(state.ho_window_remaining);
        cfg.control_bits_at(elapsed)
    } else {
        0
    };
    packets * cfg.packet_bits + control
}

/// Opens (or restarts) the control window after a handover.
pub fn on_handover(state: BufferState, cfg: &TrafficConfig) -> BufferState {
    BufferState {
        ho_window_remaining: cfg.ho_window_ttis,
        ..state
    }
}

/// `q' = min(q + u - s, q_max)`, overflow counted as dropped.
///
/// # Panics
/// If `served_bits` exceeds the backlog `q + u`.
pub fn advance_queue(
    state: BufferState,
    u_bits: u64,
    served_bits: u64,
    cfg: &TrafficConfig,
) -> BufferState {
    let backlog = state.q_bits + u_bits;
    assert!(
        served_bits <= backlog,
        "served {served_bits} bits from a backlog of {backlog}"
    );
    let left = backlog - served_bits;
    let q_bits = left.min(cfg.q_max_bits);
    BufferState {
        q_bits,
        dropped_bits_cum: state.dropped_bits_cum + (left - q_bits),
        ho_window_remaining: state.ho_window_remaining.saturating_sub(1),
    }
}

/// Expected queueing delay `q / R` in seconds; infinite when starved.
pub fn expected_delay(q_bits: u64, rate_bps: f64) -> f64 {
    if q_bits == 0 {
        0.0
    } else if rate_bps <= 0.0 {
        f64::INFINITY
    } else {
        q_bits as f64 / rate_bps
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn control_burst_totals_four_kbit() {
        let cfg = TrafficConfig {
            lambda0: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = on_handover(BufferState::default(), &cfg);
        assert_eq!(state.ho_window_remaining, 10);
        let mut total = 0;
        for _ in 0..25 {
            let u = arrivals(&cfg, &state, 1e-3, &mut rng);
            total += u;
            state = advance_queue(state, u, u, &cfg);
        }
        assert_eq!(total, 4000);
        assert_eq!(state.ho_window_remaining, 0);
    }

    #[test]
    fn empty_process_has_no_arrivals() {
        let cfg = TrafficConfig {
            lambda0: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = BufferState::default();
        assert!((0..10_000).all(|_| arrivals(&cfg, &s, 1e-3, &mut rng) == 0));
    }

    #[test]
    fn handover_restarts_window() {
        let cfg = TrafficConfig::default();
        let mut s = on_handover(BufferState::default(), &cfg);
        for _ in 0..4 {
            s = advance_queue(s, 0, 0, &cfg);
        }
        assert_eq!(s.ho_window_remaining, 6);
        s = on_handover(s, &cfg);
        assert_eq!(s.ho_window_remaining, 10);
    }

    #[test]
    fn queue_examples() {
        let cfg = TrafficConfig {
            q_max_bits: 1_000_000,
            ..Default::default()
        };
        let s = advance_queue(BufferState::default(), 2000, 0, &cfg);
        assert_eq!((s.q_bits, s.dropped_bits_cum), (2000, 0));

        let full = BufferState {
            q_bits: cfg.q_max_bits,
            ..Default::default()
        };
        let s = advance_queue(full, 2000, 0, &cfg);
        assert_eq!((s.q_bits, s.dropped_bits_cum), (cfg.q_max_bits, 2000));

        let s = advance_queue(
            BufferState {
                q_bits: 5000,
                ..Default::default()
            },
            0,
            5000,
            &cfg,
        );
        assert_eq!(s.q_bits, 0);
    }

    #[test]
    #[should_panic(expected = "backlog")]
    fn serving_more_than_backlog_panics() {
        advance_queue(BufferState::default(), 10, 11, &TrafficConfig::default());
    }

    #[test]
    fn delay_cases() {
        assert_eq!(expected_delay(0, 0.0), 0.0);
        assert_eq!(expected_delay(0, 5e6), 0.0);
        assert!((expected_delay(2000, 1e6) - 2e-3).abs() < 1e-15);
        assert!(expected_delay(1, 0.0).is_infinite());
    }

    #[test]
    fn validate_rejects_zero_fields() {
        let cfg = TrafficConfig {
            ho_packet_count: 0,
            ..Default::default()
        };
        assert_eq!(
            cfg.validate(),
            Err(TrafficError::NonPositive("ho_packet_count"))
        );
        assert!(TrafficConfig::default().validate().is_ok());
    }
}
