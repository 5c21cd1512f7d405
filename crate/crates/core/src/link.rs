//! Uplink rate over an allocated resource-block set and the interference the
//! drone's transmission puts on the other base stations.

use thiserror::Error;

use crate::channel::ChannelRealization;

/// Thermal noise density, dBm/Hz.
pub const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;
pub const SUBCARRIERS_PER_RRB: u32 = 12;
pub const SUBCARRIER_BW_HZ: f64 = 15_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("channel carries {got} subcarrier gains but the allocation spans {expected}")]
    SubcarrierMismatch { expected: usize, got: usize },
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

pub fn watts_to_dbm(w: f64) -> f64 {
    mw_to_dbm(w * 1e3)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    dbm_to_mw(dbm) * 1e-3
}

/// Noise power over one subcarrier, in watts.
pub fn thermal_noise_w(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    dbm_to_watts(THERMAL_NOISE_DBM_PER_HZ + 10.0 * bandwidth_hz.log10() + noise_figure_db)
}

/// Resources and power granted to the drone for one TTI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub serving_bs: usize,
    pub rrb_count: u32,
    pub subcarriers_per_rrb: u32,
    pub subcarrier_bw_hz: f64,
    pub tx_power_w: f64,
}

impl Allocation {
    pub fn subcarriers(&self) -> usize {
        (self.rrb_count * self.subcarriers_per_rrb) as usize
    }
}

/// Noise and external interference seen by the serving BS receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    /// Noise power per subcarrier, watts.
    pub noise_w: f64,
    /// External interference density per subcarrier, W/Hz.
    pub ext_interference_w_per_hz: f64,
    /// Combined transmit and receive antenna gain, dB.
    pub antenna_gain_db: f64,
}

impl LinkBudget {
    /// Gain-to-noise ratio `alpha_s` of one subcarrier, 1/W.
    pub fn alpha(&self, power_gain: f64, loss_db: f64, subcarrier_bw_hz: f64) -> f64 {
        let gain = power_gain * 10f64.powf((self.antenna_gain_db - loss_db) / 10.0);
        gain / (self.noise_w + subcarrier_bw_hz * self.ext_interference_w_per_hz)
    }
}

/// Effective SNR of an SC-FDMA allocation: `P (sum_s 1/alpha_s)^-1`.
pub fn effective_snr(tx_power_w: f64, alphas: impl IntoIterator<Item = f64>) -> f64 {
    let inv_sum: f64 = alphas.into_iter().map(|a| 1.0 / a).sum();
    if tx_power_w == 0.0 {
        0.0
    } else {
        tx_power_w / inv_sum
    }
}

/// Uplink rate in bit/s: `W_s |b| log2(1 + gamma)`.
pub fn uplink_rate(
    alloc: &Allocation,
    chan: &ChannelRealization,
    budget: &LinkBudget,
) -> Result<f64, LinkError> {
    let n = alloc.subcarriers();
    if chan.small_scale_power_gain.len() != n {
        return Err(LinkError::SubcarrierMismatch {
            expected: n,
            got: chan.small_scale_power_gain.len(),
        });
    }
    let loss = chan.total_loss_db();
    let gamma = effective_snr(
        alloc.tx_power_w,
        chan.small_scale_power_gain
            .iter()
            .map(|&g| budget.alpha(g, loss, alloc.subcarrier_bw_hz)),
    );
    Ok(alloc.subcarrier_bw_hz * n as f64 * (1.0 + gamma).log2())
}

/// Interference power at a neighbour BS, dBm: `P - PL_X + G_tx + G_rx`.
pub fn interference_to_bs(p_dbm: f64, pl_x_db: f64, gtx_db: f64, grx_db: f64) -> f64 {
    p_dbm - pl_x_db + gtx_db + grx_db
}

/// Sum of per-BS interference levels in linear units (mW).
pub fn total_interference_mw(per_bs_dbm: &[f64]) -> f64 {
    per_bs_dbm.iter().map(|&d| dbm_to_mw(d)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_channel(n: usize, gain: f64) -> ChannelRealization {
        ChannelRealization {
            los: true,
            path_loss_db: 0.0,
            shadow_db: 0.0,
            small_scale_power_gain: vec![gain; n],
        }
    }

    fn alloc(rrbs: u32, p: f64) -> Allocation {
        Allocation {
            serving_bs: 0,
            rrb_count: rrbs,
            subcarriers_per_rrb: SUBCARRIERS_PER_RRB,
            subcarrier_bw_hz: SUBCARRIER_BW_HZ,
            tx_power_w: p,
        }
    }

    const UNIT: LinkBudget = LinkBudget {
        noise_w: 1.0,
        ext_interference_w_per_hz: 0.0,
        antenna_gain_db: 0.0,
    };

    #[test]
    fn zero_power_gives_zero_rate() {
        let r = uplink_rate(&alloc(1, 0.0), &flat_channel(12, 1.0), &UNIT).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn homogeneous_subcarriers_unit_snr() {
        // alpha = 1 on every subcarrier, P * alpha = 12 -> gamma = 1
        let r = uplink_rate(&alloc(1, 12.0), &flat_channel(12, 1.0), &UNIT).unwrap();
        assert!((r - 180_000.0).abs() < 1e-6);
    }

    #[test]
    fn worst_subcarrier_dominates() {
        let mut ch = flat_channel(12, 1.0);
        ch.small_scale_power_gain[4] = 1e-300;
        let r = uplink_rate(&alloc(1, 12.0), &ch, &UNIT).unwrap();
        assert!(r < 1e-200);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert_eq!(
            uplink_rate(&alloc(2, 1.0), &flat_channel(12, 1.0), &UNIT),
            Err(LinkError::SubcarrierMismatch {
                expected: 24,
                got: 12
            })
        );
    }

    #[test]
    fn interference_examples() {
        assert!((interference_to_bs(23.0, 78.02, 0.0, 0.0) + 55.02).abs() < 1e-12);
        assert_eq!(interference_to_bs(0.0, 0.0, 0.0, 0.0), 0.0);
        let base = interference_to_bs(10.0, 90.0, 0.0, 0.0);
        assert!((interference_to_bs(10.0, 90.0, 3.0, 3.0) - base - 6.0).abs() < 1e-12);
    }

    #[test]
    fn interference_sums_in_milliwatts() {
        assert!((total_interference_mw(&[-55.02]) - 3.147_748e-6).abs() < 1e-11);
        assert_eq!(total_interference_mw(&[]), 0.0);
        assert!((total_interference_mw(&[-60.0, -60.0]) - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn noise_floor_per_subcarrier() {
        let dbm = watts_to_dbm(thermal_noise_w(SUBCARRIER_BW_HZ, 0.0));
        assert!((dbm + 132.239_087).abs() < 1e-5);
    }
}
