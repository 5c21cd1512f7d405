//! Air-to-ground channel between a drone and a terrestrial base station.
//!
//! Covers the altitude-dependent line-of-sight probability, the LoS and NLoS
//! path-loss laws, log-normal shadowing and unit-mean Rayleigh block fading.
//! Every function is pure over an explicitly passed random stream.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

/// Lowest altitude (exclusive) covered by the aerial propagation model.
pub const MIN_ALTITUDE_M: f64 = 22.5;
/// Highest altitude (inclusive) covered by the aerial propagation model.
pub const MAX_ALTITUDE_M: f64 = 300.0;
/// Above this altitude every link is line-of-sight.
pub const ALWAYS_LOS_ALTITUDE_M: f64 = 100.0;
/// NLoS shadow-fading standard deviation.
pub const SIGMA_NLOS_DB: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("drone altitude {0} m outside the modeled range (22.5, 300]")]
    AltitudeOutOfRange(f64),
    #[error("3-D link distance must be positive, got {0} m")]
    NonPositiveDistance(f64),
    #[error("carrier frequency must be positive, got {0} GHz")]
    NonPositiveFrequency(f64),
    #[error("a channel realization needs at least one subcarrier")]
    NoSubcarriers,
}

/// A point in the service area; `z` is the height above ground.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Position3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn horizontal_distance(&self, other: &Position3D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Distances between the drone and one base station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub d2d: f64,
    pub d3d: f64,
    pub drone_altitude: f64,
}

impl LinkGeometry {
    pub fn between(drone: &Position3D, bs: &Position3D) -> Self {
        let d2d = drone.horizontal_distance(bs);
        let d3d = d2d.hypot(drone.z - bs.z);
        Self {
            d2d,
            d3d,
            drone_altitude: drone.z,
        }
    }
}

fn check_altitude(h: f64) -> Result<(), ChannelError> {
    if h > MIN_ALTITUDE_M && h <= MAX_ALTITUDE_M {
        Ok(())
    } else {
        Err(ChannelError::AltitudeOutOfRange(h))
    }
}

fn check_link(geom: &LinkGeometry, fc_ghz: f64) -> Result<(), ChannelError> {
    if !(geom.d3d > 0.0) {
        return Err(ChannelError::NonPositiveDistance(geom.d3d));
    }
    if !(fc_ghz > 0.0) {
        return Err(ChannelError::NonPositiveFrequency(fc_ghz));
    }
    Ok(())
}

/// Breakpoint distance `d1` and decay scale `p1` (both meters) of the LoS
/// probability at altitude `h`.
pub fn los_parameters(h: f64) -> (f64, f64) {
    let lh = h.log10();
    let d1 = (460.0 * lh - 700.0).max(18.0);
    let p1 = 4300.0 * lh - 3800.0;
    (d1, p1)
}

/// Probability that the link is line-of-sight.
///
/// Always 1 above 100 m and within the breakpoint distance `d1`; beyond it
/// `d1/d2d + exp(-d2d/p1)(1 - d1/d2d)`, clamped to `[0, 1]`.
pub fn los_probability(geom: &LinkGeometry) -> Result<f64, ChannelError> {
    let h = geom.drone_altitude;
    check_altitude(h)?;
    if h > ALWAYS_LOS_ALTITUDE_M {
        return Ok(1.0);
    }
    let (d1, p1) = los_parameters(h);
    if geom.d2d <= d1 {
        return Ok(1.0);
    }
    let ratio = d1 / geom.d2d;
    let p = ratio + (-geom.d2d / p1).exp() * (1.0 - ratio);
    Ok(p.clamp(0.0, 1.0))
}

/// LoS path loss in dB: `28 + 22 log10(d3d) + 20 log10(fc)`.
///
/// Used at every modeled altitude, including above 100 m.
pub fn path_loss_los(geom: &LinkGeometry, fc_ghz: f64) -> Result<f64, ChannelError> {
    check_link(geom, fc_ghz)?;
    Ok(28.0 + 22.0 * geom.d3d.log10() + 20.0 * fc_ghz.log10())
}

/// NLoS path loss in dB: `15 + (46 - 7 log10(h)) log10(d3d) + 20 log10(fc)`.
pub fn path_loss_nlos(geom: &LinkGeometry, fc_ghz: f64) -> Result<f64, ChannelError> {
    check_link(geom, fc_ghz)?;
    check_altitude(geom.drone_altitude)?;
    let slope = 46.0 - 7.0 * geom.drone_altitude.log10();
    Ok(15.0 + slope * geom.d3d.log10() + 20.0 * fc_ghz.log10())
}

/// Path loss for the given propagation condition.
pub fn path_loss(geom: &LinkGeometry, fc_ghz: f64, los: bool) -> Result<f64, ChannelError> {
    if los {
        path_loss_los(geom, fc_ghz)
    } else {
        path_loss_nlos(geom, fc_ghz)
    }
}

/// Shadow-fading standard deviation in dB.
pub fn shadow_sigma(h: f64, los: bool) -> Result<f64, ChannelError> {
    check_altitude(h)?;
    Ok(if los {
        4.64 * (-0.00066 * h).exp()
    } else {
        SIGMA_NLOS_DB
    })
}

/// Large-scale state of one link, held constant over a radio frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LargeScale {
    pub los: bool,
    pub shadow_db: f64,
}

/// Draws the LoS condition and the shadowing for one link.
pub fn sample_large_scale<R: Rng + ?Sized>(
    geom: &LinkGeometry,
    rng: &mut R,
) -> Result<LargeScale, ChannelError> {
    let p_los = los_probability(geom)?;
    // P_LoS = 1 must never yield NLoS, whatever the stream produces.
    let los = p_los >= 1.0 || rng.random::<f64>() < p_los;
    let sigma = shadow_sigma(geom.drone_altitude, los)?;
    let z: f64 = StandardNormal.sample(rng);
    Ok(LargeScale {
        los,
        shadow_db: sigma * z,
    })
}

/// Unit-mean Rayleigh power gains `|H_s|^2`, one per subcarrier.
pub fn sample_small_scale<R: Rng + ?Sized>(n_subcarriers: usize, rng: &mut R) -> Vec<f64> {
    let mut gains = Vec::with_capacity(n_subcarriers);
    fill_small_scale(&mut gains, n_subcarriers, rng);
    gains
}

/// Like [`sample_small_scale`] but reuses `out`.
pub fn fill_small_scale<R: Rng + ?Sized>(out: &mut Vec<f64>, n_subcarriers: usize, rng: &mut R) {
    out.clear();
    out.extend((0..n_subcarriers).map(|_| {
        let g: f64 = Exp1.sample(rng);
        // Exp1 can return exactly 0; the gain must stay strictly positive.
        g.max(f64::MIN_POSITIVE)
    }));
}

/// One coherence-block sample of the drone-to-BS channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub los: bool,
    pub path_loss_db: f64,
    pub shadow_db: f64,
    pub small_scale_power_gain: Vec<f64>,
}

impl ChannelRealization {
    /// Path loss plus shadowing, in dB.
    pub fn total_loss_db(&self) -> f64 {
        self.path_loss_db + self.shadow_db
    }
}

/// Samples a full channel realization for `n_subcarriers` subcarriers.
pub fn realize_channel<R: Rng + ?Sized>(
    geom: &LinkGeometry,
    fc_ghz: f64,
    n_subcarriers: usize,
    rng: &mut R,
) -> Result<ChannelRealization, ChannelError> {
    if n_subcarriers == 0 {
        return Err(ChannelError::NoSubcarriers);
    }
    let large = sample_large_scale(geom, rng)?;
    let path_loss_db = path_loss(geom, fc_ghz, large.los)?;
    Ok(ChannelRealization {
        los: large.los,
        path_loss_db,
        shadow_db: large.shadow_db,
        small_scale_power_gain: sample_small_scale(n_subcarriers, rng),
    })
}

/// Caches a realization for the duration of one coherence block.
///
/// Queries carrying the same block index return the stored realization
/// unchanged; a new block index triggers a fresh draw.
#[derive(Debug, Clone, Default)]
pub struct CoherentChannel {
    block: Option<u64>,
    current: Option<ChannelRealization>,
}

impl CoherentChannel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn realization<R: Rng + ?Sized>(
        &mut self,
        block: u64,
        geom: &LinkGeometry,
        fc_ghz: f64,
        n_subcarriers: usize,
        rng: &mut R,
    ) -> Result<&ChannelRealization, ChannelError> {
        let stale = self.block != Some(block)
            || self
                .current
                .as_ref()
                .is_none_or(|c| c.small_scale_power_gain.len() != n_subcarriers);
        if stale {
            self.current = Some(realize_channel(geom, fc_ghz, n_subcarriers, rng)?);
            self.block = Some(block);
        }
        Ok(self.current.as_ref().expect("realization cached above"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(h: f64, d2d: f64, d3d: f64) -> LinkGeometry {
        LinkGeometry {
            d2d,
            d3d,
            drone_altitude: h,
        }
    }

    #[test]
    fn los_probability_is_one_above_100m() {
        for d2d in [0.0, 10.0, 500.0, 5000.0] {
            assert_eq!(los_probability(&geom(150.0, d2d, d2d + 1.0)).unwrap(), 1.0);
        }
    }

    #[test]
    fn los_probability_is_one_at_breakpoint() {
        let (d1, _) = los_parameters(50.0);
        assert_eq!(los_probability(&geom(50.0, d1, d1 + 1.0)).unwrap(), 1.0);
    }

    #[test]
    fn los_parameters_at_100m() {
        let (d1, p1) = los_parameters(100.0);
        assert!((d1 - 220.0).abs() < 1e-9);
        assert!((p1 - 4800.0).abs() < 1e-9);
    }

    #[test]
    fn los_probability_matches_hand_values() {
        // d1 = 81.526, p1 = 3505.57 at h = 50 m
        let p = los_probability(&geom(50.0, 300.0, 301.0)).unwrap();
        assert!((p - 0.940_270_337).abs() < 1e-8);
        let p = los_probability(&geom(100.0, 500.0, 505.0)).unwrap();
        assert!((p - 0.944_602_059).abs() < 1e-8);
    }

    #[test]
    fn altitude_domain_is_enforced() {
        assert!(matches!(
            los_probability(&geom(22.5, 10.0, 10.0)),
            Err(ChannelError::AltitudeOutOfRange(_))
        ));
        assert!(los_probability(&geom(300.0, 10.0, 10.0)).is_ok());
        assert!(shadow_sigma(300.5, true).is_err());
    }

    #[test]
    fn path_loss_rejects_zero_distance() {
        assert_eq!(
            path_loss_los(&geom(50.0, 0.0, 0.0), 2.0),
            Err(ChannelError::NonPositiveDistance(0.0))
        );
        assert!(path_loss_nlos(&geom(50.0, 0.0, -1.0), 2.0).is_err());
    }

    #[test]
    fn path_loss_unit_distance_unit_frequency() {
        let g = geom(50.0, 0.0, 1.0);
        assert!((path_loss_los(&g, 1.0).unwrap() - 28.0).abs() < 1e-12);
        assert!((path_loss_nlos(&g, 1.0).unwrap() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn shadow_sigma_values() {
        assert_eq!(shadow_sigma(75.0, false).unwrap(), 6.0);
        assert!((shadow_sigma(50.0, true).unwrap() - 4.489_378_9).abs() < 1e-6);
        let top = shadow_sigma(300.0, true).unwrap();
        assert!(top > 4.64 * (-0.198f64).exp() - 1e-12 && top < 4.64);
    }

    #[test]
    fn small_scale_length_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = realize_channel(&geom(50.0, 100.0, 103.0), 2.0, 48, &mut rng).unwrap();
        assert_eq!(g.small_scale_power_gain.len(), 48);
        assert!(g.small_scale_power_gain.iter().all(|&x| x > 0.0));
        assert!(g.path_loss_db > 0.0);
        assert_eq!(
            realize_channel(&geom(50.0, 100.0, 103.0), 2.0, 0, &mut rng),
            Err(ChannelError::NoSubcarriers)
        );
    }

    #[test]
    fn high_altitude_is_always_los() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let r = realize_channel(&geom(150.0, 400.0, 420.0), 2.0, 1, &mut rng).unwrap();
            assert!(r.los);
        }
    }

    #[test]
    fn coherent_channel_repeats_within_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = geom(50.0, 200.0, 201.0);
        let mut ch = CoherentChannel::new();
        let first = ch.realization(7, &g, 2.0, 12, &mut rng).unwrap().clone();
        let again = ch.realization(7, &g, 2.0, 12, &mut rng).unwrap().clone();
        assert_eq!(first, again);
        let next = ch.realization(8, &g, 2.0, 12, &mut rng).unwrap().clone();
        assert_ne!(first, next);
    }
}
