//! Per-TTI trace records, streaming per-episode KPI accumulators, merge-able
//! aggregation, max-normalization across sweeps and handover heatmaps.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::env::RewardBreakdown;

#[derive(Debug, Error)]
pub enum KpiError {
    #[error("no episodes to aggregate")]
    Empty,
    #[error("episode {0} was aggregated twice")]
    DuplicateEpisode(u64),
    #[error("cell size {cell} m does not divide the {width} x {height} m area")]
    BadCell { cell: f64, width: f64, height: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Everything observable about one TTI.
#[derive(Debug, Clone, PartialEq)]
pub struct TtiRecord {
    pub tti: u64,
    pub x: f64,
    pub y: f64,
    /// Serving BS after this TTI's action.
    pub serving_bs: usize,
    pub handover: bool,
    /// Queue after the update.
    pub q_bits: u64,
    pub arrived_bits: u64,
    pub served_bits: u64,
    /// Cumulative drops of the episode so far.
    pub dropped_bits: u64,
    pub rate_bps: f64,
    /// `(q + u) / R` for transmitting TTIs.
    pub delay_s: Option<f64>,
    pub interference_mw: f64,
    pub rrbs_used: u32,
    pub free_rrbs_serving: u32,
    pub tx_power_w: f64,
    pub reward: RewardBreakdown,
}

/// Limits checked against every record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditLimits {
    pub p_max_w: f64,
    pub n_bs: usize,
    pub min_ho_interval_ttis: u64,
}

/// Constraint violations found in a trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Violations {
    /// Transmit power above `P_max`.
    pub power: u64,
    /// Invalid serving BS or more RRBs than were free.
    pub serving: u64,
    /// Handovers closer than the minimum interval.
    pub spacing: u64,
}

impl Violations {
    pub fn total(&self) -> u64 {
        self.power + self.serving + self.spacing
    }

    fn add(&mut self, o: &Violations) {
        self.power += o.power;
        self.serving += o.serving;
        self.spacing += o.spacing;
    }
}

/// Streaming summary of one episode; records are folded in and dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeKpis {
    pub episode: u64,
    pub ttis: u64,
    pub handovers: u64,
    pub handover_positions: Vec<(f64, f64)>,
    pub delay_sum_s: f64,
    pub delay_samples: u64,
    /// Transmitting TTIs with a backlog but zero rate.
    pub starved_ttis: u64,
    pub interference_sum_mw: f64,
    pub rrbs_sum: u64,
    pub queue_sum_bits: u64,
    pub reward_sum: f64,
    pub arrived_bits: u64,
    pub served_bits: u64,
    pub dropped_bits: u64,
    pub violations: Violations,
    limits: AuditLimits,
    last_handover: Option<u64>,
}

impl EpisodeKpis {
    pub fn new(episode: u64, limits: AuditLimits) -> Self {
        Self {
            episode,
            ttis: 0,
            handovers: 0,
            handover_positions: Vec::new(),
            delay_sum_s: 0.0,
            delay_samples: 0,
            starved_ttis: 0,
            interference_sum_mw: 0.0,
            rrbs_sum: 0,
            queue_sum_bits: 0,
            reward_sum: 0.0,
            arrived_bits: 0,
            served_bits: 0,
            dropped_bits: 0,
            violations: Violations::default(),
            limits,
            last_handover: None,
        }
    }

    pub fn record(&mut self, r: &TtiRecord) {
        self.ttis += 1;
        if r.handover {
            self.handovers += 1;
            self.handover_positions.push((r.x, r.y));
            if let Some(prev) = self.last_handover {
                if r.tti - prev < self.limits.min_ho_interval_ttis {
                    self.violations.spacing += 1;
                }
            }
            self.last_handover = Some(r.tti);
        }
        match r.delay_s {
            Some(d) if d.is_finite() => {
                self.delay_sum_s += d;
                self.delay_samples += 1;
            }
            Some(_) => self.starved_ttis += 1,
            None => {}
        }
        if r.tx_power_w > self.limits.p_max_w * (1.0 + 1e-12) {
            self.violations.power += 1;
        }
        if r.serving_bs >= self.limits.n_bs || r.rrbs_used > r.free_rrbs_serving {
            self.violations.serving += 1;
        }
        self.interference_sum_mw += r.interference_mw;
        self.rrbs_sum += u64::from(r.rrbs_used);
        self.queue_sum_bits += r.q_bits;
        self.reward_sum += r.reward.total;
        self.arrived_bits += r.arrived_bits;
        self.served_bits += r.served_bits;
        self.dropped_bits = r.dropped_bits;
    }

    /// Mean `q / R` over transmitting TTIs with a finite estimate.
    pub fn mean_delay_s(&self) -> f64 {
        ratio(self.delay_sum_s, self.delay_samples)
    }

    pub fn mean_interference_mw(&self) -> f64 {
        ratio(self.interference_sum_mw, self.ttis)
    }

    pub fn mean_rrbs(&self) -> f64 {
        ratio(self.rrbs_sum as f64, self.ttis)
    }

    pub fn mean_queue_bits(&self) -> f64 {
        ratio(self.queue_sum_bits as f64, self.ttis)
    }
}

fn ratio(sum: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Across-episode KPI statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KpiSummary {
    pub episodes: u64,
    pub total_handovers: u64,
    pub handovers: Stat,
    pub delay_s: Stat,
    pub interference_mw: Stat,
    pub rrbs: Stat,
    pub queue_bits: Stat,
    pub reward: Stat,
    pub dropped_bits: u64,
    pub starved_ttis: u64,
    pub violations: Violations,
}

/// Merge-capable set of episode summaries keyed by episode id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregator {
    episodes: BTreeMap<u64, EpisodeKpis>,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, ep: EpisodeKpis) -> Result<(), KpiError> {
        let id = ep.episode;
        if self.episodes.insert(id, ep).is_some() {
            return Err(KpiError::DuplicateEpisode(id));
        }
        Ok(())
    }

    /// Union of two disjoint partial aggregates.
    pub fn merge(mut self, other: Aggregator) -> Result<Self, KpiError> {
        for (_, ep) in other.episodes {
            self.push(ep)?;
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Episodes in id order.
    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeKpis> {
        self.episodes.values()
    }

    pub fn summary(&self) -> Result<KpiSummary, KpiError> {
        aggregate(self.episodes.values())
    }
}

/// Means and spreads over a set of episodes. Sums run in episode-id order, so
/// the result does not depend on the order the episodes were produced in.
pub fn aggregate<'a>(
    episodes: impl IntoIterator<Item = &'a EpisodeKpis>,
) -> Result<KpiSummary, KpiError> {
    let mut eps: Vec<&EpisodeKpis> = episodes.into_iter().collect();
    if eps.is_empty() {
        return Err(KpiError::Empty);
    }
    eps.sort_by_key(|e| e.episode);
    let stat = |f: &dyn Fn(&EpisodeKpis) -> f64| Stat::of(eps.iter().map(|e| f(e)));
    let mut violations = Violations::default();
    for e in &eps {
        violations.add(&e.violations);
    }
    Ok(KpiSummary {
        episodes: eps.len() as u64,
        total_handovers: eps.iter().map(|e| e.handovers).sum(),
        handovers: stat(&|e| e.handovers as f64),
        delay_s: stat(&|e| e.mean_delay_s()),
        interference_mw: stat(&|e| e.mean_interference_mw()),
        rrbs: stat(&|e| e.mean_rrbs()),
        queue_bits: stat(&|e| e.mean_queue_bits()),
        reward: stat(&|e| e.reward_sum),
        dropped_bits: eps.iter().map(|e| e.dropped_bits).sum(),
        starved_ttis: eps.iter().map(|e| e.starved_ttis).sum(),
        violations,
    })
}

/// Divides each value by the maximum; all zeros stay zero.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0, f64::max);
    values
        .iter()
        .map(|&v| if max > 0.0 { v / max } else { 0.0 })
        .collect()
}

/// Handover counts binned over the service area.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub cell_size: f64,
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `counts[iy * nx + ix]`.
    pub counts: Vec<u64>,
}

impl HeatmapGrid {
    pub fn new(cell_size: f64, width: f64, height: f64) -> Result<Self, KpiError> {
        let divides = |len: f64| {
            let n = (len / cell_size).round();
            n >= 1.0 && (n * cell_size - len).abs() < 1e-9 * len.max(1.0)
        };
        if !(cell_size > 0.0) || !divides(width) || !divides(height) {
            return Err(KpiError::BadCell {
                cell: cell_size,
                width,
                height,
            });
        }
        let nx = (width / cell_size).round() as usize;
        let ny = (height / cell_size).round() as usize;
        Ok(Self {
            cell_size,
            width,
            height,
            nx,
            ny,
            counts: vec![0; nx * ny],
        })
    }

    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let idx = |v: f64, n: usize| ((v / self.cell_size).floor().max(0.0) as usize).min(n - 1);
        (idx(x, self.nx), idx(y, self.ny))
    }

    pub fn add(&mut self, x: f64, y: f64) {
        let (ix, iy) = self.cell_of(x, y);
        self.counts[iy * self.nx + ix] += 1;
    }

    pub fn get(&self, ix: usize, iy: usize) -> u64 {
        self.counts[iy * self.nx + ix]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), KpiError> {
        writeln!(
            w,
            "# heatmap cell_size_m={} area_m={}x{} rows=y cols=x",
            self.cell_size, self.width, self.height
        )?;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["y_cell".to_string()];
        header.extend((0..self.nx).map(|ix| format!("x{ix}")));
        out.write_record(&header)?;
        for iy in 0..self.ny {
            let mut row = vec![iy.to_string()];
            row.extend((0..self.nx).map(|ix| self.get(ix, iy).to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Bins every handover position of the aggregated episodes.
pub fn heatmap<'a>(
    episodes: impl IntoIterator<Item = &'a EpisodeKpis>,
    cell_size: f64,
    area: (f64, f64),
) -> Result<HeatmapGrid, KpiError> {
    let mut grid = HeatmapGrid::new(cell_size, area.0, area.1)?;
    for e in episodes {
        for &(x, y) in &e.handover_positions {
            grid.add(x, y);
        }
    }
    Ok(grid)
}

/// Writes `#`-prefixed comment lines.
pub fn write_comment<W: Write>(mut w: W, text: &str) -> io::Result<()> {
    for line in text.lines() {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EpisodeRow {
    episode: u64,
    ttis: u64,
    handovers: u64,
    mean_delay_s: f64,
    starved_ttis: u64,
    mean_interference_mw: f64,
    mean_rrbs: f64,
    mean_queue_bits: f64,
    total_reward: f64,
    arrived_bits: u64,
    served_bits: u64,
    dropped_bits: u64,
    violations: u64,
}

pub fn write_episodes_csv<W: Write>(w: W, agg: &Aggregator) -> Result<(), KpiError> {
    let mut out = csv::Writer::from_writer(w);
    for e in agg.episodes() {
        out.serialize(EpisodeRow {
            episode: e.episode,
            ttis: e.ttis,
            handovers: e.handovers,
            mean_delay_s: e.mean_delay_s(),
            starved_ttis: e.starved_ttis,
            mean_interference_mw: e.mean_interference_mw(),
            mean_rrbs: e.mean_rrbs(),
            mean_queue_bits: e.mean_queue_bits(),
            total_reward: e.reward_sum,
            arrived_bits: e.arrived_bits,
            served_bits: e.served_bits,
            dropped_bits: e.dropped_bits,
            violations: e.violations.total(),
        })?;
    }
    out.flush()?;
    Ok(())
}

const SUMMARY_HEADER: [&str; 18] = [
    "label",
    "episodes",
    "total_handovers",
    "handovers_mean",
    "handovers_std",
    "delay_s_mean",
    "delay_s_std",
    "interference_mw_mean",
    "interference_mw_std",
    "rrbs_mean",
    "queue_bits_mean",
    "reward_mean",
    "dropped_bits",
    "starved_ttis",
    "violations",
    "handovers_norm",
    "delay_norm",
    "interference_norm",
];

/// One row per labelled summary, with handover, delay and interference means
/// normalized to their maximum over the rows.
pub fn write_summary_csv<W: Write>(w: W, rows: &[(String, KpiSummary)]) -> Result<(), KpiError> {
    let col = |f: fn(&KpiSummary) -> f64| normalize(&rows.iter().map(|(_, s)| f(s)).collect::<Vec<_>>());
    let ho = col(|s| s.handovers.mean);
    let delay = col(|s| s.delay_s.mean);
    let intf = col(|s| s.interference_mw.mean);
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for (i, (label, s)) in rows.iter().enumerate() {
        out.write_record([
            label.clone(),
            s.episodes.to_string(),
            s.total_handovers.to_string(),
            s.handovers.mean.to_string(),
            s.handovers.std.to_string(),
            s.delay_s.mean.to_string(),
            s.delay_s.std.to_string(),
            s.interference_mw.mean.to_string(),
            s.interference_mw.std.to_string(),
            s.rrbs.mean.to_string(),
            s.queue_bits.mean.to_string(),
            s.reward.mean.to_string(),
            s.dropped_bits.to_string(),
            s.starved_ttis.to_string(),
            s.violations.total().to_string(),
            ho[i].to_string(),
            delay[i].to_string(),
            intf[i].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Streams per-TTI records to CSV. Large; meant for short runs.
pub struct TraceWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(w: W) -> Result<Self, KpiError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "episode",
            "tti",
            "x",
            "y",
            "serving_bs",
            "handover",
            "q_bits",
            "rate_bps",
            "interference_mw",
            "rrbs_used",
            "tx_power_w",
            "reward",
        ])?;
        Ok(Self { out })
    }

    pub fn write(&mut self, episode: u64, r: &TtiRecord) -> Result<(), KpiError> {
        self.out.write_record([
            episode.to_string(),
            r.tti.to_string(),
            r.x.to_string(),
            r.y.to_string(),
            r.serving_bs.to_string(),
            u8::from(r.handover).to_string(),
            r.q_bits.to_string(),
            r.rate_bps.to_string(),
            r.interference_mw.to_string(),
            r.rrbs_used.to_string(),
            r.tx_power_w.to_string(),
            r.reward.total.to_string(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, KpiError> {
        self.out.flush()?;
        self.out
            .into_inner()
            .map_err(|e| KpiError::Io(e.into_error()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LIMITS: AuditLimits = AuditLimits {
        p_max_w: 0.2,
        n_bs: 3,
        min_ho_interval_ttis: 10,
    };

    fn rec(tti: u64, handover: bool) -> TtiRecord {
        TtiRecord {
            tti,
            x: 250.0,
            y: 250.0,
            serving_bs: 0,
            handover,
            q_bits: 0,
            arrived_bits: 0,
            served_bits: 0,
            dropped_bits: 0,
            rate_bps: 1e6,
            delay_s: Some(0.0),
            interference_mw: 0.0,
            rrbs_used: 1,
            free_rrbs_serving: 4,
            tx_power_w: 0.2,
            reward: RewardBreakdown {
                resource_term: 0.8,
                delay_term: 1.0,
                interference_term: 1.0,
                handover_regret: u8::from(handover),
                total: 1.0,
            },
        }
    }

    fn episode(id: u64, handovers: &[u64]) -> EpisodeKpis {
        let mut e = EpisodeKpis::new(id, LIMITS);
        for t in 0..100 {
            e.record(&rec(t, handovers.contains(&t)));
        }
        e
    }

    #[test]
    fn single_episode_counts_handovers() {
        let s = aggregate([&episode(0, &[10, 20, 30])]).unwrap();
        assert_eq!(s.handovers.mean, 3.0);
        assert_eq!(s.total_handovers, 3);
        assert_eq!(s.interference_mw.mean, 0.0);
        assert_eq!(s.violations.total(), 0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(aggregate([]), Err(KpiError::Empty)));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize(&[2.0, 4.0]), vec![0.5, 1.0]);
        assert_eq!(normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn audits_flag_violations() {
        let mut e = EpisodeKpis::new(0, LIMITS);
        e.record(&rec(0, true));
        e.record(&rec(5, true));
        e.record(&TtiRecord {
            tx_power_w: 0.25,
            rrbs_used: 3,
            free_rrbs_serving: 2,
            ..rec(6, false)
        });
        assert_eq!(
            e.violations,
            Violations {
                power: 1,
                serving: 1,
                spacing: 1
            }
        );
    }

    #[test]
    fn heatmap_examples() {
        let empty = heatmap([&episode(0, &[])], 50.0, (500.0, 500.0)).unwrap();
        assert_eq!(empty.total(), 0);
        let one = heatmap([&episode(0, &[40])], 50.0, (500.0, 500.0)).unwrap();
        assert_eq!(one.get(5, 5), 1);
        assert_eq!(one.total(), 1);
        assert!(HeatmapGrid::new(30.0, 500.0, 500.0).is_err());
        let mut g = HeatmapGrid::new(50.0, 500.0, 500.0).unwrap();
        g.add(500.0, 500.0);
        g.add(-1.0, 0.0);
        assert_eq!((g.get(9, 9), g.get(0, 0)), (1, 1));
    }

    #[test]
    fn merge_is_order_independent() {
        let eps: Vec<_> = (0..6).map(|i| episode(i, &[i * 10])).collect();
        let mut a = Aggregator::new();
        let mut b = Aggregator::new();
        for e in &eps {
            if e.episode % 2 == 0 {
                a.push(e.clone()).unwrap();
            } else {
                b.push(e.clone()).unwrap();
            }
        }
        let ab = a.clone().merge(b.clone()).unwrap().summary().unwrap();
        let ba = b.merge(a).unwrap().summary().unwrap();
        assert_eq!(ab, ba);
        let mut dup = Aggregator::new();
        dup.push(eps[0].clone()).unwrap();
        assert!(dup.push(eps[0].clone()).is_err());
    }

    #[test]
    fn heatmap_csv_layout() {
        let g = heatmap([&episode(0, &[40])], 250.0, (500.0, 500.0)).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "# heatmap cell_size_m=250 area_m=500x500 rows=y cols=x\ny_cell,x0,x1\n0,0,0\n1,0,1\n"
        );
    }
}
