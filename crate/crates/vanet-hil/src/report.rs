//! KPI aggregation and report files.
//!
//! The KPI report is a long-format CSV with the stable column order
//! `density,episode,metric,value`, one row per aggregate; per-packet logs
//! archive the raw material every aggregate can be recomputed from.

use std::fmt::Write as _;

use thiserror::Error;

use crate::config::ScenarioApp;
use crate::gateway::GatewayCounters;
use crate::kernel::NodeId;
use crate::radio::FrameKind;
use crate::time::SimTime;
use crate::traffic::{StreamRecord, VideoSinkReport};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("baseline and treatment cover different densities")]
    MismatchedDensities,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A stream counts toward the delay/throughput KPIs when it originates at
/// the gateway vehicle and is not background chatter.
pub fn is_measured(record: &StreamRecord) -> bool {
    record.src == 0 && record.kind != FrameKind::Background
}

/// The per-episode aggregates reported for every density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    pub mean_delay_s: Option<f64>,
    pub throughput_bps: f64,
    pub delivered_streams: u64,
    pub bytes_received: u64,
    pub playable_duration_s: Option<f64>,
}

/// Metric names in emission order.
pub const METRIC_NAMES: [&str; 5] =
    ["mean_delay_s", "throughput_bps", "delivered_streams", "bytes_received", "playable_duration_s"];

impl EpisodeMetrics {
    pub fn values(&self) -> [Option<f64>; 5] {
        [
            self.mean_delay_s,
            Some(self.throughput_bps),
            Some(self.delivered_streams as f64),
            Some(self.bytes_received as f64),
            self.playable_duration_s,
        ]
    }
}

/// Computes the episode aggregates from the raw stream records.
///
/// All KPIs cover the measured streams, i.e. what the edge server sees from
/// the gateway vehicle. `delivered_streams` sums, over consecutive
/// `epoch`-sized windows, the number of measured streams that delivered at
/// least one packet in the window (the analog of receiver-side interval
/// reports). Arrivals at exactly the horizon fall into the last window. For
/// video episodes `bytes_received` counts fully reassembled chunks.
pub fn episode_metrics(
    records: &[StreamRecord],
    horizon: SimTime,
    epoch: SimTime,
    video: Option<&VideoSinkReport>,
) -> EpisodeMetrics {
    let mut delay_sum_us: u64 = 0;
    let mut delivered: u64 = 0;
    let mut bytes: u64 = 0;
    let measured: Vec<&StreamRecord> = records.iter().filter(|r| is_measured(r)).collect();
    for record in &measured {
        for e in record.log() {
            if let Some(arrival) = e.arrival {
                delay_sum_us += arrival - e.gen;
                delivered += 1;
                bytes += e.bytes as u64;
            }
        }
    }
    EpisodeMetrics {
        mean_delay_s: if delivered > 0 { Some(delay_sum_us as f64 / delivered as f64 / 1e6) } else { None },
        throughput_bps: bytes as f64 * 8.0 / horizon.as_secs_f64(),
        delivered_streams: delivered_stream_windows(measured.iter().copied(), horizon, epoch),
        bytes_received: video.map(|v| v.bytes_received).unwrap_or(bytes),
        playable_duration_s: video.map(|v| v.playable_duration.as_secs_f64()),
    }
}

/// Sum over windows of the per-window delivered stream count.
pub fn delivered_stream_windows<'a>(
    records: impl IntoIterator<Item = &'a StreamRecord>,
    horizon: SimTime,
    epoch: SimTime,
) -> u64 {
    let epoch_us = epoch.as_micros().max(1);
    let n_windows = horizon.as_micros().div_ceil(epoch_us).max(1) as usize;
    let mut total = 0u64;
    let mut seen = vec![false; n_windows];
    for record in records {
        seen.iter_mut().for_each(|s| *s = false);
        for e in record.log() {
            if let Some(arrival) = e.arrival {
                let w = ((arrival.as_micros() / epoch_us) as usize).min(n_windows - 1);
                seen[w] = true;
            }
        }
        total += seen.iter().filter(|&&s| s).count() as u64;
    }
    total
}

/// One (density, episode) result row.
#[derive(Debug, Clone, PartialEq)]
pub struct KpiRow {
    pub density: u32,
    pub episode: u32,
    pub metrics: EpisodeMetrics,
    pub mean_reward: f64,
    pub gateway: Option<GatewayCounters>,
}

/// The aggregated per-scenario results.
#[derive(Debug, Clone, PartialEq)]
pub struct KpiReport {
    pub app: ScenarioApp,
    pub rows: Vec<KpiRow>,
}

impl KpiReport {
    pub fn densities(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for row in &self.rows {
            if !out.contains(&row.density) {
                out.push(row.density);
            }
        }
        out
    }

    /// The evaluation row for a density: its last episode.
    pub fn final_episode_metrics(&self, density: u32) -> Option<&KpiRow> {
        self.rows.iter().filter(|r| r.density == density).max_by_key(|r| r.episode)
    }
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Long-format KPI CSV. Gateway counters append as extra `gw_*` metric rows
/// when a run had the gateway attached.
pub fn render_kpi_csv(report: &KpiReport) -> String {
    let mut out = String::from("density,episode,metric,value\n");
    for row in &report.rows {
        for (name, value) in METRIC_NAMES.iter().zip(row.metrics.values()) {
            let _ = writeln!(out, "{},{},{},{}", row.density, row.episode, name, fmt_value(value));
        }
        if let Some(gw) = &row.gateway {
            for (name, value) in gateway_metric_rows(gw) {
                let _ = writeln!(out, "{},{},{},{}", row.density, row.episode, name, value);
            }
        }
    }
    out
}

fn gateway_metric_rows(gw: &GatewayCounters) -> Vec<(&'static str, u64)> {
    vec![
        ("gw_datagrams_in", gw.datagrams_in),
        ("gw_decode_errors", gw.decode_errors),
        ("gw_wrong_kind", gw.wrong_kind),
        ("gw_ingested_frames", gw.ingested_frames),
        ("gw_delivered_frames", gw.delivered_frames),
        ("gw_collided_frames", gw.collided_frames),
        ("gw_dropped_frames", gw.dropped_frames),
        ("gw_pending_frames", gw.pending_frames),
        ("gw_egress_datagrams", gw.egress_datagrams),
        ("gw_egress_failures", gw.egress_failures),
    ]
}

/// Human-readable fixed-width rendering of the same values as the CSV.
pub fn render_kpi_table(report: &KpiReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>8} {:>8} {:>22} {:>20}", "density", "episode", "metric", "value");
    for row in &report.rows {
        for (name, value) in METRIC_NAMES.iter().zip(row.metrics.values()) {
            let _ = writeln!(out, "{:>8} {:>8} {:>22} {:>20}", row.density, row.episode, name, fmt_value(value));
        }
    }
    out
}

/// Per-epoch agent trace. `rewards[i]` was earned during epoch `i` under
/// `actions[i]`, the action chosen at the epoch's start.
pub fn render_agent_csv(rows: &[(u32, u32, Vec<f64>, Vec<u8>)]) -> String {
    let mut out = String::from("density,episode,epoch,reward,action\n");
    for (density, episode, rewards, actions) in rows {
        for (i, r) in rewards.iter().enumerate() {
            let action = match actions.get(i) {
                Some(a) => a.to_string(),
                None => String::new(),
            };
            let _ = writeln!(out, "{density},{episode},{i},{r},{action}");
        }
    }
    out
}

/// Raw per-packet archive, one row per application datagram.
pub fn render_packet_csv(records: &[StreamRecord]) -> String {
    let mut out = String::from("stream_id,kind,src,seq,gen_time_us,arrival_time_us,bytes,outcome\n");
    for record in records {
        for e in record.log() {
            let arrival = match e.arrival {
                Some(t) => t.as_micros().to_string(),
                None => String::new(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                record.stream_id,
                record.kind.as_str(),
                record.src,
                e.seq,
                e.gen.as_micros(),
                arrival,
                e.bytes,
                e.outcome.as_str()
            );
        }
    }
    out
}

/// A parsed packet-log row; the counterpart of [`render_packet_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRow {
    pub stream_id: u32,
    pub kind: String,
    pub src: NodeId,
    pub seq: u64,
    pub gen_us: u64,
    pub arrival_us: Option<u64>,
    pub bytes: u32,
    pub outcome: String,
}

pub fn parse_packet_csv(text: &str) -> Result<Vec<PacketRow>, ReportError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(ReportError::Parse { line: idx + 1, message: format!("expected 8 fields, got {}", parts.len()) });
        }
        let num = |s: &str| -> Result<u64, ReportError> {
            s.parse().map_err(|_| ReportError::Parse { line: idx + 1, message: format!("bad number {s:?}") })
        };
        rows.push(PacketRow {
            stream_id: num(parts[0])? as u32,
            kind: parts[1].to_string(),
            src: num(parts[2])? as NodeId,
            seq: num(parts[3])?,
            gen_us: num(parts[4])?,
            arrival_us: if parts[5].is_empty() { None } else { Some(num(parts[5])?) },
            bytes: num(parts[6])? as u32,
            outcome: parts[7].to_string(),
        });
    }
    Ok(rows)
}

/// A parsed KPI row: `(density, episode, metric, value)`.
pub type KpiCsvRow = (u32, u32, String, Option<f64>);

pub fn parse_kpi_csv(text: &str) -> Result<Vec<KpiCsvRow>, ReportError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(ReportError::Parse { line: idx + 1, message: format!("expected 4 fields, got {}", parts.len()) });
        }
        let density = parts[0]
            .parse()
            .map_err(|_| ReportError::Parse { line: idx + 1, message: "bad density".into() })?;
        let episode = parts[1]
            .parse()
            .map_err(|_| ReportError::Parse { line: idx + 1, message: "bad episode".into() })?;
        let value = if parts[3].is_empty() {
            None
        } else {
            Some(parts[3].parse().map_err(|_| ReportError::Parse { line: idx + 1, message: "bad value".into() })?)
        };
        rows.push((density, episode, parts[2].to_string(), value));
    }
    Ok(rows)
}

/// Percent differences between two reports, metric by metric, density by
/// density, on each density's final episode. `None` cells are undefined
/// (baseline zero or value absent) and never rendered as a number.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub densities: Vec<u32>,
    pub metrics: Vec<String>,
    /// `cells[d][m]` is the percent difference for density `d`, metric `m`.
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn percent_difference(baseline: f64, treatment: f64) -> Option<f64> {
    if baseline == 0.0 {
        None
    } else {
        Some(100.0 * (treatment - baseline) / baseline)
    }
}

pub fn compare(baseline: &KpiReport, treatment: &KpiReport) -> Result<CompareTable, ReportError> {
    let densities = baseline.densities();
    if densities != treatment.densities() {
        return Err(ReportError::MismatchedDensities);
    }
    let metrics: Vec<String> = METRIC_NAMES.iter().map(|s| s.to_string()).collect();
    let mut cells = Vec::with_capacity(densities.len());
    for &density in &densities {
        let b = baseline.final_episode_metrics(density).expect("density present");
        let t = treatment.final_episode_metrics(density).expect("density present");
        let row: Vec<Option<f64>> = b
            .metrics
            .values()
            .iter()
            .zip(t.metrics.values())
            .map(|(bv, tv)| match (bv, tv) {
                (Some(b), Some(t)) => percent_difference(*b, t),
                _ => None,
            })
            .collect();
        cells.push(row);
    }
    Ok(CompareTable { densities, metrics, cells })
}

impl CompareTable {
    pub fn render_csv(&self) -> String {
        let mut out = String::from("density,metric,percent_difference\n");
        for (d, row) in self.densities.iter().zip(&self.cells) {
            for (m, cell) in self.metrics.iter().zip(row) {
                let value = match cell {
                    Some(v) => format!("{v}"),
                    None => "undefined".to_string(),
                };
                let _ = writeln!(out, "{d},{m},{value}");
            }
        }
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>8}", "density");
        for m in &self.metrics {
            let _ = write!(out, " {m:>20}");
        }
        out.push('\n');
        for (d, row) in self.densities.iter().zip(&self.cells) {
            let _ = write!(out, "{d:>8}");
            for cell in row {
                match cell {
                    Some(v) => {
                        let _ = write!(out, " {:>19.2}%", v);
                    }
                    None => {
                        let _ = write!(out, " {:>20}", "undefined");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}
