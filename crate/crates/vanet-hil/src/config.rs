//! Scenario configuration: defaults for every subsystem plus an ini-style
//! key/value file format with one section per subsystem.
//!
//! ```text
//! # comment
//! [scenario]
//! densities = 1,2,3,5,7,10
//! sim_time_s = 250
//! rl = on
//!
//! [mac]
//! cw_min = 15
//! ```
//!
//! Unknown sections or keys are rejected so typos surface immediately.

use std::path::PathBuf;

use thiserror::Error;

use crate::agent::AgentConfig;
use crate::gateway::GatewayConfig;
use crate::mobility::KinematicsConfig;
use crate::radio::{MacConfig, RadioConfig};
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        ConfigError::Parse { line, message: message.into() }
    }
}

/// Which application the gateway vehicle runs toward the edge server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioApp {
    Probe,
    Lidar,
    Video,
}

impl ScenarioApp {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioApp::Probe => "probe",
            ScenarioApp::Lidar => "lidar",
            ScenarioApp::Video => "video",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Virtual,
    RealTime,
}

/// Experiment-level settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub densities: Vec<u32>,
    pub episodes: u32,
    pub sim_time: SimTime,
    pub mode: RunMode,
    pub rl_enabled: bool,
    pub seed: u64,
    pub app: ScenarioApp,
    pub out_dir: PathBuf,
    /// Write per-packet CSV logs alongside the KPI report.
    pub archive_packets: bool,
    pub lidar_capture: Option<PathBuf>,
    pub video_capture: Option<PathBuf>,
    pub qtable_load: Option<PathBuf>,
    pub qtable_save: Option<PathBuf>,
    /// Evaluation mode: no Q-table updates in any episode.
    pub freeze_learning: bool,
    /// Edge server position on the tile.
    pub server_pos_m: (f64, f64),
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            densities: vec![1, 2, 3, 5, 7, 10],
            episodes: 3,
            sim_time: SimTime::from_secs(250),
            mode: RunMode::Virtual,
            rl_enabled: false,
            seed: 1,
            app: ScenarioApp::Probe,
            out_dir: PathBuf::from("results"),
            archive_packets: true,
            lidar_capture: None,
            video_capture: None,
            qtable_load: None,
            qtable_save: None,
            freeze_learning: false,
            server_pos_m: (150.0, 50.0),
        }
    }
}

/// Real-time pacing settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSettings {
    pub drift_budget_us: u64,
}

impl Default for KernelSettings {
    fn default() -> Self {
        KernelSettings { drift_budget_us: 5_000 }
    }
}

/// Application traffic parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficConfig {
    pub probe_rate_bps: u64,
    pub probe_packet_bytes: u32,
    pub probe_start_s: u64,
    pub probe_duration_s: u64,
    pub background_packet_bytes: u32,
    pub background_interval_ms: u64,
    pub lidar_rate_hz: u32,
    pub lidar_fragment_bytes: u32,
    pub video_datagram_bytes: u32,
    pub video_chunk_interval_ms: u64,
    /// LiDAR replay length; the capture loops beneath it.
    pub app_duration_s: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            probe_rate_bps: 22_000_000,
            probe_packet_bytes: 1250,
            // measured stream starts after background reaches steady state
            probe_start_s: 5,
            probe_duration_s: 200,
            background_packet_bytes: 1000,
            background_interval_ms: 10,
            lidar_rate_hz: 10,
            lidar_fragment_bytes: 1400,
            video_datagram_bytes: 1316,
            video_chunk_interval_ms: 40,
            app_duration_s: 200,
        }
    }
}

/// Everything an episode needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimConfig {
    pub scenario: ScenarioConfig,
    pub kernel: KernelSettings,
    pub mobility: KinematicsConfig,
    pub radio: RadioConfig,
    pub mac: MacConfig,
    pub agent: AgentConfig,
    pub traffic: TrafficConfig,
    pub gateway: GatewayConfig,
}

impl SimConfig {
    pub fn from_file(path: &std::path::Path) -> Result<SimConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        parse_config(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.scenario;
        let bad = |m: &str| Err(ConfigError::at(0, m.to_string()));
        if s.densities.is_empty() || s.densities.iter().any(|&d| d < 1) {
            return bad("densities must be a non-empty list of counts >= 1");
        }
        if s.episodes < 1 {
            return bad("episodes must be >= 1");
        }
        if s.sim_time == SimTime::ZERO {
            return bad("sim_time_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.agent.epsilon) {
            return bad("epsilon must be within [0, 1]");
        }
        if !(0.0..1.0).contains(&self.agent.gamma) {
            return bad("gamma must be within [0, 1)");
        }
        if self.agent.alpha <= 0.0 || self.agent.alpha > 1.0 {
            return bad("alpha must be within (0, 1]");
        }
        if (self.agent.alpha1 + self.agent.alpha2 - 1.0).abs() > 1e-9 {
            return bad("reward weights alpha1 + alpha2 must sum to 1");
        }
        if self.mac.queue_cap == 0 || self.mac.slot_us == 0 {
            return bad("mac queue_cap and slot_us must be positive");
        }
        if self.radio.coverage_range_m <= 0.0
            || self.radio.best_effort_rate_bps == 0
            || self.radio.low_rate_bps == 0
        {
            return bad("radio range and data rates must be positive");
        }
        if self.mobility.accel_mps2 <= 0.0 || self.mobility.decel_mps2 <= 0.0 || self.mobility.max_speed_mps <= 0.0 {
            return bad("mobility accel/decel/max_speed must be positive");
        }
        if self.traffic.probe_packet_bytes < 1 || self.traffic.probe_packet_bytes as usize > 65_489 {
            return bad("probe packet size must be within [1, 65489]");
        }
        let t = &self.traffic;
        if t.probe_rate_bps == 0
            || t.background_packet_bytes < 1
            || t.background_interval_ms < 1
            || t.lidar_rate_hz < 1
            || t.lidar_fragment_bytes < 1
            || t.video_datagram_bytes < 1
            || t.video_chunk_interval_ms < 1
        {
            return bad("traffic rates, sizes and intervals must be positive");
        }
        if self.gateway.fragment_bytes < 1 {
            return bad("gateway fragment_bytes must be positive");
        }
        Ok(())
    }
}

fn parse_bool(v: &str, line: usize) -> Result<bool, ConfigError> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::at(line, format!("expected on/off, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::at(line, format!("bad numeric value {v:?}")))
}

fn parse_list(v: &str, line: usize) -> Result<Vec<u32>, ConfigError> {
    v.split(',')
        .map(|part| parse_num::<u32>(part.trim(), line))
        .collect()
}

/// Parses the sectioned key/value format over the built-in defaults.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let mut cfg = SimConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line, "unterminated section header"))?;
            section = name.trim().to_string();
            match section.as_str() {
                "scenario" | "kernel" | "mobility" | "radio" | "mac" | "agent" | "traffic" | "gateway" => {}
                other => return Err(ConfigError::at(line, format!("unknown section [{other}]"))),
            }
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| ConfigError::at(line, "expected key = value"))?;
        let key = key.trim();
        let v = value.trim();
        apply_key(&mut cfg, &section, key, v, line)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut SimConfig, section: &str, key: &str, v: &str, line: usize) -> Result<(), ConfigError> {
    let unknown = || Err(ConfigError::at(line, format!("unknown key {key:?} in section [{section}]")));
    match section {
        "scenario" => {
            let s = &mut cfg.scenario;
            match key {
                "densities" => s.densities = parse_list(v, line)?,
                "episodes" => s.episodes = parse_num(v, line)?,
                "sim_time_s" => s.sim_time = SimTime::from_secs(parse_num(v, line)?),
                "mode" => {
                    s.mode = match v {
                        "virtual" => RunMode::Virtual,
                        "realtime" => RunMode::RealTime,
                        _ => return Err(ConfigError::at(line, format!("mode must be virtual or realtime, got {v:?}"))),
                    }
                }
                "rl" => s.rl_enabled = parse_bool(v, line)?,
                "seed" => s.seed = parse_num(v, line)?,
                "app" => {
                    s.app = match v {
                        "probe" => ScenarioApp::Probe,
                        "lidar" => ScenarioApp::Lidar,
                        "video" => ScenarioApp::Video,
                        _ => return Err(ConfigError::at(line, format!("app must be probe, lidar or video, got {v:?}"))),
                    }
                }
                "out_dir" => s.out_dir = PathBuf::from(v),
                "archive_packets" => s.archive_packets = parse_bool(v, line)?,
                "lidar_capture" => s.lidar_capture = Some(PathBuf::from(v)),
                "video_capture" => s.video_capture = Some(PathBuf::from(v)),
                "qtable_load" => s.qtable_load = Some(PathBuf::from(v)),
                "qtable_save" => s.qtable_save = Some(PathBuf::from(v)),
                "freeze_learning" => s.freeze_learning = parse_bool(v, line)?,
                "server_x_m" => s.server_pos_m.0 = parse_num(v, line)?,
                "server_y_m" => s.server_pos_m.1 = parse_num(v, line)?,
                _ => return unknown(),
            }
        }
        "kernel" => match key {
            "drift_budget_us" => cfg.kernel.drift_budget_us = parse_num(v, line)?,
            _ => return unknown(),
        },
        "mobility" => {
            let m = &mut cfg.mobility;
            match key {
                "tile_w_m" => m.tile_w_m = parse_num(v, line)?,
                "tile_h_m" => m.tile_h_m = parse_num(v, line)?,
                "max_speed_mps" => m.max_speed_mps = parse_num(v, line)?,
                "accel_mps2" => m.accel_mps2 = parse_num(v, line)?,
                "decel_mps2" => m.decel_mps2 = parse_num(v, line)?,
                "lanes" => m.lanes = parse_num(v, line)?,
                "min_spacing_m" => m.min_spacing_m = parse_num(v, line)?,
                "update_interval_ms" => m.update_interval_ms = parse_num(v, line)?,
                "target_speed_min_mps" => m.target_speed_range_mps.0 = parse_num(v, line)?,
                "target_speed_max_mps" => m.target_speed_range_mps.1 = parse_num(v, line)?,
                _ => return unknown(),
            }
        }
        "radio" => {
            let r = &mut cfg.radio;
            match key {
                "coverage_range_m" => r.coverage_range_m = parse_num(v, line)?,
                "tx_power_mw" => r.tx_power_mw = parse_num(v, line)?,
                "frequency_ghz" => r.frequency_ghz = parse_num(v, line)?,
                "channel_bandwidth_mhz" => r.channel_bandwidth_mhz = parse_num(v, line)?,
                "best_effort_rate_bps" => r.best_effort_rate_bps = parse_num(v, line)?,
                "low_rate_bps" => r.low_rate_bps = parse_num(v, line)?,
                _ => return unknown(),
            }
        }
        "mac" => {
            let m = &mut cfg.mac;
            match key {
                "slot_us" => m.slot_us = parse_num(v, line)?,
                "sifs_us" => m.sifs_us = parse_num(v, line)?,
                "cw_min" => m.cw_min = parse_num(v, line)?,
                "cw_max" => m.cw_max = parse_num(v, line)?,
                "retry_limit" => m.retry_limit = parse_num(v, line)?,
                "queue_cap" => m.queue_cap = parse_num(v, line)?,
                "mtu_bytes" => m.mtu_bytes = parse_num(v, line)?,
                "header_bytes" => m.header_bytes = parse_num(v, line)?,
                "overhead_us" => m.overhead_us = parse_num(v, line)?,
                "instant_delivery" => m.instant_delivery = parse_bool(v, line)?,
                _ => return unknown(),
            }
        }
        "agent" => {
            let a = &mut cfg.agent;
            match key {
                "epsilon" => a.epsilon = parse_num(v, line)?,
                "gamma" => a.gamma = parse_num(v, line)?,
                "alpha" => a.alpha = parse_num(v, line)?,
                "alpha1" => a.alpha1 = parse_num(v, line)?,
                "alpha2" => a.alpha2 = parse_num(v, line)?,
                "decision_epoch_s" => a.decision_epoch_s = parse_num(v, line)?,
                "episodes" => a.episodes = parse_num(v, line)?,
                "delay_ref_s" => a.norms.delay_ref_s = parse_num(v, line)?,
                "throughput_ref_bps" => a.norms.throughput_ref_bps = parse_num(v, line)?,
                _ => return unknown(),
            }
        }
        "traffic" => {
            let t = &mut cfg.traffic;
            match key {
                "probe_rate_bps" => t.probe_rate_bps = parse_num(v, line)?,
                "probe_packet_bytes" => t.probe_packet_bytes = parse_num(v, line)?,
                "probe_start_s" => t.probe_start_s = parse_num(v, line)?,
                "probe_duration_s" => t.probe_duration_s = parse_num(v, line)?,
                "background_packet_bytes" => t.background_packet_bytes = parse_num(v, line)?,
                "background_interval_ms" => t.background_interval_ms = parse_num(v, line)?,
                "lidar_rate_hz" => t.lidar_rate_hz = parse_num(v, line)?,
                "lidar_fragment_bytes" => t.lidar_fragment_bytes = parse_num(v, line)?,
                "video_datagram_bytes" => t.video_datagram_bytes = parse_num(v, line)?,
                "video_chunk_interval_ms" => t.video_chunk_interval_ms = parse_num(v, line)?,
                "app_duration_s" => t.app_duration_s = parse_num(v, line)?,
                _ => return unknown(),
            }
        }
        "gateway" => {
            let g = &mut cfg.gateway;
            match key {
                "vehicle_bind" => g.vehicle_bind = v.to_string(),
                "vehicle_peer" => g.vehicle_peer = v.to_string(),
                "server_bind" => g.server_bind = v.to_string(),
                "server_peer" => g.server_peer = v.to_string(),
                "fragment_bytes" => g.fragment_bytes = parse_num(v, line)?,
                _ => return unknown(),
            }
        }
        "" => return Err(ConfigError::at(line, "key outside any [section]")),
        _ => unreachable!("section names validated at the header"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, SimConfig::default());
        assert_eq!(cfg.scenario.densities, vec![1, 2, 3, 5, 7, 10]);
        assert_eq!(cfg.scenario.sim_time, SimTime::from_secs(250));
        assert_eq!(cfg.mac.cw_min, 15);
    }

    #[test]
    fn sectioned_overrides_apply() {
        let text = "\n# experiment\n[scenario]\ndensities = 1, 2\nsim_time_s = 30\nrl = on\nseed = 9\n\n[mac]\nqueue_cap = 64\n\n[agent]\nepsilon = 0.1\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.scenario.densities, vec![1, 2]);
        assert_eq!(cfg.scenario.sim_time, SimTime::from_secs(30));
        assert!(cfg.scenario.rl_enabled);
        assert_eq!(cfg.scenario.seed, 9);
        assert_eq!(cfg.mac.queue_cap, 64);
        assert_eq!(cfg.agent.epsilon, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        let err = parse_config("[scenario]\nnot_a_key = 1\n").unwrap_err();
        match err {
            ConfigError::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("not_a_key"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_config("[nope]\n").is_err());
        assert!(parse_config("stray = 1\n").is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(parse_config("[agent]\nepsilon = 1.5\n").is_err());
        assert!(parse_config("[scenario]\ndensities = 0\n").is_err());
        assert!(parse_config("[scenario]\nmode = sideways\n").is_err());
    }
}
