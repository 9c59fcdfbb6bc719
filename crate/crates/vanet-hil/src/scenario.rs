//! Experiment orchestration: one scenario run sweeps the configured vehicle
//! densities for the configured number of episodes, carries the Q-table
//! across episodes within each density, and writes the KPI report plus raw
//! per-packet archives.

use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::agent::{ActionId, QTable, QTableError, ACTION_COUNT};
use crate::config::{ConfigError, RunMode, ScenarioApp, SimConfig};
use crate::report::{
    episode_metrics, render_agent_csv, render_kpi_csv, render_kpi_table, render_packet_csv, KpiReport, KpiRow,
    ReportError,
};
use crate::kernel::RunStats;
use crate::sim::{derive_seed, run_episode, AgentPolicy, EpisodeParams, EpisodeResult, SimError};
use crate::time::SimTime;
use crate::traffic::{CaptureError, LidarCapture, VideoCapture};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("capture: {0}")]
    Capture(#[from] CaptureError),
    #[error("q-table: {0}")]
    QTable(#[from] QTableError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ScenarioError {
    /// Process exit code: 2 for configuration problems, 3 for gateway
    /// problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Config(_) | ScenarioError::Capture(_) | ScenarioError::QTable(_) => 2,
            ScenarioError::Sim(SimError::MissingCapture(_)) => 2,
            ScenarioError::Sim(SimError::Gateway(_)) => 3,
            _ => 1,
        }
    }
}

/// Seed for one (density, episode) run; stable across repeats.
pub fn episode_seed(master: u64, density: u32, episode: u32) -> u64 {
    derive_seed(master, ((density as u64) << 32) | episode as u64)
}

pub struct ScenarioOutcome {
    pub report: KpiReport,
    /// Q-table as trained within the last density (fresh per density).
    pub qtable: QTable,
    pub files: Vec<PathBuf>,
    /// Kernel statistics per (density, episode); drift and overload counts
    /// matter for real-time runs.
    pub run_stats: Vec<(u32, u32, RunStats)>,
}

type LoadedCaptures = (Option<Arc<LidarCapture>>, Option<Arc<VideoCapture>>);

fn load_captures(cfg: &SimConfig) -> Result<LoadedCaptures, ScenarioError> {
    let lidar = match (&cfg.scenario.app, &cfg.scenario.lidar_capture) {
        (ScenarioApp::Lidar, Some(path)) => Some(Arc::new(LidarCapture::load(path)?)),
        (ScenarioApp::Lidar, None) => return Err(SimError::MissingCapture("lidar").into()),
        _ => None,
    };
    let video = match (&cfg.scenario.app, &cfg.scenario.video_capture) {
        (ScenarioApp::Video, Some(path)) => Some(Arc::new(VideoCapture::load(path)?)),
        (ScenarioApp::Video, None) => return Err(SimError::MissingCapture("video").into()),
        _ => None,
    };
    Ok((lidar, video))
}

/// Policy for a given episode under the scenario's RL settings: train on
/// every episode but the last, evaluate greedily (epsilon frozen to 0) on
/// the last.
fn episode_policy(cfg: &SimConfig, episode: u32) -> AgentPolicy {
    if !cfg.scenario.rl_enabled {
        return AgentPolicy::Off;
    }
    if cfg.scenario.freeze_learning || episode == cfg.scenario.episodes {
        AgentPolicy::Greedy
    } else {
        AgentPolicy::Learn { epsilon: cfg.agent.epsilon }
    }
}

fn initial_qtable(cfg: &SimConfig) -> Result<QTable, ScenarioError> {
    match &cfg.scenario.qtable_load {
        Some(path) => Ok(QTable::load(path)?),
        None => Ok(QTable::for_agent()),
    }
}

/// Runs the full scenario and writes report files into `out_dir`.
pub fn run_scenario(cfg: &SimConfig) -> Result<ScenarioOutcome, ScenarioError> {
    cfg.validate()?;
    let (lidar, video) = load_captures(cfg)?;
    let out_dir = cfg.scenario.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;

    let mut files = Vec::new();
    let mut rows = Vec::new();
    let mut run_stats = Vec::new();
    let mut agent_rows: Vec<(u32, u32, Vec<f64>, Vec<u8>)> = Vec::new();
    let mut qtable = initial_qtable(cfg)?;
    let epoch = SimTime::from_micros((cfg.agent.decision_epoch_s * 1e6) as u64);

    for &density in &cfg.scenario.densities {
        // learning state persists across episodes within a density
        qtable = initial_qtable(cfg)?;
        for episode in 1..=cfg.scenario.episodes {
            let result;
            (result, qtable) = run_one(cfg, density, episode, qtable, lidar.clone(), video.clone())?;
            if cfg.scenario.archive_packets {
                let path = out_dir.join(format!("packets_d{density}_e{episode}.csv"));
                std::fs::write(&path, render_packet_csv(&result.records))?;
                files.push(path);
            }
            let metrics = episode_metrics(&result.records, result.horizon, epoch, result.video.as_ref());
            agent_rows.push((
                density,
                episode,
                result.rewards.clone(),
                result.actions.iter().map(|a| a.0).collect(),
            ));
            run_stats.push((density, episode, result.run));
            rows.push(KpiRow { density, episode, metrics, mean_reward: result.mean_reward, gateway: result.gateway });
        }
    }

    if let Some(path) = &cfg.scenario.qtable_save {
        qtable.save(path)?;
        files.push(path.clone());
    }

    let report = KpiReport { app: cfg.scenario.app, rows };
    let kpi_path = out_dir.join("kpi.csv");
    std::fs::write(&kpi_path, render_kpi_csv(&report))?;
    files.push(kpi_path);
    let table_path = out_dir.join("kpi_table.txt");
    std::fs::write(&table_path, render_kpi_table(&report))?;
    files.push(table_path);
    let agent_path = out_dir.join("agent.csv");
    std::fs::write(&agent_path, render_agent_csv(&agent_rows))?;
    files.push(agent_path);

    Ok(ScenarioOutcome { report, qtable, files, run_stats })
}

fn run_one(
    cfg: &SimConfig,
    density: u32,
    episode: u32,
    qtable: QTable,
    lidar: Option<Arc<LidarCapture>>,
    video: Option<Arc<VideoCapture>>,
) -> Result<(EpisodeResult, QTable), ScenarioError> {
    let params = EpisodeParams {
        cfg,
        density,
        seed: episode_seed(cfg.scenario.seed, density, episode),
        policy: episode_policy(cfg, episode),
        qtable,
        lidar,
        video,
        record_transmissions: false,
    };
    Ok(run_episode(params)?)
}

/// Outcome of the trained-versus-static-action comparison at one density.
#[derive(Debug, Clone, PartialEq)]
pub struct RlBenefit {
    pub density: u32,
    /// Mean reward of the trained agent's final (greedy) episode.
    pub trained_mean_reward: f64,
    /// Final-episode mean reward of each static action.
    pub fixed_mean_rewards: [f64; ACTION_COUNT],
    pub best_fixed_action: ActionId,
    pub best_fixed_mean_reward: f64,
}

/// Trains the agent at `density` (all episodes, evaluation on the last) and
/// exhaustively runs each static action against the same final-episode seed
/// and workload.
pub fn evaluate_rl_benefit(cfg: &SimConfig, density: u32) -> Result<RlBenefit, ScenarioError> {
    assert_eq!(cfg.scenario.mode, RunMode::Virtual, "the sweep is a virtual-mode analysis");
    let (lidar, video) = load_captures(cfg)?;

    let mut qtable = QTable::for_agent();
    let mut trained_mean_reward = 0.0;
    for episode in 1..=cfg.scenario.episodes {
        let policy = if episode == cfg.scenario.episodes {
            AgentPolicy::Greedy
        } else {
            AgentPolicy::Learn { epsilon: cfg.agent.epsilon }
        };
        let params = EpisodeParams {
            cfg,
            density,
            seed: episode_seed(cfg.scenario.seed, density, episode),
            policy,
            qtable,
            lidar: lidar.clone(),
            video: video.clone(),
            record_transmissions: false,
        };
        let result;
        (result, qtable) = run_episode(params)?;
        trained_mean_reward = result.mean_reward;
    }

    // static actions face exactly the final episode's seed and workload
    let eval_seed = episode_seed(cfg.scenario.seed, density, cfg.scenario.episodes);
    let mut fixed_mean_rewards = [0.0; ACTION_COUNT];
    for (a, slot) in fixed_mean_rewards.iter_mut().enumerate() {
        let params = EpisodeParams {
            cfg,
            density,
            seed: eval_seed,
            policy: AgentPolicy::Fixed(ActionId(a as u8)),
            qtable: QTable::for_agent(),
            lidar: lidar.clone(),
            video: video.clone(),
            record_transmissions: false,
        };
        let (result, _) = run_episode(params)?;
        *slot = result.mean_reward;
    }
    let best = fixed_mean_rewards
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite rewards"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(RlBenefit {
        density,
        trained_mean_reward,
        fixed_mean_rewards,
        best_fixed_action: ActionId(best as u8),
        best_fixed_mean_reward: fixed_mean_rewards[best],
    })
}
