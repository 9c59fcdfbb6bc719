//! Command-line front end: run a scenario sweep, compare two KPI reports,
//! or generate synthetic capture files for the LiDAR and video replayers.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vanet_hil::config::{RunMode, ScenarioApp, SimConfig};
use vanet_hil::report::{self, KpiReport, KpiRow, METRIC_NAMES};
use vanet_hil::scenario::{run_scenario, ScenarioError};
use vanet_hil::traffic::{LidarCapture, VideoCapture};

#[derive(Parser)]
#[command(name = "vanet-hil", version, about = "VANET hardware-in-the-loop testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scenario across vehicle densities.
    Run(Box<RunArgs>),
    /// Percent-difference table between two KPI reports (kpi.csv files).
    Compare(CompareArgs),
    /// Generate a synthetic LiDAR or video capture file.
    GenCapture(GenCaptureArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario configuration file (ini-style sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vehicle densities to sweep, e.g. 1,2,3,5,7,10.
    #[arg(long, value_delimiter = ',')]
    densities: Option<Vec<u32>>,
    /// Enable the Q-learning agent.
    #[arg(long, value_parser = ["on", "off"])]
    rl: Option<String>,
    #[arg(long, value_parser = ["virtual", "realtime"])]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Application on the gateway vehicle.
    #[arg(long, value_parser = ["probe", "lidar", "video"])]
    app: Option<String>,
    /// Simulated seconds per episode.
    #[arg(long)]
    sim_time_s: Option<u64>,
    #[arg(long)]
    episodes: Option<u32>,
    /// Load the Q-table checkpoint before the run.
    #[arg(long)]
    qtable_load: Option<PathBuf>,
    /// Save the Q-table checkpoint after the run.
    #[arg(long)]
    qtable_save: Option<PathBuf>,
    /// Freeze learning: act greedily in every episode, never update.
    #[arg(long)]
    freeze_learning: bool,
    /// LiDAR capture file (for --app lidar).
    #[arg(long)]
    lidar_capture: Option<PathBuf>,
    /// Video capture file (for --app video).
    #[arg(long)]
    video_capture: Option<PathBuf>,
    /// Skip the per-packet CSV archives.
    #[arg(long)]
    no_packet_archive: bool,
    /// Gateway vehicle-side bind address (realtime mode).
    #[arg(long)]
    vehicle_bind: Option<String>,
    /// Peer the vehicle port sends to (realtime mode).
    #[arg(long)]
    vehicle_peer: Option<String>,
    /// Gateway server-side bind address (realtime mode).
    #[arg(long)]
    server_bind: Option<String>,
    /// Peer the server port sends to (realtime mode).
    #[arg(long)]
    server_peer: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// kpi.csv of the baseline run.
    #[arg(long)]
    baseline: PathBuf,
    /// kpi.csv of the treatment run.
    #[arg(long)]
    treatment: PathBuf,
    /// Write the comparison CSV here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenCaptureArgs {
    #[arg(long, value_parser = ["lidar", "video"])]
    kind: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    scans: usize,
    #[arg(long, default_value_t = 60_000)]
    scan_bytes: usize,
    #[arg(long, default_value_t = 1500)]
    chunks: usize,
    #[arg(long, default_value_t = 10_000)]
    chunk_bytes: usize,
    #[arg(long, default_value_t = 40)]
    interval_ms: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn build_config(args: &RunArgs) -> Result<SimConfig, ScenarioError> {
    let mut cfg = match &args.config {
        Some(path) => SimConfig::from_file(path)?,
        None => SimConfig::default(),
    };
    let s = &mut cfg.scenario;
    if let Some(d) = &args.densities {
        s.densities = d.clone();
    }
    if let Some(rl) = &args.rl {
        s.rl_enabled = rl == "on";
    }
    if let Some(mode) = &args.mode {
        s.mode = if mode == "realtime" { RunMode::RealTime } else { RunMode::Virtual };
    }
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        s.out_dir = dir.clone();
    }
    if let Some(app) = &args.app {
        s.app = match app.as_str() {
            "lidar" => ScenarioApp::Lidar,
            "video" => ScenarioApp::Video,
            _ => ScenarioApp::Probe,
        };
    }
    if let Some(t) = args.sim_time_s {
        s.sim_time = vanet_hil::SimTime::from_secs(t);
    }
    if let Some(e) = args.episodes {
        s.episodes = e;
    }
    if args.qtable_load.is_some() {
        s.qtable_load = args.qtable_load.clone();
    }
    if args.qtable_save.is_some() {
        s.qtable_save = args.qtable_save.clone();
    }
    if args.freeze_learning {
        s.freeze_learning = true;
    }
    if args.lidar_capture.is_some() {
        s.lidar_capture = args.lidar_capture.clone();
    }
    if args.video_capture.is_some() {
        s.video_capture = args.video_capture.clone();
    }
    if args.no_packet_archive {
        s.archive_packets = false;
    }
    if let Some(v) = &args.vehicle_bind {
        cfg.gateway.vehicle_bind = v.clone();
    }
    if let Some(v) = &args.vehicle_peer {
        cfg.gateway.vehicle_peer = v.clone();
    }
    if let Some(v) = &args.server_bind {
        cfg.gateway.server_bind = v.clone();
    }
    if let Some(v) = &args.server_peer {
        cfg.gateway.server_peer = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<(), ScenarioError> {
    let cfg = build_config(&args)?;
    let outcome = run_scenario(&cfg)?;
    println!("{}", report::render_kpi_table(&outcome.report));
    if cfg.scenario.mode == RunMode::RealTime {
        for (density, episode, stats) in &outcome.run_stats {
            println!(
                "realtime d{density} e{episode}: {} events, max drift {} us, {} overloads",
                stats.events_dispatched, stats.max_drift_us, stats.overload_count
            );
        }
    }
    for file in &outcome.files {
        println!("wrote {}", file.display());
    }
    Ok(())
}

/// Rebuilds enough of a report from a kpi.csv to feed `compare`.
fn load_report(path: &PathBuf) -> Result<KpiReport, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let rows = report::parse_kpi_csv(&text)?;
    let mut out: Vec<KpiRow> = Vec::new();
    for (density, episode, metric, value) in rows {
        let row = match out.iter_mut().find(|r| r.density == density && r.episode == episode) {
            Some(row) => row,
            None => {
                out.push(KpiRow {
                    density,
                    episode,
                    metrics: report::EpisodeMetrics {
                        mean_delay_s: None,
                        throughput_bps: 0.0,
                        delivered_streams: 0,
                        bytes_received: 0,
                        playable_duration_s: None,
                    },
                    mean_reward: 0.0,
                    gateway: None,
                });
                out.last_mut().unwrap()
            }
        };
        match metric.as_str() {
            m if m == METRIC_NAMES[0] => row.metrics.mean_delay_s = value,
            m if m == METRIC_NAMES[1] => row.metrics.throughput_bps = value.unwrap_or(0.0),
            m if m == METRIC_NAMES[2] => row.metrics.delivered_streams = value.unwrap_or(0.0) as u64,
            m if m == METRIC_NAMES[3] => row.metrics.bytes_received = value.unwrap_or(0.0) as u64,
            m if m == METRIC_NAMES[4] => row.metrics.playable_duration_s = value,
            _ => {} // gw_* rows are informational
        }
    }
    Ok(KpiReport { app: ScenarioApp::Probe, rows: out })
}

fn cmd_compare(args: CompareArgs) -> Result<(), ScenarioError> {
    let baseline = load_report(&args.baseline)?;
    let treatment = load_report(&args.treatment)?;
    let table = report::compare(&baseline, &treatment)?;
    println!("{}", table.render_table());
    if let Some(out) = args.out {
        std::fs::write(&out, table.render_csv())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_gen_capture(args: GenCaptureArgs) -> Result<(), ScenarioError> {
    match args.kind.as_str() {
        "lidar" => {
            let capture = LidarCapture::generate(args.scans, args.scan_bytes, args.seed);
            capture.save(&args.out)?;
            println!("wrote {} ({} scans of {} bytes)", args.out.display(), args.scans, args.scan_bytes);
        }
        _ => {
            let capture = VideoCapture::generate(args.chunks, args.chunk_bytes, args.interval_ms, args.seed);
            capture.save(&args.out)?;
            println!(
                "wrote {} ({} chunks of {} bytes every {} ms)",
                args.out.display(),
                args.chunks,
                args.chunk_bytes,
                args.interval_ms
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(*args),
        Command::Compare(args) => cmd_compare(args),
        Command::GenCapture(args) => cmd_gen_capture(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
