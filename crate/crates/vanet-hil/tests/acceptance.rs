//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers once its assertions hold.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::net::UdpSocket;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use vanet_hil::agent::{QTable, StateId, ActionId};
use vanet_hil::config::{RunMode, SimConfig};
use vanet_hil::gateway::{EnvelopeKind, GatewayEnvelope};
use vanet_hil::kernel::{Kernel, KernelMode, SimEvent};
use vanet_hil::radio::{draw_backoff, DcfState, MacConfig};
use vanet_hil::report::{parse_kpi_csv, parse_packet_csv};
use vanet_hil::scenario::{evaluate_rl_benefit, run_scenario};
use vanet_hil::sim::{run_episode, AgentPolicy, EpisodeParams};
use vanet_hil::time::SimTime;

/// The wall-clock criteria assume an otherwise idle host, and the heavy
/// sweeps starve them of CPU; take this lock in every long-running test so
/// they execute one at a time.
static HEAVY: Mutex<()> = Mutex::new(());

fn serialized() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

// ---------------------------------------------------------------------------
// criterion 1: Q-learning on a known MDP matches value iteration
// ---------------------------------------------------------------------------

/// Fixed 5-state/4-action MDP with deterministic transitions
/// `s' = (s + a + 1) mod 5` and a known reward table.
struct Mdp;

const MDP_STATES: usize = 5;
const MDP_ACTIONS: usize = 4;
const MDP_GAMMA: f64 = 0.9;
const MDP_REWARDS: [[f64; MDP_ACTIONS]; MDP_STATES] = [
    [0.05, 0.80, 0.20, 0.10],
    [0.70, 0.10, 0.05, 0.30],
    [0.15, 0.25, 0.90, 0.00],
    [0.40, 0.05, 0.10, 0.60],
    [0.00, 0.30, 0.50, 0.85],
];

impl Mdp {
    fn next(s: usize, a: usize) -> usize {
        (s + a + 1) % MDP_STATES
    }

    /// Oracle: value iteration to a tight fixed point.
    fn value_iteration() -> [f64; MDP_STATES] {
        let mut v = [0.0; MDP_STATES];
        loop {
            let mut next = [0.0; MDP_STATES];
            let mut delta: f64 = 0.0;
            for s in 0..MDP_STATES {
                next[s] = (0..MDP_ACTIONS)
                    .map(|a| MDP_REWARDS[s][a] + MDP_GAMMA * v[Self::next(s, a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((next[s] - v[s]).abs());
            }
            v = next;
            if delta < 1e-12 {
                return v;
            }
        }
    }

    /// Oracle: exact evaluation of a fixed deterministic policy.
    fn evaluate_policy(policy: [usize; MDP_STATES]) -> [f64; MDP_STATES] {
        let mut v = [0.0; MDP_STATES];
        loop {
            let mut next = [0.0; MDP_STATES];
            let mut delta: f64 = 0.0;
            for s in 0..MDP_STATES {
                let a = policy[s];
                next[s] = MDP_REWARDS[s][a] + MDP_GAMMA * v[Self::next(s, a)];
                delta = delta.max((next[s] - v[s]).abs());
            }
            v = next;
            if delta < 1e-12 {
                return v;
            }
        }
    }
}

#[test]
fn c1_q_learning_matches_value_iteration_on_fixed_mdp() {
    let started = Instant::now();
    let mut q = QTable::new(MDP_STATES, MDP_ACTIONS);
    let mut visits = [[0u64; MDP_ACTIONS]; MDP_STATES];
    let mut rng = ChaCha12Rng::seed_from_u64(1);

    // off-policy exploration: uniform behavior, learning rate 1/visit-count
    let mut s = 0usize;
    for _ in 0..500_000 {
        let a = rng.random_range(0..MDP_ACTIONS);
        let s_next = Mdp::next(s, a);
        visits[s][a] += 1;
        let alpha = 1.0 / visits[s][a] as f64;
        q.update(StateId(s as u16), ActionId(a as u8), MDP_REWARDS[s][a], StateId(s_next as u16), alpha, MDP_GAMMA);
        s = s_next;
    }

    let mut policy = [0usize; MDP_STATES];
    for (state, slot) in policy.iter_mut().enumerate() {
        *slot = q.argmax(StateId(state as u16)).index();
    }
    let v_star = Mdp::value_iteration();
    let v_pi = Mdp::evaluate_policy(policy);
    let err = v_star.iter().zip(v_pi.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let elapsed = started.elapsed();

    assert!(err <= 1e-3, "greedy-policy values off by {err}");
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "[PASS] criterion 1: greedy policy {policy:?} matches value iteration, inf-norm error {err:.2e} in {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// criterion 2: Eq.-style update substitution examples at full precision
// ---------------------------------------------------------------------------

#[test]
fn c2_td_update_substitution_examples_hold_exactly() {
    let alpha = 0.1;
    let gamma = 0.99;

    let mut q = QTable::for_agent();
    let v = q.update(StateId(0), ActionId(0), 0.0, StateId(1), alpha, gamma);
    assert_eq!(v, 0.0);

    let mut q = QTable::for_agent();
    let v = q.update(StateId(0), ActionId(0), 1.0, StateId(1), alpha, gamma);
    assert_eq!(v, 0.0 + alpha * (1.0 + gamma * 0.0 - 0.0));
    assert_eq!(v, 0.1);

    let mut q = QTable::for_agent();
    q.set(StateId(0), ActionId(0), 0.5);
    q.set(StateId(1), ActionId(1), 1.0);
    let v = q.update(StateId(0), ActionId(0), 0.0, StateId(1), alpha, gamma);
    assert_eq!(v, 0.5 + alpha * (0.0 + gamma * 1.0 - 0.5));
    assert!((v - 0.549).abs() < 1e-15);

    println!("[PASS] criterion 2: all three TD-update substitution examples hold to full floating precision");
}

// ---------------------------------------------------------------------------
// criterion 3: saturated-pair collision rate vs exhaustive enumeration
// ---------------------------------------------------------------------------

#[test]
fn c3_two_node_collision_rate_matches_enumeration() {
    // oracle: exhaustive scan of all 16x16 slot pairs
    let cw = 15u32;
    let mut ties = 0u64;
    for a in 0..=cw {
        for b in 0..=cw {
            if a == b {
                ties += 1;
            }
        }
    }
    let oracle = ties as f64 / ((cw + 1) * (cw + 1)) as f64;

    // empirical: two saturated nodes redraw every round, window fixed at 15
    let mac = MacConfig::default();
    let mut node_a = DcfState::new(&mac);
    let mut node_b = DcfState::new(&mac);
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let rounds = 1_000_000u64;
    let mut collisions = 0u64;
    for _ in 0..rounds {
        let a = draw_backoff(&mut node_a, &mut rng);
        let b = draw_backoff(&mut node_b, &mut rng);
        if a == b {
            collisions += 1;
        }
    }
    let empirical = collisions as f64 / rounds as f64;
    let rel = (empirical - oracle).abs() / oracle;
    assert!(rel < 0.02, "empirical {empirical} vs oracle {oracle} (relative {rel:.4})");
    println!(
        "[PASS] criterion 3: same-slot collision rate {empirical:.5} vs enumeration {oracle:.5} over {rounds} rounds (relative {rel:.4})"
    );
}

// ---------------------------------------------------------------------------
// criterion 4: delay grows with vehicle density
// ---------------------------------------------------------------------------

#[test]
fn c4_mean_delay_is_nondecreasing_and_doubles_by_density_five() {
    let _guard = serialized();
    let mut cfg = SimConfig::default();
    cfg.scenario.sim_time = SimTime::from_secs(250);

    let densities = [1u32, 2, 3, 5];
    let mut delays = Vec::new();
    for &density in &densities {
        let started = Instant::now();
        let params = EpisodeParams {
            cfg: &cfg,
            density,
            seed: 404,
            policy: AgentPolicy::Off,
            qtable: QTable::for_agent(),
            lidar: None,
            video: None,
            record_transmissions: false,
        };
        let (result, _) = run_episode(params).unwrap();
        let elapsed = started.elapsed();
        assert!(elapsed < Duration::from_secs(60), "density {density} took {elapsed:?}");
        let metrics = vanet_hil::report::episode_metrics(
            &result.records,
            result.horizon,
            SimTime::from_secs(1),
            None,
        );
        delays.push(metrics.mean_delay_s.expect("probe delivers at every density"));
    }

    for pair in delays.windows(2) {
        assert!(pair[1] >= pair[0], "delay decreased along the density sweep: {delays:?}");
    }
    assert!(
        delays[3] >= 2.0 * delays[0],
        "density-5 delay {} not at least twice density-1 delay {}",
        delays[3],
        delays[0]
    );
    println!(
        "[PASS] criterion 4: mean delay by density {{1: {:.4}s, 2: {:.4}s, 3: {:.4}s, 5: {:.4}s}} nondecreasing, x{:.1} at density 5",
        delays[0], delays[1], delays[2], delays[3],
        delays[3] / delays[0]
    );
}

// ---------------------------------------------------------------------------
// criterion 5: trained agent vs exhaustive static-action sweep
// ---------------------------------------------------------------------------

#[test]
fn c5_trained_agent_reaches_best_static_action_at_density_five() {
    let _guard = serialized();
    let cfg = SimConfig::default();
    let benefit = evaluate_rl_benefit(&cfg, 5).unwrap();
    let threshold = benefit.best_fixed_mean_reward - 0.05 * benefit.best_fixed_mean_reward.abs();
    assert!(
        benefit.trained_mean_reward >= threshold,
        "trained {} below best fixed {} - 5% ({}); per-action {:?}",
        benefit.trained_mean_reward,
        benefit.best_fixed_mean_reward,
        threshold,
        benefit.fixed_mean_rewards
    );
    println!(
        "[PASS] criterion 5: trained episode-3 mean reward {:.5} vs best fixed action {:?} at {:.5} (threshold {:.5})",
        benefit.trained_mean_reward, benefit.best_fixed_action, benefit.best_fixed_mean_reward, threshold
    );
}

// ---------------------------------------------------------------------------
// criterion 6: gateway byte transparency
// ---------------------------------------------------------------------------

#[test]
fn c6_envelope_codec_and_gateway_path_are_byte_transparent() {
    let _guard = serialized();
    // 10^4 random payloads across the full length range round-trip the codec
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    for _ in 0..10_000 {
        let len = rng.random_range(1..=65_489usize);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let kind = match rng.random_range(0..3) {
            0 => EnvelopeKind::ToSim,
            1 => EnvelopeKind::FromSim,
            _ => EnvelopeKind::Control,
        };
        let env = GatewayEnvelope::new(kind, rng.random(), payload).unwrap();
        let back = GatewayEnvelope::decode(&env.encode()).unwrap();
        assert_eq!(back, env);
    }

    // end-to-end ingest -> egress equality on a lossless configuration
    let vehicle_peer = UdpSocket::bind("127.0.0.1:0").unwrap();
    let server_peer = UdpSocket::bind("127.0.0.1:0").unwrap();
    server_peer.set_read_timeout(Some(Duration::from_secs(3))).unwrap();
    let vehicle_bind = UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let server_bind = UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap();

    let mut cfg = SimConfig::default();
    cfg.scenario.mode = RunMode::RealTime;
    cfg.scenario.sim_time = SimTime::from_millis(1200);
    cfg.gateway.vehicle_bind = vehicle_bind.to_string();
    cfg.gateway.vehicle_peer = vehicle_peer.local_addr().unwrap().to_string();
    cfg.gateway.server_bind = server_bind.to_string();
    cfg.gateway.server_peer = server_peer.local_addr().unwrap().to_string();

    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let payloads: Vec<Vec<u8>> =
        [1usize, 18, 1000, 65_471].iter().map(|&len| (0..len).map(|_| rng.random()).collect()).collect();
    let expected = payloads.clone();
    let client = vehicle_peer.try_clone().unwrap();
    let feeder = std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(150));
        for p in payloads {
            let env = GatewayEnvelope::new(EnvelopeKind::ToSim, 0, p).unwrap();
            client.send_to(&env.encode(), vehicle_bind).unwrap();
            std::thread::sleep(Duration::from_millis(150));
        }
    });
    let params = EpisodeParams {
        cfg: &cfg,
        density: 1,
        seed: 606,
        policy: AgentPolicy::Off,
        qtable: QTable::for_agent(),
        lidar: None,
        video: None,
        record_transmissions: false,
    };
    let (result, _) = run_episode(params).unwrap();
    feeder.join().unwrap();

    let mut buf = vec![0u8; 65_535];
    for want in &expected {
        let n = server_peer.recv(&mut buf).expect("egress datagram");
        let env = GatewayEnvelope::decode(&buf[..n]).unwrap();
        assert_eq!(&env.payload, want, "payload of length {} must cross byte-exact", want.len());
    }
    let gw = result.gateway.unwrap();
    assert!(gw.conserved(), "{gw}");
    println!(
        "[PASS] criterion 6: 10^4 codec round trips byte-exact; ingest->egress equality for lengths 1, 18, 1000, 65471 ({})",
        gw
    );
}

// ---------------------------------------------------------------------------
// criterion 7: real-time pacing on an idle host
// ---------------------------------------------------------------------------

#[test]
fn c7_ten_second_realtime_run_stays_inside_drift_budget() {
    let _guard = serialized();
    let budget_us = 5_000;
    let mut kernel: Kernel<u32> = Kernel::new(KernelMode::RealTime { drift_budget_us: budget_us });
    // periodic work every 50 ms across the whole run
    kernel.schedule(SimTime::from_millis(50), 0, 0).unwrap();
    let wall = Instant::now();
    let stats = kernel
        .run_realtime(SimTime::from_secs(10), &mut |k: &mut Kernel<u32>, e: SimEvent<u32>| {
            let next = e.fire_time + 50_000;
            if next <= SimTime::from_secs(10) {
                k.schedule(next, 0, 0).unwrap();
            }
        })
        .unwrap();
    let elapsed = wall.elapsed();

    assert_eq!(stats.final_clock, SimTime::from_secs(10));
    assert!(stats.events_dispatched >= 199, "dispatched {}", stats.events_dispatched);
    assert!(stats.max_drift_us <= budget_us, "max drift {} us", stats.max_drift_us);
    assert!(elapsed >= Duration::from_secs(10), "finished early: {elapsed:?}");
    assert!(elapsed <= Duration::from_millis(10_100), "overran: {elapsed:?}");
    println!(
        "[PASS] criterion 7: 10 s real-time run, {} events, max drift {} us <= {} us, wall {:?}",
        stats.events_dispatched, stats.max_drift_us, budget_us, elapsed
    );
}

// ---------------------------------------------------------------------------
// criterion 8: reported KPIs equal recomputation from raw logs
// ---------------------------------------------------------------------------

#[test]
fn c8_reported_kpis_equal_recomputation_from_packet_logs() {
    let _guard = serialized();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SimConfig::default();
    cfg.scenario.densities = vec![1, 3];
    cfg.scenario.episodes = 2;
    cfg.scenario.sim_time = SimTime::from_secs(30);
    cfg.scenario.seed = 808;
    cfg.scenario.out_dir = dir.path().to_path_buf();
    cfg.traffic.probe_duration_s = 20;
    run_scenario(&cfg).unwrap();

    let kpi_text = std::fs::read_to_string(dir.path().join("kpi.csv")).unwrap();
    let kpi = parse_kpi_csv(&kpi_text).unwrap();
    let horizon_us = 30_000_000u64;
    let epoch_us = 1_000_000u64;
    let n_windows = horizon_us.div_ceil(epoch_us) as usize;

    let mut checked = 0;
    for &density in &[1u32, 3] {
        for episode in 1..=2u32 {
            let packets_text =
                std::fs::read_to_string(dir.path().join(format!("packets_d{density}_e{episode}.csv"))).unwrap();
            let rows = parse_packet_csv(&packets_text).unwrap();

            // independent scan over the raw rows
            let mut delay_sum_us = 0u64;
            let mut delivered = 0u64;
            let mut bytes = 0u64;
            let mut windows_per_stream: std::collections::BTreeMap<u32, Vec<bool>> = Default::default();
            for row in &rows {
                let measured = row.src == 0 && row.kind != "background";
                if !measured {
                    continue;
                }
                if let Some(arrival) = row.arrival_us {
                    delay_sum_us += arrival - row.gen_us;
                    delivered += 1;
                    bytes += row.bytes as u64;
                    let w = ((arrival / epoch_us) as usize).min(n_windows - 1);
                    windows_per_stream.entry(row.stream_id).or_insert_with(|| vec![false; n_windows])[w] = true;
                }
            }
            let recomputed_delay = if delivered > 0 { Some(delay_sum_us as f64 / delivered as f64 / 1e6) } else { None };
            let recomputed_throughput = bytes as f64 * 8.0 / (horizon_us as f64 / 1e6);
            let recomputed_streams: u64 =
                windows_per_stream.values().map(|w| w.iter().filter(|&&x| x).count() as u64).sum();

            let get = |metric: &str| -> Option<f64> {
                kpi.iter()
                    .find(|(d, e, m, _)| *d == density && *e == episode && m == metric)
                    .map(|(_, _, _, v)| *v)
                    .expect("metric row present")
            };
            assert_eq!(get("mean_delay_s"), recomputed_delay, "delay mismatch d{density} e{episode}");
            assert_eq!(get("throughput_bps"), Some(recomputed_throughput), "throughput mismatch d{density} e{episode}");
            assert_eq!(
                get("delivered_streams"),
                Some(recomputed_streams as f64),
                "stream count mismatch d{density} e{episode}"
            );
            assert_eq!(get("bytes_received"), Some(bytes as f64), "bytes mismatch d{density} e{episode}");
            checked += 1;
        }
    }
    assert_eq!(checked, 4);
    println!("[PASS] criterion 8: all reported delay/throughput/stream-count/byte values equal independent recomputation from the per-packet CSVs, exactly");
}

// ---------------------------------------------------------------------------
// criterion 9: byte-identical outputs across reruns
// ---------------------------------------------------------------------------

#[test]
fn c9_full_density_sweep_is_byte_deterministic() {
    let _guard = serialized();
    let run = |dir: &std::path::Path| {
        let mut cfg = SimConfig::default();
        cfg.scenario.densities = vec![1, 2, 3, 5, 7, 10];
        cfg.scenario.episodes = 3;
        cfg.scenario.sim_time = SimTime::from_secs(20);
        cfg.scenario.seed = 909;
        cfg.scenario.rl_enabled = true;
        cfg.scenario.out_dir = dir.to_path_buf();
        cfg.traffic.probe_duration_s = 12;
        run_scenario(&cfg).unwrap();
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run(dir_a.path());
    run(dir_b.path());

    let mut names: Vec<String> = std::fs::read_dir(dir_a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.len() > 20, "expected kpi + agent + 18 packet archives, got {names:?}");
    let mut bytes = 0usize;
    for name in &names {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical sweeps");
        bytes += a.len();
    }
    println!(
        "[PASS] criterion 9: two full density sweeps produced byte-identical outputs ({} files, {} bytes compared)",
        names.len(),
        bytes
    );
}
