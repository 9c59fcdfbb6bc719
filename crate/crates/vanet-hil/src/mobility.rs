//! Kinematic vehicle motion on the simulation tile.
//!
//! Vehicles travel along straight parallel lanes spanning the long axis of
//! the tile and wrap around at the edge (torus in x), which keeps the density
//! of an episode constant. There is no car-following or lane-change logic:
//! each vehicle holds a randomized target speed and accelerates or brakes
//! toward it.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::kernel::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum MobilityError {
    #[error("{requested} vehicles exceed the {capacity} placeable slots at {spacing_m} m spacing")]
    TooDense { requested: usize, capacity: usize, spacing_m: f64 },
}

/// Longitudinal control applied during one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccelCommand {
    Accelerate,
    Decelerate,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub node_id: NodeId,
    /// Meters within the tile.
    pub x: f64,
    pub y: f64,
    /// m/s, always within [0, max_speed].
    pub speed: f64,
    pub accel_command: AccelCommand,
    /// Unit direction along the road axis: +1.0 east, -1.0 west.
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicsConfig {
    pub tile_w_m: f64,
    pub tile_h_m: f64,
    pub max_speed_mps: f64,
    pub accel_mps2: f64,
    pub decel_mps2: f64,
    pub lanes: usize,
    /// Minimum spawn spacing between vehicles in a lane.
    pub min_spacing_m: f64,
    /// How often vehicle positions are advanced.
    pub update_interval_ms: u64,
    /// Per-vehicle target speeds are drawn uniformly from this range.
    pub target_speed_range_mps: (f64, f64),
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        KinematicsConfig {
            tile_w_m: 300.0,
            tile_h_m: 100.0,
            max_speed_mps: 17.0,
            accel_mps2: 2.6,
            decel_mps2: 4.5,
            lanes: 4,
            min_spacing_m: 5.0,
            update_interval_ms: 100,
            target_speed_range_mps: (8.0, 17.0),
        }
    }
}

impl KinematicsConfig {
    /// y offset of lane `i`; lanes are spread evenly across the tile height.
    pub fn lane_y(&self, lane: usize) -> f64 {
        self.tile_h_m * (lane + 1) as f64 / (self.lanes + 1) as f64
    }

    /// Lanes alternate direction.
    pub fn lane_heading(&self, lane: usize) -> f64 {
        if lane.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    fn slots_per_lane(&self) -> usize {
        (self.tile_w_m / self.min_spacing_m) as usize
    }

    pub fn capacity(&self) -> usize {
        self.lanes * self.slots_per_lane()
    }
}

/// Advances one vehicle by `dt` seconds: the speed integrates the commanded
/// acceleration clamped to [0, max_speed], then the position advances by the
/// new speed, wrapping at the tile edge.
pub fn step(state: &VehicleState, cfg: &KinematicsConfig, dt: f64) -> VehicleState {
    debug_assert!(dt > 0.0);
    let accel = match state.accel_command {
        AccelCommand::Accelerate => cfg.accel_mps2,
        AccelCommand::Decelerate => -cfg.decel_mps2,
        AccelCommand::Hold => 0.0,
    };
    let speed = (state.speed + accel * dt).clamp(0.0, cfg.max_speed_mps);
    let x = (state.x + speed * dt * state.heading).rem_euclid(cfg.tile_w_m);
    VehicleState { x, speed, ..*state }
}

/// Places `n` vehicles at distinct lane slots. Node 0 is the vehicle the
/// external gateway attaches to; all vehicles start at rest.
pub fn spawn_fleet(n: usize, cfg: &KinematicsConfig, seed: u64) -> Result<Vec<VehicleState>, MobilityError> {
    assert!(n >= 1, "a fleet has at least one vehicle");
    let capacity = cfg.capacity();
    if n > capacity {
        return Err(MobilityError::TooDense { requested: n, capacity, spacing_m: cfg.min_spacing_m });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let slots = sample_distinct(&mut rng, capacity, n);
    let per_lane = cfg.slots_per_lane();
    let fleet = slots
        .into_iter()
        .enumerate()
        .map(|(i, slot)| {
            let lane = slot / per_lane;
            let idx = slot % per_lane;
            VehicleState {
                node_id: i as NodeId,
                x: idx as f64 * cfg.min_spacing_m,
                y: cfg.lane_y(lane),
                speed: 0.0,
                accel_command: AccelCommand::Hold,
                heading: cfg.lane_heading(lane),
            }
        })
        .collect();
    Ok(fleet)
}

/// Draws `k` distinct values from `0..n` (partial Fisher-Yates).
fn sample_distinct(rng: &mut ChaCha12Rng, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Steps a whole fleet toward per-vehicle target speeds.
pub struct FleetStepper {
    targets: Vec<f64>,
}

impl FleetStepper {
    pub fn new(n: usize, cfg: &KinematicsConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (lo, hi) = cfg.target_speed_range_mps;
        let targets = (0..n)
            .map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        FleetStepper { targets }
    }

    pub fn step_all(&self, fleet: &mut [VehicleState], cfg: &KinematicsConfig, dt: f64) {
        for v in fleet.iter_mut() {
            let target = self.targets[v.node_id as usize].min(cfg.max_speed_mps);
            v.accel_command = if v.speed + 1e-9 < target {
                AccelCommand::Accelerate
            } else if v.speed > target + 1e-9 {
                AccelCommand::Decelerate
            } else {
                AccelCommand::Hold
            };
            *v = step(v, cfg, dt);
        }
    }
}
