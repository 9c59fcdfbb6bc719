//! Tabular Q-learning agent with epsilon-greedy exploration.
//!
//! The agent observes per-epoch delay/throughput KPIs, discretizes them onto
//! an 8x8 grid, and picks one of four send-rate multipliers for the gateway
//! node's application traffic. Action values live in a dense table updated
//! with the standard one-step TD rule
//! `Q(s,a) += alpha * (r + gamma * max_a' Q(s',a') - Q(s,a))`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

/// Send-rate multipliers, one per action.
pub const ACTION_MULTIPLIERS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

pub const ACTION_COUNT: usize = ACTION_MULTIPLIERS.len();

/// Bins per KPI axis; the state space is `DELAY_BINS * THROUGHPUT_BINS`.
pub const DELAY_BINS: usize = 8;
pub const THROUGHPUT_BINS: usize = 8;
pub const STATE_COUNT: usize = DELAY_BINS * THROUGHPUT_BINS;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub alpha: f64,
    /// Throughput weight in the reward.
    pub alpha1: f64,
    /// Delay weight in the reward.
    pub alpha2: f64,
    /// Seconds between decisions.
    pub decision_epoch_s: f64,
    pub episodes: u32,
    pub norms: RewardNorms,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            epsilon: 0.2,
            gamma: 0.99,
            alpha: 0.1,
            alpha1: 0.3,
            alpha2: 0.7,
            decision_epoch_s: 1.0,
            episodes: 3,
            norms: RewardNorms::default(),
        }
    }
}

/// Reference scales that normalize raw KPIs into the reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardNorms {
    pub delay_ref_s: f64,
    pub throughput_ref_bps: f64,
}

impl Default for RewardNorms {
    fn default() -> Self {
        // delay reference 100 ms; throughput reference = the configured
        // probe rate
        RewardNorms { delay_ref_s: 0.1, throughput_ref_bps: 22_000_000.0 }
    }
}

/// KPIs observed over one decision epoch. All fields are zero when nothing
/// was delivered.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    pub mean_delay_s: f64,
    pub throughput_bps: f64,
    pub delivered_streams: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StateId(pub u16);

impl StateId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ActionId(pub u8);

impl ActionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn multiplier(self) -> f64 {
        ACTION_MULTIPLIERS[self.index()]
    }
}

/// Discretization grid: log-spaced delay edges, linear throughput edges.
/// Values outside the grid clamp to the edge bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BinGrid {
    delay_edges: Vec<f64>,
    throughput_edges: Vec<f64>,
}

impl BinGrid {
    /// Delay edges span `[delay_min_s, delay_max_s]` logarithmically;
    /// throughput edges split `[0, throughput_ref]` evenly.
    pub fn new(delay_min_s: f64, delay_max_s: f64, throughput_ref_bps: f64) -> Self {
        assert!(delay_min_s > 0.0 && delay_max_s > delay_min_s && throughput_ref_bps > 0.0);
        let n_delay = DELAY_BINS - 1;
        let log_lo = delay_min_s.ln();
        let log_hi = delay_max_s.ln();
        let delay_edges = (0..n_delay)
            .map(|i| (log_lo + (log_hi - log_lo) * i as f64 / (n_delay - 1) as f64).exp())
            .collect();
        let throughput_edges =
            (1..THROUGHPUT_BINS).map(|i| throughput_ref_bps * i as f64 / THROUGHPUT_BINS as f64).collect();
        BinGrid { delay_edges, throughput_edges }
    }

    pub fn from_norms(norms: &RewardNorms) -> Self {
        BinGrid::new(0.001, 10.0, norms.throughput_ref_bps)
    }

    pub fn delay_edges(&self) -> &[f64] {
        &self.delay_edges
    }

    pub fn throughput_edges(&self) -> &[f64] {
        &self.throughput_edges
    }
}

fn bin_of(value: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| value >= e).count()
}

/// Maps an observation onto the flattened 8x8 state grid.
pub fn discretize(obs: &Observation, grid: &BinGrid) -> StateId {
    let d = bin_of(obs.mean_delay_s, &grid.delay_edges);
    let t = bin_of(obs.throughput_bps, &grid.throughput_edges);
    StateId((d * THROUGHPUT_BINS + t) as u16)
}

/// Clipped linear reward: throughput helps, delay hurts, each saturating at
/// its reference scale. The range is `[-alpha2, alpha1]`.
pub fn reward(obs: &Observation, alpha1: f64, alpha2: f64, norms: &RewardNorms) -> f64 {
    debug_assert!(norms.delay_ref_s > 0.0 && norms.throughput_ref_bps > 0.0);
    alpha1 * (obs.throughput_bps / norms.throughput_ref_bps).min(1.0)
        - alpha2 * (obs.mean_delay_s / norms.delay_ref_s).min(1.0)
}

#[derive(Debug, Error)]
pub enum QTableError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a Q-table checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),
    #[error("checkpoint truncated or trailing bytes (expected {expected} values)")]
    SizeMismatch { expected: usize },
    #[error("checkpoint holds a non-finite value at index {0}")]
    NonFinite(usize),
}

const QTABLE_MAGIC: &[u8; 4] = b"QTBL";
const QTABLE_VERSION: u8 = 1;

/// Dense `|S| x |A|` action-value table, initialized to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        QTable { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    pub fn for_agent() -> Self {
        QTable::new(STATE_COUNT, ACTION_COUNT)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: StateId, a: ActionId) -> f64 {
        self.values[s.index() * self.n_actions + a.index()]
    }

    pub fn set(&mut self, s: StateId, a: ActionId, v: f64) {
        assert!(v.is_finite());
        self.values[s.index() * self.n_actions + a.index()] = v;
    }

    /// Greedy action for `s`; ties break to the lowest action id.
    pub fn argmax(&self, s: StateId) -> ActionId {
        let row = &self.values[s.index() * self.n_actions..(s.index() + 1) * self.n_actions];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        ActionId(best as u8)
    }

    pub fn max_value(&self, s: StateId) -> f64 {
        self.get(s, self.argmax(s))
    }

    /// One-step TD update; touches exactly the `(s, a)` cell and returns its
    /// new value.
    pub fn update(&mut self, s: StateId, a: ActionId, r: f64, s_next: StateId, alpha: f64, gamma: f64) -> f64 {
        debug_assert!(r.is_finite());
        let old = self.get(s, a);
        let target = r + gamma * self.max_value(s_next);
        let new = old + alpha * (target - old);
        self.set(s, a, new);
        new
    }

    /// Writes the checkpoint: magic "QTBL", version, |S|, |A|, then
    /// row-major little-endian f64 values.
    pub fn save(&self, path: &Path) -> Result<(), QTableError> {
        let mut buf = Vec::with_capacity(13 + self.values.len() * 8);
        buf.extend_from_slice(QTABLE_MAGIC);
        buf.push(QTABLE_VERSION);
        buf.extend_from_slice(&(self.n_states as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_actions as u32).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, QTableError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 13 || &bytes[0..4] != QTABLE_MAGIC {
            return Err(QTableError::BadMagic);
        }
        if bytes[4] != QTABLE_VERSION {
            return Err(QTableError::BadVersion(bytes[4]));
        }
        let n_states = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let n_actions = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let expected = n_states * n_actions;
        let body = &bytes[13..];
        if body.len() != expected * 8 {
            return Err(QTableError::SizeMismatch { expected });
        }
        let mut values = Vec::with_capacity(expected);
        for (i, chunk) in body.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(QTableError::NonFinite(i));
            }
            values.push(v);
        }
        Ok(QTable { n_states, n_actions, values })
    }
}

/// Epsilon-greedy selection: with probability `epsilon` a uniform action,
/// otherwise the greedy one (lowest id on ties).
pub fn select_action<R: Rng + ?Sized>(q: &QTable, s: StateId, epsilon: f64, rng: &mut R) -> ActionId {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        ActionId(rng.random_range(0..q.n_actions) as u8)
    } else {
        q.argmax(s)
    }
}
