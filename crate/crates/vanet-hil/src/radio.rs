//! Simplified IEEE 802.11p medium model: unit-disk propagation at a fixed
//! coverage range, plus the DCF (CSMA/CA, binary exponential backoff)
//! contention primitives. EDCA access categories are not modeled; every node
//! runs a single DCF queue.

use rand::Rng;

use crate::kernel::NodeId;
use crate::time::SimTime;

/// Destination of a broadcast frame.
pub const BROADCAST: NodeId = u32::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Probe,
    Lidar,
    Video,
    Background,
}

impl FrameKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::Probe => "probe",
            FrameKind::Lidar => "lidar",
            FrameKind::Video => "video",
            FrameKind::Background => "background",
        }
    }
}

/// One simulated link-layer datagram.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub src: NodeId,
    /// Receiving node, or [`BROADCAST`].
    pub dst: NodeId,
    pub payload_len: u32,
    /// Application generation instant.
    pub gen_time: SimTime,
    pub kind: FrameKind,
    pub stream_id: u32,
    pub seq_in_stream: u64,
    /// Present when this frame is one slice of a larger application datagram
    /// or scan/chunk group.
    pub fragment: Option<FragmentInfo>,
    /// Real payload bytes, retained only where byte transparency matters
    /// (gateway traffic and capture replays).
    pub payload: Option<std::sync::Arc<[u8]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentInfo {
    /// Groups fragments of one application-level unit.
    pub group: u64,
    pub index: u32,
    pub count: u32,
}

/// Radio parameters. Propagation is unit-disk at `coverage_range_m`;
/// transmit power, carrier frequency and channel bandwidth are carried as
/// configuration metadata only.
#[derive(Debug, Clone, PartialEq)]
pub struct RadioConfig {
    pub coverage_range_m: f64,
    pub tx_power_mw: f64,
    pub frequency_ghz: f64,
    pub channel_bandwidth_mhz: f64,
    /// Rate used by probe, video, LiDAR and gateway traffic.
    pub best_effort_rate_bps: u64,
    /// Rate used by background vehicle traffic.
    pub low_rate_bps: u64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            coverage_range_m: 200.0,
            tx_power_mw: 200.0,
            frequency_ghz: 5.9,
            channel_bandwidth_mhz: 20.0,
            best_effort_rate_bps: 28_000_000,
            low_rate_bps: 1_370_000,
        }
    }
}

impl RadioConfig {
    pub fn rate_for(&self, kind: FrameKind) -> u64 {
        match kind {
            FrameKind::Background => self.low_rate_bps,
            _ => self.best_effort_rate_bps,
        }
    }
}

/// MAC-level timing and queueing parameters (standard 802.11 OFDM values).
#[derive(Debug, Clone, PartialEq)]
pub struct MacConfig {
    pub slot_us: u64,
    pub sifs_us: u64,
    pub cw_min: u32,
    pub cw_max: u32,
    /// Unicast frames are dropped after this many failed attempts.
    pub retry_limit: u32,
    /// Per-node interface queue capacity, in frames; arrivals beyond it are
    /// tail-dropped.
    pub queue_cap: usize,
    /// Largest frame the MAC accepts; applications fragment above this.
    pub mtu_bytes: u32,
    /// MAC header bytes added to each payload for airtime purposes.
    pub header_bytes: u32,
    /// Fixed per-frame preamble/PHY overhead.
    pub overhead_us: u64,
    /// Diagnostic mode: frames are delivered after their airtime with no
    /// contention and no loss.
    pub instant_delivery: bool,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            slot_us: 13,
            sifs_us: 32,
            cw_min: 15,
            cw_max: 1023,
            retry_limit: 7,
            queue_cap: 200,
            mtu_bytes: 2304,
            header_bytes: 28,
            overhead_us: 46,
            instant_delivery: false,
        }
    }
}

impl MacConfig {
    /// DIFS = SIFS + 2 slots.
    pub fn difs_us(&self) -> u64 {
        self.sifs_us + 2 * self.slot_us
    }
}

/// Per-node DCF contention window state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DcfState {
    pub cw_min: u32,
    pub cw_max: u32,
    pub current_cw: u32,
    pub backoff_counter: u32,
    pub retry_count: u32,
    pub slot_us: u64,
    pub sifs_us: u64,
    pub difs_us: u64,
}

impl DcfState {
    pub fn new(mac: &MacConfig) -> Self {
        DcfState {
            cw_min: mac.cw_min,
            cw_max: mac.cw_max,
            current_cw: mac.cw_min,
            backoff_counter: 0,
            retry_count: 0,
            slot_us: mac.slot_us,
            sifs_us: mac.sifs_us,
            difs_us: mac.difs_us(),
        }
    }

    /// Collision/failure: the window doubles, capped at `cw_max`.
    pub fn on_failure(&mut self) {
        self.retry_count += 1;
        self.current_cw = (2 * (self.current_cw + 1) - 1).min(self.cw_max);
    }

    /// Success (or terminal drop): the window resets.
    pub fn on_success(&mut self) {
        self.retry_count = 0;
        self.current_cw = self.cw_min;
    }
}

/// Uniform draw over `[0, current_cw]`, inclusive on both ends.
pub fn draw_backoff<R: Rng + ?Sized>(dcf: &mut DcfState, rng: &mut R) -> u32 {
    dcf.backoff_counter = rng.random_range(0..=dcf.current_cw);
    dcf.backoff_counter
}

/// Unit-disk propagation: reception is possible iff the Euclidean distance
/// is at most the coverage range (boundary inclusive).
pub fn in_range(a: (f64, f64), b: (f64, f64), cfg: &RadioConfig) -> bool {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt() <= cfg.coverage_range_m
}

/// Time on air for a frame: `ceil(payload_len * 8 / rate)` scaled to
/// microseconds, plus a fixed per-frame overhead.
pub fn airtime(payload_len: u32, rate_bps: u64, overhead_us: u64) -> u64 {
    debug_assert!(payload_len >= 1 && rate_bps > 0);
    let bits = payload_len as u64 * 8;
    (bits * 1_000_000).div_ceil(rate_bps) + overhead_us
}

/// A transmission occupying the medium over `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub frame_id: u64,
    pub src: NodeId,
    pub src_pos: (f64, f64),
    pub start: SimTime,
    pub end: SimTime,
}

impl Transmission {
    pub fn overlaps(&self, other: &Transmission) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// What a receiver got out of one transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MediumOutcome {
    Received,
    Collided,
    OutOfRange,
}

/// Resolves the fate of every transmission at every receiver. A receiver in
/// range of two or more time-overlapping transmissions sees all of them
/// collide; in range of exactly one it receives it; out of range it gets
/// nothing. There is no capture effect.
pub fn resolve_medium(
    transmissions: &[Transmission],
    receivers: &[(f64, f64)],
    cfg: &RadioConfig,
) -> Vec<Vec<(u64, MediumOutcome)>> {
    receivers
        .iter()
        .map(|&rx| {
            transmissions
                .iter()
                .enumerate()
                .map(|(i, tx)| {
                    let outcome = if !in_range(tx.src_pos, rx, cfg) {
                        MediumOutcome::OutOfRange
                    } else {
                        let interfered = transmissions
                            .iter()
                            .enumerate()
                            .any(|(j, other)| j != i && tx.overlaps(other) && in_range(other.src_pos, rx, cfg));
                        if interfered {
                            MediumOutcome::Collided
                        } else {
                            MediumOutcome::Received
                        }
                    };
                    (tx.frame_id, outcome)
                })
                .collect()
        })
        .collect()
}
