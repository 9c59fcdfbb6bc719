//! Traffic sources, sinks and per-stream KPI accounting.
//!
//! Four source kinds: an iperf-like constant-bitrate probe, a LiDAR scan
//! replayer, a video chunk replayer and per-vehicle background senders.
//! Every application datagram is logged with its generation and arrival
//! instants; delay is the difference between the two.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use std::io::{Read, Write};
use std::path::Path;

use crate::kernel::NodeId;
use crate::radio::FrameKind;
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic, not a {0} capture")]
    BadMagic(&'static str),
    #[error("unsupported capture version {0}")]
    BadVersion(u8),
    #[error("capture truncated inside entry {0}")]
    Truncated(usize),
    #[error("entry {0} is empty")]
    EmptyEntry(usize),
    #[error("chunk {0} timestamp not after its predecessor")]
    NonMonotoneTimestamp(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AccountError {
    #[error("packet {seq}: arrival {arrival} precedes generation {gen}")]
    ClockInversion { seq: u64, arrival: SimTime, gen: SimTime },
}

/// Parameters of one application stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub kind: FrameKind,
    pub target_rate_bps: u64,
    pub packet_size_bytes: u32,
    pub start_time: SimTime,
    pub duration: SimTime,
}

/// Exact constant-bitrate emission schedule. Emission `i` happens at
/// `start + floor(i * packet_bits * 1e6 / rate)` microseconds, which keeps
/// the long-run rate drift-free without fractional time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CbrSchedule {
    start: SimTime,
    packet_bits: u64,
    rate_bps: u64,
    count: u64,
}

impl CbrSchedule {
    pub fn new(cfg: &StreamConfig) -> Self {
        CbrSchedule::with_rate(cfg, cfg.target_rate_bps)
    }

    /// Schedule at an overridden rate (used when a rate multiplier applies).
    pub fn with_rate(cfg: &StreamConfig, rate_bps: u64) -> Self {
        assert!(rate_bps > 0 && cfg.packet_size_bytes >= 1);
        let packet_bits = cfg.packet_size_bytes as u64 * 8;
        let count = (cfg.duration.as_micros() as u128 * rate_bps as u128 / (packet_bits as u128 * 1_000_000)) as u64;
        CbrSchedule { start: cfg.start_time, packet_bits, rate_bps, count }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Nominal inter-packet gap in microseconds.
    pub fn gap_us(&self) -> u64 {
        (self.packet_bits as u128 * 1_000_000 / self.rate_bps as u128) as u64
    }

    pub fn emission_time(&self, i: u64) -> SimTime {
        let offset = i as u128 * self.packet_bits as u128 * 1_000_000 / self.rate_bps as u128;
        self.start + offset as u64
    }
}

/// Terminal fate of one application datagram.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketOutcome {
    Delivered,
    /// Lost to medium contention (including unicast retry exhaustion).
    Collided,
    /// Lost elsewhere: queue tail-drop, out-of-range expiry, egress failure.
    Dropped,
    /// Still queued or on the air when the run ended.
    InFlight,
}

impl PacketOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            PacketOutcome::Delivered => "delivered",
            PacketOutcome::Collided => "collided",
            PacketOutcome::Dropped => "dropped",
            PacketOutcome::InFlight => "in_flight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketLogEntry {
    pub seq: u64,
    pub gen: SimTime,
    pub arrival: Option<SimTime>,
    pub bytes: u32,
    pub outcome: PacketOutcome,
}

/// Per-stream packet accounting: one log entry per application datagram.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub stream_id: u32,
    pub kind: FrameKind,
    pub src: NodeId,
    log: Vec<PacketLogEntry>,
    packets_received: u64,
    bytes_received: u64,
}

impl StreamRecord {
    pub fn new(stream_id: u32, kind: FrameKind, src: NodeId) -> Self {
        StreamRecord { stream_id, kind, src, log: Vec::new(), packets_received: 0, bytes_received: 0 }
    }

    /// Registers an emission and returns its sequence number.
    pub fn record_sent(&mut self, gen: SimTime, bytes: u32) -> u64 {
        let seq = self.log.len() as u64;
        self.log.push(PacketLogEntry { seq, gen, arrival: None, bytes, outcome: PacketOutcome::InFlight });
        seq
    }

    pub fn record_arrival(&mut self, seq: u64, arrival: SimTime) -> Result<(), AccountError> {
        let entry = &mut self.log[seq as usize];
        if arrival < entry.gen {
            return Err(AccountError::ClockInversion { seq, arrival, gen: entry.gen });
        }
        debug_assert_eq!(entry.outcome, PacketOutcome::InFlight, "double resolution of seq {seq}");
        entry.arrival = Some(arrival);
        entry.outcome = PacketOutcome::Delivered;
        self.packets_received += 1;
        self.bytes_received += entry.bytes as u64;
        Ok(())
    }

    pub fn record_loss(&mut self, seq: u64, outcome: PacketOutcome) {
        debug_assert!(matches!(outcome, PacketOutcome::Collided | PacketOutcome::Dropped));
        let entry = &mut self.log[seq as usize];
        debug_assert_eq!(entry.outcome, PacketOutcome::InFlight, "double resolution of seq {seq}");
        entry.outcome = outcome;
    }

    pub fn packets_sent(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn packets_received(&self) -> u64 {
        self.packets_received
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }

    pub fn log(&self) -> &[PacketLogEntry] {
        &self.log
    }

    /// sent == delivered + collided + dropped + in-flight.
    pub fn conserved(&self) -> bool {
        let mut counts = [0u64; 4];
        for e in &self.log {
            counts[e.outcome as usize] += 1;
        }
        counts.iter().sum::<u64>() == self.packets_sent() && counts[0] == self.packets_received
    }
}

/// Half-open accounting window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: SimTime,
    pub end: SimTime,
}

impl Window {
    pub fn contains(&self, t: SimTime) -> bool {
        t >= self.start && t < self.end
    }

    pub fn len_secs(&self) -> f64 {
        (self.end - self.start) as f64 / 1e6
    }
}

/// KPIs over one window. `mean_delay_s` is absent (not zero) when nothing
/// arrived in the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KpiSample {
    pub window: Window,
    pub mean_delay_s: Option<f64>,
    pub throughput_bps: f64,
    pub delivered_streams: u64,
    pub packets_delivered: u64,
    pub bytes_delivered: u64,
}

/// Aggregates deliveries whose arrival falls inside `window`. Delay sums are
/// kept in integer microseconds so recomputation from logs is exact.
pub fn account(records: &[&StreamRecord], window: Window) -> KpiSample {
    let mut delay_sum_us: u64 = 0;
    let mut packets: u64 = 0;
    let mut bytes: u64 = 0;
    let mut streams: u64 = 0;
    for record in records {
        let mut any = false;
        for e in record.log() {
            if let Some(arrival) = e.arrival {
                if window.contains(arrival) {
                    delay_sum_us += arrival - e.gen;
                    packets += 1;
                    bytes += e.bytes as u64;
                    any = true;
                }
            }
        }
        if any {
            streams += 1;
        }
    }
    KpiSample {
        window,
        mean_delay_s: if packets > 0 { Some(delay_sum_us as f64 / packets as f64 / 1e6) } else { None },
        throughput_bps: bytes as f64 * 8.0 / window.len_secs(),
        delivered_streams: streams,
        packets_delivered: packets,
        bytes_delivered: bytes,
    }
}

const LIDAR_MAGIC: &[u8; 4] = b"LSCN";
const VIDEO_MAGIC: &[u8; 4] = b"VCHK";
const CAPTURE_VERSION: u8 = 1;

/// Length-prefixed LiDAR scan container: magic "LSCN", version byte, then
/// per scan a little-endian u32 length and the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LidarCapture {
    pub scans: Vec<Vec<u8>>,
}

impl LidarCapture {
    pub fn generate(n_scans: usize, scan_bytes: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let scans = (0..n_scans)
            .map(|_| (0..scan_bytes).map(|_| rng.random()).collect())
            .collect();
        LidarCapture { scans }
    }

    pub fn save(&self, path: &Path) -> Result<(), CaptureError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(LIDAR_MAGIC)?;
        f.write_all(&[CAPTURE_VERSION])?;
        for scan in &self.scans {
            f.write_all(&(scan.len() as u32).to_le_bytes())?;
            f.write_all(scan)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CaptureError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 5 || &bytes[0..4] != LIDAR_MAGIC {
            return Err(CaptureError::BadMagic("LSCN"));
        }
        if bytes[4] != CAPTURE_VERSION {
            return Err(CaptureError::BadVersion(bytes[4]));
        }
        let mut scans = Vec::new();
        let mut at = 5usize;
        while at < bytes.len() {
            if at + 4 > bytes.len() {
                return Err(CaptureError::Truncated(scans.len()));
            }
            let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            if len == 0 {
                return Err(CaptureError::EmptyEntry(scans.len()));
            }
            at += 4;
            if at + len > bytes.len() {
                return Err(CaptureError::Truncated(scans.len()));
            }
            scans.push(bytes[at..at + len].to_vec());
            at += len;
        }
        Ok(LidarCapture { scans })
    }

    /// Emission instant of scan `i` at a fixed scan rate.
    pub fn emission_time(start: SimTime, i: u64, rate_hz: u32) -> SimTime {
        start + (i as u128 * 1_000_000 / rate_hz as u128) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoChunk {
    /// Presentation offset from the start of the stream.
    pub timestamp: SimTime,
    pub data: Vec<u8>,
}

/// Timestamped video chunk container: magic "VCHK", version byte, then per
/// chunk a little-endian u64 timestamp (microseconds), u32 length, payload.
/// Timestamps must be strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoCapture {
    pub chunks: Vec<VideoChunk>,
}

impl VideoCapture {
    pub fn generate(n_chunks: usize, chunk_bytes: usize, interval_ms: u64, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let chunks = (0..n_chunks)
            .map(|i| VideoChunk {
                timestamp: SimTime::from_millis(i as u64 * interval_ms),
                data: (0..chunk_bytes).map(|_| rng.random()).collect(),
            })
            .collect();
        VideoCapture { chunks }
    }

    pub fn total_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.data.len() as u64).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), CaptureError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(VIDEO_MAGIC)?;
        f.write_all(&[CAPTURE_VERSION])?;
        for chunk in &self.chunks {
            f.write_all(&chunk.timestamp.as_micros().to_le_bytes())?;
            f.write_all(&(chunk.data.len() as u32).to_le_bytes())?;
            f.write_all(&chunk.data)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CaptureError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 5 || &bytes[0..4] != VIDEO_MAGIC {
            return Err(CaptureError::BadMagic("VCHK"));
        }
        if bytes[4] != CAPTURE_VERSION {
            return Err(CaptureError::BadVersion(bytes[4]));
        }
        let mut chunks: Vec<VideoChunk> = Vec::new();
        let mut at = 5usize;
        while at < bytes.len() {
            if at + 12 > bytes.len() {
                return Err(CaptureError::Truncated(chunks.len()));
            }
            let ts = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            let len = u32::from_le_bytes(bytes[at + 8..at + 12].try_into().unwrap()) as usize;
            if len == 0 {
                return Err(CaptureError::EmptyEntry(chunks.len()));
            }
            at += 12;
            if at + len > bytes.len() {
                return Err(CaptureError::Truncated(chunks.len()));
            }
            if let Some(prev) = chunks.last() {
                if SimTime::from_micros(ts) <= prev.timestamp {
                    return Err(CaptureError::NonMonotoneTimestamp(chunks.len()));
                }
            }
            chunks.push(VideoChunk { timestamp: SimTime::from_micros(ts), data: bytes[at..at + len].to_vec() });
            at += len;
        }
        Ok(VideoCapture { chunks })
    }
}

/// What the video sink reports: bytes over all fully delivered chunks and
/// the playable duration, i.e. the contiguously delivered prefix times the
/// chunk interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoSinkReport {
    pub bytes_received: u64,
    pub playable_duration: SimTime,
    pub chunks_delivered: u64,
}

pub fn video_sink_report(delivered: &[Option<u64>], chunk_interval: SimTime) -> VideoSinkReport {
    let prefix = delivered.iter().take_while(|d| d.is_some()).count() as u64;
    VideoSinkReport {
        bytes_received: delivered.iter().flatten().sum(),
        playable_duration: SimTime::from_micros(prefix * chunk_interval.as_micros()),
        chunks_delivered: delivered.iter().flatten().count() as u64,
    }
}

/// Identical background stream per non-gateway vehicle, desynchronized by a
/// seeded start jitter uniform in `[0, interval)`. Node 0 carries the
/// measured application stream and gets no background sender.
pub fn background_traffic(
    n_vehicles: usize,
    packet_bytes: u32,
    interval: SimTime,
    sim_time: SimTime,
    seed: u64,
) -> Vec<(NodeId, StreamConfig)> {
    assert!(n_vehicles >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let interval_us = interval.as_micros();
    let rate_bps = packet_bytes as u64 * 8 * 1_000_000 / interval_us;
    (1..n_vehicles)
        .map(|node| {
            let jitter = rng.random_range(0..interval_us);
            (
                node as NodeId,
                StreamConfig {
                    kind: FrameKind::Background,
                    target_rate_bps: rate_bps,
                    packet_size_bytes: packet_bytes,
                    start_time: SimTime::from_micros(jitter),
                    duration: sim_time.saturating_sub(SimTime::from_micros(jitter)),
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_cfg(rate_bps: u64, packet: u32, duration_s: u64) -> StreamConfig {
        StreamConfig {
            kind: FrameKind::Probe,
            target_rate_bps: rate_bps,
            packet_size_bytes: packet,
            start_time: SimTime::ZERO,
            duration: SimTime::from_secs(duration_s),
        }
    }

    #[test]
    fn cbr_gap_and_rate() {
        let s = CbrSchedule::new(&probe_cfg(1_000_000, 1000, 1));
        assert_eq!(s.gap_us(), 8_000);
        assert_eq!(s.count(), 125);
    }

    #[test]
    fn cbr_probe_packet_count_over_run() {
        let s = CbrSchedule::new(&probe_cfg(22_000_000, 1250, 200));
        assert_eq!(s.count(), 440_000);
        // last emission stays inside the duration
        assert!(s.emission_time(s.count() - 1) < SimTime::from_secs(200));
    }

    #[test]
    fn cbr_zero_duration_is_empty() {
        let s = CbrSchedule::new(&probe_cfg(22_000_000, 1250, 0));
        assert_eq!(s.count(), 0);
    }

    #[test]
    fn cbr_emissions_do_not_drift() {
        let s = CbrSchedule::new(&probe_cfg(22_000_000, 1250, 200));
        // 10000 bits at 22 Mbit/s is 454.5454... us; the 11th emission sits
        // at exactly 5000 us
        assert_eq!(s.emission_time(11), SimTime::from_micros(5_000));
        assert_eq!(s.emission_time(0), SimTime::ZERO);
    }

    fn record_with(deliveries: &[(u64, u64, u32)]) -> StreamRecord {
        // (gen_us, arrival_us, bytes)
        let mut r = StreamRecord::new(1, FrameKind::Probe, 0);
        for &(gen, arrival, bytes) in deliveries {
            let seq = r.record_sent(SimTime::from_micros(gen), bytes);
            r.record_arrival(seq, SimTime::from_micros(arrival)).unwrap();
        }
        r
    }

    #[test]
    fn account_single_packet_delay() {
        let r = record_with(&[(1_000_000, 1_050_000, 100)]);
        let w = Window { start: SimTime::ZERO, end: SimTime::from_secs(2) };
        let sample = account(&[&r], w);
        assert_eq!(sample.mean_delay_s, Some(0.05));
        assert_eq!(sample.delivered_streams, 1);
    }

    #[test]
    fn account_throughput_definition() {
        let r = record_with(&[(0, 500_000, 1000)]);
        let w = Window { start: SimTime::ZERO, end: SimTime::from_secs(1) };
        assert_eq!(account(&[&r], w).throughput_bps, 8000.0);
    }

    #[test]
    fn account_mean_of_three_delays() {
        let r = record_with(&[(0, 10_000, 10), (100_000, 120_000, 10), (200_000, 260_000, 10)]);
        let w = Window { start: SimTime::ZERO, end: SimTime::from_secs(1) };
        let sample = account(&[&r], w);
        assert_eq!(sample.mean_delay_s, Some(0.03));
    }

    #[test]
    fn empty_window_has_absent_delay() {
        let r = record_with(&[(0, 10_000, 10)]);
        let w = Window { start: SimTime::from_secs(5), end: SimTime::from_secs(6) };
        let sample = account(&[&r], w);
        assert_eq!(sample.mean_delay_s, None);
        assert_eq!(sample.throughput_bps, 0.0);
        assert_eq!(sample.delivered_streams, 0);
    }

    #[test]
    fn clock_inversion_is_rejected() {
        let mut r = StreamRecord::new(1, FrameKind::Probe, 0);
        let seq = r.record_sent(SimTime::from_secs(2), 10);
        let err = r.record_arrival(seq, SimTime::from_secs(1)).unwrap_err();
        assert!(matches!(err, AccountError::ClockInversion { .. }));
    }

    #[test]
    fn stream_conservation_over_mixed_outcomes() {
        let mut r = StreamRecord::new(1, FrameKind::Probe, 0);
        for i in 0..10u64 {
            r.record_sent(SimTime::from_micros(i * 100), 10);
        }
        r.record_arrival(0, SimTime::from_micros(50)).unwrap();
        r.record_loss(1, PacketOutcome::Collided);
        r.record_loss(2, PacketOutcome::Dropped);
        assert!(r.conserved());
        assert_eq!(r.packets_received(), 1);
    }

    #[test]
    fn lidar_capture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scans.lscn");
        let cap = LidarCapture::generate(10, 5000, 7);
        cap.save(&path).unwrap();
        assert_eq!(LidarCapture::load(&path).unwrap(), cap);
    }

    #[test]
    fn lidar_schedule_is_periodic() {
        for i in 0..10u64 {
            assert_eq!(
                LidarCapture::emission_time(SimTime::ZERO, i, 10),
                SimTime::from_millis(i * 100)
            );
        }
    }

    #[test]
    fn corrupt_lidar_capture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scans.lscn");
        let cap = LidarCapture::generate(3, 100, 7);
        cap.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(LidarCapture::load(&path), Err(CaptureError::Truncated(2))));
    }

    #[test]
    fn video_capture_round_trips_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("video.vchk");
        let cap = VideoCapture::generate(25, 2000, 40, 9);
        cap.save(&path).unwrap();
        let back = VideoCapture::load(&path).unwrap();
        assert_eq!(back, cap);
        assert_eq!(back.chunks[1].timestamp, SimTime::from_millis(40));
    }

    #[test]
    fn video_playable_duration_is_the_contiguous_prefix() {
        let interval = SimTime::from_millis(40);
        let all: Vec<Option<u64>> = vec![Some(100); 10];
        let r = video_sink_report(&all, interval);
        assert_eq!(r.playable_duration, SimTime::from_millis(400));
        assert_eq!(r.bytes_received, 1000);

        // chunk 3 of 10 lost -> two chunk intervals playable
        let mut lossy = all.clone();
        lossy[2] = None;
        let r = video_sink_report(&lossy, interval);
        assert_eq!(r.playable_duration, SimTime::from_millis(80));
        assert_eq!(r.bytes_received, 900);
    }

    #[test]
    fn video_report_matches_prefix_oracle_under_random_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let interval = SimTime::from_millis(40);
        for _ in 0..100 {
            let delivered: Vec<Option<u64>> =
                (0..50).map(|_| if rng.random::<f64>() < 0.2 { None } else { Some(64) }).collect();
            // scripted oracle: walk until the first gap
            let mut prefix = 0u64;
            for d in &delivered {
                if d.is_some() {
                    prefix += 1;
                } else {
                    break;
                }
            }
            let r = video_sink_report(&delivered, interval);
            assert_eq!(r.playable_duration.as_micros(), prefix * interval.as_micros());
        }
    }

    #[test]
    fn background_streams_are_identical_and_jittered() {
        let set = background_traffic(3, 1000, SimTime::from_millis(10), SimTime::from_secs(250), 5);
        assert_eq!(set.len(), 2);
        for (node, cfg) in &set {
            assert!(*node >= 1);
            assert_eq!(cfg.target_rate_bps, 800_000);
            assert_eq!(cfg.packet_size_bytes, 1000);
            assert!(cfg.start_time < SimTime::from_millis(10));
        }
        // gateway-only fleet has no background set
        assert!(background_traffic(1, 1000, SimTime::from_millis(10), SimTime::from_secs(250), 5).is_empty());
    }

    #[test]
    fn background_jitter_is_seeded() {
        let a = background_traffic(10, 1000, SimTime::from_millis(10), SimTime::from_secs(250), 5);
        let b = background_traffic(10, 1000, SimTime::from_millis(10), SimTime::from_secs(250), 5);
        assert_eq!(a, b);
        let c = background_traffic(10, 1000, SimTime::from_millis(10), SimTime::from_secs(250), 6);
        assert_ne!(a, c);
    }
}
