//! The assembled simulation: vehicles and an edge server contending for a
//! shared 802.11p-style medium, application traffic sources and sinks,
//! per-epoch KPI observation feeding the Q-learning agent, and the optional
//! live gateway in real-time mode.

mod mac;

pub use mac::{consumed_slots, Countdown, MacNode};

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::agent::{
    discretize, reward, select_action, ActionId, BinGrid, Observation, QTable, StateId,
};
use crate::config::{RunMode, ScenarioApp, SimConfig};
use crate::frag::{split, Reassembler};
use crate::gateway::{
    EnvelopeKind, GatewayCounters, GatewayEnvelope, GatewayPort, PortSide,
};
use crate::kernel::{EventHandler, EventHandle, Kernel, KernelError, KernelMode, NodeId, RunStats, SimEvent, GLOBAL_TARGET};
use crate::mobility::{spawn_fleet, FleetStepper, MobilityError, VehicleState};
use crate::radio::{
    airtime, draw_backoff, in_range, Frame, FrameKind, FragmentInfo, MediumOutcome, Transmission, BROADCAST,
};
use crate::time::SimTime;
use crate::traffic::{
    background_traffic, CbrSchedule, LidarCapture, PacketOutcome, StreamConfig, StreamRecord, VideoCapture,
    VideoSinkReport,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("gateway unavailable: {0}")]
    Gateway(#[from] std::io::Error),
    #[error("{0} scenario requires a capture file")]
    MissingCapture(&'static str),
}

/// How the gateway node's send rate is controlled during an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgentPolicy {
    /// No adaptation; full configured rate.
    Off,
    /// Epsilon-greedy selection plus Q-table updates.
    Learn { epsilon: f64 },
    /// Greedy selection on a frozen table.
    Greedy,
    /// One static action for the whole episode.
    Fixed(ActionId),
}

/// Simulation event payloads.
#[derive(Debug, Clone)]
pub enum Ev {
    MobilityTick,
    Emit { stream: usize },
    BackoffDone { node: usize },
    TxEnd { tx_id: u64 },
    EpochTick,
    InstantDeliver { frame: Frame },
    ExternalDatagram { side: PortSide, bytes: Vec<u8> },
}

/// Deterministic per-subsystem seed derivation.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct ActiveTx {
    frame: Frame,
    src_pos: (f64, f64),
    start: SimTime,
    end: SimTime,
    /// Nodes marked busy when this transmission started.
    sensed_by: Vec<usize>,
    /// Source positions of transmissions that overlapped this one in time.
    overlappers: Vec<(f64, f64)>,
}

/// One finished transmission with the outcome the engine assigned at the
/// accounting receiver, recordable for cross-checking against
/// [`crate::radio::resolve_medium`].
#[derive(Debug, Clone, PartialEq)]
pub struct TxTrace {
    pub tx: Transmission,
    pub rx_pos: (f64, f64),
    pub outcome: MediumOutcome,
}

enum SourceKind {
    Cbr { base: StreamConfig, seg: CbrSchedule, seg_idx: u64, end: SimTime, pending: Option<EventHandle> },
    Lidar { rate_hz: u32, frag_bytes: u32, tick: u64, end: SimTime, emitted: u64 },
    Video { frag_bytes: u32, next_chunk: usize, emitted: u64 },
    /// Fed by the gateway; no internal schedule.
    External,
}

struct StreamRuntime {
    record: StreamRecord,
    src: NodeId,
    dst: NodeId,
    /// Counts toward the agent observation and the reported delay and
    /// throughput KPIs.
    measured: bool,
    external: bool,
    source: SourceKind,
}

#[derive(Default)]
struct SinkState {
    reassembler: Option<Reassembler>,
    scans_completed: u64,
    byte_mismatches: u64,
    /// Per-chunk delivered byte counts for the video sink.
    video_delivered: Vec<Option<u64>>,
}

#[derive(Default)]
struct EpochAcc {
    delay_sum_us: u64,
    packets: u64,
    bytes: u64,
    stream_flags: Vec<bool>,
}

impl EpochAcc {
    fn reset(&mut self) {
        self.delay_sum_us = 0;
        self.packets = 0;
        self.bytes = 0;
        self.stream_flags.iter_mut().for_each(|f| *f = false);
    }
}

struct GatewayRuntime {
    vehicle: GatewayPort,
    server: GatewayPort,
    counters: GatewayCounters,
    vehicle_stream: usize,
    server_stream: usize,
    vehicle_reasm: Reassembler,
    server_reasm: Reassembler,
    fragment_bytes: u32,
}

/// Everything produced by one episode.
pub struct EpisodeResult {
    pub density: u32,
    pub records: Vec<StreamRecord>,
    pub rewards: Vec<f64>,
    pub actions: Vec<ActionId>,
    pub mean_reward: f64,
    pub run: RunStats,
    pub gateway: Option<GatewayCounters>,
    pub video: Option<VideoSinkReport>,
    pub scans_emitted: u64,
    pub scans_completed: u64,
    pub sink_byte_mismatches: u64,
    pub horizon: SimTime,
    pub transmissions: Vec<TxTrace>,
}

pub struct SimWorld {
    cfg: SimConfig,
    horizon: SimTime,
    fleet: Vec<VehicleState>,
    stepper: FleetStepper,
    server: usize,
    nodes: Vec<MacNode>,
    streams: Vec<StreamRuntime>,
    sinks: Vec<SinkState>,
    active: BTreeMap<u64, ActiveTx>,
    next_tx_id: u64,
    next_ext_group: u64,
    mac_rng: ChaCha12Rng,
    agent_rng: ChaCha12Rng,
    policy: AgentPolicy,
    qtable: QTable,
    grid: BinGrid,
    multiplier: f64,
    prev_sa: Option<(StateId, ActionId)>,
    epoch_start: SimTime,
    epoch_acc: EpochAcc,
    rewards: Vec<f64>,
    actions: Vec<ActionId>,
    gateway: Option<GatewayRuntime>,
    lidar: Option<Arc<LidarCapture>>,
    video: Option<Arc<VideoCapture>>,
    tx_trace: Option<Vec<TxTrace>>,
}

impl SimWorld {
    fn position(&self, node: usize) -> (f64, f64) {
        if node == self.server {
            self.cfg.scenario.server_pos_m
        } else {
            let v = &self.fleet[node];
            (v.x, v.y)
        }
    }

    fn accounting_receiver(&self, frame: &Frame) -> usize {
        if frame.dst == BROADCAST {
            self.server
        } else {
            frame.dst as usize
        }
    }

    // -- contention ------------------------------------------------------

    fn try_start(&mut self, k: &mut Kernel<Ev>, node_idx: usize) {
        let now = k.now();
        let node = &mut self.nodes[node_idx];
        if !node.can_contend() {
            return;
        }
        let slots = match node.residual_slots.take() {
            Some(s) => s,
            None => draw_backoff(&mut node.dcf, &mut self.mac_rng),
        };
        let fire = now + node.dcf.difs_us + slots as u64 * node.dcf.slot_us;
        let handle = k
            .schedule(fire, node_idx as NodeId, Ev::BackoffDone { node: node_idx })
            .expect("countdown is never in the past");
        node.countdown = Some(Countdown { handle, started: now, slots });
    }

    fn freeze(&mut self, k: &mut Kernel<Ev>, node_idx: usize) {
        let now = k.now();
        let node = &mut self.nodes[node_idx];
        if let Some(cd) = node.countdown {
            let fire = cd.fire_time(&node.dcf);
            if fire > now {
                k.cancel(cd.handle);
                let consumed = consumed_slots(cd.started, now, node.dcf.difs_us, node.dcf.slot_us, cd.slots);
                node.residual_slots = Some(cd.slots - consumed);
                node.countdown = None;
            }
            // A countdown completing at this exact instant stays committed:
            // the node transmits into the overlap (same-slot collision).
        }
    }

    fn enqueue_frame(&mut self, k: &mut Kernel<Ev>, frame: Frame) {
        if self.cfg.mac.instant_delivery {
            let rate = self.cfg.radio.rate_for(frame.kind);
            let dur = airtime(frame.payload_len + self.cfg.mac.header_bytes, rate, self.cfg.mac.overhead_us);
            let at = k.now() + dur;
            k.schedule(at, frame.src, Ev::InstantDeliver { frame }).expect("future");
            return;
        }
        let node_idx = frame.src as usize;
        if self.nodes[node_idx].queue.len() >= self.cfg.mac.queue_cap {
            self.nodes[node_idx].queue_drops += 1;
            self.resolve_loss(frame.stream_id as usize, frame.seq_in_stream, PacketOutcome::Dropped);
            return;
        }
        self.nodes[node_idx].queue.push_back(frame);
        self.try_start(k, node_idx);
    }

    fn on_backoff_done(&mut self, k: &mut Kernel<Ev>, node_idx: usize) {
        let node = &mut self.nodes[node_idx];
        node.countdown = None;
        debug_assert!(node.transmitting.is_none());
        let frame = match node.queue.pop_front() {
            Some(f) => f,
            None => return,
        };
        self.start_transmission(k, node_idx, frame);
    }

    fn start_transmission(&mut self, k: &mut Kernel<Ev>, node_idx: usize, frame: Frame) {
        let now = k.now();
        let src_pos = self.position(node_idx);
        let rate = self.cfg.radio.rate_for(frame.kind);
        let dur = airtime(frame.payload_len + self.cfg.mac.header_bytes, rate, self.cfg.mac.overhead_us);
        let end = now + dur;
        let tx_id = self.next_tx_id;
        self.next_tx_id += 1;

        let mut sensed_by = Vec::new();
        for u in 0..self.nodes.len() {
            if u == node_idx {
                continue;
            }
            if in_range(src_pos, self.position(u), &self.cfg.radio) {
                self.nodes[u].busy_count += 1;
                sensed_by.push(u);
                if self.nodes[u].busy_count == 1 {
                    self.freeze(k, u);
                }
            }
        }

        let mut overlappers = Vec::new();
        for other in self.active.values_mut() {
            if other.end > now {
                overlappers.push(other.src_pos);
                other.overlappers.push(src_pos);
            }
        }

        self.nodes[node_idx].transmitting = Some(tx_id);
        self.active.insert(tx_id, ActiveTx { frame, src_pos, start: now, end, sensed_by, overlappers });
        k.schedule(end, node_idx as NodeId, Ev::TxEnd { tx_id }).expect("future");
    }

    fn on_tx_end(&mut self, k: &mut Kernel<Ev>, tx_id: u64) {
        let now = k.now();
        let tx = self.active.remove(&tx_id).expect("transmission active");
        let src = tx.frame.src as usize;
        self.nodes[src].transmitting = None;
        for &u in &tx.sensed_by {
            self.nodes[u].busy_count -= 1;
        }

        let rx_node = self.accounting_receiver(&tx.frame);
        let rx_pos = self.position(rx_node);
        let outcome = if !in_range(tx.src_pos, rx_pos, &self.cfg.radio) {
            MediumOutcome::OutOfRange
        } else if tx.overlappers.iter().any(|&p| in_range(p, rx_pos, &self.cfg.radio)) {
            MediumOutcome::Collided
        } else {
            MediumOutcome::Received
        };

        if let Some(trace) = self.tx_trace.as_mut() {
            trace.push(TxTrace {
                tx: Transmission { frame_id: tx_id, src: tx.frame.src, src_pos: tx.src_pos, start: tx.start, end: tx.end },
                rx_pos,
                outcome,
            });
        }

        let broadcast = tx.frame.dst == BROADCAST;
        let stream_idx = tx.frame.stream_id as usize;
        let seq = tx.frame.seq_in_stream;
        match outcome {
            MediumOutcome::Received => {
                if !broadcast {
                    self.nodes[src].dcf.on_success();
                }
                self.deliver(now, tx.frame, rx_node);
            }
            MediumOutcome::Collided | MediumOutcome::OutOfRange => {
                let lost_as = if outcome == MediumOutcome::Collided {
                    PacketOutcome::Collided
                } else {
                    PacketOutcome::Dropped
                };
                if broadcast {
                    // no acknowledgement, no retry for broadcast
                    self.resolve_loss(stream_idx, seq, lost_as);
                } else {
                    self.nodes[src].dcf.on_failure();
                    if self.nodes[src].dcf.retry_count > self.cfg.mac.retry_limit {
                        self.nodes[src].dcf.on_success();
                        self.resolve_loss(stream_idx, seq, lost_as);
                    } else {
                        self.nodes[src].queue.push_front(tx.frame);
                    }
                }
            }
        }

        let sensed = tx.sensed_by;
        for u in sensed {
            if self.nodes[u].idle_medium() {
                self.try_start(k, u);
            }
        }
        self.try_start(k, src);
    }

    // -- delivery and accounting -----------------------------------------

    fn deliver(&mut self, now: SimTime, frame: Frame, rx_node: usize) {
        let stream_idx = frame.stream_id as usize;
        {
            let stream = &mut self.streams[stream_idx];
            stream
                .record
                .record_arrival(frame.seq_in_stream, now)
                .expect("arrival never precedes generation");
            if stream.measured {
                self.epoch_acc.delay_sum_us += now - frame.gen_time;
                self.epoch_acc.packets += 1;
                self.epoch_acc.bytes += frame.payload_len as u64;
                self.epoch_acc.stream_flags[stream_idx] = true;
            }
        }
        if self.streams[stream_idx].external {
            if let Some(gw) = self.gateway.as_mut() {
                gw.counters.delivered_frames += 1;
            }
            self.egress(now, &frame, rx_node);
            return;
        }
        let kind = frame.kind;
        if let (Some(info), Some(payload)) = (frame.fragment, frame.payload.as_ref()) {
            if let Some(whole) = self.sinks[stream_idx]
                .reassembler
                .get_or_insert_with(|| Reassembler::new(64))
                .offer(info.group, info.index, info.count, payload.clone())
            {
                match kind {
                    FrameKind::Lidar => {
                        self.sinks[stream_idx].scans_completed += 1;
                        if let Some(capture) = self.lidar.as_ref() {
                            let scan = &capture.scans[(info.group as usize) % capture.scans.len()];
                            if scan != &whole {
                                self.sinks[stream_idx].byte_mismatches += 1;
                            }
                        }
                    }
                    FrameKind::Video => {
                        if let Some(capture) = self.video.as_ref() {
                            let idx = info.group as usize;
                            if capture.chunks[idx].data != whole {
                                self.sinks[stream_idx].byte_mismatches += 1;
                            }
                            self.sinks[stream_idx].video_delivered[idx] = Some(whole.len() as u64);
                        }
                    }
                    _ => {}
                }
            }
        }
    }

    fn resolve_loss(&mut self, stream_idx: usize, seq: u64, outcome: PacketOutcome) {
        self.streams[stream_idx].record.record_loss(seq, outcome);
        if self.streams[stream_idx].external {
            if let Some(gw) = self.gateway.as_mut() {
                match outcome {
                    PacketOutcome::Collided => gw.counters.collided_frames += 1,
                    _ => gw.counters.dropped_frames += 1,
                }
            }
        }
    }

    fn egress(&mut self, _now: SimTime, frame: &Frame, rx_node: usize) {
        let gw = self.gateway.as_mut().expect("external stream implies a gateway");
        let (port, reasm) = if rx_node == 0 {
            (&gw.vehicle, &mut gw.vehicle_reasm)
        } else {
            (&gw.server, &mut gw.server_reasm)
        };
        let info = frame.fragment.expect("external frames carry fragment info");
        let payload = frame.payload.as_ref().expect("external frames retain payload bytes").clone();
        if let Some(whole) = reasm.offer(info.group, info.index, info.count, payload) {
            let env = GatewayEnvelope::new(EnvelopeKind::FromSim, unix_micros(), whole)
                .expect("reassembled payload fits one datagram");
            match port.send(&env.encode()) {
                Ok(()) => gw.counters.egress_datagrams += 1,
                Err(_) => gw.counters.egress_failures += 1,
            }
        }
    }

    // -- traffic sources ---------------------------------------------------

    fn on_emit(&mut self, k: &mut Kernel<Ev>, stream_idx: usize) {
        let now = k.now();
        let multiplier = self.multiplier;
        let mut frames: Vec<Frame> = Vec::new();
        {
            let stream = &mut self.streams[stream_idx];
            let src = stream.src;
            let dst = stream.dst;
            let kind = stream.record.kind;
            let sid = stream.record.stream_id;
            match &mut stream.source {
                SourceKind::Cbr { base, seg, seg_idx, end, pending } => {
                    *pending = None;
                    let seq = stream.record.record_sent(now, base.packet_size_bytes);
                    frames.push(Frame {
                        src,
                        dst,
                        payload_len: base.packet_size_bytes,
                        gen_time: now,
                        kind,
                        stream_id: sid,
                        seq_in_stream: seq,
                        fragment: None,
                        payload: None,
                    });
                    *seg_idx += 1;
                    if *seg_idx < seg.count() {
                        let t = seg.emission_time(*seg_idx);
                        if t < *end {
                            *pending = Some(k.schedule(t, src, Ev::Emit { stream: stream_idx }).expect("future"));
                        }
                    }
                }
                SourceKind::Lidar { rate_hz, frag_bytes, tick, end, emitted } => {
                    let capture = self.lidar.as_ref().expect("lidar capture loaded").clone();
                    let gate = decimation_gate(*tick, multiplier);
                    let group = *tick;
                    *tick += 1;
                    let next = LidarCapture::emission_time(SimTime::ZERO, *tick, *rate_hz);
                    if next < *end {
                        k.schedule(next, src, Ev::Emit { stream: stream_idx }).expect("future");
                    }
                    if gate {
                        *emitted += 1;
                        let scan = &capture.scans[(group as usize) % capture.scans.len()];
                        let parts = split(scan, *frag_bytes as usize);
                        let count = parts.len() as u32;
                        for (i, part) in parts.into_iter().enumerate() {
                            let seq = stream.record.record_sent(now, part.len() as u32);
                            frames.push(Frame {
                                src,
                                dst,
                                payload_len: part.len() as u32,
                                gen_time: now,
                                kind,
                                stream_id: sid,
                                seq_in_stream: seq,
                                fragment: Some(FragmentInfo { group, index: i as u32, count }),
                                payload: Some(part),
                            });
                        }
                    }
                }
                SourceKind::Video { frag_bytes, next_chunk, emitted } => {
                    let capture = self.video.as_ref().expect("video capture loaded").clone();
                    let group = *next_chunk as u64;
                    let gate = decimation_gate(group, multiplier);
                    *next_chunk += 1;
                    if *next_chunk < capture.chunks.len() {
                        let t = capture.chunks[*next_chunk].timestamp;
                        if t <= self.horizon {
                            k.schedule(t, src, Ev::Emit { stream: stream_idx }).expect("future");
                        }
                    }
                    if gate {
                        *emitted += 1;
                        let chunk = &capture.chunks[group as usize];
                        let parts = split(&chunk.data, *frag_bytes as usize);
                        let count = parts.len() as u32;
                        for (i, part) in parts.into_iter().enumerate() {
                            let seq = stream.record.record_sent(now, part.len() as u32);
                            frames.push(Frame {
                                src,
                                dst,
                                payload_len: part.len() as u32,
                                gen_time: now,
                                kind,
                                stream_id: sid,
                                seq_in_stream: seq,
                                fragment: Some(FragmentInfo { group, index: i as u32, count }),
                                payload: Some(part),
                            });
                        }
                    }
                }
                SourceKind::External => unreachable!("external streams have no emission schedule"),
            }
        }
        for frame in frames {
            self.enqueue_frame(k, frame);
        }
    }

    // -- agent epochs ------------------------------------------------------

    fn on_epoch(&mut self, k: &mut Kernel<Ev>) {
        let now = k.now();
        let window_s = (now - self.epoch_start) as f64 / 1e6;
        let acc = &self.epoch_acc;
        let obs = Observation {
            mean_delay_s: if acc.packets > 0 { acc.delay_sum_us as f64 / acc.packets as f64 / 1e6 } else { 0.0 },
            throughput_bps: if window_s > 0.0 { acc.bytes as f64 * 8.0 / window_s } else { 0.0 },
            delivered_streams: acc.stream_flags.iter().filter(|&&f| f).count() as u64,
        };
        let r = reward(&obs, self.cfg.agent.alpha1, self.cfg.agent.alpha2, &self.cfg.agent.norms);
        self.rewards.push(r);
        let s = discretize(&obs, &self.grid);
        match self.policy {
            AgentPolicy::Off => {}
            AgentPolicy::Fixed(a) => {
                self.actions.push(a);
            }
            AgentPolicy::Learn { epsilon } => {
                if let Some((ps, pa)) = self.prev_sa {
                    self.qtable.update(ps, pa, r, s, self.cfg.agent.alpha, self.cfg.agent.gamma);
                }
                let a = select_action(&self.qtable, s, epsilon, &mut self.agent_rng);
                self.prev_sa = Some((s, a));
                self.actions.push(a);
                self.apply_multiplier(k, a.multiplier());
            }
            AgentPolicy::Greedy => {
                let a = select_action(&self.qtable, s, 0.0, &mut self.agent_rng);
                self.actions.push(a);
                self.apply_multiplier(k, a.multiplier());
            }
        }
        self.epoch_acc.reset();
        self.epoch_start = now;
        let next = now + (self.cfg.agent.decision_epoch_s * 1e6) as u64;
        if next <= self.horizon {
            k.schedule(next, GLOBAL_TARGET, Ev::EpochTick).expect("future");
        }
    }

    fn apply_multiplier(&mut self, k: &mut Kernel<Ev>, m: f64) {
        if (m - self.multiplier).abs() < f64::EPSILON {
            return;
        }
        self.multiplier = m;
        let now = k.now();
        for (idx, stream) in self.streams.iter_mut().enumerate() {
            if !stream.measured {
                continue;
            }
            if let SourceKind::Cbr { base, seg, seg_idx, end, pending } = &mut stream.source {
                if let Some(h) = pending.take() {
                    k.cancel(h);
                }
                if now >= *end {
                    continue;
                }
                let rebased = StreamConfig {
                    start_time: now,
                    duration: SimTime::from_micros(*end - now),
                    ..base.clone()
                };
                let rate = ((base.target_rate_bps as f64 * m) as u64).max(1);
                *seg = CbrSchedule::with_rate(&rebased, rate);
                *seg_idx = 0;
                if seg.count() > 0 {
                    *pending =
                        Some(k.schedule(seg.emission_time(0), stream.src, Ev::Emit { stream: idx }).expect("future"));
                }
            }
        }
    }

    // -- mobility ----------------------------------------------------------

    fn on_mobility_tick(&mut self, k: &mut Kernel<Ev>) {
        let dt = self.cfg.mobility.update_interval_ms as f64 / 1e3;
        self.stepper.step_all(&mut self.fleet, &self.cfg.mobility, dt);
        let next = k.now() + self.cfg.mobility.update_interval_ms * 1000;
        if next <= self.horizon {
            k.schedule(next, GLOBAL_TARGET, Ev::MobilityTick).expect("future");
        }
    }

    // -- gateway -----------------------------------------------------------

    fn on_external(&mut self, k: &mut Kernel<Ev>, side: PortSide, bytes: Vec<u8>) {
        let now = k.now();
        let gw = match self.gateway.as_mut() {
            Some(gw) => gw,
            None => return,
        };
        gw.counters.datagrams_in += 1;
        let env = match GatewayEnvelope::decode(&bytes) {
            Ok(env) => env,
            Err(_) => {
                gw.counters.decode_errors += 1;
                return;
            }
        };
        if env.kind != EnvelopeKind::ToSim {
            gw.counters.wrong_kind += 1;
            return;
        }
        let (src, dst, stream_idx) = match side {
            PortSide::Vehicle => (0 as NodeId, self.server as NodeId, gw.vehicle_stream),
            PortSide::Server => (self.server as NodeId, 0 as NodeId, gw.server_stream),
        };
        let group = self.next_ext_group;
        self.next_ext_group += 1;
        let parts = split(&env.payload, gw.fragment_bytes as usize);
        let count = parts.len() as u32;
        let sid = self.streams[stream_idx].record.stream_id;
        let kind = self.streams[stream_idx].record.kind;
        let mut frames = Vec::with_capacity(parts.len());
        for (i, part) in parts.into_iter().enumerate() {
            let seq = self.streams[stream_idx].record.record_sent(now, part.len() as u32);
            self.gateway.as_mut().unwrap().counters.ingested_frames += 1;
            frames.push(Frame {
                src,
                dst,
                payload_len: part.len() as u32,
                gen_time: now,
                kind,
                stream_id: sid,
                seq_in_stream: seq,
                fragment: Some(FragmentInfo { group, index: i as u32, count }),
                payload: Some(part),
            });
        }
        for frame in frames {
            self.enqueue_frame(k, frame);
        }
    }

    // -- finishing ---------------------------------------------------------

    fn finalize(mut self, run: RunStats) -> (EpisodeResult, QTable) {
        if let Some(gw) = self.gateway.as_mut() {
            let mut pending = 0;
            for stream in &self.streams {
                if stream.external {
                    pending +=
                        stream.record.log().iter().filter(|e| e.outcome == PacketOutcome::InFlight).count() as u64;
                }
            }
            gw.counters.pending_frames = pending;
            gw.counters.reassembly_abandoned =
                gw.vehicle_reasm.stats().abandoned + gw.server_reasm.stats().abandoned;
        }
        let mean_reward = if self.rewards.is_empty() {
            0.0
        } else {
            self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
        };
        let mut video = None;
        let mut scans_emitted = 0;
        let mut scans_completed = 0;
        let mut mismatches = 0;
        for (idx, stream) in self.streams.iter().enumerate() {
            match &stream.source {
                SourceKind::Lidar { emitted, .. } => {
                    scans_emitted += *emitted;
                    scans_completed += self.sinks[idx].scans_completed;
                }
                SourceKind::Video { .. } => {
                    let interval = SimTime::from_millis(self.cfg.traffic.video_chunk_interval_ms);
                    video = Some(crate::traffic::video_sink_report(&self.sinks[idx].video_delivered, interval));
                }
                _ => {}
            }
            mismatches += self.sinks[idx].byte_mismatches;
        }
        let density = self.fleet.len() as u32;
        let result = EpisodeResult {
            density,
            records: self.streams.into_iter().map(|s| s.record).collect(),
            rewards: self.rewards,
            actions: self.actions,
            mean_reward,
            run,
            gateway: self.gateway.as_ref().map(|gw| gw.counters),
            video,
            scans_emitted,
            scans_completed,
            sink_byte_mismatches: mismatches,
            horizon: self.horizon,
            transmissions: self.tx_trace.take().unwrap_or_default(),
        };
        (result, self.qtable)
    }
}

/// Scan/chunk decimation under a rate multiplier: unit `g` is emitted iff
/// the integer part of `g * m` advances. A multiplier of 1 emits everything.
fn decimation_gate(g: u64, m: f64) -> bool {
    ((g + 1) as f64 * m).floor() > (g as f64 * m).floor()
}

fn unix_micros() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

impl EventHandler<Ev> for SimWorld {
    fn handle(&mut self, kernel: &mut Kernel<Ev>, event: SimEvent<Ev>) {
        match event.payload {
            Ev::MobilityTick => self.on_mobility_tick(kernel),
            Ev::Emit { stream } => self.on_emit(kernel, stream),
            Ev::BackoffDone { node } => self.on_backoff_done(kernel, node),
            Ev::TxEnd { tx_id } => self.on_tx_end(kernel, tx_id),
            Ev::EpochTick => self.on_epoch(kernel),
            Ev::InstantDeliver { frame } => {
                let rx = self.accounting_receiver(&frame);
                self.deliver(kernel.now(), frame, rx);
            }
            Ev::ExternalDatagram { side, bytes } => self.on_external(kernel, side, bytes),
        }
    }
}

/// Inputs for one episode run.
pub struct EpisodeParams<'a> {
    pub cfg: &'a SimConfig,
    pub density: u32,
    /// Seed already mixed per (scenario seed, density, episode).
    pub seed: u64,
    pub policy: AgentPolicy,
    pub qtable: QTable,
    pub lidar: Option<Arc<LidarCapture>>,
    pub video: Option<Arc<VideoCapture>>,
    /// Record every transmission and its assigned outcome (test diagnostics).
    pub record_transmissions: bool,
}

/// Builds the world, runs it to the horizon in the configured mode, and
/// returns the episode result plus the (possibly updated) Q-table.
pub fn run_episode(params: EpisodeParams<'_>) -> Result<(EpisodeResult, QTable), SimError> {
    let cfg = params.cfg;
    let density = params.density as usize;
    let horizon = cfg.scenario.sim_time;
    let fleet = spawn_fleet(density, &cfg.mobility, derive_seed(params.seed, 1))?;
    let stepper = FleetStepper::new(density, &cfg.mobility, derive_seed(params.seed, 2));
    let server = density;
    let nodes = (0..density + 1).map(|_| MacNode::new(&cfg.mac)).collect::<Vec<_>>();

    let mode = match cfg.scenario.mode {
        RunMode::Virtual => KernelMode::Virtual,
        RunMode::RealTime => KernelMode::RealTime { drift_budget_us: cfg.kernel.drift_budget_us },
    };
    let mut kernel: Kernel<Ev> = Kernel::new(mode);

    let mut world = SimWorld {
        cfg: cfg.clone(),
        horizon,
        fleet,
        stepper,
        server,
        nodes,
        streams: Vec::new(),
        sinks: Vec::new(),
        active: BTreeMap::new(),
        next_tx_id: 0,
        next_ext_group: 0,
        mac_rng: ChaCha12Rng::seed_from_u64(derive_seed(params.seed, 3)),
        agent_rng: ChaCha12Rng::seed_from_u64(derive_seed(params.seed, 4)),
        policy: params.policy,
        qtable: params.qtable,
        grid: BinGrid::from_norms(&cfg.agent.norms),
        multiplier: 1.0,
        prev_sa: None,
        epoch_start: SimTime::ZERO,
        epoch_acc: EpochAcc::default(),
        rewards: Vec::new(),
        actions: Vec::new(),
        gateway: None,
        lidar: params.lidar,
        video: params.video,
        tx_trace: if params.record_transmissions { Some(Vec::new()) } else { None },
    };

    // initial action before any traffic flows
    let initial_multiplier = match world.policy {
        AgentPolicy::Off => 1.0,
        AgentPolicy::Fixed(a) => {
            world.actions.push(a);
            a.multiplier()
        }
        AgentPolicy::Learn { epsilon } => {
            let s0 = discretize(&Observation::default(), &world.grid);
            let a = select_action(&world.qtable, s0, epsilon, &mut world.agent_rng);
            world.prev_sa = Some((s0, a));
            world.actions.push(a);
            a.multiplier()
        }
        AgentPolicy::Greedy => {
            let s0 = discretize(&Observation::default(), &world.grid);
            let a = select_action(&world.qtable, s0, 0.0, &mut world.agent_rng);
            world.actions.push(a);
            a.multiplier()
        }
    };
    world.multiplier = initial_multiplier;

    build_streams(&mut world, &mut kernel, params.seed, initial_multiplier)?;

    if cfg.scenario.mode == RunMode::RealTime {
        attach_gateway(&mut world, &kernel)?;
    }

    // background machinery
    kernel
        .schedule(SimTime::from_micros(cfg.mobility.update_interval_ms * 1000), GLOBAL_TARGET, Ev::MobilityTick)
        .expect("future");
    let epoch_us = (cfg.agent.decision_epoch_s * 1e6) as u64;
    if epoch_us > 0 && SimTime::from_micros(epoch_us) <= horizon {
        kernel.schedule(SimTime::from_micros(epoch_us), GLOBAL_TARGET, Ev::EpochTick).expect("future");
    }

    let run = match cfg.scenario.mode {
        RunMode::Virtual => kernel.run_until(horizon, &mut world)?,
        RunMode::RealTime => kernel.run_realtime(horizon, &mut world)?,
    };
    Ok(world.finalize(run))
}

fn build_streams(
    world: &mut SimWorld,
    kernel: &mut Kernel<Ev>,
    seed: u64,
    multiplier: f64,
) -> Result<(), SimError> {
    let cfg = world.cfg.clone();
    let horizon = world.horizon;
    let server = world.server as NodeId;

    let push_stream = |world: &mut SimWorld, runtime: StreamRuntime| -> usize {
        world.streams.push(runtime);
        world.sinks.push(SinkState::default());
        world.epoch_acc.stream_flags.push(false);
        world.streams.len() - 1
    };

    // the measured application stream from the gateway vehicle (virtual mode)
    if cfg.scenario.mode == RunMode::Virtual {
        match cfg.scenario.app {
            ScenarioApp::Probe => {
                let start = SimTime::from_secs(cfg.traffic.probe_start_s).min(horizon);
                let duration =
                    SimTime::from_secs(cfg.traffic.probe_duration_s).min(horizon.saturating_sub(start));
                let base = StreamConfig {
                    kind: FrameKind::Probe,
                    target_rate_bps: cfg.traffic.probe_rate_bps,
                    packet_size_bytes: cfg.traffic.probe_packet_bytes,
                    start_time: start,
                    duration,
                };
                let end = start + duration;
                let rate = ((base.target_rate_bps as f64 * multiplier) as u64).max(1);
                let seg = CbrSchedule::with_rate(&base, rate);
                let idx = push_stream(
                    world,
                    StreamRuntime {
                        record: StreamRecord::new(0, FrameKind::Probe, 0),
                        src: 0,
                        dst: server,
                        measured: true,
                        external: false,
                        source: SourceKind::Cbr { base, seg, seg_idx: 0, end, pending: None },
                    },
                );
                if seg.count() > 0 {
                    let h = kernel.schedule(seg.emission_time(0), 0, Ev::Emit { stream: idx }).expect("future");
                    if let SourceKind::Cbr { pending, .. } = &mut world.streams[idx].source {
                        *pending = Some(h);
                    }
                }
            }
            ScenarioApp::Lidar => {
                let capture = world.lidar.clone().ok_or(SimError::MissingCapture("lidar"))?;
                if capture.scans.is_empty() {
                    return Err(SimError::MissingCapture("lidar"));
                }
                let end = SimTime::from_secs(cfg.traffic.app_duration_s).min(horizon);
                let idx = push_stream(
                    world,
                    StreamRuntime {
                        record: StreamRecord::new(0, FrameKind::Lidar, 0),
                        src: 0,
                        dst: server,
                        measured: true,
                        external: false,
                        source: SourceKind::Lidar {
                            rate_hz: cfg.traffic.lidar_rate_hz,
                            frag_bytes: cfg.traffic.lidar_fragment_bytes,
                            tick: 0,
                            end,
                            emitted: 0,
                        },
                    },
                );
                if end > SimTime::ZERO {
                    kernel.schedule(SimTime::ZERO, 0, Ev::Emit { stream: idx }).expect("future");
                }
            }
            ScenarioApp::Video => {
                let capture = world.video.clone().ok_or(SimError::MissingCapture("video"))?;
                if capture.chunks.is_empty() {
                    return Err(SimError::MissingCapture("video"));
                }
                let idx = push_stream(
                    world,
                    StreamRuntime {
                        record: StreamRecord::new(0, FrameKind::Video, 0),
                        src: 0,
                        dst: server,
                        measured: true,
                        external: false,
                        source: SourceKind::Video {
                            frag_bytes: cfg.traffic.video_datagram_bytes,
                            next_chunk: 0,
                            emitted: 0,
                        },
                    },
                );
                world.sinks[idx].video_delivered = vec![None; capture.chunks.len()];
                let first = capture.chunks[0].timestamp;
                if first <= horizon {
                    kernel.schedule(first, 0, Ev::Emit { stream: idx }).expect("future");
                }
            }
        }
    }

    // identical background senders on every other vehicle
    let background = background_traffic(
        world.fleet.len(),
        cfg.traffic.background_packet_bytes,
        SimTime::from_millis(cfg.traffic.background_interval_ms),
        horizon,
        derive_seed(seed, 5),
    );
    for (node, stream_cfg) in background {
        let seg = CbrSchedule::new(&stream_cfg);
        let end = stream_cfg.start_time + stream_cfg.duration;
        let sid = world.streams.len() as u32;
        let idx = push_stream(
            world,
            StreamRuntime {
                record: StreamRecord::new(sid, FrameKind::Background, node),
                src: node,
                dst: BROADCAST,
                measured: false,
                external: false,
                source: SourceKind::Cbr { base: stream_cfg, seg, seg_idx: 0, end, pending: None },
            },
        );
        if seg.count() > 0 {
            let h = kernel.schedule(seg.emission_time(0), node, Ev::Emit { stream: idx }).expect("future");
            if let SourceKind::Cbr { pending, .. } = &mut world.streams[idx].source {
                *pending = Some(h);
            }
        }
    }
    Ok(())
}

fn attach_gateway(world: &mut SimWorld, kernel: &Kernel<Ev>) -> Result<(), SimError> {
    let cfg = &world.cfg;
    let server = world.server as NodeId;
    let mut vehicle = GatewayPort::bind(PortSide::Vehicle, 0, &cfg.gateway.vehicle_bind, &cfg.gateway.vehicle_peer)?;
    let mut server_port =
        GatewayPort::bind(PortSide::Server, server, &cfg.gateway.server_bind, &cfg.gateway.server_peer)?;

    let injector = kernel.injector();
    vehicle.start_reader({
        let injector = injector.clone();
        move |bytes| {
            let _ = injector.inject(GLOBAL_TARGET, Ev::ExternalDatagram { side: PortSide::Vehicle, bytes });
        }
    })?;
    server_port.start_reader({
        let injector = injector.clone();
        move |bytes| {
            let _ = injector.inject(GLOBAL_TARGET, Ev::ExternalDatagram { side: PortSide::Server, bytes });
        }
    })?;

    let vehicle_sid = world.streams.len() as u32;
    world.streams.push(StreamRuntime {
        record: StreamRecord::new(vehicle_sid, FrameKind::Probe, 0),
        src: 0,
        dst: server,
        measured: true,
        external: true,
        source: SourceKind::External,
    });
    world.sinks.push(SinkState::default());
    world.epoch_acc.stream_flags.push(false);
    let server_sid = world.streams.len() as u32;
    world.streams.push(StreamRuntime {
        record: StreamRecord::new(server_sid, FrameKind::Probe, server),
        src: server,
        dst: 0,
        measured: false,
        external: true,
        source: SourceKind::External,
    });
    world.sinks.push(SinkState::default());
    world.epoch_acc.stream_flags.push(false);

    world.gateway = Some(GatewayRuntime {
        vehicle,
        server: server_port,
        counters: GatewayCounters::default(),
        vehicle_stream: vehicle_sid as usize,
        server_stream: server_sid as usize,
        vehicle_reasm: Reassembler::new(64),
        server_reasm: Reassembler::new(64),
        fragment_bytes: cfg.gateway.fragment_bytes.min(cfg.mac.mtu_bytes),
    });
    Ok(())
}
