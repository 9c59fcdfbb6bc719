//! Discrete-event kernel: a virtual clock, a time-ordered event queue and an
//! optional real-time mode that binds the virtual clock to the wall clock so
//! live traffic can be spliced into a run.
//!
//! Dispatch is strictly single-threaded. In real-time mode exactly one
//! injection channel may be written from other threads; the kernel drains it
//! between dispatches and stamps each injected event with the current virtual
//! time.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::time::SimTime;

/// Node/module identifier within a simulation.
pub type NodeId = u32;

/// Identifies events scheduled for the whole simulation rather than a node.
pub const GLOBAL_TARGET: NodeId = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("cannot schedule at {requested} before current clock {clock}")]
    SchedulingInPast { requested: SimTime, clock: SimTime },
    #[error("operation requires {required:?} mode, kernel is in {actual:?} mode")]
    WrongMode { required: ModeKind, actual: ModeKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    Virtual,
    RealTime,
}

/// How the kernel advances its clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Events are dispatched as fast as possible.
    Virtual,
    /// Dispatch of an event with fire time `t` is delayed until wall-clock
    /// offset `t`; firing later than `t + drift_budget_us` counts as an
    /// overload.
    RealTime { drift_budget_us: u64 },
}

impl KernelMode {
    fn kind(self) -> ModeKind {
        match self {
            KernelMode::Virtual => ModeKind::Virtual,
            KernelMode::RealTime { .. } => ModeKind::RealTime,
        }
    }
}

/// A scheduled unit of work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<E> {
    pub fire_time: SimTime,
    /// Monotone insertion counter; breaks ties on `fire_time` FIFO.
    pub seq: u64,
    pub target: NodeId,
    pub payload: E,
}

/// Permits cancellation of a pending event. Cancelling an event that has
/// already fired or been cancelled is a no-op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

/// Summary of a completed run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub events_dispatched: u64,
    pub final_clock: SimTime,
    /// Largest observed lag between an event's fire time and its actual
    /// wall-clock dispatch offset. Always 0 in virtual mode.
    pub max_drift_us: u64,
    /// Events that fired later than the drift budget allowed.
    pub overload_count: u64,
}

/// Receives dispatched events. The kernel is handed back mutably so handlers
/// can schedule follow-up work.
pub trait EventHandler<E> {
    fn handle(&mut self, kernel: &mut Kernel<E>, event: SimEvent<E>);
}

impl<E, F: FnMut(&mut Kernel<E>, SimEvent<E>)> EventHandler<E> for F {
    fn handle(&mut self, kernel: &mut Kernel<E>, event: SimEvent<E>) {
        self(kernel, event)
    }
}

/// The kernel behind an [`Injector`] has been dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelGone;

impl std::fmt::Display for KernelGone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("kernel no longer accepts injections")
    }
}

impl std::error::Error for KernelGone {}

/// Thread-safe handle for pushing external work into a real-time run.
pub struct Injector<E> {
    tx: mpsc::Sender<(NodeId, E)>,
}

impl<E> Clone for Injector<E> {
    fn clone(&self) -> Self {
        Injector { tx: self.tx.clone() }
    }
}

impl<E> Injector<E> {
    /// Queues `payload` for admission; the kernel stamps it with the virtual
    /// time at which it drains the queue.
    pub fn inject(&self, target: NodeId, payload: E) -> Result<(), KernelGone> {
        self.tx.send((target, payload)).map_err(|_| KernelGone)
    }
}

#[derive(Debug)]
struct HeapKey {
    fire_time: SimTime,
    seq: u64,
    id: u64,
}

impl PartialEq for HeapKey {
    fn eq(&self, other: &Self) -> bool {
        self.fire_time == other.fire_time && self.seq == other.seq
    }
}
impl Eq for HeapKey {}
impl PartialOrd for HeapKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_time, self.seq).cmp(&(other.fire_time, other.seq))
    }
}

/// The event engine. Generic over the event payload type.
pub struct Kernel<E> {
    mode: KernelMode,
    clock: SimTime,
    heap: BinaryHeap<Reverse<HeapKey>>,
    // Pending bodies keyed by handle id; absent entries are cancelled events
    // still sitting in the heap (lazy deletion).
    pending: HashMap<u64, (NodeId, E)>,
    next_seq: u64,
    next_id: u64,
    injection_rx: mpsc::Receiver<(NodeId, E)>,
    // Kept so the channel never reports disconnected.
    injection_tx: mpsc::Sender<(NodeId, E)>,
    trace: Option<Vec<(SimTime, u64, NodeId)>>,
}

/// Sleep slack before busy-waiting the final stretch to a deadline; keeps
/// dispatch drift well under the budget on hosts with coarse timer ticks.
const SPIN_SLACK: Duration = Duration::from_millis(3);

impl<E> Kernel<E> {
    pub fn new(mode: KernelMode) -> Self {
        let (tx, rx) = mpsc::channel();
        Kernel {
            mode,
            clock: SimTime::ZERO,
            heap: BinaryHeap::new(),
            pending: HashMap::new(),
            next_seq: 0,
            next_id: 0,
            injection_rx: rx,
            injection_tx: tx,
            trace: None,
        }
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    /// Turns on recording of `(fire_time, seq, target)` triples for every
    /// dispatched event; used by determinism checks.
    pub fn record_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<(SimTime, u64, NodeId)> {
        self.trace.take().unwrap_or_default()
    }

    /// Handle for injecting external events during a real-time run.
    pub fn injector(&self) -> Injector<E> {
        Injector { tx: self.injection_tx.clone() }
    }

    /// Schedules `payload` for `target` at `at`. `at` may equal the current
    /// clock; scheduling strictly in the past is an error.
    pub fn schedule(&mut self, at: SimTime, target: NodeId, payload: E) -> Result<EventHandle, KernelError> {
        if at < self.clock {
            return Err(KernelError::SchedulingInPast { requested: at, clock: self.clock });
        }
        let id = self.next_id;
        self.next_id += 1;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(id, (target, payload));
        self.heap.push(Reverse(HeapKey { fire_time: at, seq, id }));
        Ok(EventHandle(id))
    }

    /// Removes a pending event. Returns false if it already fired or was
    /// cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.pending.remove(&handle.0).is_some()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn pop_due(&mut self, t_end: SimTime) -> Option<SimEvent<E>> {
        while let Some(Reverse(key)) = self.heap.peek() {
            if key.fire_time > t_end {
                return None;
            }
            let Reverse(key) = self.heap.pop().expect("peeked");
            if let Some((target, payload)) = self.pending.remove(&key.id) {
                return Some(SimEvent { fire_time: key.fire_time, seq: key.seq, target, payload });
            }
            // cancelled entry: skip
        }
        None
    }

    /// Earliest pending fire time, skipping cancelled entries.
    fn peek_time(&mut self) -> Option<SimTime> {
        while let Some(Reverse(key)) = self.heap.peek() {
            if self.pending.contains_key(&key.id) {
                return Some(key.fire_time);
            }
            self.heap.pop();
        }
        None
    }

    fn dispatch<H: EventHandler<E>>(&mut self, event: SimEvent<E>, handler: &mut H, stats: &mut RunStats) {
        debug_assert!(event.fire_time >= self.clock);
        self.clock = event.fire_time;
        stats.events_dispatched += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.push((event.fire_time, event.seq, event.target));
        }
        handler.handle(self, event);
    }

    /// Runs every event with `fire_time <= t_end`, then sets the clock to
    /// `t_end`. Virtual mode only.
    pub fn run_until<H: EventHandler<E>>(&mut self, t_end: SimTime, handler: &mut H) -> Result<RunStats, KernelError> {
        if self.mode.kind() != ModeKind::Virtual {
            return Err(KernelError::WrongMode { required: ModeKind::Virtual, actual: self.mode.kind() });
        }
        let mut stats = RunStats::default();
        while let Some(event) = self.pop_due(t_end) {
            self.dispatch(event, handler, &mut stats);
        }
        if t_end > self.clock {
            self.clock = t_end;
        }
        stats.final_clock = self.clock;
        Ok(stats)
    }

    /// Paces dispatch against the wall clock until virtual `t_end`, draining
    /// the injection queue between dispatches. Injected events are stamped
    /// with the virtual time of the drain, never earlier than the previously
    /// dispatched event.
    pub fn run_realtime<H: EventHandler<E>>(&mut self, t_end: SimTime, handler: &mut H) -> Result<RunStats, KernelError> {
        let budget_us = match self.mode {
            KernelMode::RealTime { drift_budget_us } => drift_budget_us,
            KernelMode::Virtual => {
                return Err(KernelError::WrongMode { required: ModeKind::RealTime, actual: ModeKind::Virtual })
            }
        };
        let mut stats = RunStats::default();
        let start = Instant::now();
        loop {
            self.drain_injections(start);
            let next = match self.peek_time() {
                Some(t) if t <= t_end => t,
                // Nothing due before the horizon: hold until the horizon
                // deadline so injections can still be admitted.
                _ => {
                    if self.wait_or_inject(start, t_end) {
                        continue; // an injection may have become the next event
                    }
                    break;
                }
            };
            if self.wait_or_inject(start, next) {
                continue;
            }
            if let Some(event) = self.pop_due(next) {
                let offset_us = start.elapsed().as_micros() as u64;
                let drift = offset_us.saturating_sub(event.fire_time.as_micros());
                stats.max_drift_us = stats.max_drift_us.max(drift);
                if drift > budget_us {
                    stats.overload_count += 1;
                }
                self.dispatch(event, handler, &mut stats);
            }
        }
        if t_end > self.clock {
            self.clock = t_end;
        }
        stats.final_clock = self.clock;
        Ok(stats)
    }

    /// Blocks until the wall deadline for virtual time `until`, admitting
    /// injections as they arrive. Returns true if an injection was admitted
    /// before the deadline (the caller must re-examine the queue).
    fn wait_or_inject(&mut self, start: Instant, until: SimTime) -> bool {
        let deadline = start + until.to_duration();
        loop {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            let remaining = deadline - now;
            if remaining <= SPIN_SLACK {
                while Instant::now() < deadline {
                    std::hint::spin_loop();
                }
                return false;
            }
            match self.injection_rx.recv_timeout(remaining - SPIN_SLACK) {
                Ok((target, payload)) => {
                    self.admit(start, target, payload);
                    return true;
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => unreachable!("kernel holds a sender"),
            }
        }
    }

    fn drain_injections(&mut self, start: Instant) {
        while let Ok((target, payload)) = self.injection_rx.try_recv() {
            self.admit(start, target, payload);
        }
    }

    fn admit(&mut self, start: Instant, target: NodeId, payload: E) {
        let wall = SimTime::from_micros(start.elapsed().as_micros() as u64);
        let at = wall.max(self.clock);
        self.schedule(at, target, payload).expect("stamp is never before the clock");
    }
}
