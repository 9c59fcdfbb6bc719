//! Per-node DCF state used by the integrated simulation: a bounded interface
//! queue, the contention window, and the frozen/running backoff countdown.

use std::collections::VecDeque;

use crate::kernel::EventHandle;
use crate::radio::{DcfState, Frame, MacConfig};
use crate::time::SimTime;

/// A backoff countdown currently scheduled with the kernel: DIFS plus
/// `slots` idle slots starting at `started`.
#[derive(Debug, Clone, Copy)]
pub struct Countdown {
    pub handle: EventHandle,
    pub started: SimTime,
    pub slots: u32,
}

impl Countdown {
    pub fn fire_time(&self, dcf: &DcfState) -> SimTime {
        self.started + dcf.difs_us + self.slots as u64 * dcf.slot_us
    }
}

/// MAC-layer state of one simulated node.
pub struct MacNode {
    pub queue: VecDeque<Frame>,
    pub dcf: DcfState,
    /// Slots left over from a frozen countdown; `None` means the next
    /// contention draws a fresh backoff.
    pub residual_slots: Option<u32>,
    pub countdown: Option<Countdown>,
    /// Number of in-range transmissions currently sensed.
    pub busy_count: u32,
    /// Transmission id while on the air.
    pub transmitting: Option<u64>,
    pub queue_drops: u64,
}

impl MacNode {
    pub fn new(mac: &MacConfig) -> Self {
        MacNode {
            queue: VecDeque::new(),
            dcf: DcfState::new(mac),
            residual_slots: None,
            countdown: None,
            busy_count: 0,
            transmitting: None,
            queue_drops: 0,
        }
    }

    pub fn idle_medium(&self) -> bool {
        self.busy_count == 0
    }

    pub fn can_contend(&self) -> bool {
        self.countdown.is_none() && self.transmitting.is_none() && !self.queue.is_empty() && self.idle_medium()
    }
}

/// Whole idle slots burned by a countdown that started at `started` and got
/// interrupted at `busy_at`. The DIFS period burns first and does not count
/// against the slot counter.
pub fn consumed_slots(started: SimTime, busy_at: SimTime, difs_us: u64, slot_us: u64, slots: u32) -> u32 {
    let elapsed = busy_at - started;
    if elapsed <= difs_us {
        return 0;
    }
    (((elapsed - difs_us) / slot_us) as u32).min(slots)
}
