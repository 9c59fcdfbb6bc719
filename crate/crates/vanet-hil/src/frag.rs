//! Fragmentation and reassembly of application payloads that exceed the
//! link MTU. Used by the gateway for oversized external datagrams and by the
//! capture replayers for LiDAR scans and video chunks.

use std::collections::BTreeMap;
use std::sync::Arc;

/// Number of fragments a payload of `len` bytes splits into.
pub fn fragment_count(len: usize, frag_size: usize) -> u32 {
    debug_assert!(frag_size > 0);
    len.div_ceil(frag_size).max(1) as u32
}

/// Splits `payload` into shared slices of at most `frag_size` bytes. A
/// payload that fits yields a single fragment.
pub fn split(payload: &[u8], frag_size: usize) -> Vec<Arc<[u8]>> {
    if payload.len() <= frag_size {
        return vec![Arc::from(payload)];
    }
    payload.chunks(frag_size).map(Arc::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReassemblyStats {
    pub completed: u64,
    /// Groups evicted while still incomplete.
    pub abandoned: u64,
}

struct Partial {
    parts: Vec<Option<Arc<[u8]>>>,
    received: u32,
}

/// Collects fragments keyed by group id and hands back the whole payload
/// once every index has arrived. Holds at most `max_groups` incomplete
/// groups; the oldest is abandoned beyond that.
pub struct Reassembler {
    groups: BTreeMap<u64, Partial>,
    max_groups: usize,
    stats: ReassemblyStats,
}

impl Reassembler {
    pub fn new(max_groups: usize) -> Self {
        Reassembler { groups: BTreeMap::new(), max_groups: max_groups.max(1), stats: ReassemblyStats::default() }
    }

    pub fn stats(&self) -> ReassemblyStats {
        self.stats
    }

    /// Open groups that never completed.
    pub fn pending(&self) -> usize {
        self.groups.len()
    }

    pub fn offer(&mut self, group: u64, index: u32, count: u32, bytes: Arc<[u8]>) -> Option<Vec<u8>> {
        if count == 0 || index >= count {
            return None;
        }
        let partial = self.groups.entry(group).or_insert_with(|| Partial {
            parts: vec![None; count as usize],
            received: 0,
        });
        if partial.parts.len() != count as usize || partial.parts[index as usize].is_some() {
            return None; // inconsistent or duplicate fragment
        }
        partial.parts[index as usize] = Some(bytes);
        partial.received += 1;
        if partial.received == count {
            let partial = self.groups.remove(&group).expect("present");
            self.stats.completed += 1;
            let mut whole = Vec::new();
            for part in partial.parts {
                whole.extend_from_slice(&part.expect("all fragments present"));
            }
            return Some(whole);
        }
        if self.groups.len() > self.max_groups {
            let oldest = *self.groups.keys().next().expect("non-empty");
            self.groups.remove(&oldest);
            self.stats.abandoned += 1;
        }
        None
    }
}
