//! The hardware-in-the-loop bridge. Real processes exchange UDP datagrams
//! with the simulation through two attachment points, a vehicle-side port
//! bound to the gateway vehicle (node 0) and a server-side port bound to the
//! edge server, using a fixed 18-byte envelope encapsulation.
//!
//! Wire layout, all multi-byte fields big-endian:
//!
//! ```text
//! magic "VHIL" (4) | version (1) | kind (1) | timestamp_us (8) | payload_len (4) | payload
//! ```

use std::fmt;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::kernel::NodeId;

pub const ENVELOPE_HEADER_LEN: usize = 18;
/// Largest payload that still fits a single UDP datagram with the envelope
/// header.
pub const MAX_PAYLOAD_LEN: usize = 65_507 - ENVELOPE_HEADER_LEN;

const MAGIC: &[u8; 4] = b"VHIL";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeKind {
    /// Real-world datagram entering the simulation.
    ToSim = 1,
    /// Simulated delivery leaving towards a real peer.
    FromSim = 2,
    Control = 3,
}

impl EnvelopeKind {
    fn from_byte(b: u8) -> Option<EnvelopeKind> {
        match b {
            1 => Some(EnvelopeKind::ToSim),
            2 => Some(EnvelopeKind::FromSim),
            3 => Some(EnvelopeKind::Control),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported envelope version {0}")]
    BadVersion(u8),
    #[error("unknown envelope kind {0}")]
    BadKind(u8),
    #[error("truncated payload: header announces {announced} bytes, {available} present")]
    TruncatedPayload { announced: usize, available: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes exceeds the single-datagram limit")]
    PayloadTooLarge(usize),
}

/// The encapsulation header plus payload carried across each gateway port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayEnvelope {
    pub kind: EnvelopeKind,
    /// Sender wall clock, microseconds since the Unix epoch.
    pub timestamp_us: u64,
    pub payload: Vec<u8>,
}

impl GatewayEnvelope {
    pub fn new(kind: EnvelopeKind, timestamp_us: u64, payload: Vec<u8>) -> Result<Self, EnvelopeError> {
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err(EnvelopeError::PayloadTooLarge(payload.len()));
        }
        Ok(GatewayEnvelope { kind, timestamp_us, payload })
    }

    pub fn encode(&self) -> Vec<u8> {
        debug_assert!(self.payload.len() <= MAX_PAYLOAD_LEN);
        let mut buf = Vec::with_capacity(ENVELOPE_HEADER_LEN + self.payload.len());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(self.kind as u8);
        buf.extend_from_slice(&self.timestamp_us.to_be_bytes());
        buf.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<GatewayEnvelope, EnvelopeError> {
        if bytes.len() < ENVELOPE_HEADER_LEN {
            return Err(EnvelopeError::TruncatedPayload { announced: ENVELOPE_HEADER_LEN, available: bytes.len() });
        }
        if &bytes[0..4] != MAGIC {
            return Err(EnvelopeError::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(EnvelopeError::BadVersion(bytes[4]));
        }
        let kind = EnvelopeKind::from_byte(bytes[5]).ok_or(EnvelopeError::BadKind(bytes[5]))?;
        let timestamp_us = u64::from_be_bytes(bytes[6..14].try_into().unwrap());
        let payload_len = u32::from_be_bytes(bytes[14..18].try_into().unwrap()) as usize;
        if payload_len > MAX_PAYLOAD_LEN {
            return Err(EnvelopeError::PayloadTooLarge(payload_len));
        }
        let available = bytes.len() - ENVELOPE_HEADER_LEN;
        if available < payload_len {
            return Err(EnvelopeError::TruncatedPayload { announced: payload_len, available });
        }
        if available > payload_len {
            return Err(EnvelopeError::TrailingBytes(available - payload_len));
        }
        Ok(GatewayEnvelope { kind, timestamp_us, payload: bytes[18..].to_vec() })
    }
}

/// Which attachment point a port models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortSide {
    /// Attached to the gateway vehicle (node 0); conventionally the
    /// 192.168.5.0/24 side.
    Vehicle,
    /// Attached to the edge server; conventionally the 192.168.3.0/24 side.
    Server,
}

impl PortSide {
    pub fn as_str(self) -> &'static str {
        match self {
            PortSide::Vehicle => "vehicle",
            PortSide::Server => "server",
        }
    }
}

/// Endpoint configuration for both ports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub vehicle_bind: String,
    pub vehicle_peer: String,
    pub server_bind: String,
    pub server_peer: String,
    /// External payloads above the MAC MTU are split into fragments of this
    /// size before entering the medium.
    pub fragment_bytes: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            vehicle_bind: "127.0.0.1:5520".to_string(),
            vehicle_peer: "127.0.0.1:5521".to_string(),
            server_bind: "127.0.0.1:5320".to_string(),
            server_peer: "127.0.0.1:5321".to_string(),
            fragment_bytes: 1400,
        }
    }
}

/// Frame-level bookkeeping across both ports. Every ingested frame ends the
/// run as delivered, collision-lost, dropped, or still pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GatewayCounters {
    pub datagrams_in: u64,
    pub decode_errors: u64,
    pub wrong_kind: u64,
    pub ingested_frames: u64,
    pub delivered_frames: u64,
    pub collided_frames: u64,
    pub dropped_frames: u64,
    pub pending_frames: u64,
    pub egress_datagrams: u64,
    pub egress_failures: u64,
    pub reassembly_abandoned: u64,
}

impl GatewayCounters {
    /// Frame conservation: ingested == delivered + collided + dropped +
    /// pending.
    pub fn conserved(&self) -> bool {
        self.ingested_frames
            == self.delivered_frames + self.collided_frames + self.dropped_frames + self.pending_frames
    }
}

impl fmt::Display for GatewayCounters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "in={} decode_err={} wrong_kind={} ingested={} delivered={} collided={} dropped={} pending={} out={} out_fail={}",
            self.datagrams_in,
            self.decode_errors,
            self.wrong_kind,
            self.ingested_frames,
            self.delivered_frames,
            self.collided_frames,
            self.dropped_frames,
            self.pending_frames,
            self.egress_datagrams,
            self.egress_failures,
        )
    }
}

fn resolve(addr: &str) -> io::Result<SocketAddr> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::AddrNotAvailable, format!("cannot resolve {addr}")))
}

/// One datagram attachment point. A background reader hands raw datagrams to
/// a callback (which stamps and injects them into the kernel); egress sends
/// happen on the caller's thread and never block.
pub struct GatewayPort {
    pub side: PortSide,
    /// Simulated node this port attaches to.
    pub node: NodeId,
    socket: UdpSocket,
    peer: SocketAddr,
    stop: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
}

impl GatewayPort {
    pub fn bind(side: PortSide, node: NodeId, bind_addr: &str, peer_addr: &str) -> io::Result<Self> {
        let socket = UdpSocket::bind(resolve(bind_addr)?)?;
        socket.set_nonblocking(true)?;
        Ok(GatewayPort { side, node, socket, peer: resolve(peer_addr)?, stop: Arc::new(AtomicBool::new(false)), reader: None })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    /// Spawns the reader thread. `on_datagram` runs on that thread for every
    /// datagram received; it should only enqueue work for the kernel.
    pub fn start_reader<F>(&mut self, on_datagram: F) -> io::Result<()>
    where
        F: Fn(Vec<u8>) + Send + 'static,
    {
        let socket = self.socket.try_clone()?;
        socket.set_nonblocking(false)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let stop = self.stop.clone();
        let mut buf = vec![0u8; 65_535];
        self.reader = Some(std::thread::spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match socket.recv(&mut buf) {
                    Ok(n) => on_datagram(buf[..n].to_vec()),
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock || e.kind() == io::ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
            }
        }));
        Ok(())
    }

    /// Non-blocking send of an encoded envelope to the configured peer.
    pub fn send(&self, bytes: &[u8]) -> io::Result<()> {
        self.socket.send_to(bytes, self.peer).map(|_| ())
    }
}

impl Drop for GatewayPort {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.reader.take() {
            let _ = handle.join();
        }
    }
}
