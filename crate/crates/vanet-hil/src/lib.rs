//! A hardware-in-the-loop VANET testbed.
//!
//! A discrete-event IEEE 802.11p-style network simulator with a real-time
//! mode and an external datagram gateway, through which live applications
//! exchange traffic with a simulated vehicular wireless medium while a
//! tabular Q-learning agent adapts the gateway node's application-layer
//! send rate. A KPI harness measures delay, throughput and stream counts
//! across vehicle densities.

pub mod agent;
pub mod config;
pub mod frag;
pub mod gateway;
pub mod kernel;
pub mod mobility;
pub mod radio;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod time;
pub mod traffic;

pub use config::{RunMode, ScenarioApp, SimConfig};
pub use kernel::{Kernel, KernelMode, NodeId, RunStats};
pub use scenario::{run_scenario, ScenarioError, ScenarioOutcome};
pub use time::SimTime;
