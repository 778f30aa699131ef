//! A multi-tenant network data plane for function chains: an emulated RDMA
//! fabric, ownership-checked buffer pools, and a per-node network engine.

pub mod baselines;
pub mod clock;
pub mod counters;
pub mod dne;
pub mod fabric;
pub mod harness;
pub mod ingress;
pub mod ids;
pub mod iolib;
pub mod ipc;
pub mod mempool;

pub use clock::{Clock, VirtualClock};
pub use counters::{CopySite, CounterSnapshot, Counters};
pub use ids::*;
