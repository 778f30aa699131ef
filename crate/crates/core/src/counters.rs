//! Process-wide accounting for copies, fabric operations and protocol
//! violations. One `Counters` instance is shared by every component of a
//! scenario; tests read it through [`Counters::snapshot`].

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Where a software payload copy happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopySite {
    /// Anything on a function-to-function path (engine, ipc, iolib, apps).
    FunctionPath,
    /// HTTP body into a fabric buffer at the ingress.
    IngressIn,
    /// Fabric buffer into an HTTP response at the ingress.
    IngressOut,
    /// Receiver-side copy out of the RDMA-only staging pool.
    StagingCopy,
}

macro_rules! counters {
    ($($field:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub struct Counters {
            $(pub $field: AtomicU64,)*
        }

        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
        pub struct CounterSnapshot {
            $(pub $field: u64,)*
        }

        impl Counters {
            pub fn snapshot(&self) -> CounterSnapshot {
                CounterSnapshot {
                    $($field: self.$field.load(Ordering::Relaxed),)*
                }
            }
        }

        impl CounterSnapshot {
            /// Field-wise `self - earlier`.
            pub fn delta(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
                CounterSnapshot {
                    $($field: self.$field - earlier.$field,)*
                }
            }
        }
    };
}

counters!(
    copies_function_path,
    copies_ingress_in,
    copies_ingress_out,
    copies_staging,
    copied_bytes,
    dma_transfers,
    dma_bytes,
    fabric_sends,
    fabric_writes,
    fabric_atomics,
    recvs_posted,
    poll_discoveries,
    descriptor_exchanges,
    ipc_messages,
    ipc_bytes,
    dead_letters,
    stale_responses,
    rnr_timeouts,
    not_owner,
    double_free,
    tenant_mismatch,
    access_violations,
    rbr_miss,
    invariant_failures,
);

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    #[inline]
    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn record_copy(&self, site: CopySite, bytes: usize) {
        let c = match site {
            CopySite::FunctionPath => &self.copies_function_path,
            CopySite::IngressIn => &self.copies_ingress_in,
            CopySite::IngressOut => &self.copies_ingress_out,
            CopySite::StagingCopy => &self.copies_staging,
        };
        Self::bump(c);
        Self::add(&self.copied_bytes, bytes as u64);
    }

    pub fn record_dma(&self, bytes: usize) {
        Self::bump(&self.dma_transfers);
        Self::add(&self.dma_bytes, bytes as u64);
    }
}

impl CounterSnapshot {
    /// Fabric operations that traverse a link (send, write, atomic).
    pub fn fabric_ops(&self) -> u64 {
        self.fabric_sends + self.fabric_writes + self.fabric_atomics
    }

    pub fn software_copies(&self) -> u64 {
        self.copies_function_path + self.copies_ingress_in + self.copies_ingress_out + self.copies_staging
    }

    /// Sum of the counters that must stay zero in a healthy run.
    pub fn violations(&self) -> u64 {
        self.not_owner
            + self.double_free
            + self.tenant_mismatch
            + self.access_violations
            + self.rbr_miss
            + self.invariant_failures
    }
}
