//! Scenario harness: loads a manifest, runs it in virtual time or over
//! loopback sockets, and reports windowed throughput, latency, counters
//! and violation checks.

pub mod apps;
mod deploy;
pub mod manifest;
pub mod metrics;
mod sim;
mod socket;

pub use apps::{transform, App, AppCx, CallGraph};
pub use manifest::{
    AppSpec, Backend, ClientSpec, ConfigError, FieldError, FunctionSpec, HttpLoad, HttpPhase, IngressSpec, Load,
    ScenarioConfig, TenantSpec,
};
pub use metrics::{fairness, parse_csv, to_csv, FairnessReport, Recorder, TenantSummary, WindowRow, CSV_HEADER};

use crate::baselines::{compare_primitives, BaselineError, PrimitiveResult, TransferMode};
use crate::counters::CounterSnapshot;
use crate::dne::EngineError;
use crate::fabric::FabricError;
use crate::ids::{Nanos, NodeId, TenantId, NANOS_PER_SEC};
use crate::ingress::{AutoscaleRecord, IngressStats};
use crate::ipc::IpcError;
use crate::mempool::{MemoryPool, OwnerRef, PoolError};
use manifest::secs;
use metrics::WindowLayout;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("pool setup failed: {0}")]
    Pool(#[from] PoolError),
    #[error("engine setup failed: {0}")]
    Engine(#[from] EngineError),
    #[error("fabric setup failed: {0}")]
    Fabric(#[from] FabricError),
    #[error("endpoint setup failed: {0}")]
    Ipc(#[from] IpcError),
    #[error("primitive driver failed: {0}")]
    Baseline(#[from] BaselineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Overrides the manifest backend.
    pub backend: Option<Backend>,
    pub seed: Option<u64>,
    pub trace: bool,
    /// Overrides `ingress.gateway.abrupt_retire`.
    pub abrupt_retire: bool,
}

pub(crate) struct HttpOutcome {
    pub stats: IngressStats,
    pub statuses: BTreeMap<u16, u64>,
    pub aborted: u64,
    pub autoscale: Vec<AutoscaleRecord>,
}

/// Raw end-of-run state handed from a runner to the report builder.
pub(crate) struct RunState {
    pub rec: Recorder,
    pub counters: CounterSnapshot,
    pub pools: Vec<Arc<MemoryPool>>,
    pub drained: bool,
    pub outstanding: usize,
    pub dead_letters: u64,
    pub end_time: Nanos,
    pub workers: Vec<usize>,
    pub engine_log: Vec<String>,
    pub trace: Option<String>,
    pub http: Option<HttpOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolCheck {
    pub tenant: TenantId,
    pub node: NodeId,
    pub buffers: u32,
    pub free: usize,
    pub posted_receives: usize,
    /// Buffers still held by a function, engine or ingress worker.
    pub stranded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conservation {
    pub ok: bool,
    pub drained: bool,
    pub outstanding_requests: usize,
    pub pools: Vec<PoolCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violations {
    pub counters: u64,
    pub payload_mismatches: u64,
    pub unexpected_messages: u64,
    pub stranded_buffers: u64,
    pub pinning: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerRequest {
    pub completed: u64,
    pub descriptor_exchanges: f64,
    pub fabric_ops: f64,
    pub software_copies: f64,
    pub ingress_copies_in: f64,
    pub ingress_copies_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSummary {
    /// Hand-offs one request causes according to the call graph.
    pub expected_exchanges_per_request: u64,
    pub response_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngressSummary {
    pub stats: IngressStats,
    pub http_statuses: BTreeMap<u16, u64>,
    pub aborted_requests: u64,
    pub final_workers: usize,
    /// entries created == responses written + stale responses
    pub entries_balanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrimitiveSummary {
    pub delivered: u32,
    pub mean_latency_ns: f64,
    pub fabric_ops_per_message: f64,
    pub copies_per_message: f64,
    pub poll_discoveries_per_message: f64,
    pub lock_retries: u64,
    pub payload_mismatches: u64,
}

impl From<&PrimitiveResult> for PrimitiveSummary {
    fn from(r: &PrimitiveResult) -> Self {
        PrimitiveSummary {
            delivered: r.delivered,
            mean_latency_ns: r.mean_latency_ns,
            fabric_ops_per_message: r.fabric_ops_per_message,
            copies_per_message: r.copies_per_message,
            poll_discoveries_per_message: r.poll_discoveries_per_message,
            lock_retries: r.lock_retries,
            payload_mismatches: r.payload_mismatches,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub backend: Backend,
    pub duration_s: f64,
    pub windows: u64,
    pub end_time_s: f64,
    pub tenants: BTreeMap<TenantId, TenantSummary>,
    pub fairness: FairnessReport,
    pub per_request: PerRequest,
    pub counters: CounterSnapshot,
    pub dead_letters: u64,
    pub send_failures: u64,
    pub conservation: Conservation,
    pub violations: Violations,
    pub chain: Option<ChainSummary>,
    pub ingress: Option<IngressSummary>,
    pub primitive: Option<BTreeMap<TransferMode, PrimitiveSummary>>,
}

/// Everything a run produces, rendered.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<WindowRow>,
    pub csv: String,
    pub summary: Summary,
    pub summary_json: String,
    pub trace: Option<String>,
    pub engine_log: String,
    pub autoscaler_log: String,
    pub primitive: Option<BTreeMap<TransferMode, PrimitiveResult>>,
}

impl RunOutput {
    pub fn violations(&self) -> u64 {
        self.summary.violations.total
    }

    /// Writes metrics.csv, summary.json and the optional JSON-lines logs.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), &self.csv)?;
        std::fs::write(dir.join("summary.json"), &self.summary_json)?;
        if let Some(t) = &self.trace {
            std::fs::write(dir.join("trace.jsonl"), t)?;
        }
        if !self.engine_log.is_empty() {
            std::fs::write(dir.join("engine.jsonl"), &self.engine_log)?;
        }
        if !self.autoscaler_log.is_empty() {
            std::fs::write(dir.join("autoscaler.jsonl"), &self.autoscaler_log)?;
        }
        Ok(())
    }
}

pub fn run_scenario(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput, HarnessError> {
    let mut cfg = cfg.clone();
    if let Some(b) = opts.backend {
        cfg.backend = b;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if opts.abrupt_retire {
        if let Some(i) = &mut cfg.ingress {
            i.gateway.abrupt_retire = true;
        }
    }
    cfg.validate()?;
    let state = match cfg.backend {
        Backend::Sim => sim::SimWorld::new(&cfg, opts.trace)?.run()?,
        Backend::Socket => socket::run(&cfg)?,
    };
    let primitive = match cfg.primitive {
        Some(p) => Some(compare_primitives(p)?),
        None => None,
    };
    Ok(build_output(&cfg, state, primitive))
}

fn active_intervals(cfg: &ScenarioConfig) -> BTreeMap<TenantId, Vec<(Nanos, Nanos)>> {
    let end = cfg.duration_ns();
    let mut m: BTreeMap<TenantId, Vec<(Nanos, Nanos)>> = BTreeMap::new();
    for f in &cfg.functions {
        if let AppSpec::Client(c) = &f.app {
            let stop = c.stop_s.map_or(end, secs).min(end);
            m.entry(f.tenant).or_default().push((secs(c.start_s), stop));
        }
    }
    if let Some(i) = &cfg.ingress {
        for p in &i.load.phases {
            m.entry(i.tenant).or_default().push((secs(p.start_s), secs(p.stop_s).min(end)));
        }
    }
    m
}

fn build_output(
    cfg: &ScenarioConfig,
    st: RunState,
    primitive: Option<BTreeMap<TransferMode, PrimitiveResult>>,
) -> RunOutput {
    let weights: BTreeMap<TenantId, u32> = cfg.tenants.iter().map(|t| (t.id, t.weight)).collect();
    let active = active_intervals(cfg);
    let windows = cfg.duration_ns() / cfg.window_ns();
    let rows = metrics::window_rows(
        &st.rec,
        &WindowLayout {
            windows,
            window_ns: cfg.window_ns(),
            tenants: &weights,
            active: &active,
            workers: &st.workers,
        },
    );
    let csv = to_csv(&rows);

    let pools: Vec<PoolCheck> = st
        .pools
        .iter()
        .map(|p| {
            let census = p.owner_census();
            let get = |o: OwnerRef| census.get(&o).copied().unwrap_or(0);
            PoolCheck {
                tenant: p.tenant(),
                node: p.node(),
                buffers: p.buffer_count(),
                free: get(OwnerRef::Pool),
                posted_receives: get(OwnerRef::Fabric),
                stranded: p.buffer_count() as usize - get(OwnerRef::Pool) - get(OwnerRef::Fabric),
            }
        })
        .collect();
    let stranded: u64 = pools.iter().map(|p| p.stranded as u64).sum();
    let conservation = Conservation {
        ok: st.drained && stranded == 0 && st.outstanding == 0,
        drained: st.drained,
        outstanding_requests: st.outstanding,
        pools,
    };
    let pinning = st.http.as_ref().map_or(0, |h| h.stats.pinning_violations);
    let mut violations = Violations {
        counters: st.counters.violations(),
        payload_mismatches: st.rec.mismatches,
        unexpected_messages: st.rec.unexpected,
        stranded_buffers: stranded,
        pinning,
        total: 0,
    };
    violations.total = violations.counters
        + violations.payload_mismatches
        + violations.unexpected_messages
        + violations.stranded_buffers
        + violations.pinning
        + primitive
            .as_ref()
            .map_or(0, |m| m.values().map(|r| r.payload_mismatches).sum::<u64>());

    let completed = st.rec.total_delivered();
    let per = |x: u64| if completed == 0 { 0.0 } else { x as f64 / completed as f64 };
    let per_request = PerRequest {
        completed,
        descriptor_exchanges: per(st.counters.descriptor_exchanges),
        fabric_ops: per(st.counters.fabric_ops()),
        software_copies: per(st.counters.software_copies()),
        ingress_copies_in: per(st.counters.copies_ingress_in),
        ingress_copies_out: per(st.counters.copies_ingress_out),
    };

    let graph = CallGraph::from_config(cfg);
    let chain = cfg
        .functions
        .iter()
        .find_map(|f| match &f.app {
            AppSpec::Client(c) if matches!(cfg.function(c.target).map(|t| &t.app), Some(AppSpec::Chain { .. })) => {
                Some(c.target)
            }
            _ => None,
        })
        .map(|target| ChainSummary {
            expected_exchanges_per_request: graph.exchanges(target),
            response_digest: st.rec.response_digest(),
        });

    let (ingress, autoscaler_log) = match &st.http {
        Some(h) => {
            let s = h.stats;
            let log: String = h
                .autoscale
                .iter()
                .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
                .collect();
            (
                Some(IngressSummary {
                    stats: s,
                    http_statuses: h.statuses.clone(),
                    aborted_requests: h.aborted,
                    final_workers: h.autoscale.last().map_or(
                        cfg.ingress.as_ref().map_or(0, |i| i.gateway.autoscaler.initial_workers),
                        |r| r.worker_count,
                    ),
                    entries_balanced: s.entries_created == s.responses_written + s.stale_responses,
                }),
                log,
            )
        }
        None => (None, String::new()),
    };

    let summary = Summary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        backend: cfg.backend,
        duration_s: cfg.duration_s,
        windows,
        end_time_s: st.end_time as f64 / NANOS_PER_SEC as f64,
        tenants: weights.iter().map(|(t, w)| (*t, st.rec.tenant_summary(*t, *w))).collect(),
        fairness: fairness(&rows, cfg.settle_windows),
        per_request,
        counters: st.counters,
        dead_letters: st.dead_letters,
        send_failures: st.rec.send_failures,
        conservation,
        violations,
        chain,
        ingress,
        primitive: primitive
            .as_ref()
            .map(|m| m.iter().map(|(k, v)| (*k, PrimitiveSummary::from(v))).collect()),
    };
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    RunOutput {
        rows,
        csv,
        summary,
        summary_json,
        trace: st.trace,
        engine_log: st.engine_log.iter().map(|l| format!("{l}\n")).collect(),
        autoscaler_log,
        primitive,
    }
}

/// Recomputes the fairness analysis from a metrics CSV.
pub fn report(csv: &str, settle_windows: u32) -> Result<FairnessReport, String> {
    Ok(fairness(&parse_csv(csv)?, settle_windows))
}

#[cfg(test)]
mod tests;
