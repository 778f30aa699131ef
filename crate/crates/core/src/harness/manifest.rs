//! Scenario manifests: one JSON document per experiment.

use crate::baselines::{PrimitiveConfig, TransferMode};
use crate::dne::EngineConfig;
use crate::fabric::{FabricConfig, FabricMode, LinkParams};
use crate::ids::{FnId, Nanos, NodeId, TenantId, NANOS_PER_SEC};
use crate::ingress::IngressConfig;
use crate::iolib::REQUEST_HEADER_LEN;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("CONFIG_INVALID: cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("CONFIG_INVALID: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("CONFIG_INVALID: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn fields(&self) -> &[FieldError] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Sim,
    Socket,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantSpec {
    pub id: TenantId,
    #[serde(default = "one")]
    pub weight: u32,
    /// Buffers per node pool.
    pub buffers: u32,
    pub buffer_size: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Load {
    /// Keeps `concurrency` requests outstanding.
    Closed { concurrency: u32 },
    /// Poisson arrivals at `rate` requests per second.
    Open { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub target: FnId,
    /// Request size including the 8-byte request id.
    pub message_size: u32,
    pub load: Load,
    #[serde(default)]
    pub start_s: f64,
    /// Defaults to the end of the run.
    #[serde(default)]
    pub stop_s: Option<f64>,
    /// Stop after this many requests.
    #[serde(default)]
    pub requests: Option<u64>,
    /// Keep a digest of every response for cross-run comparison.
    #[serde(default)]
    pub digest: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AppSpec {
    Echo,
    Client(ClientSpec),
    /// Calls each of `calls` in order with the same buffer, then applies
    /// its own transform and answers the caller.
    Chain { calls: Vec<FnId> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub id: FnId,
    pub tenant: TenantId,
    pub node: NodeId,
    #[serde(default)]
    pub name: Option<String>,
    pub app: AppSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpPhase {
    pub start_s: f64,
    pub stop_s: f64,
    pub connections: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpLoad {
    pub body_size: u32,
    /// Mean think time between a response and the next request.
    #[serde(default)]
    pub think_us: f64,
    /// Close and reopen a connection after this many requests.
    #[serde(default)]
    pub requests_per_connection: Option<u32>,
    pub phases: Vec<HttpPhase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngressSpec {
    pub node: NodeId,
    pub tenant: TenantId,
    pub gateway: IngressConfig,
    pub load: HttpLoad,
    /// Socket mode listen address.
    #[serde(default)]
    pub listen: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: Backend,
    pub duration_s: f64,
    #[serde(default = "one_f")]
    pub window_s: f64,
    /// Windows ignored by the fairness analysis after every join or leave.
    #[serde(default)]
    pub settle_windows: u32,
    /// Virtual time allowed for in-flight work to finish after the run.
    #[serde(default = "drain_default")]
    pub drain_s: f64,
    #[serde(default = "default_nodes")]
    pub nodes: Vec<NodeId>,
    #[serde(default)]
    pub link: LinkParams,
    #[serde(default)]
    pub fabric: FabricConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub transfer_mode: TransferMode,
    #[serde(default = "channel_default")]
    pub channel_capacity: usize,
    #[serde(default)]
    pub tenants: Vec<TenantSpec>,
    #[serde(default)]
    pub functions: Vec<FunctionSpec>,
    #[serde(default)]
    pub ingress: Option<IngressSpec>,
    #[serde(default)]
    pub primitive: Option<PrimitiveConfig>,
}

fn one_f() -> f64 {
    1.0
}

fn drain_default() -> f64 {
    30.0
}

fn channel_default() -> usize {
    4096
}

fn default_nodes() -> Vec<NodeId> {
    vec![NodeId(0), NodeId(1)]
}

pub fn secs(s: f64) -> Nanos {
    (s * NANOS_PER_SEC as f64).round() as Nanos
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn duration_ns(&self) -> Nanos {
        secs(self.duration_s)
    }

    pub fn window_ns(&self) -> Nanos {
        secs(self.window_s).max(1)
    }

    pub fn tenant(&self, id: TenantId) -> Option<&TenantSpec> {
        self.tenants.iter().find(|t| t.id == id)
    }

    pub fn function(&self, id: FnId) -> Option<&FunctionSpec> {
        self.functions.iter().find(|f| f.id == id)
    }

    /// Every function's node, the ingress endpoint included.
    pub fn placements(&self) -> BTreeMap<FnId, NodeId> {
        let mut m: BTreeMap<FnId, NodeId> = self.functions.iter().map(|f| (f.id, f.node)).collect();
        if let Some(i) = &self.ingress {
            m.insert(i.gateway.fn_id, i.node);
        }
        m
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut err = |field: String, message: &str| {
            errs.push(FieldError {
                field,
                message: message.to_string(),
            })
        };
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            err("duration_s".into(), "must be a finite non-negative number");
        }
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            err("window_s".into(), "must be positive");
        }
        if !(self.drain_s >= 0.0) {
            err("drain_s".into(), "must be non-negative");
        }
        if self.channel_capacity == 0 {
            err("channel_capacity".into(), "must be at least 1");
        }
        let nodes: BTreeSet<NodeId> = self.nodes.iter().copied().collect();
        if nodes.is_empty() {
            err("nodes".into(), "at least one node is required");
        }
        if nodes.len() != self.nodes.len() {
            err("nodes".into(), "node ids must be unique");
        }
        if self.link.tx_depth == 0 {
            err("link.tx_depth".into(), "must be at least 1");
        }
        if !(self.link.per_byte_ns >= 0.0) {
            err("link.per_byte_ns".into(), "must be non-negative");
        }
        if self.fabric.mode != FabricMode::TwoSided && !self.functions.is_empty() {
            err("fabric.mode".into(), "function scenarios run on the two-sided engine");
        }
        if self.transfer_mode != TransferMode::TwoSided && !self.functions.is_empty() {
            err(
                "transfer_mode".into(),
                "one-sided modes run only in the primitive driver; use the primitive section",
            );
        }
        if self.engine.quantum_base == 0 {
            err("engine.quantum_base".into(), "must be positive");
        }
        if self.engine.active_cap == 0 {
            err("engine.active_cap".into(), "must be at least 1");
        }

        let mut tenants = BTreeMap::new();
        for (i, t) in self.tenants.iter().enumerate() {
            let f = |s: &str| format!("tenants[{i}].{s}");
            if tenants.insert(t.id, t).is_some() {
                err(f("id"), "duplicate tenant id");
            }
            if t.weight == 0 {
                err(f("weight"), "must be at least 1");
            }
            if t.buffers == 0 {
                err(f("buffers"), "must be at least 1");
            }
            if (t.buffer_size as usize) < REQUEST_HEADER_LEN {
                err(f("buffer_size"), "must hold the 8-byte request id");
            }
            if t.buffers as usize <= self.engine.initial_rq_depth {
                err(f("buffers"), "must exceed engine.initial_rq_depth");
            }
        }

        let mut fns: BTreeMap<FnId, &FunctionSpec> = BTreeMap::new();
        for (i, f) in self.functions.iter().enumerate() {
            if fns.insert(f.id, f).is_some() {
                err(format!("functions[{i}].id"), "duplicate function id");
            }
        }
        if let Some(ing) = &self.ingress {
            if fns.contains_key(&ing.gateway.fn_id) {
                err("ingress.gateway.fn_id".into(), "collides with a function id");
            }
        }
        for (i, f) in self.functions.iter().enumerate() {
            let p = |s: &str| format!("functions[{i}].{s}");
            if !nodes.contains(&f.node) {
                err(p("node"), "references an unknown node");
            }
            let tenant = tenants.get(&f.tenant);
            if tenant.is_none() {
                err(p("tenant"), "references an unknown tenant");
            }
            let same_tenant = |dst: FnId| fns.get(&dst).map(|d| d.tenant == f.tenant);
            match &f.app {
                AppSpec::Echo => {}
                AppSpec::Client(c) => {
                    if f.id == FnId(0) {
                        err(p("id"), "clients need a non-zero id");
                    }
                    match same_tenant(c.target) {
                        None => err(p("app.target"), "unreachable: no such function"),
                        Some(false) => err(p("app.target"), "belongs to another tenant"),
                        Some(true) => {
                            if matches!(fns[&c.target].app, AppSpec::Client(_)) {
                                err(p("app.target"), "cannot target a client");
                            }
                        }
                    }
                    if (c.message_size as usize) < REQUEST_HEADER_LEN {
                        err(p("app.message_size"), "must hold the 8-byte request id");
                    }
                    if let Some(t) = tenant {
                        if c.message_size > t.buffer_size {
                            err(p("app.message_size"), "exceeds the tenant buffer size");
                        }
                    }
                    match c.load {
                        Load::Closed { concurrency: 0 } => err(p("app.load.concurrency"), "must be at least 1"),
                        Load::Open { rate } if !(rate > 0.0 && rate.is_finite()) => {
                            err(p("app.load.rate"), "must be positive")
                        }
                        _ => {}
                    }
                    if !(c.start_s >= 0.0) {
                        err(p("app.start_s"), "must be non-negative");
                    }
                    if let Some(stop) = c.stop_s {
                        if !(stop >= c.start_s) {
                            err(p("app.stop_s"), "must not precede start_s");
                        }
                    }
                }
                AppSpec::Chain { calls } => {
                    for (j, c) in calls.iter().enumerate() {
                        match same_tenant(*c) {
                            None => err(p(&format!("app.calls[{j}]")), "unreachable: no such function"),
                            Some(false) => err(p(&format!("app.calls[{j}]")), "belongs to another tenant"),
                            Some(true) => {
                                if matches!(fns[c].app, AppSpec::Client(_)) {
                                    err(p(&format!("app.calls[{j}]")), "cannot call a client");
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(f) = find_cycle(&fns) {
            let i = self.functions.iter().position(|s| s.id == f).unwrap_or_default();
            err(format!("functions[{i}].app.calls"), "call graph has a cycle");
        }

        if let Some(ing) = &self.ingress {
            if !nodes.contains(&ing.node) {
                err("ingress.node".into(), "references an unknown node");
            }
            match tenants.get(&ing.tenant) {
                None => err("ingress.tenant".into(), "references an unknown tenant"),
                Some(t) => {
                    if ing.load.body_size as usize + REQUEST_HEADER_LEN > t.buffer_size as usize {
                        err("ingress.load.body_size".into(), "exceeds the tenant buffer size");
                    }
                }
            }
            if ing.gateway.routes.is_empty() {
                err("ingress.gateway.routes".into(), "at least one path is required");
            }
            for (path, f) in &ing.gateway.routes {
                match fns.get(f) {
                    None => err(format!("ingress.gateway.routes.{path}"), "unreachable: no such function"),
                    Some(d) if d.tenant != ing.tenant => {
                        err(format!("ingress.gateway.routes.{path}"), "belongs to another tenant")
                    }
                    Some(d) if matches!(d.app, AppSpec::Client(_)) => {
                        err(format!("ingress.gateway.routes.{path}"), "cannot route to a client")
                    }
                    _ => {}
                }
            }
            let a = &ing.gateway.autoscaler;
            if a.min_workers == 0 || a.min_workers > a.max_workers {
                err("ingress.gateway.autoscaler".into(), "needs 1 <= min_workers <= max_workers");
            }
            if a.window_ns == 0 {
                err("ingress.gateway.autoscaler.window_ns".into(), "must be positive");
            }
            if !(a.down_threshold < a.up_threshold) {
                err("ingress.gateway.autoscaler".into(), "down_threshold must be below up_threshold");
            }
            for (j, ph) in ing.load.phases.iter().enumerate() {
                if !(ph.start_s >= 0.0 && ph.stop_s >= ph.start_s) {
                    err(format!("ingress.load.phases[{j}]"), "needs 0 <= start_s <= stop_s");
                }
            }
        }

        if let Some(p) = &self.primitive {
            if p.message_size == 0 {
                err("primitive.message_size".into(), "must be positive");
            }
            if p.senders == 0 {
                err("primitive.senders".into(), "must be at least 1");
            }
            if p.staging_buffers == 0 {
                err("primitive.staging_buffers".into(), "must be at least 1");
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

/// A function on a call cycle, if any.
fn find_cycle(fns: &BTreeMap<FnId, &FunctionSpec>) -> Option<FnId> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark: BTreeMap<FnId, Mark> = fns.keys().map(|f| (*f, Mark::New)).collect();
    fn visit(f: FnId, fns: &BTreeMap<FnId, &FunctionSpec>, mark: &mut BTreeMap<FnId, Mark>) -> bool {
        match mark.get(&f) {
            Some(Mark::Open) => return true,
            Some(Mark::Done) | None => return false,
            Some(Mark::New) => {}
        }
        mark.insert(f, Mark::Open);
        if let AppSpec::Chain { calls } = &fns[&f].app {
            for c in calls {
                if visit(*c, fns, mark) {
                    return true;
                }
            }
        }
        mark.insert(f, Mark::Done);
        false
    }
    for f in fns.keys() {
        if visit(*f, fns, &mut mark) {
            return mark.iter().find(|(_, m)| **m == Mark::Open).map(|(f, _)| *f);
        }
    }
    None
}
