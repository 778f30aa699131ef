//! Builds pools, engines and function endpoints from a manifest.

use super::apps::{make_app, App, CallGraph};
use super::manifest::ScenarioConfig;
use super::HarnessError;
use crate::clock::Clock;
use crate::counters::Counters;
use crate::dne::Engine;
use crate::fabric::{LinkBackend, NodeFabric, Tracer};
use crate::ids::{FnId, Nanos, NodeId};
use crate::ingress::Gateway;
use crate::iolib::{intra_route, FunctionContext};
use crate::ipc::EndpointRegistry;
use crate::mempool::PoolDirectory;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;

/// A function endpoint together with the application running on it.
pub struct Hosted {
    pub ctx: FunctionContext,
    pub app: Box<dyn App>,
    pub rng: ChaCha8Rng,
}

pub struct NodeSetup {
    pub engine: Engine,
    pub fns: BTreeMap<FnId, Hosted>,
    pub gateway: Option<Gateway>,
}

pub struct Deployment {
    pub counters: Arc<Counters>,
    pub dir: PoolDirectory,
    pub graph: Arc<CallGraph>,
    pub nodes: BTreeMap<NodeId, NodeSetup>,
}

/// Per-function RNG stream: depends on the seed and the function id only,
/// so moving a function to another node does not change its draws.
pub fn fn_rng(seed: u64, f: FnId) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(f.0 as u64 + 1);
    r
}

pub fn deploy(
    cfg: &ScenarioConfig,
    clock: &Clock,
    mut backends: BTreeMap<NodeId, Box<dyn LinkBackend>>,
    tracer: Option<&Tracer>,
) -> Result<Deployment, HarnessError> {
    let counters = Arc::new(Counters::new());
    let dir = PoolDirectory::new(counters.clone());
    let graph = Arc::new(CallGraph::from_config(cfg));
    let placements = cfg.placements();
    let run_end: Nanos = cfg.duration_ns();
    let mut nodes = BTreeMap::new();
    for &node in &cfg.nodes {
        let backend = backends.remove(&node).expect("one backend per node");
        let mut fabric = NodeFabric::new(node, cfg.fabric, clock.clone(), backend, counters.clone());
        if let Some(t) = tracer {
            fabric.set_tracer(t.clone());
        }
        let registry = EndpointRegistry::new(node, counters.clone());
        let mut engine = Engine::new(cfg.engine, fabric, registry.clone(), counters.clone());
        for t in &cfg.tenants {
            let pool = dir.create_pool(t.id, node, t.buffers, t.buffer_size)?;
            let handle = dir.import_pool(&dir.export_pool(&pool)?, node)?;
            engine.add_tenant(&handle, t.weight)?;
        }
        for &peer in cfg.nodes.iter().filter(|p| **p != node) {
            engine.connect_peer(peer)?;
        }
        engine.set_routes(placements.clone());
        let routes = intra_route(node, &placements);
        let mut fns = BTreeMap::new();
        for f in cfg.functions.iter().filter(|f| f.node == node) {
            let ep = registry.register_endpoint(f.id, f.tenant, cfg.channel_capacity)?;
            let pool = dir.get(f.tenant, node).expect("pool created above");
            fns.insert(
                f.id,
                Hosted {
                    ctx: FunctionContext::new(ep, pool, routes.clone()),
                    app: make_app(&f.app, f.id, &graph, run_end),
                    rng: fn_rng(cfg.seed, f.id),
                },
            );
        }
        let gateway = match &cfg.ingress {
            Some(ing) if ing.node == node => {
                let ep = registry.register_endpoint(ing.gateway.fn_id, ing.tenant, cfg.channel_capacity)?;
                let pool = dir.get(ing.tenant, node).expect("pool created above");
                Some(Gateway::new(ing.gateway.clone(), FunctionContext::new(ep, pool, routes.clone())))
            }
            _ => None,
        };
        nodes.insert(node, NodeSetup { engine, fns, gateway });
    }
    Ok(Deployment {
        counters,
        dir,
        graph,
        nodes,
    })
}
