//! Event trace of the simulated fabric, written as JSON lines.

use crate::ids::{Nanos, NodeId, WrId};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub virtual_time: Nanos,
    pub node: NodeId,
    pub event_kind: String,
    pub wr_id: WrId,
}

#[derive(Debug, Clone, Default)]
pub struct Tracer {
    records: Arc<Mutex<Vec<TraceRecord>>>,
}

impl Tracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, virtual_time: Nanos, node: NodeId, kind: &str, wr_id: WrId) {
        self.records.lock().push(TraceRecord {
            virtual_time,
            node,
            event_kind: kind.to_string(),
            wr_id,
        });
    }

    pub fn len(&self) -> usize {
        self.records.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.records.lock().clone()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> io::Result<()> {
        for r in self.records.lock().iter() {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
