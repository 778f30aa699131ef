use crate::ids::TenantId;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

pub const DEFAULT_QUANTUM_BASE: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SchedulingMode {
    #[default]
    Dwrr,
    Fcfs,
}

#[derive(Debug, Clone, Copy, Default)]
struct Slot {
    weight: u32,
    deficit: u64,
    in_turn: bool,
    active: bool,
}

/// Pull-based deficit weighted round robin with byte cost.
///
/// The tenant at the front of the ring gets `weight * quantum_base` bytes
/// of credit when its turn starts and keeps the front while its credit
/// covers the head descriptor. Residual credit carries into the next turn;
/// a tenant that runs out of work is dropped from the ring and forfeits it.
#[derive(Debug, Clone)]
pub struct Dwrr {
    quantum_base: u32,
    ring: VecDeque<TenantId>,
    slots: BTreeMap<TenantId, Slot>,
}

impl Dwrr {
    pub fn new(quantum_base: u32) -> Self {
        Dwrr {
            quantum_base: quantum_base.max(1),
            ring: VecDeque::new(),
            slots: BTreeMap::new(),
        }
    }

    pub fn set_weight(&mut self, tenant: TenantId, weight: u32) {
        self.slots.entry(tenant).or_default().weight = weight.max(1);
    }

    pub fn weight(&self, tenant: TenantId) -> u32 {
        self.slots.get(&tenant).map_or(0, |s| s.weight)
    }

    pub fn deficit(&self, tenant: TenantId) -> u64 {
        self.slots.get(&tenant).map_or(0, |s| s.deficit)
    }

    pub fn quantum(&self, tenant: TenantId) -> u64 {
        self.weight(tenant) as u64 * self.quantum_base as u64
    }

    /// Backlogged tenants in service order.
    pub fn ring(&self) -> impl Iterator<Item = TenantId> + '_ {
        self.ring.iter().copied()
    }

    /// Marks `tenant` backlogged. New arrivals join at the back of the ring.
    pub fn activate(&mut self, tenant: TenantId) {
        let slot = self.slots.entry(tenant).or_insert(Slot {
            weight: 1,
            ..Default::default()
        });
        if !slot.active {
            *slot = Slot {
                weight: slot.weight,
                active: true,
                ..Default::default()
            };
            self.ring.push_back(tenant);
        }
    }

    /// Drops an idle tenant from the ring; its deficit resets to zero.
    pub fn deactivate(&mut self, tenant: TenantId) {
        if let Some(slot) = self.slots.get_mut(&tenant) {
            if slot.active {
                slot.active = false;
                slot.deficit = 0;
                slot.in_turn = false;
                self.ring.retain(|t| *t != tenant);
            }
        }
    }

    /// Picks the tenant whose head descriptor goes next and charges its
    /// cost. `head_cost` returns `None` for an empty queue; `eligible`
    /// says whether the head could be posted right now. An ineligible
    /// tenant moves to the back without new credit; once every backlogged
    /// tenant has been ineligible in a row the call gives up.
    pub fn next(
        &mut self,
        mut head_cost: impl FnMut(TenantId) -> Option<u32>,
        mut eligible: impl FnMut(TenantId) -> bool,
    ) -> Option<TenantId> {
        let mut blocked = 0usize;
        loop {
            let &t = self.ring.front()?;
            let Some(cost) = head_cost(t) else {
                self.deactivate(t);
                continue;
            };
            if !eligible(t) {
                self.ring.rotate_left(1);
                blocked += 1;
                if blocked >= self.ring.len() {
                    return None;
                }
                continue;
            }
            let quantum = self.quantum(t);
            let slot = self.slots.get_mut(&t).expect("ring members have slots");
            if !slot.in_turn {
                slot.deficit += quantum;
                slot.in_turn = true;
            }
            if slot.deficit >= cost as u64 {
                slot.deficit -= cost as u64;
                return Some(t);
            }
            slot.in_turn = false;
            self.ring.rotate_left(1);
            blocked = 0;
        }
    }
}
