//! Per-window time series, latency samples and the fairness analysis.

use crate::ids::{FnId, Nanos, TenantId, NANOS_PER_SEC};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct WindowAcc {
    delivered: u64,
    bytes: u64,
    latency_ns: u128,
}

/// Collects completions as they happen.
#[derive(Debug, Clone)]
pub struct Recorder {
    window_ns: Nanos,
    windows: BTreeMap<(u64, TenantId), WindowAcc>,
    latencies: BTreeMap<TenantId, Vec<Nanos>>,
    issued: BTreeMap<TenantId, u64>,
    pub mismatches: u64,
    pub unexpected: u64,
    pub send_failures: u64,
    pub digests: BTreeMap<(FnId, u64), [u8; 32]>,
}

impl Recorder {
    pub fn new(window_ns: Nanos) -> Self {
        Recorder {
            window_ns: window_ns.max(1),
            windows: BTreeMap::new(),
            latencies: BTreeMap::new(),
            issued: BTreeMap::new(),
            mismatches: 0,
            unexpected: 0,
            send_failures: 0,
            digests: BTreeMap::new(),
        }
    }

    pub fn issued(&mut self, t: TenantId) {
        *self.issued.entry(t).or_default() += 1;
    }

    pub fn complete(&mut self, t: TenantId, now: Nanos, bytes: u64, latency: Nanos) {
        let w = self.windows.entry((now / self.window_ns, t)).or_default();
        w.delivered += 1;
        w.bytes += bytes;
        w.latency_ns += latency as u128;
        self.latencies.entry(t).or_default().push(latency);
    }

    pub fn merge(&mut self, other: Recorder) {
        for (k, v) in other.windows {
            let w = self.windows.entry(k).or_default();
            w.delivered += v.delivered;
            w.bytes += v.bytes;
            w.latency_ns += v.latency_ns;
        }
        for (t, mut l) in other.latencies {
            self.latencies.entry(t).or_default().append(&mut l);
        }
        for (t, n) in other.issued {
            *self.issued.entry(t).or_default() += n;
        }
        self.mismatches += other.mismatches;
        self.unexpected += other.unexpected;
        self.send_failures += other.send_failures;
        self.digests.extend(other.digests);
    }

    pub fn delivered(&self, t: TenantId) -> u64 {
        self.latencies.get(&t).map_or(0, |l| l.len() as u64)
    }

    pub fn total_delivered(&self) -> u64 {
        self.latencies.values().map(|l| l.len() as u64).sum()
    }

    /// SHA-256 over every recorded response digest in request-id order.
    pub fn response_digest(&self) -> Option<String> {
        use sha2::{Digest, Sha256};
        if self.digests.is_empty() {
            return None;
        }
        let mut h = Sha256::new();
        for ((_, rid), d) in &self.digests {
            h.update(rid.to_le_bytes());
            h.update(d);
        }
        Some(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn tenant_summary(&self, t: TenantId, weight: u32) -> TenantSummary {
        let mut l = self.latencies.get(&t).cloned().unwrap_or_default();
        l.sort_unstable();
        let pct = |p: f64| -> f64 {
            if l.is_empty() {
                return 0.0;
            }
            let i = ((p * l.len() as f64).ceil() as usize).clamp(1, l.len()) - 1;
            l[i] as f64 / 1e3
        };
        TenantSummary {
            weight,
            issued: self.issued.get(&t).copied().unwrap_or(0),
            delivered: l.len() as u64,
            bytes: self
                .windows
                .iter()
                .filter(|((_, tt), _)| *tt == t)
                .map(|(_, w)| w.bytes)
                .sum(),
            mean_latency_us: if l.is_empty() {
                0.0
            } else {
                l.iter().map(|x| *x as f64).sum::<f64>() / l.len() as f64 / 1e3
            },
            p50_latency_us: pct(0.50),
            p99_latency_us: pct(0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenantSummary {
    pub weight: u32,
    pub issued: u64,
    pub delivered: u64,
    pub bytes: u64,
    pub mean_latency_us: f64,
    pub p50_latency_us: f64,
    pub p99_latency_us: f64,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub tenant: TenantId,
    pub weight: u32,
    pub delivered: u64,
    pub bytes: u64,
    pub mean_latency_us: f64,
    /// 1 when the tenant's load was on for the whole window.
    pub active: u8,
    pub workers: usize,
}

pub const CSV_HEADER: &str =
    "window_start_s,window_end_s,tenant,weight,delivered,bytes,mean_latency_us,active,workers";

/// Tenant activity intervals and per-window worker counts, from the scenario.
pub struct WindowLayout<'a> {
    pub windows: u64,
    pub window_ns: Nanos,
    pub tenants: &'a BTreeMap<TenantId, u32>,
    pub active: &'a BTreeMap<TenantId, Vec<(Nanos, Nanos)>>,
    pub workers: &'a [usize],
}

pub fn window_rows(rec: &Recorder, layout: &WindowLayout) -> Vec<WindowRow> {
    let mut rows = Vec::new();
    for w in 0..layout.windows {
        let (s, e) = (w * layout.window_ns, (w + 1) * layout.window_ns);
        for (t, weight) in layout.tenants {
            let acc = rec.windows.get(&(w, *t)).copied().unwrap_or_default();
            let active = layout
                .active
                .get(t)
                .is_some_and(|iv| iv.iter().any(|(a, b)| *a <= s && e <= *b));
            rows.push(WindowRow {
                window_start_s: s as f64 / NANOS_PER_SEC as f64,
                window_end_s: e as f64 / NANOS_PER_SEC as f64,
                tenant: *t,
                weight: *weight,
                delivered: acc.delivered,
                bytes: acc.bytes,
                mean_latency_us: if acc.delivered == 0 {
                    0.0
                } else {
                    acc.latency_ns as f64 / acc.delivered as f64 / 1e3
                },
                active: active as u8,
                workers: layout.workers.get(w as usize).copied().unwrap_or(0),
            });
        }
    }
    rows
}

pub fn to_csv(rows: &[WindowRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{:.3},{:.3},{},{},{},{},{:.3},{},{}",
            r.window_start_s,
            r.window_end_s,
            r.tenant.0,
            r.weight,
            r.delivered,
            r.bytes,
            r.mean_latency_us,
            r.active,
            r.workers
        );
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<WindowRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        Some(h) => return Err(format!("unexpected header: {h}")),
        None => return Err("empty file".into()),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| format!("line {}: bad {what}", i + 2);
        if f.len() != 9 {
            return Err(bad("field count"));
        }
        rows.push(WindowRow {
            window_start_s: f[0].parse().map_err(|_| bad("window_start_s"))?,
            window_end_s: f[1].parse().map_err(|_| bad("window_end_s"))?,
            tenant: TenantId(f[2].parse().map_err(|_| bad("tenant"))?),
            weight: f[3].parse().map_err(|_| bad("weight"))?,
            delivered: f[4].parse().map_err(|_| bad("delivered"))?,
            bytes: f[5].parse().map_err(|_| bad("bytes"))?,
            mean_latency_us: f[6].parse().map_err(|_| bad("mean_latency_us"))?,
            active: f[7].parse().map_err(|_| bad("active"))?,
            workers: f[8].parse().map_err(|_| bad("workers"))?,
        });
    }
    Ok(rows)
}

/// A maximal run of windows with the same set of active tenants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessPhase {
    pub start_s: f64,
    pub end_s: f64,
    pub tenants: Vec<TenantId>,
    pub windows_used: usize,
    pub expected_share: BTreeMap<TenantId, f64>,
    pub mean_share: BTreeMap<TenantId, f64>,
    /// Largest |share - expected| / expected over the used windows.
    pub max_relative_error: f64,
    /// Smallest per-window share / expected share, per tenant.
    pub min_entitlement: BTreeMap<TenantId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub settle_windows: u32,
    pub phases: Vec<FairnessPhase>,
    /// Maximum relative share error over every multi-tenant phase.
    pub ratio_error: f64,
    /// Smallest entitlement fraction any tenant saw in a multi-tenant window.
    pub min_entitlement: BTreeMap<TenantId, f64>,
}

/// Splits the series into phases by active-tenant set, drops the first
/// `settle` windows of each phase, and compares per-window delivered
/// shares with the weight shares.
pub fn fairness(rows: &[WindowRow], settle: u32) -> FairnessReport {
    let mut by_window: BTreeMap<u64, Vec<&WindowRow>> = BTreeMap::new();
    for r in rows {
        by_window.entry((r.window_start_s * 1e6).round() as u64).or_default().push(r);
    }
    let mut phases: Vec<(BTreeSet<TenantId>, Vec<Vec<&WindowRow>>)> = Vec::new();
    for rs in by_window.into_values() {
        let set: BTreeSet<TenantId> = rs.iter().filter(|r| r.active == 1).map(|r| r.tenant).collect();
        match phases.last_mut() {
            Some((s, ws)) if *s == set => ws.push(rs),
            _ => phases.push((set, vec![rs])),
        }
    }
    let mut report = FairnessReport {
        settle_windows: settle,
        phases: Vec::new(),
        ratio_error: 0.0,
        min_entitlement: BTreeMap::new(),
    };
    for (set, windows) in phases {
        if set.is_empty() {
            continue;
        }
        let start_s = windows[0][0].window_start_s;
        let end_s = windows.last().unwrap()[0].window_end_s;
        let weights: BTreeMap<TenantId, u32> = windows[0]
            .iter()
            .filter(|r| set.contains(&r.tenant))
            .map(|r| (r.tenant, r.weight))
            .collect();
        let wsum: u32 = weights.values().sum();
        let expected: BTreeMap<TenantId, f64> = weights.iter().map(|(t, w)| (*t, *w as f64 / wsum as f64)).collect();
        let mut sums: BTreeMap<TenantId, f64> = BTreeMap::new();
        let mut min_ent: BTreeMap<TenantId, f64> = BTreeMap::new();
        let mut max_err: f64 = 0.0;
        let mut used = 0;
        for rs in windows.iter().skip(settle as usize) {
            let total: u64 = rs.iter().filter(|r| set.contains(&r.tenant)).map(|r| r.delivered).sum();
            if total == 0 {
                continue;
            }
            used += 1;
            for r in rs.iter().filter(|r| set.contains(&r.tenant)) {
                let share = r.delivered as f64 / total as f64;
                let exp = expected[&r.tenant];
                *sums.entry(r.tenant).or_default() += share;
                max_err = max_err.max((share - exp).abs() / exp);
                let e = min_ent.entry(r.tenant).or_insert(f64::INFINITY);
                *e = e.min(share / exp);
            }
        }
        let mean_share = sums.into_iter().map(|(t, s)| (t, s / used.max(1) as f64)).collect();
        if set.len() >= 2 && used > 0 {
            report.ratio_error = report.ratio_error.max(max_err);
            for (t, v) in &min_ent {
                let e = report.min_entitlement.entry(*t).or_insert(f64::INFINITY);
                *e = e.min(*v);
            }
        }
        report.phases.push(FairnessPhase {
            start_s,
            end_s,
            tenants: set.into_iter().collect(),
            windows_used: used,
            expected_share: expected,
            mean_share,
            max_relative_error: max_err,
            min_entitlement: min_ent,
        });
    }
    report
}
