//! Deterministic discrete-event simulator: event queue, mesh plus
//! inter-chip topology, latency and bandwidth accounting, invariant audit
//! hooks and run statistics. Protocol-agnostic: anything implementing
//! [`CoherenceSystem`] can be driven over a trace.

use crate::coherence::{AgentId, AgentKind, BlockAddress, SystemShape};
use crate::protocol::{
    CoherenceSystem, Completion, Envelope, MemOp, Sideband, StatEvent, Violation,
    WireMsg,
};
use crate::workload::TraceRecord;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyConfig {
    pub l1_cycles: u64,
    pub l2_cycles: u64,
    pub llc_bank_cycles: u64,
    pub memory_cycles: u64,
    pub link_cycle: u64,
    pub link_width_bytes: u32,
    pub dir_access_cycles: u64,
    pub filter_access_cycles: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            l1_cycles: 1,
            l2_cycles: 3,
            llc_bank_cycles: 5,
            memory_cycles: 300,
            link_cycle: 1,
            link_width_bytes: 16,
            // Directory and filter lookups overlap the co-located cache
            // access and are not priced separately.
            dir_access_cycles: 0,
            filter_access_cycles: 0,
        }
    }
}

/// Mesh placement of on-chip agents plus all-to-all chip links.
#[derive(Debug, Clone)]
pub struct Topology {
    pub mesh_width: u32,
    pub mesh_height: u32,
    shape: SystemShape,
}

/// One directed link: either a mesh edge inside a chip or a chip-to-chip
/// connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkId {
    Mesh {
        chip: u32,
        from: u32,
        to: u32,
    },
    OffChip {
        from_chip: u32,
        to_chip: u32,
    },
}

impl LinkId {
    pub fn label(&self) -> String {
        match self {
            LinkId::Mesh { chip, from, to } => format!("chip{chip}.mesh.{from}-{to}"),
            LinkId::OffChip { from_chip, to_chip } => format!("offchip.{from_chip}-{to_chip}"),
        }
    }
}

impl Topology {
    pub fn new(shape: SystemShape) -> Self {
        let nodes = shape.cores_per_chip.max(shape.llc_banks_per_chip);
        let width = (nodes as f64).sqrt().ceil() as u32;
        let height = nodes.div_ceil(width);
        Topology {
            mesh_width: width.max(1),
            mesh_height: height.max(1),
            shape,
        }
    }

    /// Mesh node an agent sits on. Core i and LLC bank i share node i; the
    /// memory controller hangs off node 0.
    pub fn node_of(&self, agent: AgentId) -> u32 {
        match agent.kind {
            AgentKind::CoreCache => agent.unit,
            AgentKind::LlcBank | AgentKind::DfLlc => agent.unit,
            AgentKind::MemCtrl => 0,
        }
    }

    fn coords(&self, node: u32) -> (u32, u32) {
        (node % self.mesh_width, node / self.mesh_width)
    }

    /// Directed mesh edges along the XY route between two nodes of a chip.
    fn mesh_route(&self, chip: u32, from: u32, to: u32, out: &mut Vec<LinkId>) {
        let (mut x, mut y) = self.coords(from);
        let (tx, ty) = self.coords(to);
        let mut cur = from;
        while x != tx {
            x = if tx > x { x + 1 } else { x - 1 };
            let next = y * self.mesh_width + x;
            out.push(LinkId::Mesh {
                chip,
                from: cur,
                to: next,
            });
            cur = next;
        }
        while y != ty {
            y = if ty > y { y + 1 } else { y - 1 };
            let next = y * self.mesh_width + x;
            out.push(LinkId::Mesh {
                chip,
                from: cur,
                to: next,
            });
            cur = next;
        }
    }

    /// Full link path between two agents: mesh hops inside the source chip,
    /// one off-chip hop when chips differ, mesh hops inside the destination.
    pub fn route(&self, src: AgentId, dst: AgentId) -> Vec<LinkId> {
        let mut path = Vec::new();
        if src.chip == dst.chip {
            self.mesh_route(src.chip, self.node_of(src), self.node_of(dst), &mut path);
        } else {
            // Off-chip traffic funnels through each chip's port at node 0.
            self.mesh_route(src.chip, self.node_of(src), 0, &mut path);
            path.push(LinkId::OffChip {
                from_chip: src.chip,
                to_chip: dst.chip,
            });
            self.mesh_route(dst.chip, 0, self.node_of(dst), &mut path);
        }
        path
    }

    pub fn hops(&self, src: AgentId, dst: AgentId) -> u64 {
        self.route(src, dst).len() as u64
    }

    pub fn shape(&self) -> &SystemShape {
        &self.shape
    }
}

/// Uncontended traversal latency: hops plus pipelined flit serialization.
pub fn route_latency(topo: &Topology, lat: &LatencyConfig, src: AgentId, dst: AgentId, bytes: u32) -> u64 {
    let hops = topo.hops(src, dst);
    if hops == 0 {
        return 0;
    }
    let flits = bytes.div_ceil(lat.link_width_bytes) as u64;
    hops * lat.link_cycle + (flits - 1)
}

#[derive(Debug, Clone, Default)]
pub struct LinkStats {
    pub flits: u64,
}

/// Per-run ledger of what happened.
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub completion_cycle: u64,
    pub accesses: u64,
    pub reads: u64,
    pub writes: u64,
    /// End-to-end latency and access count per servicing-agent class.
    pub latency: BTreeMap<&'static str, (u64, u64)>,
    pub counters: BTreeMap<&'static str, u64>,
    pub links: BTreeMap<String, LinkStats>,
    pub total_latency: u64,
    pub messages_sent: u64,
    pub bytes_sent: u64,
}

impl RunStats {
    pub fn counter(&self, name: &str) -> u64 {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub fn avg_latency(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.total_latency as f64 / self.accesses as f64
        }
    }

    fn bump(&mut self, name: &'static str) {
        *self.counters.entry(name).or_insert(0) += 1;
    }

    fn record_event(&mut self, e: StatEvent) {
        self.bump(stat_event_name(e));
    }
}

pub fn stat_event_name(e: StatEvent) -> &'static str {
    match e {
        StatEvent::L1Miss => "l1_misses",
        StatEvent::L2Miss => "l2_misses",
        StatEvent::LlcMiss => "llc_misses",
        StatEvent::Reconstruction => "reconstructions",
        StatEvent::SystemReconstruction => "system_reconstructions",
        StatEvent::FllcFalsePositive => "fllc_false_positives",
        StatEvent::FmemFalsePositive => "fmem_false_positives",
        StatEvent::FilterOverflow => "filter_overflows",
        StatEvent::ExternalInvalidation => "external_invalidations",
        StatEvent::ExternalInvalidationMiss => "external_invalidation_misses",
        StatEvent::RainbowDirEvictionInval => "rainbow_dir_eviction_invals",
        StatEvent::MemoryAccess => "memory_accesses",
        StatEvent::Unicast => "unicasts",
        StatEvent::Multicast => "multicasts",
        StatEvent::Broadcast => "broadcasts",
        StatEvent::SilverRecall => "silver_recalls",
        StatEvent::SystemWideInvalidation => "system_wide_invalidations",
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("protocol violation at cycle {cycle}: {violations:?}")]
    ProtocolViolation {
        cycle: u64,
        violations: Vec<Violation>,
    },
    #[error("simulation wedged at cycle {cycle}: {pending} accesses pending with no events")]
    Wedged { cycle: u64, pending: usize },
    #[error("event budget exhausted after {events} events")]
    EventBudget { events: u64 },
}

#[derive(Debug, Clone)]
pub struct EngineParams {
    pub lat: LatencyConfig,
    /// Run a full invariant audit every this many cycles (None = only at end).
    pub audit_every: Option<u64>,
    pub max_events: u64,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            lat: LatencyConfig::default(),
            audit_every: None,
            max_events: u64::MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    /// Deliver the head of channel (src, dst).
    Deliver(AgentId, AgentId),
    /// Core issues its next trace record.
    CoreNext(u32),
}

type ChannelKey = (AgentId, AgentId);

/// Trace-driven run of one protocol instance. Deterministic for a fixed
/// (system, params, trace).
pub fn run<S: CoherenceSystem>(
    system: &mut S,
    params: &EngineParams,
    trace: &[TraceRecord],
) -> Result<RunStats, RunError> {
    let shape = *system.shape();
    let topo = Topology::new(shape);
    let mut stats = RunStats::default();
    let mut queue: BinaryHeap<Reverse<(u64, u64, EventKind)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut channels: HashMap<ChannelKey, VecDeque<Envelope<S::Msg>>> = HashMap::new();
    let mut link_free: HashMap<LinkId, u64> = HashMap::new();

    // Per-core program: indices into the trace.
    let mut programs: Vec<VecDeque<usize>> = vec![VecDeque::new(); shape.total_cores() as usize];
    for (i, r) in trace.iter().enumerate() {
        programs[r.core as usize].push_back(i);
    }
    let mut issue_time: Vec<u64> = vec![0; shape.total_cores() as usize];
    let mut outstanding = 0usize;
    let mut last_version: HashMap<BlockAddress, u64> = HashMap::new();

    for core in 0..shape.total_cores() {
        if !programs[core as usize].is_empty() {
            queue.push(Reverse((0, seq, EventKind::CoreNext(core))));
            seq += 1;
        }
    }
    if let Some(every) = params.audit_every {
        queue.push(Reverse((every, seq, EventKind::CoreNext(u32::MAX))));
        seq += 1;
    }

    let mut now = 0u64;
    let mut events = 0u64;

    // Local helper applied to every sideband a handler produced.
    macro_rules! drain_sideband {
        ($sb:expr) => {{
            let sb: Sideband<S::Msg> = $sb;
            for ev in sb.events {
                stats.record_event(ev);
            }
            for c in sb.completions {
                apply_completion::<S>(&c, now, &mut stats, &mut issue_time, &mut last_version)
                    .map_err(|v| RunError::ProtocolViolation {
                        cycle: now,
                        violations: vec![v],
                    })?;
                outstanding -= 1;
                if !programs[c.core as usize].is_empty() {
                    queue.push(Reverse((now + 1, seq, EventKind::CoreNext(c.core))));
                    seq += 1;
                }
            }
            for out in sb.out {
                let depart = now + out.delay;
                let bytes = out.env.msg.size_bytes();
                let flits = bytes.div_ceil(params.lat.link_width_bytes) as u64;
                stats.messages_sent += 1;
                stats.bytes_sent += bytes as u64;
                let path = topo.route(out.env.src, out.env.dst);
                let mut t = depart;
                for link in path {
                    let free = link_free.entry(link).or_insert(0);
                    let start = t.max(*free);
                    *free = start + flits * params.lat.link_cycle;
                    stats.links.entry(link.label()).or_default().flits += flits;
                    t = start + params.lat.link_cycle;
                }
                let arrival = if topo.hops(out.env.src, out.env.dst) == 0 {
                    depart
                } else {
                    t + (flits - 1)
                };
                let key = (out.env.src, out.env.dst);
                channels.entry(key).or_default().push_back(out.env);
                queue.push(Reverse((arrival, seq, EventKind::Deliver(key.0, key.1))));
                seq += 1;
            }
        }};
    }

    while let Some(Reverse((time, _s, kind))) = queue.pop() {
        now = time;
        events += 1;
        if events > params.max_events {
            return Err(RunError::EventBudget { events });
        }
        match kind {
            EventKind::CoreNext(u32::MAX) => {
                // Periodic audit tick.
                let in_flight: Vec<Envelope<S::Msg>> =
                    channels.values().flatten().cloned().collect();
                let violations = system.audit(&in_flight);
                if !violations.is_empty() {
                    return Err(RunError::ProtocolViolation {
                        cycle: now,
                        violations,
                    });
                }
                if outstanding > 0 || programs.iter().any(|p| !p.is_empty()) {
                    let every = params.audit_every.unwrap();
                    queue.push(Reverse((now + every, seq, EventKind::CoreNext(u32::MAX))));
                    seq += 1;
                }
            }
            EventKind::CoreNext(core) => {
                if system.core_busy(core) {
                    continue;
                }
                let Some(idx) = programs[core as usize].pop_front() else {
                    continue;
                };
                let rec = trace[idx];
                issue_time[core as usize] = now;
                outstanding += 1;
                stats.accesses += 1;
                match rec.op {
                    MemOp::Read => stats.reads += 1,
                    MemOp::Write => stats.writes += 1,
                }
                let mut sb = Sideband::new();
                system
                    .issue(core, rec.op, rec.addr, &mut sb)
                    .map_err(|v| RunError::ProtocolViolation {
                        cycle: now,
                        violations: vec![v],
                    })?;
                drain_sideband!(sb);
            }
            EventKind::Deliver(src, dst) => {
                let env = channels
                    .get_mut(&(src, dst))
                    .and_then(|q| q.pop_front())
                    .expect("scheduled delivery with empty channel");
                let mut sb = Sideband::new();
                system
                    .deliver(env, &mut sb)
                    .map_err(|v| RunError::ProtocolViolation {
                        cycle: now,
                        violations: vec![v],
                    })?;
                drain_sideband!(sb);
            }
        }
    }

    if outstanding > 0 {
        return Err(RunError::Wedged {
            cycle: now,
            pending: outstanding,
        });
    }

    // Final audit; channels must be empty by now.
    let leftovers: Vec<Envelope<S::Msg>> = channels.values().flatten().cloned().collect();
    debug_assert!(leftovers.is_empty());
    let violations = system.audit(&leftovers);
    if !violations.is_empty() {
        return Err(RunError::ProtocolViolation {
            cycle: now,
            violations,
        });
    }

    stats.completion_cycle = if stats.accesses == 0 { 0 } else { now };
    let breakdown_total: u64 = stats.latency.values().map(|(c, _)| *c).sum();
    debug_assert_eq!(breakdown_total, stats.total_latency, "accounting closure");
    Ok(stats)
}

fn apply_completion<S: CoherenceSystem>(
    c: &Completion,
    now: u64,
    stats: &mut RunStats,
    issue_time: &mut [u64],
    last_version: &mut HashMap<BlockAddress, u64>,
) -> Result<(), Violation> {
    let latency = now.saturating_sub(issue_time[c.core as usize]) + c.service_cycles;
    stats.total_latency += latency;
    let slot = stats.latency.entry(c.served_by.label()).or_insert((0, 0));
    slot.0 += latency;
    slot.1 += 1;
    let cur = last_version.get(&c.addr).copied().unwrap_or(0);
    match c.op {
        MemOp::Read => {
            if c.version != cur {
                return Err(Violation::ValueCoherence {
                    addr: c.addr,
                    core: c.core,
                    got: c.version,
                    want: cur,
                });
            }
        }
        MemOp::Write => {
            if c.version != cur + 1 {
                return Err(Violation::ValueCoherence {
                    addr: c.addr,
                    core: c.core,
                    got: c.version,
                    want: cur + 1,
                });
            }
            last_version.insert(c.addr, c.version);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> SystemShape {
        SystemShape::new(2, 4, 4)
    }

    #[test]
    fn manhattan_route_latency() {
        let topo = Topology::new(shape());
        let lat = LatencyConfig::default();
        // Node 0 -> node 3 on a 2x2 mesh is 2 hops.
        let a = AgentId::core(&shape(), 0);
        let b = AgentId::core(&shape(), 3);
        assert_eq!(route_latency(&topo, &lat, a, b, 8), 2);
        assert_eq!(route_latency(&topo, &lat, a, b, 72), 2 + 4);
        assert_eq!(route_latency(&topo, &lat, a, a, 8), 0);
    }

    #[test]
    fn off_chip_route_adds_port_hops() {
        let topo = Topology::new(shape());
        let a = AgentId::core(&shape(), 3); // chip 0 node 3
        let b = AgentId::mem_ctrl(1); // chip 1 node 0
        // node3 -> node0 (2 hops) + off-chip (1) + node0 -> node0 (0).
        assert_eq!(topo.hops(a, b), 3);
        let path = topo.route(a, b);
        assert!(path
            .iter()
            .any(|l| matches!(l, LinkId::OffChip { from_chip: 0, to_chip: 1 })));
    }
}
