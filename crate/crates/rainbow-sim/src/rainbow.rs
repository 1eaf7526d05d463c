//! Colored-token coherence protocol with hybrid directory/filter tracking.
//!
//! Permission currency per block: one gold token, one silver per chip, one
//! bronze per core. A single bronze permits reading, the full set permits
//! writing. Each chip controller pairs a small sparse directory (D-LLC) with
//! a counting Bloom filter (F-LLC) over the chip's private caches; each home
//! memory controller pairs D-MEM with F-MEM over whole chips. Directories are
//! loosely inclusive: displacing an entry only loses precision and never
//! generates an invalidation.
//!
//! Every token-bearing message travels on a core<->own-controller or a
//! controller<->home channel; inter-chip transfers bounce through the home.
//! With per-channel FIFO delivery this makes controller-side token ledgers
//! exact, which the audits lean on. Controllers release a transaction when
//! they send its grant; FIFO ordering on the grant channel guarantees the
//! grant lands before any later invalidation for the same block.

use crate::coherence::{AgentId, AgentKind, BlockAddress, MessageKind, SystemShape, TokenSet};
use crate::config::MachineParams;
use crate::dlcbf::DlcbfFilter;
use crate::protocol::{
    CoherenceSystem, Completion, Envelope, Fault, FaultPlan, MemOp, ServiceClass, SetAssocCache,
    Sideband, StatEvent, Violation, WireMsg,
};
use crate::sparse_dir::SparseDirectory;
use std::collections::{BTreeMap, BTreeSet};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RMsg {
    // core -> chip controller
    ReadReq,
    WriteReq,
    EvictNotify { tokens: TokenSet, version: u64, dirty: bool },
    CollectReply { round: u32, tokens: TokenSet, version: u64, dirty: bool, released: bool },
    CountReply { round: u32, count: u32 },
    GrantReply { round: u32, tokens: TokenSet, version: u64, dirty: bool, released: bool },
    // chip controller -> core
    Grant { tokens: TokenSet, version: u64, dirty: bool, served: ServiceClass, is_final: bool },
    Inval { round: u32 },
    TokenCountQuery { round: u32 },
    ReadFwd { round: u32 },
    ExtReadFwd { round: u32, req_cores: u32 },
    // chip controller -> home
    MemReadReq { req: u32 },
    MemWriteReq { req: u32 },
    ChipCollectReply { tokens: TokenSet, version: u64, dirty: bool, now_empty: bool },
    ChipGrantReply { tokens: TokenSet, version: u64, dirty: bool, now_empty: bool },
    MemWriteBack { tokens: TokenSet, version: u64, dirty: bool, now_empty: bool },
    SilverReply { tokens: TokenSet },
    // home -> chip controller
    HomeGrant { tokens: TokenSet, version: u64, dirty: bool, served: ServiceClass },
    ChipInval { reconstruct: bool },
    ChipReadFwd { reconstruct: bool, req_cores: u32 },
    SilverRecall,
}

impl WireMsg for RMsg {
    fn kind(&self) -> MessageKind {
        match self {
            RMsg::ReadReq | RMsg::ReadFwd { .. } | RMsg::ExtReadFwd { .. } => MessageKind::ReadReq,
            RMsg::WriteReq | RMsg::MemWriteReq { .. } => MessageKind::WriteReq,
            RMsg::EvictNotify { .. } => MessageKind::EvictNotify,
            RMsg::CollectReply { .. } | RMsg::ChipCollectReply { .. } | RMsg::SilverReply { .. } => {
                MessageKind::TokenResp
            }
            RMsg::CountReply { .. } => MessageKind::TokenCountReply,
            RMsg::Grant { .. }
            | RMsg::HomeGrant { .. }
            | RMsg::GrantReply { .. }
            | RMsg::ChipGrantReply { .. } => MessageKind::DataResp,
            RMsg::Inval { .. } | RMsg::SilverRecall => MessageKind::Inval,
            RMsg::TokenCountQuery { .. } => MessageKind::TokenCountQuery,
            RMsg::MemReadReq { .. } => MessageKind::MemReadReq,
            RMsg::MemWriteBack { .. } => MessageKind::MemWriteBack,
            RMsg::ChipInval { reconstruct } => {
                if *reconstruct {
                    MessageKind::ReconstructBcast
                } else {
                    MessageKind::Inval
                }
            }
            RMsg::ChipReadFwd { reconstruct, .. } => {
                if *reconstruct {
                    MessageKind::ReconstructBcast
                } else {
                    MessageKind::ReadReq
                }
            }
        }
    }

    fn carries_data(&self) -> bool {
        match self {
            RMsg::Grant { .. } | RMsg::HomeGrant { .. } => true,
            RMsg::GrantReply { tokens, .. } | RMsg::ChipGrantReply { tokens, .. } => {
                !tokens.is_empty()
            }
            RMsg::CollectReply { dirty, .. }
            | RMsg::ChipCollectReply { dirty, .. }
            | RMsg::EvictNotify { dirty, .. }
            | RMsg::MemWriteBack { dirty, .. } => *dirty,
            _ => false,
        }
    }

    fn tokens(&self) -> TokenSet {
        match self {
            RMsg::EvictNotify { tokens, .. }
            | RMsg::CollectReply { tokens, .. }
            | RMsg::GrantReply { tokens, .. }
            | RMsg::Grant { tokens, .. }
            | RMsg::ChipCollectReply { tokens, .. }
            | RMsg::ChipGrantReply { tokens, .. }
            | RMsg::MemWriteBack { tokens, .. }
            | RMsg::SilverReply { tokens }
            | RMsg::HomeGrant { tokens, .. } => *tokens,
            _ => TokenSet::EMPTY,
        }
    }
}

/// A counting filter plus the shadow bookkeeping that makes its drift
/// observable. `owed` records increments the filter rejected (overflow); the
/// affected address is then treated as resident until the debt drains.
/// `shadow` is the exact reference count the filter is supposed to encode.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Tracked {
    filter: DlcbfFilter,
    owed: BTreeMap<BlockAddress, u32>,
    shadow: BTreeMap<BlockAddress, u32>,
    domain: &'static str,
}

impl Tracked {
    fn new(filter: DlcbfFilter, domain: &'static str) -> Self {
        Tracked {
            filter,
            owed: BTreeMap::new(),
            shadow: BTreeMap::new(),
            domain,
        }
    }

    fn hit(&self, addr: BlockAddress) -> bool {
        self.filter.contains(addr) || self.owed.get(&addr).copied().unwrap_or(0) > 0
    }

    fn shadow_count(&self, addr: BlockAddress) -> u32 {
        self.shadow.get(&addr).copied().unwrap_or(0)
    }

    /// Returns true if the filter overflowed and the increment went on the
    /// debt list instead.
    fn inc(&mut self, addr: BlockAddress) -> bool {
        *self.shadow.entry(addr).or_insert(0) += 1;
        match self.filter.increment(addr) {
            Ok(()) => false,
            Err(_) => {
                *self.owed.entry(addr).or_insert(0) += 1;
                true
            }
        }
    }

    fn dec(&mut self, addr: BlockAddress) -> Result<(), Violation> {
        match self.shadow.get_mut(&addr) {
            Some(n) if *n > 0 => {
                *n -= 1;
                if *n == 0 {
                    self.shadow.remove(&addr);
                }
            }
            _ => {
                return Err(Violation::FilterBalance {
                    domain: self.domain.into(),
                    addr,
                    detail: "decrement with zero shadow count".into(),
                })
            }
        }
        if let Some(o) = self.owed.get_mut(&addr) {
            *o -= 1;
            if *o == 0 {
                self.owed.remove(&addr);
            }
            return Ok(());
        }
        self.filter.decrement(addr).map_err(|e| Violation::FilterBalance {
            domain: self.domain.into(),
            addr,
            detail: e.to_string(),
        })
    }
}

/// A private-cache or LLC line: the tokens held plus the data version they
/// vouch for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrivLine {
    pub tokens: TokenSet,
    pub version: u64,
    pub dirty: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CoreState {
    l1: SetAssocCache<PrivLine>,
    l2: SetAssocCache<PrivLine>,
    pending: Option<(MemOp, BlockAddress)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum LocalKind {
    Read,
    Write,
    Evict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum LocalPhase {
    WaitOwner,
    WaitCounts,
    WaitCollect,
    AtHome,
    /// An external collection seized this transaction's gains; it restarts
    /// from scratch once the external transaction finishes.
    Robbed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct LocalTxn {
    kind: LocalKind,
    /// Local core index of the requestor (unused for Evict).
    req: u32,
    phase: LocalPhase,
    round: u32,
    acc: TokenSet,
    acc_version: u64,
    acc_dirty: bool,
    pending: u32,
    counts: Vec<(u32, u32)>,
    allocated_dir: bool,
}

impl LocalTxn {
    fn new(kind: LocalKind, req: u32) -> Self {
        LocalTxn {
            kind,
            req,
            phase: LocalPhase::Robbed, // overwritten by dispatch
            round: 0,
            acc: TokenSet::EMPTY,
            acc_version: 0,
            acc_dirty: false,
            pending: 0,
            counts: Vec::new(),
            allocated_dir: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ExtKind {
    Collect,
    Read { req_cores: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ExtPhase {
    WaitOwner,
    WaitCounts,
    WaitCollect,
}

/// A demand from the home, handled in a slot separate from the local
/// transaction so home-driven collections can never deadlock behind it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ExtTxn {
    kind: ExtKind,
    phase: ExtPhase,
    round: u32,
    acc: TokenSet,
    acc_version: u64,
    acc_dirty: bool,
    pending: u32,
    counts: Vec<(u32, u32)>,
    /// Rounds of robbed local transactions whose token replies this
    /// collection absorbs.
    absorbed: BTreeSet<u32>,
    tried_counts: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ChipState {
    llc: SetAssocCache<PrivLine>,
    dllc: SparseDirectory,
    fllc: Tracked,
    /// Exact per-core token ledger for blocks held in this chip's private
    /// caches, maintained at the controller from the FIFO message streams.
    held: BTreeMap<BlockAddress, BTreeMap<u32, TokenSet>>,
    local: BTreeMap<BlockAddress, LocalTxn>,
    ext: BTreeMap<BlockAddress, ExtTxn>,
    queue: BTreeMap<BlockAddress, VecDeque<(u32, MemOp)>>,
    round_ctr: u32,
    /// Addresses whose LLC set is overfull but had no evictable victim;
    /// retried when a transaction releases.
    overfull: BTreeSet<BlockAddress>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum HomeKind {
    Read { chip: u32, core: u32 },
    Write { chip: u32, core: u32 },
    SystemInval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum HomePhase {
    WaitOwner,
    WaitReconstruct,
    WaitRecall,
    WaitCollect,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct HomeTxn {
    kind: HomeKind,
    phase: HomePhase,
    acc: TokenSet,
    acc_version: u64,
    acc_dirty: bool,
    pending: u32,
    allocated_dir: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct HomeReq {
    op: MemOp,
    chip: u32,
    core: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct HomeState {
    dmem: SparseDirectory,
    fmem: Tracked,
    /// Tokens currently resting at memory. Absent entry means the full set.
    mem_tokens: BTreeMap<BlockAddress, TokenSet>,
    /// Last version written back to memory. Absent entry means 0.
    mem_version: BTreeMap<BlockAddress, u64>,
    /// Exact per-chip token ledger for this home's blocks.
    chip_held: BTreeMap<BlockAddress, BTreeMap<u32, TokenSet>>,
    active: BTreeMap<BlockAddress, HomeTxn>,
    queue: BTreeMap<BlockAddress, VecDeque<HomeReq>>,
}

#[derive(Debug, Clone)]
pub struct RainbowSystem {
    params: MachineParams,
    shape: SystemShape,
    full: TokenSet,
    fault: FaultPlan,
    cores: Vec<CoreState>,
    chips: Vec<ChipState>,
    homes: Vec<HomeState>,
}

impl RainbowSystem {
    pub fn new(params: MachineParams, fault: FaultPlan) -> Self {
        let shape = params.shape;
        let full = TokenSet::full_set(&shape);
        let cores = (0..shape.total_cores())
            .map(|_| CoreState {
                l1: SetAssocCache::new(params.l1),
                l2: SetAssocCache::new(params.l2),
                pending: None,
            })
            .collect();
        let chips = (0..shape.num_chips)
            .map(|_| ChipState {
                llc: SetAssocCache::new(params.llc),
                dllc: SparseDirectory::new(params.dllc),
                fllc: Tracked::new(DlcbfFilter::new(params.fllc), "F-LLC"),
                held: BTreeMap::new(),
                local: BTreeMap::new(),
                ext: BTreeMap::new(),
                queue: BTreeMap::new(),
                round_ctr: 0,
                overfull: BTreeSet::new(),
            })
            .collect();
        let homes = (0..shape.num_chips)
            .map(|_| HomeState {
                dmem: SparseDirectory::new(params.dmem),
                fmem: Tracked::new(DlcbfFilter::new(params.fmem), "F-MEM"),
                mem_tokens: BTreeMap::new(),
                mem_version: BTreeMap::new(),
                chip_held: BTreeMap::new(),
                active: BTreeMap::new(),
                queue: BTreeMap::new(),
            })
            .collect();
        RainbowSystem {
            params,
            shape,
            full,
            fault,
            cores,
            chips,
            homes,
        }
    }

    pub fn fault_fired(&self) -> bool {
        self.fault.fired
    }

    fn ctrl_agent(&self, chip: u32, addr: BlockAddress) -> AgentId {
        AgentId::llc_bank(chip, self.shape.bank_of(addr))
    }

    fn home_agent(&self, addr: BlockAddress) -> AgentId {
        AgentId::mem_ctrl(self.shape.home_chip_of(addr))
    }

    fn core_agent(&self, chip: u32, local: u32) -> AgentId {
        AgentId {
            kind: AgentKind::CoreCache,
            chip,
            unit: local,
        }
    }

    fn next_round(&mut self, chip: u32) -> u32 {
        let c = &mut self.chips[chip as usize];
        c.round_ctr = c.round_ctr.wrapping_add(1);
        c.round_ctr
    }

    fn merge_tokens(
        &self,
        a: TokenSet,
        b: TokenSet,
        addr: BlockAddress,
    ) -> Result<TokenSet, Violation> {
        a.merge(&b, &self.shape).map_err(|_| Violation::Conservation {
            addr,
            sum: a.saturating_add(&b),
            expected: self.full,
        })
    }

}

// ---------------------------------------------------------------- core side

impl RainbowSystem {
    fn core_issue(
        &mut self,
        global: u32,
        op: MemOp,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let chip = self.shape.chip_of_core(global);
        let local = self.shape.local_core(global);
        let st = &mut self.cores[global as usize];
        if st.pending.is_some() {
            return Err(Violation::Stuck {
                detail: format!("core {global} issued with an access outstanding"),
            });
        }
        let full = self.full;
        let suff = |t: &TokenSet| match op {
            MemOp::Read => t.bronze >= 1,
            MemOp::Write => *t == full,
        };
        if let Some(line) = st.l1.get(addr) {
            if suff(&line.tokens) {
                if op == MemOp::Write {
                    line.version += 1;
                    line.dirty = true;
                }
                let version = line.version;
                sb.complete(Completion {
                    core: global,
                    op,
                    addr,
                    version,
                    served_by: ServiceClass::L1,
                    service_cycles: lat.l1_cycles,
                });
                return Ok(());
            }
        }
        sb.event(StatEvent::L1Miss);
        let promoted = st.l2.peek(addr).copied().filter(|l| suff(&l.tokens));
        if let Some(mut line) = promoted {
            st.l2.remove(addr);
            if op == MemOp::Write {
                line.version += 1;
                line.dirty = true;
            }
            let version = line.version;
            sb.complete(Completion {
                core: global,
                op,
                addr,
                version,
                served_by: ServiceClass::L2,
                service_cycles: lat.l1_cycles + lat.l2_cycles,
            });
            // promote into L1; existing L1 line for addr was insufficient and
            // absent by construction (a line lives in exactly one level)
            self.core_install(global, addr, line, sb);
            return Ok(());
        }
        sb.event(StatEvent::L2Miss);
        st.pending = Some((op, addr));
        let msg = match op {
            MemOp::Read => RMsg::ReadReq,
            MemOp::Write => RMsg::WriteReq,
        };
        sb.send(
            self.core_agent(chip, local),
            self.ctrl_agent(chip, addr),
            addr,
            msg,
            lat.l1_cycles + lat.l2_cycles,
        );
        Ok(())
    }

    /// Install a line into L1, cascading evictions L1 -> L2 -> controller.
    /// The address of an outstanding access is never chosen as a victim (a
    /// partial write grant may be parked there).
    fn core_install(&mut self, global: u32, addr: BlockAddress, line: PrivLine, sb: &mut Sideband<RMsg>) {
        let lat = self.params.lat;
        let chip = self.shape.chip_of_core(global);
        let local = self.shape.local_core(global);
        let st = &mut self.cores[global as usize];
        let keep = st.pending.map(|(_, a)| a);
        st.l1.insert(addr, line);
        if let Some(v1) = st.l1.victim_in_set(addr, |a, _| Some(a) != keep && a != addr) {
            let demoted = st.l1.remove(v1).expect("victim present");
            st.l2.insert(v1, demoted);
            if let Some(v2) = st.l2.victim_in_set(v1, |a, _| Some(a) != keep) {
                let out = st.l2.remove(v2).expect("victim present");
                sb.send(
                    self.core_agent(chip, local),
                    self.ctrl_agent(chip, v2),
                    v2,
                    RMsg::EvictNotify {
                        tokens: out.tokens,
                        version: out.version,
                        dirty: out.dirty,
                    },
                    lat.l1_cycles + lat.l2_cycles,
                );
            }
        }
    }

    fn core_take_line(&mut self, global: u32, addr: BlockAddress) -> Option<PrivLine> {
        let st = &mut self.cores[global as usize];
        st.l1.remove(addr).or_else(|| st.l2.remove(addr))
    }

    fn core_line_mut(&mut self, global: u32, addr: BlockAddress) -> Option<&mut PrivLine> {
        let st = &mut self.cores[global as usize];
        if st.l1.peek(addr).is_some() {
            return st.l1.peek_mut(addr);
        }
        st.l2.peek_mut(addr)
    }

    fn core_deliver(
        &mut self,
        env: Envelope<RMsg>,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let addr = env.addr;
        let chip = env.dst.chip;
        let local = env.dst.unit;
        let global = self.shape.global_core(chip, local);
        let me = self.core_agent(chip, local);
        let ctrl = self.ctrl_agent(chip, addr);
        match env.msg {
            RMsg::Grant {
                tokens,
                version,
                dirty,
                served,
                is_final,
            } => {
                let (op, pend_addr) = self.cores[global as usize].pending.ok_or_else(|| {
                    Violation::Stuck {
                        detail: format!("grant for idle core {global}"),
                    }
                })?;
                if pend_addr != addr {
                    return Err(Violation::Stuck {
                        detail: format!("grant for wrong address at core {global}"),
                    });
                }
                let prior = self.core_take_line(global, addr).unwrap_or(PrivLine {
                    tokens: TokenSet::EMPTY,
                    version: 0,
                    dirty: false,
                });
                let tokens = self.merge_tokens(prior.tokens, tokens, addr)?;
                let mut line = PrivLine {
                    tokens,
                    version: prior.version.max(version),
                    dirty: prior.dirty || dirty,
                };
                if is_final {
                    self.cores[global as usize].pending = None;
                    match op {
                        MemOp::Read => {
                            if line.tokens.bronze < 1 {
                                return Err(Violation::Stuck {
                                    detail: format!("read grant without bronze at core {global}"),
                                });
                            }
                        }
                        MemOp::Write => {
                            if line.tokens != self.full {
                                return Err(Violation::Stuck {
                                    detail: format!(
                                        "write grant left core {global} short of the full set"
                                    ),
                                });
                            }
                            line.version += 1;
                            line.dirty = true;
                        }
                    }
                    sb.complete(Completion {
                        core: global,
                        op,
                        addr,
                        version: line.version,
                        served_by: served,
                        service_cycles: lat.l1_cycles,
                    });
                }
                self.core_install(global, addr, line, sb);
                Ok(())
            }
            RMsg::Inval { round } => {
                let line = self.core_take_line(global, addr);
                let (tokens, version, dirty, released) = match line {
                    Some(l) => (l.tokens, l.version, l.dirty, true),
                    None => (TokenSet::EMPTY, 0, false, false),
                };
                sb.send(
                    me,
                    ctrl,
                    addr,
                    RMsg::CollectReply {
                        round,
                        tokens,
                        version,
                        dirty,
                        released,
                    },
                    lat.l1_cycles,
                );
                Ok(())
            }
            RMsg::TokenCountQuery { round } => {
                let st = &self.cores[global as usize];
                let count = st
                    .l1
                    .peek(addr)
                    .or_else(|| st.l2.peek(addr))
                    .map(|l| l.tokens.gold as u32 + l.tokens.silver + l.tokens.bronze)
                    .unwrap_or(0);
                sb.send(me, ctrl, addr, RMsg::CountReply { round, count }, lat.l1_cycles);
                Ok(())
            }
            RMsg::ReadFwd { round } => {
                let snapshot = {
                    let st = &self.cores[global as usize];
                    st.l1.peek(addr).or_else(|| st.l2.peek(addr)).copied()
                };
                let reply = match snapshot {
                    Some(l) if l.tokens.bronze >= 2 => {
                        self.core_line_mut(global, addr).expect("line present").tokens.bronze -= 1;
                        RMsg::GrantReply {
                            round,
                            tokens: TokenSet::new(0, 0, 1),
                            version: l.version,
                            dirty: l.dirty,
                            released: false,
                        }
                    }
                    Some(_) => {
                        // no spare bronze: hand the whole line off
                        let l = self.core_take_line(global, addr).expect("line present");
                        RMsg::GrantReply {
                            round,
                            tokens: l.tokens,
                            version: l.version,
                            dirty: l.dirty,
                            released: true,
                        }
                    }
                    None => RMsg::GrantReply {
                        round,
                        tokens: TokenSet::EMPTY,
                        version: 0,
                        dirty: false,
                        released: false,
                    },
                };
                sb.send(me, ctrl, addr, reply, lat.l1_cycles);
                Ok(())
            }
            RMsg::ExtReadFwd { round, req_cores } => {
                let snapshot = {
                    let st = &self.cores[global as usize];
                    st.l1.peek(addr).or_else(|| st.l2.peek(addr)).copied()
                };
                let reply = match snapshot {
                    Some(l) => {
                        if let Ok((granted, retained)) =
                            l.tokens.split_for_external_read(req_cores)
                        {
                            self.core_line_mut(global, addr).expect("line present").tokens =
                                retained;
                            RMsg::GrantReply {
                                round,
                                tokens: granted,
                                version: l.version,
                                dirty: l.dirty,
                                released: false,
                            }
                        } else if l.tokens.bronze >= 2 {
                            self.core_line_mut(global, addr)
                                .expect("line present")
                                .tokens
                                .bronze -= 1;
                            RMsg::GrantReply {
                                round,
                                tokens: TokenSet::new(0, 0, 1),
                                version: l.version,
                                dirty: l.dirty,
                                released: false,
                            }
                        } else {
                            let l = self.core_take_line(global, addr).expect("line present");
                            RMsg::GrantReply {
                                round,
                                tokens: l.tokens,
                                version: l.version,
                                dirty: l.dirty,
                                released: true,
                            }
                        }
                    }
                    None => RMsg::GrantReply {
                        round,
                        tokens: TokenSet::EMPTY,
                        version: 0,
                        dirty: false,
                        released: false,
                    },
                };
                sb.send(me, ctrl, addr, reply, lat.l1_cycles);
                Ok(())
            }
            other => Err(Violation::Stuck {
                detail: format!("unexpected message at core {global}: {other:?}"),
            }),
        }
    }
}

/// Component-wise sum with the conservation bound turned into a violation.
fn merged(
    shape: &SystemShape,
    full: TokenSet,
    a: TokenSet,
    b: TokenSet,
    addr: BlockAddress,
) -> Result<TokenSet, Violation> {
    a.merge(&b, shape).map_err(|_| Violation::Conservation {
        addr,
        sum: a.saturating_add(&b),
        expected: full,
    })
}

// ---------------------------------------------------------------- chip side

impl RainbowSystem {
    fn chip_deliver(
        &mut self,
        env: Envelope<RMsg>,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let c = env.dst.chip as usize;
        let addr = env.addr;
        match env.msg {
            RMsg::ReadReq | RMsg::WriteReq => {
                let r = env.src.unit;
                let kind = if matches!(env.msg, RMsg::ReadReq) {
                    LocalKind::Read
                } else {
                    LocalKind::Write
                };
                let op = if kind == LocalKind::Read { MemOp::Read } else { MemOp::Write };
                let busy = {
                    let ch = &self.chips[c];
                    ch.local.contains_key(&addr)
                        || ch.ext.contains_key(&addr)
                        || ch.queue.get(&addr).map(|q| !q.is_empty()).unwrap_or(false)
                };
                if busy {
                    self.chips[c].queue.entry(addr).or_default().push_back((r, op));
                    return Ok(());
                }
                self.chips[c].local.insert(addr, LocalTxn::new(kind, r));
                self.chip_dispatch(c, addr, sb)
            }
            RMsg::EvictNotify { tokens, version, dirty } => {
                let r = env.src.unit;
                self.chip_release_core(c, addr, r, tokens)?;
                self.chip_absorb(c, addr, tokens, version, dirty, sb)
            }
            RMsg::CollectReply { round, tokens, version, dirty, released } => {
                let r = env.src.unit;
                if released {
                    self.chip_release_core(c, addr, r, tokens)?;
                }
                self.chip_token_reply(c, addr, round, tokens, version, dirty, sb)
            }
            RMsg::GrantReply { round, tokens, version, dirty, released } => {
                let r = env.src.unit;
                if released {
                    self.chip_release_core(c, addr, r, tokens)?;
                } else if !tokens.is_empty() {
                    self.chip_deduct_core(c, addr, r, tokens)?;
                }
                self.chip_grant_reply(c, addr, round, tokens, version, dirty, sb)
            }
            RMsg::CountReply { round, count } => {
                let r = env.src.unit;
                self.chip_count_reply(c, addr, round, r, count, sb)
            }
            RMsg::HomeGrant { tokens, version, dirty, served } => {
                let (req, acc, accv, accd) = {
                    let t = self.chips[c].local.get_mut(&addr).ok_or_else(|| Violation::Stuck {
                        detail: format!("home grant with no transaction on chip {c}"),
                    })?;
                    if t.phase != LocalPhase::AtHome {
                        return Err(Violation::Stuck {
                            detail: format!("home grant in phase {:?} on chip {c}", t.phase),
                        });
                    }
                    let acc = std::mem::replace(&mut t.acc, TokenSet::EMPTY);
                    (t.req, acc, t.acc_version, t.acc_dirty)
                };
                let total = merged(&self.shape, self.full, acc, tokens, addr)?;
                self.chip_send_grant(
                    c,
                    addr,
                    req,
                    total,
                    accv.max(version),
                    accd || dirty,
                    served,
                    true,
                    sb,
                )
            }
            RMsg::ChipInval { .. } => self.ext_start_collect(c, addr, sb),
            RMsg::ChipReadFwd { reconstruct: _, req_cores } => {
                debug_assert!(self.chips[c].ext.get(&addr).is_none());
                self.chips[c].ext.insert(
                    addr,
                    ExtTxn {
                        kind: ExtKind::Read { req_cores },
                        phase: ExtPhase::WaitOwner,
                        round: 0,
                        acc: TokenSet::EMPTY,
                        acc_version: 0,
                        acc_dirty: false,
                        pending: 0,
                        counts: Vec::new(),
                        absorbed: BTreeSet::new(),
                        tried_counts: false,
                    },
                );
                self.dispatch_ext_read(c, addr, sb)
            }
            RMsg::SilverRecall => {
                let lat = self.params.lat;
                let tokens = {
                    let ch = &mut self.chips[c];
                    let lone = TokenSet::new(0, 1, 0);
                    match ch.llc.peek(addr).map(|l| l.tokens) {
                        // donate a spare silver, but never empty the chip:
                        // the home has no way to learn of that departure
                        Some(t) if t.silver >= 1 && !(t == lone && !ch.held.contains_key(&addr)) => {
                            let lm = ch.llc.peek_mut(addr).expect("line present");
                            lm.tokens.silver -= 1;
                            if lm.tokens.is_empty() {
                                ch.llc.remove(addr);
                            }
                            lone
                        }
                        _ => TokenSet::EMPTY,
                    }
                };
                sb.send(
                    self.ctrl_agent(c as u32, addr),
                    self.home_agent(addr),
                    addr,
                    RMsg::SilverReply { tokens },
                    lat.llc_bank_cycles,
                );
                Ok(())
            }
            other => Err(Violation::Stuck {
                detail: format!("unexpected message at chip {c}: {other:?}"),
            }),
        }
    }

    // ---- controller-side token ledger -------------------------------------

    fn chip_release_core(
        &mut self,
        c: usize,
        addr: BlockAddress,
        r: u32,
        reported: TokenSet,
    ) -> Result<(), Violation> {
        // The reply reflects the core's holdings when the demand reached it.
        // A grant sent after the demand is still in flight behind it, so the
        // ledger may legitimately exceed the report; the remainder stays and
        // the core reinstalls it when the grant lands.
        let gone = {
            let ch = &mut self.chips[c];
            let e = ch
                .held
                .get_mut(&addr)
                .and_then(|m| m.get_mut(&r))
                .ok_or(Violation::Conservation {
                    addr,
                    sum: reported,
                    expected: TokenSet::EMPTY,
                })?;
            if !e.contains(&reported) {
                return Err(Violation::Conservation {
                    addr,
                    sum: reported,
                    expected: *e,
                });
            }
            *e = e.minus(&reported);
            e.is_empty()
        };
        if gone {
            let ch = &mut self.chips[c];
            let m = ch.held.get_mut(&addr).expect("entry present");
            m.remove(&r);
            if m.is_empty() {
                ch.held.remove(&addr);
            }
            if !self.fault.fire(Fault::SkipFllcDecrement) {
                self.chips[c].fllc.dec(addr)?;
            }
            let _ = self.chips[c].dllc.update_sharers(addr, None, Some(r), None);
        }
        Ok(())
    }

    fn chip_deduct_core(
        &mut self,
        c: usize,
        addr: BlockAddress,
        r: u32,
        granted: TokenSet,
    ) -> Result<(), Violation> {
        let ch = &mut self.chips[c];
        let e = ch
            .held
            .get_mut(&addr)
            .and_then(|m| m.get_mut(&r))
            .ok_or(Violation::Conservation {
                addr,
                sum: granted,
                expected: TokenSet::EMPTY,
            })?;
        if !e.contains(&granted) {
            return Err(Violation::Conservation {
                addr,
                sum: granted,
                expected: *e,
            });
        }
        *e = e.minus(&granted);
        Ok(())
    }

    /// Route stray tokens (evictions, late replies) into the transaction
    /// that should accumulate them, or failing that into the LLC.
    fn chip_absorb(
        &mut self,
        c: usize,
        addr: BlockAddress,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        if tokens.is_empty() {
            return Ok(());
        }
        let shape = self.shape;
        let full = self.full;
        let ext_collect = self.chips[c]
            .ext
            .get(&addr)
            .map(|e| e.kind == ExtKind::Collect)
            .unwrap_or(false);
        if ext_collect {
            let e = self.chips[c].ext.get_mut(&addr).expect("ext present");
            e.acc = merged(&shape, full, e.acc, tokens, addr)?;
            e.acc_version = e.acc_version.max(version);
            e.acc_dirty |= dirty;
            return Ok(());
        }
        let local_absorbs = self.chips[c]
            .local
            .get(&addr)
            .map(|l| {
                matches!(
                    l.phase,
                    LocalPhase::WaitOwner | LocalPhase::WaitCounts | LocalPhase::WaitCollect
                )
            })
            .unwrap_or(false);
        if local_absorbs {
            let l = self.chips[c].local.get_mut(&addr).expect("local present");
            l.acc = merged(&shape, full, l.acc, tokens, addr)?;
            l.acc_version = l.acc_version.max(version);
            l.acc_dirty |= dirty;
            return Ok(());
        }
        self.llc_deposit(c, addr, tokens, version, dirty, sb)
    }

    fn llc_deposit(
        &mut self,
        c: usize,
        addr: BlockAddress,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        let existing = self.chips[c].llc.peek(addr).copied();
        match existing {
            Some(line) => {
                let t = merged(&shape, full, line.tokens, tokens, addr)?;
                let lm = self.chips[c].llc.get(addr).expect("line present");
                lm.tokens = t;
                lm.version = lm.version.max(version);
                lm.dirty |= dirty;
                Ok(())
            }
            None => {
                self.chips[c].llc.insert(addr, PrivLine { tokens, version, dirty });
                self.maybe_evict_llc(c, addr, sb)
            }
        }
    }

    fn maybe_evict_llc(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        loop {
            let (victim, blocked) = {
                let ch = &self.chips[c];
                let busy = |a: BlockAddress| {
                    ch.local.contains_key(&a)
                        || ch.ext.contains_key(&a)
                        || ch.queue.get(&a).map(|q| !q.is_empty()).unwrap_or(false)
                };
                match ch.llc.victim_in_set(addr, |a, _| !busy(a)) {
                    Some(v) => (Some(v), false),
                    None => (None, ch.llc.victim_in_set(addr, |_, _| true).is_some()),
                }
            };
            match victim {
                Some(v) => self.start_llc_eviction(c, v, sb)?,
                None => {
                    if blocked {
                        self.chips[c].overfull.insert(addr);
                    } else {
                        self.chips[c].overfull.remove(&addr);
                    }
                    return Ok(());
                }
            }
        }
    }

    fn retry_overfull(&mut self, c: usize, sb: &mut Sideband<RMsg>) -> Result<(), Violation> {
        let addrs: Vec<BlockAddress> = self.chips[c].overfull.iter().copied().collect();
        for a in addrs {
            self.chips[c].overfull.remove(&a);
            self.maybe_evict_llc(c, a, sb)?;
        }
        Ok(())
    }

    fn start_llc_eviction(
        &mut self,
        c: usize,
        v: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let line = self.chips[c].llc.remove(v).expect("victim present");
        let mut t = LocalTxn::new(LocalKind::Evict, u32::MAX);
        t.acc = line.tokens;
        t.acc_version = line.version;
        t.acc_dirty = line.dirty;
        self.chips[c].local.insert(v, t);
        self.dispatch_evict(c, v, sb)
    }

    fn send_invals(
        &mut self,
        c: usize,
        addr: BlockAddress,
        round: u32,
        targets: &[u32],
        sb: &mut Sideband<RMsg>,
    ) {
        let skip = if !targets.is_empty() && self.fault.fire(Fault::SkipInvalidation) {
            Some(targets[0])
        } else {
            None
        };
        let delay = self.params.lat.llc_bank_cycles;
        let ctrl = self.ctrl_agent(c as u32, addr);
        for &t in targets {
            if Some(t) == skip {
                continue;
            }
            sb.send(ctrl, self.core_agent(c as u32, t), addr, RMsg::Inval { round }, delay);
        }
    }

    // ---- local transaction machine ----------------------------------------

    fn chip_dispatch(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        match self.chips[c].local.get(&addr).map(|t| t.kind) {
            Some(LocalKind::Read) => self.dispatch_local_read(c, addr, sb),
            Some(LocalKind::Write) => self.dispatch_local_write(c, addr, sb),
            Some(LocalKind::Evict) => self.dispatch_evict(c, addr, sb),
            None => Ok(()),
        }
    }

    fn dispatch_local_read(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let shape = self.shape;
        let full = self.full;
        let round = self.next_round(c as u32);
        let (req, acc, accv, accd) = {
            let t = self.chips[c].local.get_mut(&addr).expect("txn present");
            t.round = round;
            t.pending = 0;
            t.counts.clear();
            (t.req, t.acc, t.acc_version, t.acc_dirty)
        };
        if acc.bronze >= 1 {
            self.chips[c].local.get_mut(&addr).expect("txn").acc = TokenSet::EMPTY;
            return self.chip_send_grant(
                c, addr, req, acc, accv, accd, ServiceClass::OnChip, true, sb,
            );
        }
        // 1: directory hit, forward to an on-chip owner
        let owner = {
            let ch = &mut self.chips[c];
            let holders: Vec<u32> = ch
                .held
                .get(&addr)
                .map(|m| m.keys().copied().collect())
                .unwrap_or_default();
            ch.dllc.lookup(addr).and_then(|e| {
                e.silver_owner
                    .filter(|o| *o != req && holders.contains(o))
                    .or_else(|| e.sharer_list().find(|s| *s != req && holders.contains(s)))
            })
        };
        if let Some(o) = owner {
            {
                let t = self.chips[c].local.get_mut(&addr).expect("txn");
                t.phase = LocalPhase::WaitOwner;
                t.pending = 1;
            }
            sb.event(StatEvent::Unicast);
            sb.send(
                self.ctrl_agent(c as u32, addr),
                self.core_agent(c as u32, o),
                addr,
                RMsg::ReadFwd { round },
                lat.llc_bank_cycles,
            );
            return Ok(());
        }
        // 2: LLC copy with a spare bronze grants everything it holds
        if self.chips[c].llc.peek(addr).map(|l| l.tokens.bronze >= 1).unwrap_or(false) {
            let line = self.chips[c].llc.remove(addr).expect("line present");
            let total = merged(&shape, full, acc, line.tokens, addr)?;
            self.chips[c].local.get_mut(&addr).expect("txn").acc = TokenSet::EMPTY;
            return self.chip_send_grant(
                c,
                addr,
                req,
                total,
                accv.max(line.version),
                accd || line.dirty,
                ServiceClass::OnChip,
                true,
                sb,
            );
        }
        // 3: filter hit, reconstruct sharer knowledge by querying the cores
        if self.chips[c].fllc.hit(addr) {
            let targets: Vec<u32> = (0..shape.cores_per_chip).filter(|x| *x != req).collect();
            if !targets.is_empty() {
                sb.event(StatEvent::Reconstruction);
                if self.chips[c].dllc.peek(addr).is_none() {
                    self.chips[c].dllc.allocate_silent(addr, 1 << req, None);
                    self.chips[c].local.get_mut(&addr).expect("txn").allocated_dir = true;
                }
                {
                    let t = self.chips[c].local.get_mut(&addr).expect("txn");
                    t.phase = LocalPhase::WaitCounts;
                    t.pending = targets.len() as u32;
                }
                sb.event(StatEvent::Multicast);
                for &x in &targets {
                    sb.send(
                        self.ctrl_agent(c as u32, addr),
                        self.core_agent(c as u32, x),
                        addr,
                        RMsg::TokenCountQuery { round },
                        lat.llc_bank_cycles,
                    );
                }
                return Ok(());
            }
            sb.event(StatEvent::FllcFalsePositive);
        }
        // 4: ask the home
        self.local_to_home(c, addr, MemOp::Read, sb)
    }

    fn dispatch_local_write(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        let round = self.next_round(c as u32);
        {
            let t = self.chips[c].local.get_mut(&addr).expect("txn present");
            t.round = round;
            t.pending = 0;
            t.counts.clear();
        }
        // fold any LLC copy into the accumulator up front
        if let Some(line) = self.chips[c].llc.remove(addr) {
            let t = self.chips[c].local.get_mut(&addr).expect("txn");
            let acc = merged(&shape, full, t.acc, line.tokens, addr)?;
            t.acc = acc;
            t.acc_version = t.acc_version.max(line.version);
            t.acc_dirty |= line.dirty;
        }
        let (req, acc) = {
            let t = self.chips[c].local.get(&addr).expect("txn");
            (t.req, t.acc)
        };
        let kept = self.chips[c]
            .held
            .get(&addr)
            .and_then(|m| m.get(&req))
            .copied()
            .unwrap_or(TokenSet::EMPTY);
        if merged(&shape, full, kept, acc, addr)? == full {
            return self.finish_local_write(c, addr, sb);
        }
        let others: Vec<u32> = self.chips[c]
            .held
            .get(&addr)
            .map(|m| m.keys().copied().filter(|k| *k != req).collect())
            .unwrap_or_default();
        // 1: directory hit. The dllc may underreport sharers (reconstruction
        // allocates an entry before every holder is known), so collect from
        // the exact ledger; the hit only scopes the multicast.
        let targets: Vec<u32> = if self.chips[c].dllc.lookup(addr).is_some() {
            others.clone()
        } else {
            Vec::new()
        };
        if !targets.is_empty() {
            {
                let t = self.chips[c].local.get_mut(&addr).expect("txn");
                t.phase = LocalPhase::WaitCollect;
                t.pending = targets.len() as u32;
            }
            sb.event(StatEvent::Multicast);
            self.send_invals(c, addr, round, &targets, sb);
            return Ok(());
        }
        // 3: filter hit, demand everything with a chip-wide broadcast
        if self.chips[c].fllc.hit(addr) {
            if !others.is_empty() {
                let targets: Vec<u32> =
                    (0..shape.cores_per_chip).filter(|x| *x != req).collect();
                if self.chips[c].dllc.peek(addr).is_none() {
                    let mut sharers = 1u64 << req;
                    for &o in &others {
                        sharers |= 1 << o;
                    }
                    self.chips[c].dllc.allocate_silent(addr, sharers, None);
                    self.chips[c].local.get_mut(&addr).expect("txn").allocated_dir = true;
                }
                {
                    let t = self.chips[c].local.get_mut(&addr).expect("txn");
                    t.phase = LocalPhase::WaitCollect;
                    t.pending = targets.len() as u32;
                }
                sb.event(StatEvent::Broadcast);
                self.send_invals(c, addr, round, &targets, sb);
                return Ok(());
            }
            if kept.is_empty() {
                sb.event(StatEvent::FllcFalsePositive);
            }
        }
        self.finish_local_write(c, addr, sb)
    }

    fn finish_local_write(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        let (req, acc, accv, accd) = {
            let t = self.chips[c].local.get_mut(&addr).expect("txn present");
            let acc = std::mem::replace(&mut t.acc, TokenSet::EMPTY);
            (t.req, acc, t.acc_version, t.acc_dirty)
        };
        let kept = self.chips[c]
            .held
            .get(&addr)
            .and_then(|m| m.get(&req))
            .copied()
            .unwrap_or(TokenSet::EMPTY);
        if merged(&shape, full, kept, acc, addr)? == full {
            return self.chip_send_grant(
                c, addr, req, acc, accv, accd, ServiceClass::OnChip, true, sb,
            );
        }
        if !acc.is_empty() {
            // park the partial collection with the requestor; completion
            // waits for the home's grant to top it up
            self.chip_send_grant(
                c, addr, req, acc, accv, accd, ServiceClass::OnChip, false, sb,
            )?;
        }
        self.local_to_home(c, addr, MemOp::Write, sb)
    }

    fn local_to_home(
        &mut self,
        c: usize,
        addr: BlockAddress,
        op: MemOp,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let (req, acc, accv, accd) = {
            let t = self.chips[c].local.get_mut(&addr).expect("txn present");
            let acc = std::mem::replace(&mut t.acc, TokenSet::EMPTY);
            t.phase = LocalPhase::AtHome;
            t.pending = 1;
            (t.req, acc, t.acc_version, t.acc_dirty)
        };
        if !acc.is_empty() {
            // read escalation may carry a bronze-less remainder; it parks in
            // the LLC so the home's grant arithmetic stays exact
            self.llc_deposit(c, addr, acc, accv, accd, sb)?;
        }
        sb.event(StatEvent::LlcMiss);
        let req_global = self.shape.global_core(c as u32, req);
        let msg = match op {
            MemOp::Read => RMsg::MemReadReq { req: req_global },
            MemOp::Write => RMsg::MemWriteReq { req: req_global },
        };
        sb.send(
            self.ctrl_agent(c as u32, addr),
            self.home_agent(addr),
            addr,
            msg,
            lat.llc_bank_cycles,
        );
        Ok(())
    }

    fn dispatch_evict(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let round = self.next_round(c as u32);
        let targets: Vec<u32> = self.chips[c]
            .held
            .get(&addr)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        {
            let t = self.chips[c].local.get_mut(&addr).expect("txn present");
            t.round = round;
            t.phase = LocalPhase::WaitCollect;
            t.pending = targets.len() as u32;
        }
        if targets.is_empty() {
            return self.finish_evict(c, addr, sb);
        }
        sb.event(StatEvent::Multicast);
        self.send_invals(c, addr, round, &targets, sb);
        Ok(())
    }

    fn finish_evict(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let t = self.chips[c].local.remove(&addr).expect("txn present");
        let now_empty = self.chip_now_empty(c, addr);
        sb.send(
            self.ctrl_agent(c as u32, addr),
            self.home_agent(addr),
            addr,
            RMsg::MemWriteBack {
                tokens: t.acc,
                version: t.acc_version,
                dirty: t.acc_dirty,
                now_empty,
            },
            lat.llc_bank_cycles,
        );
        self.chip_try_start(c, addr, sb)?;
        self.retry_overfull(c, sb)
    }

    fn chip_now_empty(&self, c: usize, addr: BlockAddress) -> bool {
        let ch = &self.chips[c];
        !ch.held.contains_key(&addr)
            && ch.llc.peek(addr).is_none()
            && !ch.local.get(&addr).map(|l| !l.acc.is_empty()).unwrap_or(false)
    }

    fn chip_send_grant(
        &mut self,
        c: usize,
        addr: BlockAddress,
        r: u32,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        served: ServiceClass,
        is_final: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let mut tokens = tokens;
        if is_final && tokens.bronze >= 2 && self.fault.fire(Fault::DropToken) {
            tokens.bronze -= 1;
        }
        debug_assert!(!tokens.is_empty(), "grants always carry tokens");
        let delay = self.params.lat.llc_bank_cycles;
        {
            let ch = &mut self.chips[c];
            let ledger = ch.held.entry(addr).or_default();
            let newcomer = !ledger.contains_key(&r);
            let e = ledger.entry(r).or_insert(TokenSet::EMPTY);
            *e = e.saturating_add(&tokens);
            if newcomer && ch.fllc.inc(addr) {
                sb.event(StatEvent::FilterOverflow);
            }
            if ch.dllc.peek(addr).is_some() {
                let owner = if tokens.silver >= 1 || tokens.gold == 1 {
                    Some(Some(r))
                } else {
                    None
                };
                let _ = ch.dllc.update_sharers(addr, Some(r), None, owner);
            }
        }
        sb.send(
            self.ctrl_agent(c as u32, addr),
            self.core_agent(c as u32, r),
            addr,
            RMsg::Grant { tokens, version, dirty, served, is_final },
            delay,
        );
        if is_final {
            self.chips[c].local.remove(&addr);
            self.chip_try_start(c, addr, sb)?;
            self.retry_overfull(c, sb)?;
        }
        Ok(())
    }

    fn chip_try_start(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        if self.chips[c].local.contains_key(&addr) || self.chips[c].ext.contains_key(&addr) {
            return Ok(());
        }
        let next = {
            let ch = &mut self.chips[c];
            match ch.queue.get_mut(&addr) {
                Some(q) => {
                    let n = q.pop_front();
                    if q.is_empty() {
                        ch.queue.remove(&addr);
                    }
                    n
                }
                None => None,
            }
        };
        if let Some((r, op)) = next {
            let kind = match op {
                MemOp::Read => LocalKind::Read,
                MemOp::Write => LocalKind::Write,
            };
            self.chips[c].local.insert(addr, LocalTxn::new(kind, r));
            return self.chip_dispatch(c, addr, sb);
        }
        Ok(())
    }

    // ---- reply routing ----------------------------------------------------

    fn chip_token_reply(
        &mut self,
        c: usize,
        addr: BlockAddress,
        round: u32,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        let ext_match = self.chips[c]
            .ext
            .get(&addr)
            .map(|e| e.round == round || e.absorbed.contains(&round))
            .unwrap_or(false);
        if ext_match {
            let done = {
                let e = self.chips[c].ext.get_mut(&addr).expect("ext present");
                e.acc = merged(&shape, full, e.acc, tokens, addr)?;
                if !tokens.is_empty() {
                    e.acc_version = e.acc_version.max(version);
                    e.acc_dirty |= dirty;
                }
                e.pending -= 1;
                e.pending == 0
            };
            if done {
                return self.finish_ext_collect(c, addr, sb);
            }
            return Ok(());
        }
        let local_match = self.chips[c]
            .local
            .get(&addr)
            .map(|l| l.round == round && l.phase == LocalPhase::WaitCollect)
            .unwrap_or(false);
        if local_match {
            let (done, kind) = {
                let l = self.chips[c].local.get_mut(&addr).expect("local present");
                l.acc = merged(&shape, full, l.acc, tokens, addr)?;
                if !tokens.is_empty() {
                    l.acc_version = l.acc_version.max(version);
                    l.acc_dirty |= dirty;
                }
                l.pending -= 1;
                (l.pending == 0, l.kind)
            };
            if done {
                return match kind {
                    LocalKind::Write => self.finish_local_write(c, addr, sb),
                    LocalKind::Evict => self.finish_evict(c, addr, sb),
                    LocalKind::Read => Err(Violation::Stuck {
                        detail: "read transaction in a collect phase".into(),
                    }),
                };
            }
            return Ok(());
        }
        // stale reply: keep the tokens safe
        self.chip_absorb(c, addr, tokens, version, dirty, sb)
    }

    fn chip_grant_reply(
        &mut self,
        c: usize,
        addr: BlockAddress,
        round: u32,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        // external read waiting on this owner?
        let ext_read_owner = self.chips[c]
            .ext
            .get(&addr)
            .map(|e| {
                matches!(e.kind, ExtKind::Read { .. })
                    && e.phase == ExtPhase::WaitOwner
                    && e.round == round
            })
            .unwrap_or(false);
        if ext_read_owner {
            if tokens.is_empty() {
                return self.dispatch_ext_read(c, addr, sb);
            }
            return self.finish_ext_read(c, addr, tokens, version, dirty, sb);
        }
        // an external collection that absorbed a robbed forward
        let ext_match = self.chips[c]
            .ext
            .get(&addr)
            .map(|e| e.kind == ExtKind::Collect && (e.round == round || e.absorbed.contains(&round)))
            .unwrap_or(false);
        if ext_match {
            return self.chip_token_reply(c, addr, round, tokens, version, dirty, sb);
        }
        let local_match = self.chips[c]
            .local
            .get(&addr)
            .map(|l| l.round == round && l.phase == LocalPhase::WaitOwner)
            .unwrap_or(false);
        if local_match {
            if tokens.is_empty() {
                // owner had nothing after all (its eviction was absorbed
                // earlier on this channel); re-evaluate from scratch
                return self.chip_dispatch(c, addr, sb);
            }
            let (req, total, v, d) = {
                let l = self.chips[c].local.get_mut(&addr).expect("local present");
                let total = merged(&shape, full, l.acc, tokens, addr)?;
                l.acc = TokenSet::EMPTY;
                (l.req, total, l.acc_version.max(version), l.acc_dirty || dirty)
            };
            return self.chip_send_grant(
                c, addr, req, total, v, d, ServiceClass::OnChip, true, sb,
            );
        }
        self.chip_absorb(c, addr, tokens, version, dirty, sb)
    }

    fn chip_count_reply(
        &mut self,
        c: usize,
        addr: BlockAddress,
        round: u32,
        r: u32,
        count: u32,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let ext_match = self.chips[c]
            .ext
            .get(&addr)
            .map(|e| e.round == round && e.phase == ExtPhase::WaitCounts)
            .unwrap_or(false);
        if ext_match {
            let done = {
                let e = self.chips[c].ext.get_mut(&addr).expect("ext present");
                e.counts.push((r, count));
                e.pending -= 1;
                e.pending == 0
            };
            if done {
                return self.ext_counts_fanin(c, addr, sb);
            }
            return Ok(());
        }
        let local_match = self.chips[c]
            .local
            .get(&addr)
            .map(|l| l.round == round && l.phase == LocalPhase::WaitCounts)
            .unwrap_or(false);
        if local_match {
            let done = {
                let l = self.chips[c].local.get_mut(&addr).expect("local present");
                l.counts.push((r, count));
                l.pending -= 1;
                l.pending == 0
            };
            if done {
                return self.local_counts_fanin(c, addr, sb);
            }
        }
        // stale count replies carry nothing and are dropped
        let _ = sb;
        Ok(())
    }

    fn local_counts_fanin(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let (req, acc, accv, accd, best, allocated, round) = {
            let t = self.chips[c].local.get(&addr).expect("txn present");
            let mut best: Option<(u32, u32)> = None;
            for &(core, n) in &t.counts {
                if n > 0 && best.map(|(_, bn)| n > bn).unwrap_or(true) {
                    best = Some((core, n));
                }
            }
            (t.req, t.acc, t.acc_version, t.acc_dirty, best, t.allocated_dir, t.round)
        };
        if acc.bronze >= 1 {
            self.chips[c].local.get_mut(&addr).expect("txn").acc = TokenSet::EMPTY;
            return self.chip_send_grant(
                c, addr, req, acc, accv, accd, ServiceClass::OnChip, true, sb,
            );
        }
        if let Some((o, _)) = best {
            {
                let t = self.chips[c].local.get_mut(&addr).expect("txn");
                t.phase = LocalPhase::WaitOwner;
                t.pending = 1;
            }
            sb.event(StatEvent::Unicast);
            sb.send(
                self.ctrl_agent(c as u32, addr),
                self.core_agent(c as u32, o),
                addr,
                RMsg::ReadFwd { round },
                lat.llc_bank_cycles,
            );
            return Ok(());
        }
        if acc.is_empty() {
            sb.event(StatEvent::FllcFalsePositive);
            if allocated {
                self.chips[c].dllc.remove(addr);
                self.chips[c].local.get_mut(&addr).expect("txn").allocated_dir = false;
            }
        }
        self.local_to_home(c, addr, MemOp::Read, sb)
    }

    // ---- external (home-driven) transactions ------------------------------

    fn ext_start_collect(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        debug_assert!(self.chips[c].ext.get(&addr).is_none());
        let round = self.next_round(c as u32);
        let mut ext = ExtTxn {
            kind: ExtKind::Collect,
            phase: ExtPhase::WaitCollect,
            round,
            acc: TokenSet::EMPTY,
            acc_version: 0,
            acc_dirty: false,
            pending: 0,
            counts: Vec::new(),
            absorbed: BTreeSet::new(),
            tried_counts: false,
        };
        if let Some(line) = self.chips[c].llc.remove(addr) {
            ext.acc = merged(&shape, full, ext.acc, line.tokens, addr)?;
            ext.acc_version = ext.acc_version.max(line.version);
            ext.acc_dirty |= line.dirty;
        }
        // rob the local transaction of everything gathered so far
        if let Some(l) = self.chips[c].local.get_mut(&addr) {
            match l.phase {
                LocalPhase::WaitOwner | LocalPhase::WaitCollect => {
                    let acc = std::mem::replace(&mut l.acc, TokenSet::EMPTY);
                    let (v, d, p, r) = (l.acc_version, l.acc_dirty, l.pending, l.round);
                    l.pending = 0;
                    l.phase = LocalPhase::Robbed;
                    ext.acc = merged(&shape, full, ext.acc, acc, addr)?;
                    ext.acc_version = ext.acc_version.max(v);
                    ext.acc_dirty |= d;
                    if p > 0 {
                        ext.pending += p;
                        ext.absorbed.insert(r);
                    }
                }
                LocalPhase::WaitCounts => {
                    let acc = std::mem::replace(&mut l.acc, TokenSet::EMPTY);
                    let (v, d) = (l.acc_version, l.acc_dirty);
                    l.pending = 0;
                    l.counts.clear();
                    l.phase = LocalPhase::Robbed;
                    ext.acc = merged(&shape, full, ext.acc, acc, addr)?;
                    ext.acc_version = ext.acc_version.max(v);
                    ext.acc_dirty |= d;
                }
                LocalPhase::AtHome | LocalPhase::Robbed => {}
            }
        }
        let targets: Vec<u32> = self.chips[c]
            .held
            .get(&addr)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        ext.pending += targets.len() as u32;
        let pending = ext.pending;
        self.chips[c].ext.insert(addr, ext);
        if !targets.is_empty() {
            sb.event(StatEvent::Multicast);
            self.send_invals(c, addr, round, &targets, sb);
        }
        if pending == 0 {
            return self.finish_ext_collect(c, addr, sb);
        }
        Ok(())
    }

    fn finish_ext_collect(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let ext = self.chips[c].ext.remove(&addr).expect("ext present");
        let now_empty = self.chip_now_empty(c, addr);
        sb.send(
            self.ctrl_agent(c as u32, addr),
            self.home_agent(addr),
            addr,
            RMsg::ChipCollectReply {
                tokens: ext.acc,
                version: ext.acc_version,
                dirty: ext.acc_dirty,
                now_empty,
            },
            lat.llc_bank_cycles,
        );
        if self.chips[c]
            .local
            .get(&addr)
            .map(|l| l.phase == LocalPhase::Robbed)
            .unwrap_or(false)
        {
            return self.chip_dispatch(c, addr, sb);
        }
        self.chip_try_start(c, addr, sb)
    }

    /// Core an external transaction must not demand tokens from: the
    /// requestor of an in-flight local read or write on the same block.
    fn ext_off_limits(&self, c: usize, addr: BlockAddress) -> Option<u32> {
        self.chips[c].local.get(&addr).and_then(|l| match l.kind {
            LocalKind::Read | LocalKind::Write => Some(l.req),
            LocalKind::Evict => None,
        })
    }

    fn dispatch_ext_read(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let shape = self.shape;
        let round = self.next_round(c as u32);
        let req_cores = {
            let e = self.chips[c].ext.get_mut(&addr).expect("ext present");
            e.round = round;
            e.pending = 0;
            e.counts.clear();
            match e.kind {
                ExtKind::Read { req_cores } => req_cores,
                ExtKind::Collect => unreachable!("collect has no read dispatch"),
            }
        };
        // LLC owner split: keep gold plus a silver and bronze, grant the rest
        let split = self.chips[c]
            .llc
            .peek(addr)
            .and_then(|l| {
                l.tokens
                    .split_for_external_read(req_cores)
                    .ok()
                    .map(|s| (s, l.version, l.dirty))
            });
        if let Some(((granted, mut retained), v, d)) = split {
            if self.fault.fire(Fault::SilverDoubleGrant) {
                retained.silver += 1;
            }
            self.chips[c].llc.peek_mut(addr).expect("line present").tokens = retained;
            return self.finish_ext_read(c, addr, granted, v, d, sb);
        }
        let snap = self.chips[c].llc.peek(addr).copied();
        if let Some(l) = snap {
            if l.tokens.bronze >= 2 {
                self.chips[c].llc.peek_mut(addr).expect("line present").tokens.bronze -= 1;
                return self.finish_ext_read(c, addr, TokenSet::new(0, 0, 1), l.version, l.dirty, sb);
            }
            if l.tokens.bronze == 1 && !self.chips[c].held.contains_key(&addr) {
                self.chips[c].llc.remove(addr);
                return self.finish_ext_read(c, addr, l.tokens, l.version, l.dirty, sb);
            }
        }
        // forward to an owning core. Never demand from the requestor of an
        // active local transaction: its grant may already be in flight and a
        // crossing demand would strip tokens the grant arithmetic relies on.
        let off_limits = self.ext_off_limits(c, addr);
        let owner = {
            let ch = &mut self.chips[c];
            let holders: Vec<u32> = ch
                .held
                .get(&addr)
                .map(|m| m.keys().copied().collect())
                .unwrap_or_default();
            ch.dllc.lookup(addr).and_then(|e| {
                e.silver_owner
                    .filter(|o| holders.contains(o) && Some(*o) != off_limits)
                    .or_else(|| {
                        e.sharer_list()
                            .find(|s| holders.contains(s) && Some(*s) != off_limits)
                    })
            })
        };
        if let Some(o) = owner {
            {
                let e = self.chips[c].ext.get_mut(&addr).expect("ext present");
                e.phase = ExtPhase::WaitOwner;
                e.pending = 1;
            }
            sb.event(StatEvent::Unicast);
            sb.send(
                self.ctrl_agent(c as u32, addr),
                self.core_agent(c as u32, o),
                addr,
                RMsg::ExtReadFwd { round, req_cores },
                lat.llc_bank_cycles,
            );
            return Ok(());
        }
        let tried = self.chips[c].ext.get(&addr).expect("ext").tried_counts;
        if self.chips[c].fllc.hit(addr) && !tried {
            let targets: Vec<u32> = (0..shape.cores_per_chip).collect();
            {
                let e = self.chips[c].ext.get_mut(&addr).expect("ext");
                e.tried_counts = true;
                e.phase = ExtPhase::WaitCounts;
                e.pending = targets.len() as u32;
            }
            sb.event(StatEvent::Multicast);
            for &x in &targets {
                sb.send(
                    self.ctrl_agent(c as u32, addr),
                    self.core_agent(c as u32, x),
                    addr,
                    RMsg::TokenCountQuery { round },
                    lat.llc_bank_cycles,
                );
            }
            return Ok(());
        }
        // nothing this chip can grant
        self.finish_ext_read(c, addr, TokenSet::EMPTY, 0, false, sb)
    }

    fn ext_counts_fanin(
        &mut self,
        c: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let off_limits = self.ext_off_limits(c, addr);
        let (best, round, req_cores) = {
            let e = self.chips[c].ext.get(&addr).expect("ext present");
            let mut best: Option<(u32, u32)> = None;
            for &(core, n) in &e.counts {
                if Some(core) == off_limits {
                    continue;
                }
                if n > 0 && best.map(|(_, bn)| n > bn).unwrap_or(true) {
                    best = Some((core, n));
                }
            }
            let rc = match e.kind {
                ExtKind::Read { req_cores } => req_cores,
                ExtKind::Collect => unreachable!(),
            };
            (best, e.round, rc)
        };
        if let Some((o, _)) = best {
            {
                let e = self.chips[c].ext.get_mut(&addr).expect("ext");
                e.phase = ExtPhase::WaitOwner;
                e.pending = 1;
            }
            sb.event(StatEvent::Unicast);
            sb.send(
                self.ctrl_agent(c as u32, addr),
                self.core_agent(c as u32, o),
                addr,
                RMsg::ExtReadFwd { round, req_cores },
                lat.llc_bank_cycles,
            );
            return Ok(());
        }
        self.finish_ext_read(c, addr, TokenSet::EMPTY, 0, false, sb)
    }

    fn finish_ext_read(
        &mut self,
        c: usize,
        addr: BlockAddress,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let shape = self.shape;
        let full = self.full;
        let ext = self.chips[c].ext.remove(&addr).expect("ext present");
        let tokens = merged(&shape, full, ext.acc, tokens, addr)?;
        let (version, dirty) = if tokens.is_empty() {
            (0, false)
        } else {
            (ext.acc_version.max(version), ext.acc_dirty || dirty)
        };
        let now_empty = self.chip_now_empty(c, addr);
        sb.send(
            self.ctrl_agent(c as u32, addr),
            self.home_agent(addr),
            addr,
            RMsg::ChipGrantReply { tokens, version, dirty, now_empty },
            lat.llc_bank_cycles,
        );
        if self.chips[c]
            .local
            .get(&addr)
            .map(|l| l.phase == LocalPhase::Robbed)
            .unwrap_or(false)
        {
            return self.chip_dispatch(c, addr, sb);
        }
        self.chip_try_start(c, addr, sb)
    }
}

// ---------------------------------------------------------------- home side

impl RainbowSystem {
    /// Tokens currently resting at memory; the map slot is left empty so a
    /// later merge does not double-count the implicit full set.
    fn mem_take(&mut self, h: usize, addr: BlockAddress) -> TokenSet {
        let full = self.full;
        match self.homes[h].mem_tokens.insert(addr, TokenSet::EMPTY) {
            Some(t) => t,
            None => full,
        }
    }

    fn mem_peek(&self, h: usize, addr: BlockAddress) -> TokenSet {
        self.homes[h].mem_tokens.get(&addr).copied().unwrap_or(self.full)
    }

    fn mem_put(&mut self, h: usize, addr: BlockAddress, t: TokenSet) {
        if t == self.full {
            self.homes[h].mem_tokens.remove(&addr);
        } else {
            self.homes[h].mem_tokens.insert(addr, t);
        }
    }

    fn mem_version(&self, h: usize, addr: BlockAddress) -> u64 {
        self.homes[h].mem_version.get(&addr).copied().unwrap_or(0)
    }

    fn home_deliver(
        &mut self,
        env: Envelope<RMsg>,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let h = env.dst.chip as usize;
        let addr = env.addr;
        debug_assert_eq!(self.shape.home_chip_of(addr), env.dst.chip);
        match env.msg {
            RMsg::MemReadReq { req } => {
                let req = HomeReq { op: MemOp::Read, chip: env.src.chip, core: req };
                self.homes[h].queue.entry(addr).or_default().push_back(req);
                self.pump_home(h, addr, sb)
            }
            RMsg::MemWriteReq { req } => {
                let req = HomeReq { op: MemOp::Write, chip: env.src.chip, core: req };
                self.homes[h].queue.entry(addr).or_default().push_back(req);
                self.pump_home(h, addr, sb)
            }
            RMsg::ChipCollectReply { tokens, version, dirty, now_empty } => {
                self.home_apply_reply(h, addr, env.src.chip, tokens, now_empty)?;
                self.home_collect_reply(h, addr, tokens, version, dirty, sb)
            }
            RMsg::ChipGrantReply { tokens, version, dirty, now_empty } => {
                self.home_apply_reply(h, addr, env.src.chip, tokens, now_empty)?;
                self.home_grant_reply(h, addr, tokens, version, dirty, sb)
            }
            RMsg::MemWriteBack { tokens, version, dirty, now_empty } => {
                self.home_apply_reply(h, addr, env.src.chip, tokens, now_empty)?;
                self.home_writeback(h, addr, tokens, version, dirty, sb)
            }
            RMsg::SilverReply { tokens } => {
                if !tokens.is_empty() {
                    self.home_deduct_chip(h, addr, env.src.chip, tokens)?;
                }
                self.home_silver_reply(h, addr, tokens, sb)
            }
            other => Err(Violation::Stuck {
                detail: format!("unexpected message at home {h}: {other:?}"),
            }),
        }
    }

    // ---- per-chip token ledger --------------------------------------------

    fn home_apply_reply(
        &mut self,
        h: usize,
        addr: BlockAddress,
        o: u32,
        tokens: TokenSet,
        now_empty: bool,
    ) -> Result<(), Violation> {
        if now_empty {
            // The chip reports holdings as of when the demand arrived; a
            // grant this home sent after the demand may still be in flight
            // toward it. Deduct what came back and keep any remainder.
            let gone = {
                let hm = &mut self.homes[h];
                match hm.chip_held.get_mut(&addr).and_then(|m| m.get_mut(&o)) {
                    Some(e) => {
                        if !e.contains(&tokens) {
                            return Err(Violation::Conservation {
                                addr,
                                sum: tokens,
                                expected: *e,
                            });
                        }
                        *e = e.minus(&tokens);
                        e.is_empty()
                    }
                    // a broadcast probe of a chip that never held the block
                    None if tokens.is_empty() => return Ok(()),
                    None => {
                        return Err(Violation::Conservation {
                            addr,
                            sum: tokens,
                            expected: TokenSet::EMPTY,
                        })
                    }
                }
            };
            if gone {
                let hm = &mut self.homes[h];
                let m = hm.chip_held.get_mut(&addr).expect("entry present");
                m.remove(&o);
                if m.is_empty() {
                    hm.chip_held.remove(&addr);
                }
                hm.fmem.dec(addr)?;
                let _ = hm.dmem.update_sharers(addr, None, Some(o), None);
            }
            Ok(())
        } else if !tokens.is_empty() {
            self.home_deduct_chip(h, addr, o, tokens)
        } else {
            Ok(())
        }
    }

    fn home_deduct_chip(
        &mut self,
        h: usize,
        addr: BlockAddress,
        o: u32,
        granted: TokenSet,
    ) -> Result<(), Violation> {
        let hm = &mut self.homes[h];
        let e = hm
            .chip_held
            .get_mut(&addr)
            .and_then(|m| m.get_mut(&o))
            .ok_or(Violation::Conservation {
                addr,
                sum: granted,
                expected: TokenSet::EMPTY,
            })?;
        if !e.contains(&granted) {
            return Err(Violation::Conservation { addr, sum: granted, expected: *e });
        }
        *e = e.minus(&granted);
        Ok(())
    }

    // ---- request serialization --------------------------------------------

    fn pump_home(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        loop {
            if self.homes[h].active.contains_key(&addr) {
                return Ok(());
            }
            let next = {
                let hm = &mut self.homes[h];
                match hm.queue.get_mut(&addr) {
                    Some(q) => {
                        let n = q.pop_front();
                        if q.is_empty() {
                            hm.queue.remove(&addr);
                        }
                        n
                    }
                    None => None,
                }
            };
            let Some(req) = next else { return Ok(()) };
            match req.op {
                MemOp::Read => self.home_dispatch_read(h, addr, req.chip, req.core, sb)?,
                MemOp::Write => self.home_dispatch_write(h, addr, req.chip, req.core, sb)?,
            }
        }
    }

    fn home_dispatch_read(
        &mut self,
        h: usize,
        addr: BlockAddress,
        c: u32,
        core: u32,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let shape = self.shape;
        let full = self.full;
        // 1: filter miss means no chip caches the block anywhere
        if !self.homes[h].fmem.hit(addr) {
            let mem = self.mem_take(h, addr);
            if mem != full {
                return Err(Violation::FilterBalance {
                    domain: "F-MEM".into(),
                    addr,
                    detail: "resident block missed by the filter".into(),
                });
            }
            let v = self.mem_version(h, addr);
            sb.event(StatEvent::MemoryAccess);
            return self.finish_home_grant(
                h, addr, c, core, full, v, false, ServiceClass::Memory, lat.memory_cycles, sb,
            );
        }
        // 2: directory hit, forward to the annotated owner chip
        let owner = {
            let hm = &mut self.homes[h];
            let holders: Vec<u32> = hm
                .chip_held
                .get(&addr)
                .map(|m| m.keys().copied().collect())
                .unwrap_or_default();
            hm.dmem.lookup(addr).and_then(|e| {
                e.silver_owner
                    .filter(|o| *o != c && holders.contains(o))
                    .or_else(|| e.sharer_list().find(|s| *s != c && holders.contains(s)))
            })
        };
        if let Some(o) = owner {
            self.homes[h].active.insert(
                addr,
                HomeTxn {
                    kind: HomeKind::Read { chip: c, core },
                    phase: HomePhase::WaitOwner,
                    acc: TokenSet::EMPTY,
                    acc_version: 0,
                    acc_dirty: false,
                    pending: 1,
                    allocated_dir: false,
                },
            );
            sb.event(StatEvent::Unicast);
            sb.send(
                AgentId::mem_ctrl(h as u32),
                self.ctrl_agent(o, addr),
                addr,
                RMsg::ChipReadFwd { reconstruct: false, req_cores: shape.cores_per_chip },
                lat.dir_access_cycles,
            );
            return Ok(());
        }
        // 3: filter hit with no directory knowledge: system-wide reconstruction
        let targets: Vec<u32> = (0..shape.num_chips).filter(|x| *x != c).collect();
        if !targets.is_empty() {
            sb.event(StatEvent::SystemReconstruction);
            sb.event(StatEvent::Broadcast);
            let mut allocated = false;
            if self.homes[h].dmem.peek(addr).is_none() {
                self.homes[h].dmem.allocate_silent(addr, 1 << c, None);
                allocated = true;
            }
            self.homes[h].active.insert(
                addr,
                HomeTxn {
                    kind: HomeKind::Read { chip: c, core },
                    phase: HomePhase::WaitReconstruct,
                    acc: TokenSet::EMPTY,
                    acc_version: 0,
                    acc_dirty: false,
                    pending: targets.len() as u32,
                    allocated_dir: allocated,
                },
            );
            for &o in &targets {
                sb.send(
                    AgentId::mem_ctrl(h as u32),
                    self.ctrl_agent(o, addr),
                    addr,
                    RMsg::ChipReadFwd { reconstruct: true, req_cores: shape.cores_per_chip },
                    lat.dir_access_cycles,
                );
            }
            return Ok(());
        }
        // single-chip system: collect the requestor chip's LLC remainder
        self.homes[h].active.insert(
            addr,
            HomeTxn {
                kind: HomeKind::Read { chip: c, core },
                phase: HomePhase::WaitCollect,
                acc: TokenSet::EMPTY,
                acc_version: 0,
                acc_dirty: false,
                pending: 0,
                allocated_dir: false,
            },
        );
        self.home_fallback_collect(h, addr, sb)
    }

    fn home_dispatch_write(
        &mut self,
        h: usize,
        addr: BlockAddress,
        c: u32,
        core: u32,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let full = self.full;
        if !self.homes[h].fmem.hit(addr) {
            let mem = self.mem_take(h, addr);
            if mem != full {
                return Err(Violation::FilterBalance {
                    domain: "F-MEM".into(),
                    addr,
                    detail: "resident block missed by the filter".into(),
                });
            }
            let v = self.mem_version(h, addr);
            sb.event(StatEvent::MemoryAccess);
            return self.finish_home_grant(
                h, addr, c, core, full, v, false, ServiceClass::Memory, lat.memory_cycles, sb,
            );
        }
        // the requestor chip is skipped: its private collection already sits
        // with the requesting core and stays there
        let targets: Vec<u32> = self.homes[h]
            .chip_held
            .get(&addr)
            .map(|m| m.keys().copied().filter(|k| *k != c).collect())
            .unwrap_or_default();
        let dmem_hit = self.homes[h].dmem.lookup(addr).is_some();
        self.homes[h].active.insert(
            addr,
            HomeTxn {
                kind: HomeKind::Write { chip: c, core },
                phase: HomePhase::WaitCollect,
                acc: TokenSet::EMPTY,
                acc_version: 0,
                acc_dirty: false,
                pending: targets.len() as u32,
                allocated_dir: false,
            },
        );
        if targets.is_empty() {
            return self.home_finish_collect(h, addr, sb);
        }
        sb.event(if dmem_hit { StatEvent::Multicast } else { StatEvent::Broadcast });
        for &o in &targets {
            sb.send(
                AgentId::mem_ctrl(h as u32),
                self.ctrl_agent(o, addr),
                addr,
                RMsg::ChipInval { reconstruct: !dmem_hit },
                lat.dir_access_cycles,
            );
        }
        Ok(())
    }

    // ---- reply handling ---------------------------------------------------

    fn home_collect_reply(
        &mut self,
        h: usize,
        addr: BlockAddress,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        let done = {
            let t = self.homes[h].active.get_mut(&addr).ok_or_else(|| Violation::Stuck {
                detail: "collect reply with no home transaction".into(),
            })?;
            if t.phase != HomePhase::WaitCollect {
                return Err(Violation::Stuck {
                    detail: format!("collect reply in home phase {:?}", t.phase),
                });
            }
            t.acc = merged(&shape, full, t.acc, tokens, addr)?;
            if !tokens.is_empty() {
                t.acc_version = t.acc_version.max(version);
                t.acc_dirty |= dirty;
            }
            t.pending -= 1;
            t.pending == 0
        };
        if done {
            return self.home_finish_collect(h, addr, sb);
        }
        Ok(())
    }

    fn home_finish_collect(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let kind = self.homes[h].active.get(&addr).expect("txn present").kind;
        match kind {
            HomeKind::Write { chip, core } | HomeKind::Read { chip, core } => {
                self.home_grant_everything(h, addr, chip, core, sb)
            }
            HomeKind::SystemInval => self.finish_system_inval(h, addr, sb),
        }
    }

    /// Grant the accumulated collection plus whatever memory holds; by
    /// conservation this completes both writes and fallback reads.
    fn home_grant_everything(
        &mut self,
        h: usize,
        addr: BlockAddress,
        c: u32,
        core: u32,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let shape = self.shape;
        let full = self.full;
        let t = self.homes[h].active.remove(&addr).expect("txn present");
        let mem = self.mem_take(h, addr);
        let grant = merged(&shape, full, t.acc, mem, addr)?;
        let version = t.acc_version.max(self.mem_version(h, addr));
        let (served, extra) = if t.acc.is_empty() {
            sb.event(StatEvent::MemoryAccess);
            (ServiceClass::Memory, lat.memory_cycles)
        } else {
            (ServiceClass::RemoteChip, 0)
        };
        // sole holder from here on; the block is chip-private again
        self.homes[h].dmem.remove(addr);
        self.homes[h].active.insert(
            addr,
            HomeTxn {
                kind: HomeKind::Read { chip: c, core },
                phase: HomePhase::WaitCollect,
                acc: TokenSet::EMPTY,
                acc_version: 0,
                acc_dirty: false,
                pending: 0,
                allocated_dir: false,
            },
        );
        self.finish_home_grant(h, addr, c, core, grant, version, t.acc_dirty, served, extra, sb)
    }

    fn home_grant_reply(
        &mut self,
        h: usize,
        addr: BlockAddress,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        let phase = self.homes[h]
            .active
            .get(&addr)
            .ok_or_else(|| Violation::Stuck {
                detail: "grant reply with no home transaction".into(),
            })?
            .phase;
        match phase {
            HomePhase::WaitOwner => {
                if tokens.is_empty() {
                    // the annotated owner could not serve; collect instead
                    return self.home_fallback_collect(h, addr, sb);
                }
                {
                    let t = self.homes[h].active.get_mut(&addr).expect("txn");
                    t.acc = merged(&shape, full, t.acc, tokens, addr)?;
                    t.acc_version = t.acc_version.max(version);
                    t.acc_dirty |= dirty;
                    t.pending -= 1;
                }
                self.home_maybe_recall_then_grant(h, addr, sb)
            }
            HomePhase::WaitReconstruct => {
                let done = {
                    let t = self.homes[h].active.get_mut(&addr).expect("txn");
                    t.acc = merged(&shape, full, t.acc, tokens, addr)?;
                    if !tokens.is_empty() {
                        t.acc_version = t.acc_version.max(version);
                        t.acc_dirty |= dirty;
                    }
                    t.pending -= 1;
                    t.pending == 0
                };
                if done {
                    return self.home_reconstruct_fanin(h, addr, sb);
                }
                Ok(())
            }
            other => Err(Violation::Stuck {
                detail: format!("grant reply in home phase {other:?}"),
            }),
        }
    }

    fn home_reconstruct_fanin(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let full = self.full;
        let (acc, allocated, kind) = {
            let t = self.homes[h].active.get(&addr).expect("txn present");
            (t.acc, t.allocated_dir, t.kind)
        };
        let HomeKind::Read { chip: c, core } = kind else {
            return Err(Violation::Stuck {
                detail: "reconstruction on a non-read transaction".into(),
            });
        };
        if acc.bronze >= 1 {
            return self.home_maybe_recall_then_grant(h, addr, sb);
        }
        if acc.is_empty() && self.mem_peek(h, addr) == full {
            // nobody had anything after all: the chip-residency filter lied
            sb.event(StatEvent::FmemFalsePositive);
            if allocated {
                self.homes[h].dmem.remove(addr);
            }
            self.homes[h].active.remove(&addr);
            let mem = self.mem_take(h, addr);
            let v = self.mem_version(h, addr);
            self.homes[h].active.insert(
                addr,
                HomeTxn {
                    kind,
                    phase: HomePhase::WaitCollect,
                    acc: TokenSet::EMPTY,
                    acc_version: 0,
                    acc_dirty: false,
                    pending: 0,
                    allocated_dir: false,
                },
            );
            sb.event(StatEvent::MemoryAccess);
            return self.finish_home_grant(
                h, addr, c, core, mem, v, false, ServiceClass::Memory, lat.memory_cycles, sb,
            );
        }
        // silver-only or scattered remainders: collect everything
        self.home_fallback_collect(h, addr, sb)
    }

    /// Escalation for reads: invalidate and collect from every resident chip,
    /// then grant the union. The requestor chip is included; a read holds
    /// nothing that must stay put.
    fn home_fallback_collect(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let targets: Vec<u32> = self.homes[h]
            .chip_held
            .get(&addr)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        {
            let t = self.homes[h].active.get_mut(&addr).expect("txn present");
            t.phase = HomePhase::WaitCollect;
            t.pending = targets.len() as u32;
        }
        if targets.is_empty() {
            return self.home_finish_collect(h, addr, sb);
        }
        sb.event(StatEvent::Multicast);
        for &o in &targets {
            sb.send(
                AgentId::mem_ctrl(h as u32),
                self.ctrl_agent(o, addr),
                addr,
                RMsg::ChipInval { reconstruct: false },
                lat.dir_access_cycles,
            );
        }
        Ok(())
    }

    /// A read grant without a silver token leaves the requesting chip unable
    /// to serve its own cores; try to recall a spare silver from another
    /// chip's LLC first.
    fn home_maybe_recall_then_grant(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let (acc, kind) = {
            let t = self.homes[h].active.get(&addr).expect("txn present");
            (t.acc, t.kind)
        };
        let HomeKind::Read { chip: c, .. } = kind else {
            return Err(Violation::Stuck {
                detail: "recall on a non-read transaction".into(),
            });
        };
        if acc.silver == 0 {
            let donors: Vec<u32> = self.homes[h]
                .chip_held
                .get(&addr)
                .map(|m| {
                    m.iter()
                        .filter(|(k, t)| **k != c && t.silver >= 1)
                        .map(|(k, _)| *k)
                        .collect()
                })
                .unwrap_or_default();
            if !donors.is_empty() {
                {
                    let t = self.homes[h].active.get_mut(&addr).expect("txn");
                    t.phase = HomePhase::WaitRecall;
                    t.pending = donors.len() as u32;
                }
                sb.event(StatEvent::SilverRecall);
                sb.event(StatEvent::Multicast);
                for &o in &donors {
                    sb.send(
                        AgentId::mem_ctrl(h as u32),
                        self.ctrl_agent(o, addr),
                        addr,
                        RMsg::SilverRecall,
                        lat.dir_access_cycles,
                    );
                }
                return Ok(());
            }
        }
        self.home_finish_read_grant(h, addr, sb)
    }

    fn home_silver_reply(
        &mut self,
        h: usize,
        addr: BlockAddress,
        tokens: TokenSet,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        let matched = self.homes[h]
            .active
            .get(&addr)
            .map(|t| t.phase == HomePhase::WaitRecall)
            .unwrap_or(false);
        if matched {
            let done = {
                let t = self.homes[h].active.get_mut(&addr).expect("txn");
                t.acc = merged(&shape, full, t.acc, tokens, addr)?;
                t.pending -= 1;
                t.pending == 0
            };
            if done {
                return self.home_finish_read_grant(h, addr, sb);
            }
            return Ok(());
        }
        // stray donation: park it at memory
        if !tokens.is_empty() {
            let mem = self.mem_take(h, addr);
            let mem = merged(&shape, full, mem, tokens, addr)?;
            self.mem_put(h, addr, mem);
        }
        Ok(())
    }

    fn home_finish_read_grant(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let t = self.homes[h].active.remove(&addr).expect("txn present");
        let HomeKind::Read { chip: c, core } = t.kind else {
            return Err(Violation::Stuck {
                detail: "read grant on a non-read transaction".into(),
            });
        };
        let version = t.acc_version.max(self.mem_version(h, addr));
        self.homes[h].active.insert(
            addr,
            HomeTxn {
                kind: t.kind,
                phase: HomePhase::WaitCollect,
                acc: TokenSet::EMPTY,
                acc_version: 0,
                acc_dirty: false,
                pending: 0,
                allocated_dir: false,
            },
        );
        self.finish_home_grant(
            h,
            addr,
            c,
            core,
            t.acc,
            version,
            t.acc_dirty,
            ServiceClass::RemoteChip,
            0,
            sb,
        )
    }

    fn home_writeback(
        &mut self,
        h: usize,
        addr: BlockAddress,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let shape = self.shape;
        let full = self.full;
        if self.homes[h].active.contains_key(&addr) {
            // fold the eviction into whatever collection is under way
            let t = self.homes[h].active.get_mut(&addr).expect("txn");
            t.acc = merged(&shape, full, t.acc, tokens, addr)?;
            if !tokens.is_empty() {
                t.acc_version = t.acc_version.max(version);
                t.acc_dirty |= dirty;
            }
            return Ok(());
        }
        let mem = self.mem_take(h, addr);
        let mem = merged(&shape, full, mem, tokens, addr)?;
        let memv = self.mem_version(h, addr);
        if mem.gold == 1 && mem.silver == shape.num_chips {
            // gold and every silver are home: a plain writeback; outstanding
            // bronzes stay valid as read-only copies
            if dirty && version > memv {
                self.homes[h].mem_version.insert(addr, version);
                sb.event(StatEvent::MemoryAccess);
            }
            self.mem_put(h, addr, mem);
            return Ok(());
        }
        // the ownership tokens are scattered: handled like a write, the
        // whole system gives the block up and memory takes the full set
        self.mem_put(h, addr, mem);
        let targets: Vec<u32> = self.homes[h]
            .chip_held
            .get(&addr)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        self.homes[h].active.insert(
            addr,
            HomeTxn {
                kind: HomeKind::SystemInval,
                phase: HomePhase::WaitCollect,
                acc: TokenSet::EMPTY,
                acc_version: if dirty { version } else { 0 },
                acc_dirty: dirty,
                pending: targets.len() as u32,
                allocated_dir: false,
            },
        );
        if targets.is_empty() {
            return self.finish_system_inval(h, addr, sb);
        }
        sb.event(StatEvent::Multicast);
        for &o in &targets {
            sb.send(
                AgentId::mem_ctrl(h as u32),
                self.ctrl_agent(o, addr),
                addr,
                RMsg::ChipInval { reconstruct: false },
                lat.dir_access_cycles,
            );
        }
        Ok(())
    }

    fn finish_system_inval(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let shape = self.shape;
        let full = self.full;
        let t = self.homes[h].active.remove(&addr).expect("txn present");
        let mem = self.mem_take(h, addr);
        let mem = merged(&shape, full, mem, t.acc, addr)?;
        if mem != full {
            return Err(Violation::Conservation { addr, sum: mem, expected: full });
        }
        let memv = self.mem_version(h, addr);
        if t.acc_dirty && t.acc_version > memv {
            self.homes[h].mem_version.insert(addr, t.acc_version);
            sb.event(StatEvent::MemoryAccess);
        }
        self.mem_put(h, addr, full);
        self.homes[h].dmem.remove(addr);
        sb.event(StatEvent::SystemWideInvalidation);
        self.pump_home(h, addr, sb)
    }

    fn finish_home_grant(
        &mut self,
        h: usize,
        addr: BlockAddress,
        c: u32,
        core: u32,
        tokens: TokenSet,
        version: u64,
        dirty: bool,
        served: ServiceClass,
        extra_delay: u64,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        let _ = core;
        let lat = self.params.lat;
        debug_assert!(!tokens.is_empty(), "home grants always carry tokens");
        {
            let hm = &mut self.homes[h];
            let ledger = hm.chip_held.entry(addr).or_default();
            let newcomer = !ledger.contains_key(&c);
            let e = ledger.entry(c).or_insert(TokenSet::EMPTY);
            *e = e.saturating_add(&tokens);
            if newcomer && hm.fmem.inc(addr) {
                sb.event(StatEvent::FilterOverflow);
            }
        }
        {
            let hm = &mut self.homes[h];
            if hm.dmem.peek(addr).is_some() {
                let gold_chip = hm
                    .chip_held
                    .get(&addr)
                    .and_then(|m| m.iter().find(|(_, t)| t.gold == 1).map(|(k, _)| *k));
                let _ = hm.dmem.update_sharers(addr, Some(c), None, Some(gold_chip));
            }
        }
        sb.send(
            AgentId::mem_ctrl(h as u32),
            self.ctrl_agent(c, addr),
            addr,
            RMsg::HomeGrant { tokens, version, dirty, served },
            lat.dir_access_cycles + extra_delay,
        );
        self.homes[h].active.remove(&addr);
        self.pump_home(h, addr, sb)
    }
}

impl CoherenceSystem for RainbowSystem {
    type Msg = RMsg;

    fn shape(&self) -> &SystemShape {
        &self.shape
    }

    fn issue(
        &mut self,
        core: u32,
        op: MemOp,
        addr: BlockAddress,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        self.core_issue(core, op, addr, sb)
    }

    fn deliver(
        &mut self,
        env: Envelope<RMsg>,
        sb: &mut Sideband<RMsg>,
    ) -> Result<(), Violation> {
        match env.dst.kind {
            AgentKind::CoreCache => self.core_deliver(env, sb),
            AgentKind::LlcBank => self.chip_deliver(env, sb),
            AgentKind::MemCtrl => self.home_deliver(env, sb),
            AgentKind::DfLlc => Err(Violation::Stuck {
                detail: "message addressed to a tracking structure".into(),
            }),
        }
    }

    fn core_busy(&self, core: u32) -> bool {
        self.cores[core as usize].pending.is_some()
    }

    fn audit(&self, in_flight: &[Envelope<RMsg>]) -> Vec<Violation> {
        let mut out = Vec::new();
        let full = self.full;
        let mut sums: BTreeMap<BlockAddress, TokenSet> = BTreeMap::new();
        let mut lines: BTreeMap<BlockAddress, Vec<TokenSet>> = BTreeMap::new();
        let add = |sums: &mut BTreeMap<BlockAddress, TokenSet>, a: BlockAddress, t: TokenSet| {
            let e = sums.entry(a).or_insert(TokenSet::EMPTY);
            *e = e.saturating_add(&t);
        };
        for core in &self.cores {
            for (a, l) in core.l1.iter().chain(core.l2.iter()) {
                add(&mut sums, a, l.tokens);
                lines.entry(a).or_default().push(l.tokens);
            }
        }
        for ch in &self.chips {
            for (a, l) in ch.llc.iter() {
                add(&mut sums, a, l.tokens);
                lines.entry(a).or_default().push(l.tokens);
            }
            for (a, t) in &ch.local {
                add(&mut sums, *a, t.acc);
            }
            for (a, t) in &ch.ext {
                add(&mut sums, *a, t.acc);
            }
        }
        for hm in &self.homes {
            for (a, t) in &hm.active {
                add(&mut sums, *a, t.acc);
            }
        }
        for env in in_flight {
            add(&mut sums, env.addr, env.msg.tokens());
        }
        let mut addrs: BTreeSet<BlockAddress> = sums.keys().copied().collect();
        for ch in &self.chips {
            addrs.extend(ch.held.keys().copied());
        }
        for hm in &self.homes {
            addrs.extend(hm.mem_tokens.keys().copied());
            addrs.extend(hm.chip_held.keys().copied());
        }
        for &a in &addrs {
            let hm = &self.homes[self.shape.home_chip_of(a) as usize];
            let mem = hm.mem_tokens.get(&a).copied().unwrap_or(full);
            let sum = sums.get(&a).copied().unwrap_or(TokenSet::EMPTY).saturating_add(&mem);
            if sum != full {
                out.push(Violation::Conservation { addr: a, sum, expected: full });
            }
            if let Some(hs) = lines.get(&a) {
                if hs.len() > 1 && hs.iter().any(|t| *t == full) {
                    out.push(Violation::Swmr {
                        addr: a,
                        detail: "full-set holder coexists with other copies".into(),
                    });
                }
            }
        }
        for (ci, ch) in self.chips.iter().enumerate() {
            let mut keys: BTreeSet<BlockAddress> = ch.held.keys().copied().collect();
            keys.extend(ch.fllc.shadow.keys().copied());
            for a in keys {
                let truth = ch.held.get(&a).map(|m| m.len() as u32).unwrap_or(0);
                let shadow = ch.fllc.shadow_count(a);
                if truth != shadow {
                    out.push(Violation::FilterBalance {
                        domain: format!("F-LLC chip {ci}"),
                        addr: a,
                        detail: format!("shadow count {shadow}, resident cores {truth}"),
                    });
                } else if truth > 0 && !ch.fllc.hit(a) {
                    out.push(Violation::FilterBalance {
                        domain: format!("F-LLC chip {ci}"),
                        addr: a,
                        detail: "resident block absent from the filter".into(),
                    });
                }
            }
        }
        for (hi, hm) in self.homes.iter().enumerate() {
            let mut keys: BTreeSet<BlockAddress> = hm.chip_held.keys().copied().collect();
            keys.extend(hm.fmem.shadow.keys().copied());
            for a in keys {
                let truth = hm.chip_held.get(&a).map(|m| m.len() as u32).unwrap_or(0);
                let shadow = hm.fmem.shadow_count(a);
                if truth != shadow {
                    out.push(Violation::FilterBalance {
                        domain: format!("F-MEM home {hi}"),
                        addr: a,
                        detail: format!("shadow count {shadow}, resident chips {truth}"),
                    });
                } else if truth > 0 && !hm.fmem.hit(a) {
                    out.push(Violation::FilterBalance {
                        domain: format!("F-MEM home {hi}"),
                        addr: a,
                        detail: "resident block absent from the filter".into(),
                    });
                }
            }
        }
        out
    }

    fn canonical_hash(&self, h: &mut std::collections::hash_map::DefaultHasher) {
        use std::hash::Hash;
        // whether the seeded bug already fired is part of the state
        self.fault.fired.hash(h);
        for core in &self.cores {
            core.l1.canonical_hash(h);
            core.l2.canonical_hash(h);
            core.pending.hash(h);
        }
        for ch in &self.chips {
            ch.llc.canonical_hash(h);
            ch.dllc.canonical_hash(h);
            ch.fllc.hash(h);
            ch.held.hash(h);
            ch.local.hash(h);
            ch.ext.hash(h);
            ch.queue.hash(h);
            ch.round_ctr.hash(h);
            ch.overfull.hash(h);
        }
        for hm in &self.homes {
            hm.dmem.canonical_hash(h);
            hm.fmem.hash(h);
            hm.mem_tokens.hash(h);
            hm.mem_version.hash(h);
            hm.chip_held.hash(h);
            hm.active.hash(h);
            hm.queue.hash(h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MachineParams;
    use crate::protocol::Completion;

    /// Untimed FIFO pump: channels keyed by (src, dst), delivered in a fixed
    /// deterministic order until everything is quiescent.
    struct Pump {
        sys: RainbowSystem,
        chans: BTreeMap<(AgentId, AgentId), VecDeque<Envelope<RMsg>>>,
        completions: Vec<Completion>,
        events: Vec<StatEvent>,
    }

    impl Pump {
        fn new(sys: RainbowSystem) -> Self {
            Pump {
                sys,
                chans: BTreeMap::new(),
                completions: Vec::new(),
                events: Vec::new(),
            }
        }

        fn absorb(&mut self, sb: Sideband<RMsg>) {
            for o in sb.out {
                self.chans
                    .entry((o.env.src, o.env.dst))
                    .or_default()
                    .push_back(o.env);
            }
            self.completions.extend(sb.completions);
            self.events.extend(sb.events);
        }

        fn issue(&mut self, core: u32, op: MemOp, addr: BlockAddress) {
            let mut sb = Sideband::new();
            self.sys.issue(core, op, addr, &mut sb).unwrap();
            self.absorb(sb);
        }

        fn step(&mut self) -> bool {
            let key = self
                .chans
                .iter()
                .find(|(_, q)| !q.is_empty())
                .map(|(k, _)| *k);
            let Some(k) = key else { return false };
            let env = self.chans.get_mut(&k).unwrap().pop_front().unwrap();
            let mut sb = Sideband::new();
            self.sys.deliver(env, &mut sb).unwrap();
            self.absorb(sb);
            true
        }

        fn run(&mut self) {
            let mut n = 0u32;
            while self.step() {
                n += 1;
                assert!(n < 100_000, "protocol did not quiesce");
            }
            for c in 0..self.sys.shape.total_cores() {
                assert!(!self.sys.core_busy(c), "core {c} wedged");
            }
        }

        fn audit_clean(&self) {
            let inflight: Vec<Envelope<RMsg>> =
                self.chans.values().flatten().cloned().collect();
            let v = self.sys.audit(&inflight);
            assert!(v.is_empty(), "audit violations: {v:?}");
        }

        fn last(&self) -> Completion {
            *self.completions.last().expect("a completion")
        }
    }

    fn pump2() -> Pump {
        Pump::new(RainbowSystem::new(MachineParams::tiny(2, 2), FaultPlan::none()))
    }

    fn a(i: u64) -> BlockAddress {
        BlockAddress(i * 64)
    }

    #[test]
    fn cold_read_is_served_by_memory() {
        let mut p = pump2();
        p.issue(0, MemOp::Read, a(1));
        p.run();
        let c = p.last();
        assert_eq!(c.served_by, ServiceClass::Memory);
        assert_eq!(c.version, 0);
        p.audit_clean();
    }

    #[test]
    fn repeat_read_hits_l1() {
        let mut p = pump2();
        p.issue(0, MemOp::Read, a(1));
        p.run();
        p.issue(0, MemOp::Read, a(1));
        p.run();
        assert_eq!(p.last().served_by, ServiceClass::L1);
        p.audit_clean();
    }

    #[test]
    fn write_bumps_version_and_read_sees_it() {
        let mut p = pump2();
        p.issue(0, MemOp::Write, a(1));
        p.run();
        assert_eq!(p.last().version, 1);
        p.issue(0, MemOp::Read, a(1));
        p.run();
        let c = p.last();
        assert_eq!(c.version, 1);
        assert_eq!(c.served_by, ServiceClass::L1);
        p.audit_clean();
    }

    #[test]
    fn second_core_on_chip_is_served_on_chip() {
        let mut p = pump2();
        // cores 0 and 1 share chip 0 in the tiny shape
        assert_eq!(p.sys.shape.chip_of_core(0), p.sys.shape.chip_of_core(1));
        p.issue(0, MemOp::Read, a(1));
        p.run();
        p.issue(1, MemOp::Read, a(1));
        p.run();
        let c = p.last();
        assert_eq!(c.core, 1);
        assert_eq!(c.served_by, ServiceClass::OnChip, "events: {:?}", p.events);
        p.audit_clean();
    }

    #[test]
    fn remote_chip_read_after_remote_write() {
        let mut p = pump2();
        let far = p.sys.shape.global_core(1, 0);
        p.issue(0, MemOp::Write, a(1));
        p.run();
        assert_eq!(p.last().version, 1);
        p.issue(far, MemOp::Read, a(1));
        p.run();
        let c = p.last();
        assert_eq!(c.version, 1, "remote read must see the written version");
        assert_eq!(c.served_by, ServiceClass::RemoteChip);
        p.audit_clean();
    }

    #[test]
    fn write_invalidates_remote_sharers() {
        let mut p = pump2();
        let far = p.sys.shape.global_core(1, 0);
        p.issue(0, MemOp::Read, a(1));
        p.run();
        p.issue(far, MemOp::Read, a(1));
        p.run();
        p.issue(0, MemOp::Write, a(1));
        p.run();
        assert_eq!(p.last().version, 1);
        p.audit_clean();
        // the old copy at `far` is gone; its next read observes version 1
        p.issue(far, MemOp::Read, a(1));
        p.run();
        assert_eq!(p.last().version, 1);
        p.audit_clean();
    }

    #[test]
    fn writes_alternating_between_chips() {
        let mut p = pump2();
        let far = p.sys.shape.global_core(1, 0);
        for i in 0..6u64 {
            let who = if i % 2 == 0 { 0 } else { far };
            p.issue(who, MemOp::Write, a(1));
            p.run();
            assert_eq!(p.last().version, i + 1);
            p.audit_clean();
        }
    }

    #[test]
    fn capacity_pressure_stays_coherent() {
        // tiny caches: a handful of distinct blocks forces private and LLC
        // evictions, writebacks and refills
        let mut p = pump2();
        let far = p.sys.shape.global_core(1, 0);
        for i in 0..40u64 {
            let addr = a(i % 7);
            let core = match i % 4 {
                0 => 0,
                1 => 1,
                2 => far,
                _ => far + 1,
            };
            let op = if i % 3 == 0 { MemOp::Write } else { MemOp::Read };
            p.issue(core, op, addr);
            p.run();
        }
        p.audit_clean();
    }

    #[test]
    fn one_entry_directories_still_coherent() {
        let params = MachineParams::tiny(2, 2).with_one_entry_dirs();
        let mut p = Pump::new(RainbowSystem::new(params, FaultPlan::none()));
        let far = p.sys.shape.global_core(1, 0);
        for i in 0..30u64 {
            let addr = a(i % 5);
            let core = if i % 2 == 0 { 0 } else { far };
            let op = if i % 3 == 0 { MemOp::Write } else { MemOp::Read };
            p.issue(core, op, addr);
            p.run();
            p.audit_clean();
        }
        // silent directory displacement never invalidates anything
        assert!(!p.events.contains(&StatEvent::RainbowDirEvictionInval));
    }

    #[test]
    fn single_chip_system_works() {
        let mut p = Pump::new(RainbowSystem::new(
            MachineParams::tiny(1, 2),
            FaultPlan::none(),
        ));
        p.issue(0, MemOp::Write, a(1));
        p.run();
        p.issue(1, MemOp::Read, a(1));
        p.run();
        assert_eq!(p.last().version, 1);
        p.audit_clean();
    }

    #[test]
    fn canonical_hash_is_stable_across_clones() {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::Hasher;
        let mut p = pump2();
        p.issue(0, MemOp::Write, a(1));
        p.run();
        let clone = p.sys.clone();
        let (mut h1, mut h2) = (DefaultHasher::new(), DefaultHasher::new());
        p.sys.canonical_hash(&mut h1);
        clone.canonical_hash(&mut h2);
        assert_eq!(h1.finish(), h2.finish());
    }

}
