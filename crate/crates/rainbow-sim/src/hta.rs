//! Probe-filter baseline protocol (HTA).
//!
//! A strictly inclusive probe filter at each home chip tracks, per block,
//! which chips cache it and whether one chip holds it exclusively. Because
//! the filter is inclusive, displacing an entry is not silent: the home must
//! first invalidate every cached copy of the victim block system-wide. Those
//! forced invalidations, and the misses they later cause, are the cost this
//! baseline pays as the filter shrinks.
//!
//! Same skeleton as the token protocol: cores own L1/L2, a chip controller
//! owns the LLC and an exact ledger of local holders, homes serialize
//! requests per address. All channels are FIFO.

use crate::coherence::{
    AgentId, AgentKind, BlockAddress, MessageKind, SystemShape, TokenSet,
};
use crate::config::MachineParams;
use crate::protocol::{
    CacheConfig, CoherenceSystem, Completion, Envelope, Fault, FaultPlan, MemOp, ServiceClass,
    SetAssocCache, Sideband, StatEvent, Violation, WireMsg,
};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

fn local_agent(chip: u32, local: u32) -> AgentId {
    AgentId {
        kind: AgentKind::CoreCache,
        chip,
        unit: local,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HMsg {
    // core -> own controller
    ReadReq,
    WriteReq,
    EvictNotify { version: u64, dirty: bool },
    InvalAck { round: u32, had: bool, version: u64, dirty: bool },
    FetchReply { round: u32, had: bool, version: u64, dirty: bool },
    // controller -> core
    Grant { excl: bool, version: u64, served: ServiceClass },
    Inval { round: u32 },
    /// Demote to shared and return the data; the line stays cached.
    Fetch { round: u32 },
    // controller -> home
    MemReadReq { req: u32 },
    MemWriteReq { req: u32 },
    WriteBack { version: u64, dirty: bool },
    /// `had` reports whether any copy existed on the chip, so the home can
    /// source the data from the ack instead of memory.
    ChipInvalAck { version: u64, dirty: bool, had: bool },
    ChipDowngradeAck { version: u64, dirty: bool, had: bool },
    // home -> controller
    HomeGrant { core: u32, excl: bool, version: u64, served: ServiceClass },
    ChipInval { exempt: Option<u32> },
    ChipDowngrade,
}

impl WireMsg for HMsg {
    fn kind(&self) -> MessageKind {
        match self {
            HMsg::ReadReq => MessageKind::ReadReq,
            HMsg::WriteReq => MessageKind::WriteReq,
            HMsg::EvictNotify { .. } => MessageKind::EvictNotify,
            HMsg::InvalAck { .. } => MessageKind::Ack,
            HMsg::FetchReply { .. } => MessageKind::DataResp,
            HMsg::Grant { .. } => MessageKind::DataResp,
            HMsg::Inval { .. } => MessageKind::Inval,
            HMsg::Fetch { .. } => MessageKind::ReadReq,
            HMsg::MemReadReq { .. } => MessageKind::MemReadReq,
            HMsg::MemWriteReq { .. } => MessageKind::WriteReq,
            HMsg::WriteBack { .. } => MessageKind::MemWriteBack,
            HMsg::ChipInvalAck { .. } => MessageKind::Ack,
            HMsg::ChipDowngradeAck { .. } => MessageKind::DataResp,
            HMsg::HomeGrant { .. } => MessageKind::DataResp,
            HMsg::ChipInval { .. } => MessageKind::Inval,
            HMsg::ChipDowngrade => MessageKind::Inval,
        }
    }

    fn carries_data(&self) -> bool {
        match self {
            HMsg::Grant { .. } | HMsg::HomeGrant { .. } => true,
            HMsg::FetchReply { had, .. } => *had,
            HMsg::ChipInvalAck { had, .. } | HMsg::ChipDowngradeAck { had, .. } => *had,
            HMsg::InvalAck { dirty, .. }
            | HMsg::EvictNotify { dirty, .. }
            | HMsg::WriteBack { dirty, .. } => *dirty,
            _ => false,
        }
    }

    fn tokens(&self) -> TokenSet {
        TokenSet::EMPTY
    }
}

// ---------------------------------------------------------------- state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct PrivLine {
    excl: bool,
    version: u64,
    dirty: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CoreState {
    l1: SetAssocCache<PrivLine>,
    l2: SetAssocCache<PrivLine>,
    pending: Option<(MemOp, BlockAddress)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct LlcLine {
    version: u64,
    dirty: bool,
}

/// A local read being served by another on-chip core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct FetchTxn {
    req_core: u32,
    round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ExtOp {
    Inval { exempt: Option<u32> },
    Downgrade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ExtKind {
    Inval,
    Downgrade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct ExtTxn {
    kind: ExtKind,
    round: u32,
    pending: u32,
    version: u64,
    dirty: bool,
    /// Some copy existed on the chip; the ack can serve as a data source.
    had: bool,
}

/// A local write served entirely on-chip: the chip owns the block
/// exclusively, so other local copies are invalidated without involving the
/// home.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct LwTxn {
    req_core: u32,
    round: u32,
    pending: u32,
    version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ChipState {
    llc: SetAssocCache<LlcLine>,
    /// Exact local holders: core -> exclusive flag.
    held: BTreeMap<BlockAddress, BTreeMap<u32, bool>>,
    fetch: BTreeMap<BlockAddress, FetchTxn>,
    /// Local write upgrades in flight (see [`LwTxn`]).
    lw: BTreeMap<BlockAddress, LwTxn>,
    /// Blocks this chip holds exclusively system-wide, per the last home
    /// grant. Entitles the controller to serve local writes without a home
    /// round trip.
    chip_excl: BTreeSet<BlockAddress>,
    ext: BTreeMap<BlockAddress, ExtTxn>,
    /// External op that arrived while a local fetch was in flight.
    ext_wait: BTreeMap<BlockAddress, ExtOp>,
    /// Local requests parked behind a fetch on the same address.
    queue: BTreeMap<BlockAddress, VecDeque<(u32, MemOp)>>,
    /// Addresses with a request outstanding at the home. Local requests are
    /// held back so a fetch cannot cross the incoming home grant.
    mem_pending: BTreeSet<BlockAddress>,
    round_ctr: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct ProbeEntry {
    excl: bool,
    /// Chip bit-vector; for an exclusive entry exactly one bit is set.
    sharers: u64,
}

impl ProbeEntry {
    fn chips(&self) -> impl Iterator<Item = u32> + '_ {
        (0..64).filter(|i| self.sharers & (1 << i) != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum HKind {
    Read { chip: u32, core: u32 },
    Write { chip: u32, core: u32 },
    /// Probe-filter conflict eviction: invalidate every copy of the victim.
    Evict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct HTxn {
    kind: HKind,
    pending: u32,
    version: u64,
    dirty: bool,
    /// Chip whose ack can supply the data (freshest dirty copy, or a clean
    /// one when nothing dirty surfaced), for sourcing and attribution.
    data_chip: Option<u32>,
    /// Chip a read downgrade was directed at; a `had = false` ack from it
    /// means its sharer bit is stale and another sharer should be tried.
    donor: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum HReq {
    Op { op: MemOp, chip: u32, core: u32 },
    Evict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct HomeState {
    probe: SetAssocCache<ProbeEntry>,
    mem_version: BTreeMap<BlockAddress, u64>,
    /// Blocks whose copies were blown away by a probe conflict eviction; the
    /// next request for one of these is an externally caused miss.
    ext_invalidated: BTreeSet<BlockAddress>,
    active: BTreeMap<BlockAddress, HTxn>,
    queue: BTreeMap<BlockAddress, VecDeque<HReq>>,
}

#[derive(Debug, Clone)]
pub struct HtaSystem {
    params: MachineParams,
    shape: SystemShape,
    fault: FaultPlan,
    cores: Vec<CoreState>,
    chips: Vec<ChipState>,
    homes: Vec<HomeState>,
}

impl HtaSystem {
    pub fn new(params: MachineParams, fault: FaultPlan) -> Self {
        let shape = params.shape;
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
                held: BTreeMap::new(),
                fetch: BTreeMap::new(),
                lw: BTreeMap::new(),
                chip_excl: BTreeSet::new(),
                ext: BTreeMap::new(),
                ext_wait: BTreeMap::new(),
                queue: BTreeMap::new(),
                mem_pending: BTreeSet::new(),
                round_ctr: 0,
            })
            .collect();
        let probe_cfg = CacheConfig::new(
            params.probe.sets,
            params.probe.ways,
            params.probe.index_shift,
        );
        let homes = (0..shape.num_chips)
            .map(|_| HomeState {
                probe: SetAssocCache::new(probe_cfg),
                mem_version: BTreeMap::new(),
                ext_invalidated: BTreeSet::new(),
                active: BTreeMap::new(),
                queue: BTreeMap::new(),
            })
            .collect();
        HtaSystem {
            shape,
            fault,
            cores,
            chips,
            homes,
            params,
        }
    }

    pub fn fault_fired(&self) -> bool {
        self.fault.fired
    }

    fn ctrl_agent(&self, chip: u32, addr: BlockAddress) -> AgentId {
        AgentId::llc_bank(chip, self.shape.bank_of(addr))
    }

    fn core_agent(&self, global: u32) -> AgentId {
        AgentId::core(&self.shape, global)
    }

    fn next_round(&mut self, chip: u32) -> u32 {
        let c = &mut self.chips[chip as usize];
        c.round_ctr = c.round_ctr.wrapping_add(1);
        c.round_ctr
    }

    fn mem_version(&self, h: usize, addr: BlockAddress) -> u64 {
        self.homes[h].mem_version.get(&addr).copied().unwrap_or(0)
    }
}

// ---------------------------------------------------------------- core side

impl HtaSystem {
    fn core_issue(
        &mut self,
        global: u32,
        op: MemOp,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
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
        let suff = |l: &PrivLine| op == MemOp::Read || l.excl;
        if let Some(line) = st.l1.get(addr) {
            if suff(line) {
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
        let promoted = st.l2.peek(addr).copied().filter(suff);
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
            self.core_install(global, addr, line, sb);
            return Ok(());
        }
        sb.event(StatEvent::L2Miss);
        let st = &mut self.cores[global as usize];
        st.pending = Some((op, addr));
        let msg = match op {
            MemOp::Read => HMsg::ReadReq,
            MemOp::Write => HMsg::WriteReq,
        };
        sb.send(
            local_agent(chip, local),
            self.ctrl_agent(chip, addr),
            addr,
            msg,
            lat.l1_cycles + lat.l2_cycles,
        );
        Ok(())
    }

    /// Install into L1, rippling the victim chain L1 -> L2 -> controller.
    fn core_install(
        &mut self,
        global: u32,
        addr: BlockAddress,
        line: PrivLine,
        sb: &mut Sideband<HMsg>,
    ) {
        let lat = self.params.lat;
        let chip = self.shape.chip_of_core(global);
        let local = self.shape.local_core(global);
        let pending = self.cores[global as usize].pending.map(|(_, a)| a);
        let st = &mut self.cores[global as usize];
        st.l1.insert(addr, line);
        let keep = |a: BlockAddress| a != addr && Some(a) != pending;
        if let Some(v1) = st.l1.victim_in_set(addr, |a, _| keep(a)) {
            let demoted = st.l1.remove(v1).expect("victim cached");
            st.l2.insert(v1, demoted);
            if let Some(v2) = st.l2.victim_in_set(v1, |a, _| keep(a)) {
                let out = st.l2.remove(v2).expect("victim cached");
                sb.send(
                    local_agent(chip, local),
                    self.ctrl_agent(chip, v2),
                    v2,
                    HMsg::EvictNotify {
                        version: out.version,
                        dirty: out.dirty,
                    },
                    lat.l2_cycles,
                );
            }
        }
    }

    fn core_take_line(&mut self, global: u32, addr: BlockAddress) -> Option<PrivLine> {
        let st = &mut self.cores[global as usize];
        st.l1.remove(addr).or_else(|| st.l2.remove(addr))
    }

    fn core_deliver(
        &mut self,
        env: Envelope<HMsg>,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let addr = env.addr;
        let global = self.shape.global_core(env.dst.chip, env.dst.unit);
        let src = self.core_agent(global);
        match env.msg {
            HMsg::Grant { excl, version, served } => {
                let (op, pend_addr) =
                    self.cores[global as usize]
                        .pending
                        .take()
                        .ok_or_else(|| Violation::Stuck {
                            detail: format!("grant with nothing pending at core {global}"),
                        })?;
                if pend_addr != addr {
                    return Err(Violation::Stuck {
                        detail: format!("grant for the wrong address at core {global}"),
                    });
                }
                // a stale copy may linger (shared line during a write upgrade)
                self.core_take_line(global, addr);
                let mut line = PrivLine {
                    excl,
                    version,
                    dirty: false,
                };
                if op == MemOp::Write {
                    if !excl {
                        return Err(Violation::Stuck {
                            detail: format!("write at core {global} granted without exclusivity"),
                        });
                    }
                    line.version += 1;
                    line.dirty = true;
                }
                sb.complete(Completion {
                    core: global,
                    op,
                    addr,
                    version: line.version,
                    served_by: served,
                    service_cycles: lat.l1_cycles,
                });
                self.core_install(global, addr, line, sb);
                Ok(())
            }
            HMsg::Inval { round } => {
                let line = self.core_take_line(global, addr);
                sb.send(
                    src,
                    env.src,
                    addr,
                    HMsg::InvalAck {
                        round,
                        had: line.is_some(),
                        version: line.map(|l| l.version).unwrap_or(0),
                        dirty: line.map(|l| l.dirty).unwrap_or(false),
                    },
                    lat.l1_cycles,
                );
                Ok(())
            }
            HMsg::Fetch { round } => {
                let st = &mut self.cores[global as usize];
                let line = st.l1.peek_mut(addr).or_else(|| st.l2.peek_mut(addr));
                let (had, version, dirty) = match line {
                    Some(l) => {
                        let d = l.dirty;
                        let v = l.version;
                        // dirtiness moves to the LLC copy with the reply
                        l.excl = false;
                        l.dirty = false;
                        (true, v, d)
                    }
                    None => (false, 0, false),
                };
                sb.send(
                    src,
                    env.src,
                    addr,
                    HMsg::FetchReply {
                        round,
                        had,
                        version,
                        dirty,
                    },
                    lat.l1_cycles,
                );
                Ok(())
            }
            other => Err(Violation::Stuck {
                detail: format!("unexpected message at core {global}: {other:?}"),
            }),
        }
    }
}

// ---------------------------------------------------------------- chip side

impl HtaSystem {
    fn chip_deliver(
        &mut self,
        env: Envelope<HMsg>,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let addr = env.addr;
        let chip = env.dst.chip;
        match env.msg {
            HMsg::ReadReq | HMsg::WriteReq => {
                let op = if matches!(env.msg, HMsg::ReadReq) {
                    MemOp::Read
                } else {
                    MemOp::Write
                };
                let core = env.src.unit;
                let busy = {
                    let ch = &self.chips[chip as usize];
                    ch.fetch.contains_key(&addr)
                        || ch.lw.contains_key(&addr)
                        || ch.ext.contains_key(&addr)
                        || ch.mem_pending.contains(&addr)
                };
                if busy {
                    self.chips[chip as usize]
                        .queue
                        .entry(addr)
                        .or_default()
                        .push_back((core, op));
                    return Ok(());
                }
                self.chip_dispatch(chip, addr, core, op, sb)
            }
            HMsg::EvictNotify { version, dirty } => {
                let core = env.src.unit;
                if let Some(m) = self.chips[chip as usize].held.get_mut(&addr) {
                    m.remove(&core);
                    if m.is_empty() {
                        self.chips[chip as usize].held.remove(&addr);
                    }
                }
                if dirty {
                    self.chip_writeback(chip, addr, version, dirty, sb);
                }
                Ok(())
            }
            HMsg::InvalAck { round, had, version, dirty } => {
                let core = env.src.unit;
                if had {
                    if let Some(m) = self.chips[chip as usize].held.get_mut(&addr) {
                        m.remove(&core);
                        if m.is_empty() {
                            self.chips[chip as usize].held.remove(&addr);
                        }
                    }
                }
                let (is_lw, finished) = {
                    let ch = &mut self.chips[chip as usize];
                    if let Some(t) = ch.lw.get_mut(&addr).filter(|t| t.round == round) {
                        if had {
                            t.version = t.version.max(version);
                        }
                        t.pending -= 1;
                        (true, t.pending == 0)
                    } else {
                        match ch.ext.get_mut(&addr) {
                            Some(e) if e.round == round => {
                                if had {
                                    e.version = e.version.max(version);
                                    e.dirty |= dirty;
                                    e.had = true;
                                }
                                e.pending -= 1;
                                (false, e.pending == 0)
                            }
                            _ => {
                                return Err(Violation::Stuck {
                                    detail: format!("stray invalidation ack on chip {chip}"),
                                })
                            }
                        }
                    }
                };
                if finished && is_lw {
                    return self.chip_finish_lw(chip, addr, sb);
                }
                if finished {
                    return self.chip_finish_ext(chip, addr, sb);
                }
                Ok(())
            }
            HMsg::FetchReply { round, had, version, dirty } => {
                self.chip_fetch_reply(chip, addr, round, had, version, dirty, sb)
            }
            HMsg::HomeGrant { core, excl, version, served } => {
                self.chip_home_grant(chip, addr, core, excl, version, served, sb)
            }
            HMsg::ChipInval { exempt } => {
                self.chip_ext_request(chip, addr, ExtOp::Inval { exempt }, sb)
            }
            HMsg::ChipDowngrade => self.chip_ext_request(chip, addr, ExtOp::Downgrade, sb),
            other => Err(Violation::Stuck {
                detail: format!("unexpected message at chip {chip}: {other:?}"),
            }),
        }
    }

    fn chip_writeback(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<HMsg>,
    ) {
        let lat = self.params.lat;
        let home = self.shape.home_chip_of(addr);
        sb.send(
            self.ctrl_agent(chip, addr),
            AgentId::mem_ctrl(home),
            addr,
            HMsg::WriteBack { version, dirty },
            lat.llc_bank_cycles,
        );
    }

    fn chip_dispatch(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        core: u32,
        op: MemOp,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        match op {
            MemOp::Read => {
                // an exclusive local holder may have a newer version than the
                // LLC line, so demote it first; otherwise the LLC can serve
                let excl_holder = self.chips[chip as usize]
                    .held
                    .get(&addr)
                    .and_then(|m| m.iter().find(|(k, v)| **v && **k != core).map(|(k, _)| *k));
                if excl_holder.is_none() {
                    if let Some(l) = self.chips[chip as usize].llc.get(addr) {
                        let version = l.version;
                        self.chips[chip as usize]
                            .held
                            .entry(addr)
                            .or_default()
                            .insert(core, false);
                        sb.send(
                            self.ctrl_agent(chip, addr),
                            local_agent(chip, core),
                            addr,
                            HMsg::Grant {
                                excl: false,
                                version,
                                served: ServiceClass::OnChip,
                            },
                            lat.llc_bank_cycles,
                        );
                        return Ok(());
                    }
                }
                // a local holder can supply the line (demoting if exclusive)
                let holder = excl_holder.or_else(|| {
                    self.chips[chip as usize]
                        .held
                        .get(&addr)
                        .and_then(|m| m.keys().find(|k| **k != core).copied())
                });
                if let Some(holder) = holder {
                    let round = self.next_round(chip);
                    self.chips[chip as usize]
                        .fetch
                        .insert(addr, FetchTxn { req_core: core, round });
                    sb.send(
                        self.ctrl_agent(chip, addr),
                        local_agent(chip, holder),
                        addr,
                        HMsg::Fetch { round },
                        lat.llc_bank_cycles,
                    );
                    return Ok(());
                }
                sb.event(StatEvent::LlcMiss);
                self.chips[chip as usize].mem_pending.insert(addr);
                sb.send(
                    self.ctrl_agent(chip, addr),
                    AgentId::mem_ctrl(self.shape.home_chip_of(addr)),
                    addr,
                    HMsg::MemReadReq { req: core },
                    lat.llc_bank_cycles,
                );
                Ok(())
            }
            MemOp::Write => {
                // when the home already granted this chip system-wide
                // exclusivity and a copy is still on chip, the upgrade is a
                // purely local affair
                let local_ok = {
                    let ch = &self.chips[chip as usize];
                    ch.chip_excl.contains(&addr)
                        && (ch.llc.peek(addr).is_some() || ch.held.contains_key(&addr))
                };
                if local_ok {
                    return self.chip_local_write(chip, addr, core, sb);
                }
                // otherwise exclusivity comes from the home, which invalidates
                // every other copy (this chip's included, requester exempted)
                sb.event(StatEvent::LlcMiss);
                self.chips[chip as usize].mem_pending.insert(addr);
                sb.send(
                    self.ctrl_agent(chip, addr),
                    AgentId::mem_ctrl(self.shape.home_chip_of(addr)),
                    addr,
                    HMsg::MemWriteReq { req: core },
                    lat.llc_bank_cycles,
                );
                Ok(())
            }
        }
    }

    /// Serve a write upgrade without the home: invalidate every local copy
    /// (the requester's included, which also recovers its version) and grant
    /// exclusivity from the collected state.
    fn chip_local_write(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        core: u32,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let llc = self.chips[chip as usize].llc.remove(addr);
        let targets: Vec<u32> = self.chips[chip as usize]
            .held
            .get(&addr)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        let version = llc.map(|l| l.version).unwrap_or(0);
        if targets.is_empty() {
            self.chips[chip as usize]
                .held
                .insert(addr, BTreeMap::from([(core, true)]));
            sb.send(
                self.ctrl_agent(chip, addr),
                local_agent(chip, core),
                addr,
                HMsg::Grant {
                    excl: true,
                    version,
                    served: ServiceClass::OnChip,
                },
                lat.llc_bank_cycles,
            );
            return Ok(());
        }
        let round = self.next_round(chip);
        self.chips[chip as usize].lw.insert(
            addr,
            LwTxn {
                req_core: core,
                round,
                pending: targets.len() as u32,
                version,
            },
        );
        for t in &targets {
            sb.send(
                self.ctrl_agent(chip, addr),
                local_agent(chip, *t),
                addr,
                HMsg::Inval { round },
                lat.llc_bank_cycles,
            );
        }
        Ok(())
    }

    fn chip_finish_lw(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let txn = self.chips[chip as usize].lw.remove(&addr).expect("lw txn");
        self.chips[chip as usize]
            .held
            .insert(addr, BTreeMap::from([(txn.req_core, true)]));
        sb.send(
            self.ctrl_agent(chip, addr),
            local_agent(chip, txn.req_core),
            addr,
            HMsg::Grant {
                excl: true,
                version: txn.version,
                served: ServiceClass::OnChip,
            },
            lat.llc_bank_cycles,
        );
        self.chip_after_fetch(chip, addr, sb)
    }

    fn chip_fetch_reply(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        round: u32,
        had: bool,
        version: u64,
        dirty: bool,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        // a downgrade transaction also fetches from the exclusive holder
        let ext_round = self.chips[chip as usize].ext.get(&addr).map(|e| e.round);
        if ext_round == Some(round) {
            let finished = {
                let e = self.chips[chip as usize].ext.get_mut(&addr).expect("ext txn");
                if had {
                    e.version = e.version.max(version);
                    e.dirty |= dirty;
                    e.had = true;
                }
                e.pending -= 1;
                e.pending == 0
            };
            if had {
                // the holder kept a demoted shared copy
                if let Some(m) = self.chips[chip as usize].held.get_mut(&addr) {
                    for v in m.values_mut() {
                        *v = false;
                    }
                }
            }
            if finished {
                return self.chip_finish_ext(chip, addr, sb);
            }
            return Ok(());
        }
        let txn = self.chips[chip as usize].fetch.remove(&addr).ok_or_else(|| {
            Violation::Stuck {
                detail: format!("fetch reply with no transaction on chip {chip}"),
            }
        })?;
        if txn.round != round {
            return Err(Violation::Stuck {
                detail: format!("fetch round mismatch on chip {chip}"),
            });
        }
        if had {
            {
                let ch = &mut self.chips[chip as usize];
                if let Some(m) = ch.held.get_mut(&addr) {
                    for v in m.values_mut() {
                        *v = false;
                    }
                }
                if let Some(l) = ch.llc.get(addr) {
                    if version > l.version {
                        l.version = version;
                        l.dirty |= dirty;
                    }
                } else {
                    ch.llc.insert(addr, LlcLine { version, dirty });
                }
                ch.held.entry(addr).or_default().insert(txn.req_core, false);
            }
            self.maybe_evict_llc(chip, addr, sb);
            sb.send(
                self.ctrl_agent(chip, addr),
                local_agent(chip, txn.req_core),
                addr,
                HMsg::Grant {
                    excl: false,
                    version,
                    served: ServiceClass::OnChip,
                },
                lat.llc_bank_cycles,
            );
        } else {
            // holder evicted underneath us; its notification already updated
            // the ledger, so a fresh dispatch takes the right path
            self.chip_dispatch(chip, addr, txn.req_core, MemOp::Read, sb)?;
        }
        self.chip_after_fetch(chip, addr, sb)
    }

    /// Drain whatever was parked behind a completed fetch: first a waiting
    /// external op, then queued local requests.
    fn chip_after_fetch(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        if let Some(op) = self.chips[chip as usize].ext_wait.remove(&addr) {
            return self.chip_start_ext(chip, addr, op, sb);
        }
        self.chip_try_local(chip, addr, sb)
    }

    fn chip_try_local(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        loop {
            let busy = {
                let ch = &self.chips[chip as usize];
                ch.fetch.contains_key(&addr)
                    || ch.lw.contains_key(&addr)
                    || ch.ext.contains_key(&addr)
                    || ch.mem_pending.contains(&addr)
            };
            if busy {
                return Ok(());
            }
            let next = {
                let ch = &mut self.chips[chip as usize];
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
            let Some((core, op)) = next else { return Ok(()) };
            self.chip_dispatch(chip, addr, core, op, sb)?;
        }
    }

    fn chip_ext_request(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        op: ExtOp,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        // the home is reassigning the block, so the chip-wide exclusive
        // entitlement lapses the moment the request arrives
        self.chips[chip as usize].chip_excl.remove(&addr);
        let parked = {
            let ch = &self.chips[chip as usize];
            ch.fetch.contains_key(&addr) || ch.lw.contains_key(&addr)
        };
        if parked {
            // a local fetch or write upgrade is mid-flight; it completes
            // unconditionally, so parking the external op cannot deadlock
            self.chips[chip as usize].ext_wait.insert(addr, op);
            return Ok(());
        }
        self.chip_start_ext(chip, addr, op, sb)
    }

    fn chip_start_ext(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        op: ExtOp,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let round = self.next_round(chip);
        match op {
            ExtOp::Inval { exempt } => {
                let llc = self.chips[chip as usize].llc.remove(addr);
                let targets: Vec<u32> = self.chips[chip as usize]
                    .held
                    .get(&addr)
                    .map(|m| m.keys().copied().filter(|k| Some(*k) != exempt).collect())
                    .unwrap_or_default();
                let txn = ExtTxn {
                    kind: ExtKind::Inval,
                    round,
                    pending: targets.len() as u32,
                    version: llc.map(|l| l.version).unwrap_or(0),
                    dirty: llc.map(|l| l.dirty).unwrap_or(false),
                    had: llc.is_some(),
                };
                self.chips[chip as usize].ext.insert(addr, txn);
                for t in &targets {
                    sb.send(
                        self.ctrl_agent(chip, addr),
                        local_agent(chip, *t),
                        addr,
                        HMsg::Inval { round },
                        lat.llc_bank_cycles,
                    );
                }
                if targets.is_empty() {
                    return self.chip_finish_ext(chip, addr, sb);
                }
                Ok(())
            }
            ExtOp::Downgrade => {
                let llc = self.chips[chip as usize].llc.peek(addr).copied();
                // fetch from the exclusive holder, or from any holder when
                // the LLC line is gone (to learn the version at all)
                let holder = self.chips[chip as usize].held.get(&addr).and_then(|m| {
                    m.iter()
                        .find(|(_, excl)| **excl)
                        .map(|(k, _)| *k)
                        .or_else(|| {
                            if llc.is_none() {
                                m.keys().next().copied()
                            } else {
                                None
                            }
                        })
                });
                let txn = ExtTxn {
                    kind: ExtKind::Downgrade,
                    round,
                    pending: u32::from(holder.is_some()),
                    version: llc.map(|l| l.version).unwrap_or(0),
                    dirty: llc.map(|l| l.dirty).unwrap_or(false),
                    had: llc.is_some(),
                };
                self.chips[chip as usize].ext.insert(addr, txn);
                if let Some(holder) = holder {
                    sb.send(
                        self.ctrl_agent(chip, addr),
                        local_agent(chip, holder),
                        addr,
                        HMsg::Fetch { round },
                        lat.llc_bank_cycles,
                    );
                    return Ok(());
                }
                self.chip_finish_ext(chip, addr, sb)
            }
        }
    }

    fn chip_finish_ext(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let txn = self.chips[chip as usize].ext.remove(&addr).expect("ext txn");
        let home = self.shape.home_chip_of(addr);
        let msg = match txn.kind {
            ExtKind::Inval => HMsg::ChipInvalAck {
                version: txn.version,
                dirty: txn.dirty,
                had: txn.had,
            },
            ExtKind::Downgrade => {
                // home writes dirty data back; local copies turn clean
                if txn.dirty {
                    if let Some(l) = self.chips[chip as usize].llc.peek_mut(addr) {
                        l.dirty = false;
                        l.version = txn.version;
                    }
                }
                HMsg::ChipDowngradeAck {
                    version: txn.version,
                    dirty: txn.dirty,
                    // any surviving holder still counts as a copy on chip
                    had: txn.had || self.chips[chip as usize].held.contains_key(&addr),
                }
            }
        };
        sb.send(
            self.ctrl_agent(chip, addr),
            AgentId::mem_ctrl(home),
            addr,
            msg,
            lat.llc_bank_cycles,
        );
        self.chip_try_local(chip, addr, sb)
    }

    fn chip_home_grant(
        &mut self,
        chip: u32,
        addr: BlockAddress,
        core: u32,
        excl: bool,
        version: u64,
        served: ServiceClass,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let g = self.shape.global_core(chip, core);
        if self.cores[g as usize].pending.map(|(_, a)| a) != Some(addr) {
            return Err(Violation::Stuck {
                detail: format!("home grant for core {g} which is not waiting on it"),
            });
        }
        self.chips[chip as usize].mem_pending.remove(&addr);
        {
            let ch = &mut self.chips[chip as usize];
            if excl {
                ch.chip_excl.insert(addr);
                ch.llc.remove(addr);
                ch.held.insert(addr, BTreeMap::from([(core, true)]));
            } else {
                ch.chip_excl.remove(&addr);
                ch.held.entry(addr).or_default().insert(core, false);
                if ch.llc.peek(addr).is_none() {
                    ch.llc.insert(addr, LlcLine { version, dirty: false });
                }
            }
        }
        if !excl {
            self.maybe_evict_llc(chip, addr, sb);
        }
        sb.send(
            self.ctrl_agent(chip, addr),
            local_agent(chip, core),
            addr,
            HMsg::Grant { excl, version, served },
            lat.llc_bank_cycles,
        );
        self.chip_try_local(chip, addr, sb)
    }

    fn maybe_evict_llc(&mut self, chip: u32, addr: BlockAddress, sb: &mut Sideband<HMsg>) {
        loop {
            let victim = {
                let ch = &self.chips[chip as usize];
                ch.llc.victim_in_set(addr, |a, _| {
                    !ch.fetch.contains_key(&a) && !ch.ext.contains_key(&a)
                })
            };
            let Some(v) = victim else { return };
            let line = self.chips[chip as usize].llc.remove(v).expect("victim cached");
            if line.dirty {
                self.chip_writeback(chip, v, line.version, true, sb);
            }
        }
    }
}

// ---------------------------------------------------------------- home side

impl HtaSystem {
    fn home_deliver(
        &mut self,
        env: Envelope<HMsg>,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let h = env.dst.chip as usize;
        let addr = env.addr;
        match env.msg {
            HMsg::MemReadReq { req } => {
                let r = HReq::Op { op: MemOp::Read, chip: env.src.chip, core: req };
                self.homes[h].queue.entry(addr).or_default().push_back(r);
                self.pump_home(h, addr, sb)
            }
            HMsg::MemWriteReq { req } => {
                let r = HReq::Op { op: MemOp::Write, chip: env.src.chip, core: req };
                self.homes[h].queue.entry(addr).or_default().push_back(r);
                self.pump_home(h, addr, sb)
            }
            HMsg::WriteBack { version, dirty } => {
                if dirty && version > self.mem_version(h, addr) {
                    self.homes[h].mem_version.insert(addr, version);
                    sb.event(StatEvent::MemoryAccess);
                }
                Ok(())
            }
            HMsg::ChipInvalAck { version, dirty, had } => {
                self.home_ack(h, addr, env.src.chip, version, dirty, had, sb)
            }
            HMsg::ChipDowngradeAck { version, dirty, had } => {
                self.home_ack(h, addr, env.src.chip, version, dirty, had, sb)
            }
            other => Err(Violation::Stuck {
                detail: format!("unexpected message at home {h}: {other:?}"),
            }),
        }
    }

    fn pump_home(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
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
            match next {
                Some(HReq::Op { op, chip, core }) => {
                    self.home_dispatch(h, addr, op, chip, core, sb)?
                }
                Some(HReq::Evict) => self.home_dispatch_evict(h, addr, sb)?,
                None => return Ok(()),
            }
        }
    }

    fn home_dispatch(
        &mut self,
        h: usize,
        addr: BlockAddress,
        op: MemOp,
        c: u32,
        core: u32,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let entry = self.homes[h].probe.get(addr).copied();
        match entry {
            None => {
                if self.homes[h].ext_invalidated.remove(&addr) {
                    sb.event(StatEvent::ExternalInvalidationMiss);
                }
                if !self.fault.fire(Fault::HtaInclusivityBreak) {
                    self.probe_insert(h, addr, ProbeEntry { excl: true, sharers: 1 << c }, sb);
                }
                let v = self.mem_version(h, addr);
                sb.event(StatEvent::MemoryAccess);
                self.home_grant(h, addr, c, core, true, v, ServiceClass::Memory, lat.memory_cycles, sb);
                Ok(())
            }
            Some(e) if e.excl => {
                // even when the owner is the requesting chip itself the copy
                // may sit with another core there, so always go through the
                // owning chip; its controller knows the truth
                let owner = e.chips().next().expect("exclusive entry has an owner");
                match op {
                    MemOp::Read => {
                        self.homes[h].active.insert(
                            addr,
                            HTxn {
                                kind: HKind::Read { chip: c, core },
                                pending: 1,
                                version: 0,
                                dirty: false,
                                data_chip: None,
                                donor: Some(owner),
                            },
                        );
                        sb.event(StatEvent::Unicast);
                        sb.send(
                            AgentId::mem_ctrl(h as u32),
                            self.ctrl_agent(owner, addr),
                            addr,
                            HMsg::ChipDowngrade,
                            lat.dir_access_cycles,
                        );
                        Ok(())
                    }
                    MemOp::Write => self.home_start_write_inval(h, addr, e, c, core, sb),
                }
            }
            Some(e) => match op {
                MemOp::Read => {
                    // prefer sourcing shared data cache-to-cache from another
                    // sharer; memory only when no donor is recorded
                    let donor = e.chips().find(|&o| o != c);
                    if let Some(donor) = donor {
                        self.homes[h].active.insert(
                            addr,
                            HTxn {
                                kind: HKind::Read { chip: c, core },
                                pending: 1,
                                version: 0,
                                dirty: false,
                                data_chip: None,
                                donor: Some(donor),
                            },
                        );
                        sb.event(StatEvent::Unicast);
                        sb.send(
                            AgentId::mem_ctrl(h as u32),
                            self.ctrl_agent(donor, addr),
                            addr,
                            HMsg::ChipDowngrade,
                            lat.dir_access_cycles,
                        );
                        return Ok(());
                    }
                    let mut e2 = e;
                    e2.sharers |= 1 << c;
                    *self.homes[h].probe.peek_mut(addr).expect("probe entry") = e2;
                    let v = self.mem_version(h, addr);
                    sb.event(StatEvent::MemoryAccess);
                    self.home_grant(
                        h, addr, c, core, false, v, ServiceClass::Memory, lat.memory_cycles, sb,
                    );
                    Ok(())
                }
                MemOp::Write => self.home_start_write_inval(h, addr, e, c, core, sb),
            },
        }
    }

    fn home_start_write_inval(
        &mut self,
        h: usize,
        addr: BlockAddress,
        e: ProbeEntry,
        c: u32,
        core: u32,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let targets: Vec<u32> = e.chips().collect();
        self.homes[h].active.insert(
            addr,
            HTxn {
                kind: HKind::Write { chip: c, core },
                pending: targets.len() as u32,
                version: 0,
                dirty: false,
                data_chip: None,
                donor: None,
            },
        );
        sb.event(if targets.len() > 1 {
            StatEvent::Multicast
        } else {
            StatEvent::Unicast
        });
        let mut skipped = false;
        for &o in &targets {
            // seeded bug: forget one of the invalidation targets
            if !skipped && self.fault.fire(Fault::SkipInvalidation) {
                skipped = true;
                continue;
            }
            let exempt = (o == c).then_some(core);
            sb.send(
                AgentId::mem_ctrl(h as u32),
                self.ctrl_agent(o, addr),
                addr,
                HMsg::ChipInval { exempt },
                lat.dir_access_cycles,
            );
        }
        Ok(())
    }

    fn home_dispatch_evict(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let Some(e) = self.homes[h].probe.peek(addr).copied() else {
            // already gone (the entry emptied out some other way)
            return Ok(());
        };
        let targets: Vec<u32> = e.chips().collect();
        self.homes[h].active.insert(
            addr,
            HTxn {
                kind: HKind::Evict,
                pending: targets.len() as u32,
                version: 0,
                dirty: false,
                data_chip: None,
                donor: None,
            },
        );
        sb.event(if targets.len() > 1 {
            StatEvent::Multicast
        } else {
            StatEvent::Unicast
        });
        for &o in &targets {
            sb.send(
                AgentId::mem_ctrl(h as u32),
                self.ctrl_agent(o, addr),
                addr,
                HMsg::ChipInval { exempt: None },
                lat.dir_access_cycles,
            );
        }
        Ok(())
    }

    fn home_ack(
        &mut self,
        h: usize,
        addr: BlockAddress,
        from: u32,
        version: u64,
        dirty: bool,
        had: bool,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let finished = {
            let t = self.homes[h].active.get_mut(&addr).ok_or_else(|| Violation::Stuck {
                detail: format!("ack with no home transaction at home {h}"),
            })?;
            if dirty && version >= t.version {
                t.version = version;
                t.dirty = true;
                t.data_chip = Some(from);
            } else if !dirty {
                t.version = t.version.max(version);
                // a clean copy serves just as well when nothing dirtier shows
                if had && t.data_chip.is_none() {
                    t.data_chip = Some(from);
                }
            }
            t.pending -= 1;
            t.pending == 0
        };
        if finished {
            return self.home_finish(h, addr, sb);
        }
        Ok(())
    }

    fn home_finish(
        &mut self,
        h: usize,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        let lat = self.params.lat;
        let t = self.homes[h].active.get(&addr).copied().expect("txn present");
        let memv = self.mem_version(h, addr);
        let version = t.version.max(memv);
        if t.dirty && t.version > memv {
            self.homes[h].mem_version.insert(addr, t.version);
            sb.event(StatEvent::MemoryAccess);
        }
        match t.kind {
            HKind::Read { chip, core } => {
                let _ = core;
                // a donor that no longer had the block leaves a stale sharer
                // bit; clear it and try the next sharer before giving up
                if t.data_chip.is_none() {
                    if let Some(d) = t.donor {
                        let remaining = {
                            let e = self.homes[h].probe.peek_mut(addr).expect("probe entry");
                            e.excl = false;
                            e.sharers &= !(1u64 << d);
                            e.sharers
                        };
                        let next = (0..64)
                            .filter(|i| remaining & (1 << i) != 0)
                            .find(|&o| o != chip);
                        if let Some(next) = next {
                            let tm =
                                self.homes[h].active.get_mut(&addr).expect("txn present");
                            tm.pending = 1;
                            tm.donor = Some(next);
                            sb.event(StatEvent::Unicast);
                            sb.send(
                                AgentId::mem_ctrl(h as u32),
                                self.ctrl_agent(next, addr),
                                addr,
                                HMsg::ChipDowngrade,
                                lat.dir_access_cycles,
                            );
                            return Ok(());
                        }
                    }
                }
                // downgrade done: the entry becomes shared between both chips
                let e = self.homes[h].probe.peek_mut(addr).expect("probe entry");
                e.excl = false;
                e.sharers |= 1 << chip;
                let served = match t.data_chip {
                    Some(d) if d == chip => ServiceClass::OnChip,
                    Some(_) => ServiceClass::RemoteChip,
                    // no copy surfaced; memory supplies the data
                    None => ServiceClass::Memory,
                };
                let extra = if served == ServiceClass::Memory {
                    sb.event(StatEvent::MemoryAccess);
                    lat.memory_cycles
                } else {
                    0
                };
                // reads queued behind this one ride on the copy the donor
                // just surfaced instead of paying a donor round each
                if t.data_chip.is_some() {
                    let riders = {
                        let hm = &mut self.homes[h];
                        let mut out = Vec::new();
                        if let Some(q) = hm.queue.get_mut(&addr) {
                            while let Some(&HReq::Op { op: MemOp::Read, chip: c2, core: k2 }) =
                                q.front()
                            {
                                q.pop_front();
                                out.push((c2, k2));
                            }
                            if q.is_empty() {
                                hm.queue.remove(&addr);
                            }
                        }
                        out
                    };
                    for &(c2, k2) in &riders {
                        let e = self.homes[h].probe.peek_mut(addr).expect("probe entry");
                        e.sharers |= 1 << c2;
                        sb.send(
                            AgentId::mem_ctrl(h as u32),
                            self.ctrl_agent(c2, addr),
                            addr,
                            HMsg::HomeGrant {
                                core: k2,
                                excl: false,
                                version,
                                served: ServiceClass::RemoteChip,
                            },
                            lat.dir_access_cycles,
                        );
                    }
                }
                self.home_grant(h, addr, chip, core, false, version, served, extra, sb);
                Ok(())
            }
            HKind::Write { chip, core } => {
                let served = match t.data_chip {
                    Some(d) if d == chip => ServiceClass::OnChip,
                    Some(_) => ServiceClass::RemoteChip,
                    None => ServiceClass::Memory,
                };
                let extra = if served == ServiceClass::Memory {
                    sb.event(StatEvent::MemoryAccess);
                    lat.memory_cycles
                } else {
                    0
                };
                *self.homes[h].probe.peek_mut(addr).expect("probe entry") =
                    ProbeEntry { excl: true, sharers: 1 << chip };
                self.home_grant(h, addr, chip, core, true, version, served, extra, sb);
                Ok(())
            }
            HKind::Evict => {
                self.homes[h].probe.remove(addr);
                self.homes[h].ext_invalidated.insert(addr);
                sb.event(StatEvent::ExternalInvalidation);
                self.homes[h].active.remove(&addr);
                self.pump_home(h, addr, sb)
            }
        }
    }

    fn home_grant(
        &mut self,
        h: usize,
        addr: BlockAddress,
        chip: u32,
        core: u32,
        excl: bool,
        version: u64,
        served: ServiceClass,
        extra_delay: u64,
        sb: &mut Sideband<HMsg>,
    ) {
        let lat = self.params.lat;
        sb.send(
            AgentId::mem_ctrl(h as u32),
            self.ctrl_agent(chip, addr),
            addr,
            HMsg::HomeGrant { core, excl, version, served },
            lat.dir_access_cycles + extra_delay,
        );
        self.homes[h].active.remove(&addr);
        // deliberately not pumping recursively here would wedge the queue
        let mut sb2 = Sideband::new();
        let r = self.pump_home(h, addr, &mut sb2);
        sb.out.append(&mut sb2.out);
        sb.events.append(&mut sb2.events);
        debug_assert!(r.is_ok());
    }

    /// Install a probe entry; if the set is now overfull, schedule a conflict
    /// eviction of the least recently used non-busy entry.
    fn probe_insert(
        &mut self,
        h: usize,
        addr: BlockAddress,
        entry: ProbeEntry,
        sb: &mut Sideband<HMsg>,
    ) {
        self.homes[h].probe.insert(addr, entry);
        let victim = {
            let hm = &self.homes[h];
            hm.probe.victim_in_set(addr, |a, _| {
                !hm.active.contains_key(&a) && !hm.queue.contains_key(&a)
            })
        };
        if let Some(v) = victim {
            self.homes[h].queue.entry(v).or_default().push_back(HReq::Evict);
            let mut sb2 = Sideband::new();
            let r = self.pump_home(h, v, &mut sb2);
            sb.out.append(&mut sb2.out);
            sb.events.append(&mut sb2.events);
            debug_assert!(r.is_ok());
        }
    }
}

impl CoherenceSystem for HtaSystem {
    type Msg = HMsg;

    fn shape(&self) -> &SystemShape {
        &self.shape
    }

    fn issue(
        &mut self,
        core: u32,
        op: MemOp,
        addr: BlockAddress,
        sb: &mut Sideband<HMsg>,
    ) -> Result<(), Violation> {
        self.core_issue(core, op, addr, sb)
    }

    fn deliver(
        &mut self,
        env: Envelope<HMsg>,
        sb: &mut Sideband<HMsg>,
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

    fn audit(&self, in_flight: &[Envelope<HMsg>]) -> Vec<Violation> {
        let _ = in_flight;
        let mut out = Vec::new();
        // copies per address: (chip, exclusive?)
        let mut copies: BTreeMap<BlockAddress, Vec<(u32, bool)>> = BTreeMap::new();
        for (g, core) in self.cores.iter().enumerate() {
            let chip = self.shape.chip_of_core(g as u32);
            for (a, l) in core.l1.iter().chain(core.l2.iter()) {
                copies.entry(a).or_default().push((chip, l.excl));
            }
        }
        for (ci, ch) in self.chips.iter().enumerate() {
            for (a, _) in ch.llc.iter() {
                copies.entry(a).or_default().push((ci as u32, false));
            }
        }
        for (&a, cs) in &copies {
            if cs.len() > 1 && cs.iter().any(|(_, excl)| *excl) {
                out.push(Violation::Swmr {
                    addr: a,
                    detail: "exclusive holder coexists with other copies".into(),
                });
            }
            let hm = &self.homes[self.shape.home_chip_of(a) as usize];
            let entry = hm.probe.peek(a).copied();
            for &(chip, _) in cs {
                let covered = entry.map(|e| e.sharers & (1 << chip) != 0).unwrap_or(false);
                if !covered {
                    out.push(Violation::Inclusivity { addr: a, chip });
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
            ch.held.hash(h);
            ch.fetch.hash(h);
            ch.lw.hash(h);
            ch.chip_excl.hash(h);
            ch.ext.hash(h);
            ch.ext_wait.hash(h);
            ch.queue.hash(h);
            ch.mem_pending.hash(h);
            ch.round_ctr.hash(h);
        }
        for hm in &self.homes {
            hm.probe.canonical_hash(h);
            hm.mem_version.hash(h);
            hm.ext_invalidated.hash(h);
            hm.active.hash(h);
            hm.queue.hash(h);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Pump {
        sys: HtaSystem,
        chans: BTreeMap<(AgentId, AgentId), VecDeque<Envelope<HMsg>>>,
        completions: Vec<Completion>,
        events: Vec<StatEvent>,
    }

    impl Pump {
        fn new(sys: HtaSystem) -> Self {
            Pump {
                sys,
                chans: BTreeMap::new(),
                completions: Vec::new(),
                events: Vec::new(),
            }
        }

        fn absorb(&mut self, sb: Sideband<HMsg>) {
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

        fn run(&mut self) {
            let mut n = 0u32;
            loop {
                let key = self
                    .chans
                    .iter()
                    .find(|(_, q)| !q.is_empty())
                    .map(|(k, _)| *k);
                let Some(k) = key else { break };
                let env = self.chans.get_mut(&k).unwrap().pop_front().unwrap();
                let mut sb = Sideband::new();
                self.sys.deliver(env, &mut sb).unwrap();
                self.absorb(sb);
                n += 1;
                assert!(n < 100_000, "protocol did not quiesce");
            }
            for c in 0..self.sys.shape.total_cores() {
                assert!(!self.sys.core_busy(c), "core {c} wedged");
            }
        }

        fn audit_clean(&self) {
            let inflight: Vec<Envelope<HMsg>> =
                self.chans.values().flatten().cloned().collect();
            let v = self.sys.audit(&inflight);
            assert!(v.is_empty(), "audit violations: {v:?}");
        }

        fn last(&self) -> Completion {
            *self.completions.last().expect("a completion")
        }
    }

    fn pump2() -> Pump {
        Pump::new(HtaSystem::new(MachineParams::tiny(2, 2), FaultPlan::none()))
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
    fn write_then_remote_read_sees_version() {
        let mut p = pump2();
        let far = p.sys.shape.global_core(1, 0);
        p.issue(0, MemOp::Write, a(1));
        p.run();
        assert_eq!(p.last().version, 1);
        p.issue(far, MemOp::Read, a(1));
        p.run();
        let c = p.last();
        assert_eq!(c.version, 1);
        assert_eq!(c.served_by, ServiceClass::RemoteChip);
        p.audit_clean();
    }

    #[test]
    fn on_chip_sharing_is_served_locally() {
        let mut p = pump2();
        p.issue(0, MemOp::Read, a(1));
        p.run();
        p.issue(1, MemOp::Read, a(1));
        p.run();
        assert_eq!(p.last().served_by, ServiceClass::OnChip);
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
        p.issue(far, MemOp::Read, a(1));
        p.run();
        assert_eq!(p.last().version, 1);
        p.audit_clean();
    }

    #[test]
    fn probe_conflict_eviction_fires() {
        // tiny probe filter: 1 set x 2 ways; touching 3 blocks with the same
        // home forces a conflict eviction
        let mut p = pump2();
        let homes: Vec<u64> = (0..64)
            .filter(|i| p.sys.shape.home_chip_of(a(*i)) == 0)
            .take(3)
            .collect();
        for &i in &homes {
            p.issue(0, MemOp::Read, a(i));
            p.run();
        }
        assert!(p.events.contains(&StatEvent::ExternalInvalidation));
        p.audit_clean();
        // revisiting the evicted block is an externally caused miss
        for &i in &homes {
            p.issue(0, MemOp::Read, a(i));
            p.run();
        }
        assert!(p.events.contains(&StatEvent::ExternalInvalidationMiss));
        p.audit_clean();
    }

    #[test]
    fn alternating_writes_stay_coherent() {
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
        let mut p = pump2();
        let far = p.sys.shape.global_core(1, 0);
        for i in 0..60u64 {
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
            p.audit_clean();
        }
    }

    #[test]
    fn inclusivity_fault_is_caught() {
        let mut p = Pump::new(HtaSystem::new(
            MachineParams::tiny(2, 2),
            FaultPlan::seeded(Fault::HtaInclusivityBreak),
        ));
        p.issue(0, MemOp::Read, a(1));
        p.run();
        assert!(p.sys.fault_fired());
        let v = p.sys.audit(&[]);
        assert!(
            v.iter().any(|x| matches!(x, Violation::Inclusivity { .. })),
            "expected an inclusivity violation, got {v:?}"
        );
    }

}
