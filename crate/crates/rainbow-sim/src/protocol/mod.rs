//! Plumbing shared by both coherence protocols: message envelopes, the
//! sideband that handlers emit into (outgoing messages, completions,
//! statistics events), generic set-associative cache storage, invariant
//! violation reporting and fault injection hooks.

pub mod cache;

use crate::coherence::{AgentId, BlockAddress, MessageKind, SystemShape, TokenSet};
use std::fmt::Debug;
use std::hash::Hash;

pub use cache::{CacheConfig, SetAssocCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MemOp {
    Read,
    Write,
}

/// Which agent ultimately serviced an access; buckets the latency breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ServiceClass {
    L1,
    L2,
    OnChip,
    RemoteChip,
    Memory,
}

impl ServiceClass {
    pub fn label(&self) -> &'static str {
        match self {
            ServiceClass::L1 => "l1",
            ServiceClass::L2 => "l2",
            ServiceClass::OnChip => "on_chip",
            ServiceClass::RemoteChip => "remote_chip",
            ServiceClass::Memory => "memory",
        }
    }
}

/// Wire-level view of a protocol message, for traffic accounting and for
/// the conservation audit over in-flight messages.
pub trait WireMsg {
    fn kind(&self) -> MessageKind;
    fn carries_data(&self) -> bool;
    fn tokens(&self) -> TokenSet;
    fn size_bytes(&self) -> u32 {
        crate::coherence::message_bytes(self.carries_data())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Envelope<M> {
    pub src: AgentId,
    pub dst: AgentId,
    pub addr: BlockAddress,
    pub msg: M,
}

/// An outgoing message plus the controller processing delay (in cycles)
/// spent before it enters the network.
#[derive(Debug, Clone)]
pub struct Outgoing<M> {
    pub env: Envelope<M>,
    pub delay: u64,
}

/// A completed memory access, reported back to the driving harness.
/// `service_cycles` is the terminal access time (cache or array lookup) not
/// already covered by message delays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Completion {
    pub core: u32,
    pub op: MemOp,
    pub addr: BlockAddress,
    pub version: u64,
    pub served_by: ServiceClass,
    pub service_cycles: u64,
}

/// Counter bumps emitted by protocol handlers; the harness aggregates them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StatEvent {
    L1Miss,
    L2Miss,
    LlcMiss,
    Reconstruction,
    SystemReconstruction,
    FllcFalsePositive,
    FmemFalsePositive,
    FilterOverflow,
    ExternalInvalidation,
    /// Miss on a block previously blown away by a probe-filter eviction.
    ExternalInvalidationMiss,
    /// Invalidation attributable to a Rainbow directory eviction. The
    /// loose-inclusivity contract requires this to stay at zero.
    RainbowDirEvictionInval,
    MemoryAccess,
    Unicast,
    Multicast,
    Broadcast,
    SilverRecall,
    SystemWideInvalidation,
}

#[derive(Debug, Clone, Default)]
pub struct Sideband<M> {
    pub out: Vec<Outgoing<M>>,
    pub completions: Vec<Completion>,
    pub events: Vec<StatEvent>,
}

impl<M> Sideband<M> {
    pub fn new() -> Self {
        Sideband {
            out: Vec::new(),
            completions: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn send(&mut self, src: AgentId, dst: AgentId, addr: BlockAddress, msg: M, delay: u64) {
        self.out.push(Outgoing {
            env: Envelope {
                src,
                dst,
                addr,
                msg,
            },
            delay,
        });
    }

    pub fn event(&mut self, e: StatEvent) {
        self.events.push(e);
    }

    pub fn complete(&mut self, c: Completion) {
        self.completions.push(c);
    }
}

/// An invariant violation found by an audit or during message handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Conservation {
        addr: BlockAddress,
        sum: TokenSet,
        expected: TokenSet,
    },
    Swmr {
        addr: BlockAddress,
        detail: String,
    },
    FilterBalance {
        domain: String,
        addr: BlockAddress,
        detail: String,
    },
    Inclusivity {
        addr: BlockAddress,
        chip: u32,
    },
    ValueCoherence {
        addr: BlockAddress,
        core: u32,
        got: u64,
        want: u64,
    },
    TokenUnderflow {
        addr: BlockAddress,
        detail: String,
    },
    Stuck {
        detail: String,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Conservation {
                addr,
                sum,
                expected,
            } => write!(
                f,
                "token conservation violated at {addr:?}: sum {sum:?}, expected {expected:?}"
            ),
            Violation::Swmr { addr, detail } => write!(f, "SWMR violated at {addr:?}: {detail}"),
            Violation::FilterBalance {
                domain,
                addr,
                detail,
            } => write!(f, "{domain} accounting broken at {addr:?}: {detail}"),
            Violation::Inclusivity { addr, chip } => write!(
                f,
                "probe filter inclusivity broken: {addr:?} cached on chip {chip} without an entry"
            ),
            Violation::ValueCoherence {
                addr,
                core,
                got,
                want,
            } => write!(
                f,
                "stale read at {addr:?} by core {core}: got version {got}, want {want}"
            ),
            Violation::TokenUnderflow { addr, detail } => {
                write!(f, "token underflow at {addr:?}: {detail}")
            }
            Violation::Stuck { detail } => write!(f, "liveness: {detail}"),
        }
    }
}

/// Seeded protocol bugs for the mutation test suite. Each fires once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fault {
    /// Drop one bronze token from a token-bearing response.
    DropToken,
    /// Skip the F-LLC decrement when the last private copy leaves a chip.
    SkipFllcDecrement,
    /// Skip one sharer when multicasting invalidations for a write.
    SkipInvalidation,
    /// Grant a silver token externally without removing it from the holder.
    SilverDoubleGrant,
    /// Skip the probe-filter allocation when memory serves a request.
    HtaInclusivityBreak,
}

impl Fault {
    pub const ALL: [Fault; 5] = [
        Fault::DropToken,
        Fault::SkipFllcDecrement,
        Fault::SkipInvalidation,
        Fault::SilverDoubleGrant,
        Fault::HtaInclusivityBreak,
    ];

    pub fn parse(s: &str) -> Option<Fault> {
        match s {
            "drop-token" => Some(Fault::DropToken),
            "skip-fllc-decrement" => Some(Fault::SkipFllcDecrement),
            "skip-invalidation" => Some(Fault::SkipInvalidation),
            "silver-double-grant" => Some(Fault::SilverDoubleGrant),
            "hta-inclusivity-break" => Some(Fault::HtaInclusivityBreak),
        _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Fault::DropToken => "drop-token",
            Fault::SkipFllcDecrement => "skip-fllc-decrement",
            Fault::SkipInvalidation => "skip-invalidation",
            Fault::SilverDoubleGrant => "silver-double-grant",
            Fault::HtaInclusivityBreak => "hta-inclusivity-break",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FaultPlan {
    pub fault: Option<Fault>,
    pub fired: bool,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn seeded(fault: Fault) -> Self {
        FaultPlan {
            fault: Some(fault),
            fired: false,
        }
    }

    /// True exactly once for the matching seeded fault.
    pub fn fire(&mut self, fault: Fault) -> bool {
        if self.fault == Some(fault) && !self.fired {
            self.fired = true;
            true
        } else {
            false
        }
    }
}

/// A coherence protocol instance: deterministic message-handler state
/// machines over every agent in the system. Driven either by the timed
/// discrete-event engine or by the exhaustive checker.
pub trait CoherenceSystem: Clone {
    type Msg: Clone + Debug + PartialEq + Eq + Hash + WireMsg;

    fn shape(&self) -> &SystemShape;

    /// Core `core` (global index) starts a read or write. The core must not
    /// have an outstanding access.
    fn issue(
        &mut self,
        core: u32,
        op: MemOp,
        addr: BlockAddress,
        sb: &mut Sideband<Self::Msg>,
    ) -> Result<(), Violation>;

    /// Deliver one message to its destination agent.
    fn deliver(
        &mut self,
        env: Envelope<Self::Msg>,
        sb: &mut Sideband<Self::Msg>,
    ) -> Result<(), Violation>;

    fn core_busy(&self, core: u32) -> bool;

    /// Full invariant audit over a snapshot, given the in-flight messages.
    fn audit(&self, in_flight: &[Envelope<Self::Msg>]) -> Vec<Violation>;

    /// Hash of the protocol-relevant state with LRU stamps rank-normalized,
    /// for visited-state deduplication in the checker.
    fn canonical_hash(&self, hasher: &mut std::collections::hash_map::DefaultHasher);
}
