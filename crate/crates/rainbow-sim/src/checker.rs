//! Exhaustive interleaving checker for small configurations.
//!
//! State = protocol state + per-channel FIFO contents + per-core program
//! counters. From each state every enabled move is explored: delivering the
//! head of any non-empty channel, or letting an idle core issue its next
//! program operation. Visited states are deduplicated by canonical hash.
//! Every explored state is audited; a state with no enabled moves must have
//! finished the whole program or it is a deadlock.

use crate::coherence::{AgentId, BlockAddress};
use crate::protocol::{CoherenceSystem, Envelope, MemOp, Sideband, Violation};
use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet, VecDeque};
use std::hash::{Hash, Hasher};

/// Per-core straight-line programs driven through every interleaving.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub per_core: Vec<Vec<(MemOp, BlockAddress)>>,
}

impl Program {
    pub fn total_ops(&self) -> usize {
        self.per_core.iter().map(|p| p.len()).sum()
    }
}

/// One edge in the interleaving graph, sufficient to replay a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Issue { core: u32 },
    Deliver { src: AgentId, dst: AgentId },
}

impl std::fmt::Display for Move {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Move::Issue { core } => write!(f, "issue(core {core})"),
            Move::Deliver { src, dst } => write!(f, "deliver({src:?} -> {dst:?})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Distinct states to visit before giving up.
    pub max_states: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_states: 2_000_000 }
    }
}

#[derive(Debug)]
pub enum CheckOutcome {
    Pass {
        states: u64,
        terminals: u64,
    },
    Failed {
        violation: Violation,
        trace: Vec<Move>,
    },
    BudgetExceeded {
        states: u64,
    },
}

#[derive(Clone)]
struct Node<S: CoherenceSystem> {
    sys: S,
    chans: BTreeMap<(AgentId, AgentId), VecDeque<Envelope<S::Msg>>>,
    pc: Vec<usize>,
}

impl<S: CoherenceSystem> Node<S>
where
    S::Msg: Hash,
{
    fn hash_key(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.sys.canonical_hash(&mut h);
        for (k, q) in &self.chans {
            if q.is_empty() {
                continue;
            }
            k.hash(&mut h);
            q.hash(&mut h);
        }
        self.pc.hash(&mut h);
        h.finish()
    }

    fn in_flight(&self) -> Vec<Envelope<S::Msg>> {
        self.chans.values().flatten().cloned().collect()
    }

    fn absorb(&mut self, sb: Sideband<S::Msg>) {
        for o in sb.out {
            self.chans
                .entry((o.env.src, o.env.dst))
                .or_default()
                .push_back(o.env);
        }
    }

    fn moves(&self, program: &Program) -> Vec<Move> {
        let mut out = Vec::new();
        for core in 0..program.per_core.len() {
            if self.pc[core] < program.per_core[core].len() && !self.sys.core_busy(core as u32) {
                out.push(Move::Issue { core: core as u32 });
            }
        }
        for (&(src, dst), q) in &self.chans {
            if !q.is_empty() {
                out.push(Move::Deliver { src, dst });
            }
        }
        out
    }

    fn apply(&mut self, mv: Move, program: &Program) -> Result<(), Violation> {
        let mut sb = Sideband::new();
        match mv {
            Move::Issue { core } => {
                let (op, addr) = program.per_core[core as usize][self.pc[core as usize]];
                self.pc[core as usize] += 1;
                self.sys.issue(core, op, addr, &mut sb)?;
            }
            Move::Deliver { src, dst } => {
                let env = self
                    .chans
                    .get_mut(&(src, dst))
                    .and_then(|q| q.pop_front())
                    .ok_or_else(|| Violation::Stuck {
                        detail: "replayed delivery from an empty channel".into(),
                    })?;
                self.sys.deliver(env, &mut sb)?;
            }
        }
        self.absorb(sb);
        Ok(())
    }
}

/// Explore every interleaving of `program` from `initial`.
pub fn explore<S>(initial: S, program: &Program, limits: Limits) -> CheckOutcome
where
    S: CoherenceSystem,
    S::Msg: Hash,
{
    let start = Node {
        pc: vec![0; program.per_core.len()],
        chans: BTreeMap::new(),
        sys: initial,
    };
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Node<S>, Vec<Move>)> = vec![(start, Vec::new())];
    let mut states = 0u64;
    let mut terminals = 0u64;
    while let Some((node, trace)) = stack.pop() {
        if !visited.insert(node.hash_key()) {
            continue;
        }
        states += 1;
        if states > limits.max_states {
            return CheckOutcome::BudgetExceeded { states };
        }
        let violations = node.sys.audit(&node.in_flight());
        if let Some(v) = violations.into_iter().next() {
            return CheckOutcome::Failed {
                violation: v,
                trace,
            };
        }
        let moves = node.moves(program);
        if moves.is_empty() {
            let unfinished = node
                .pc
                .iter()
                .zip(&program.per_core)
                .any(|(pc, p)| *pc < p.len())
                || (0..program.per_core.len()).any(|c| node.sys.core_busy(c as u32));
            if unfinished {
                return CheckOutcome::Failed {
                    violation: Violation::Stuck {
                        detail: "deadlock: no enabled moves with work outstanding".into(),
                    },
                    trace,
                };
            }
            terminals += 1;
            continue;
        }
        for mv in moves {
            let mut next = node.clone();
            let mut next_trace = trace.clone();
            next_trace.push(mv);
            match next.apply(mv, program) {
                Ok(()) => stack.push((next, next_trace)),
                Err(v) => {
                    return CheckOutcome::Failed {
                        violation: v,
                        trace: next_trace,
                    }
                }
            }
        }
    }
    CheckOutcome::Pass { states, terminals }
}

/// Re-run a recorded move sequence; returns the violation it reproduces, if
/// any, plus the audit result of the final state.
pub fn replay<S>(initial: S, program: &Program, trace: &[Move]) -> Result<(), Violation>
where
    S: CoherenceSystem,
    S::Msg: Hash,
{
    let mut node = Node {
        pc: vec![0; program.per_core.len()],
        chans: BTreeMap::new(),
        sys: initial,
    };
    for &mv in trace {
        node.apply(mv, program)?;
        if let Some(v) = node.sys.audit(&node.in_flight()).into_iter().next() {
            return Err(v);
        }
    }
    // a witness may end in a deadlock state rather than a bad delivery
    if node.moves(program).is_empty() {
        let unfinished = node
            .pc
            .iter()
            .zip(&program.per_core)
            .any(|(pc, p)| *pc < p.len())
            || (0..program.per_core.len()).any(|c| node.sys.core_busy(c as u32));
        if unfinished {
            return Err(Violation::Stuck {
                detail: "deadlock: no enabled moves with work outstanding".into(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MachineParams;
    use crate::protocol::FaultPlan;
    use crate::rainbow::RainbowSystem;

    fn a(i: u64) -> BlockAddress {
        BlockAddress(i * 64)
    }

    fn sys() -> RainbowSystem {
        RainbowSystem::new(MachineParams::tiny(2, 1), FaultPlan::none())
    }

    #[test]
    fn two_cores_conflicting_writes_pass() {
        let program = Program {
            per_core: vec![
                vec![(MemOp::Write, a(0)), (MemOp::Read, a(0))],
                vec![(MemOp::Write, a(0))],
            ],
        };
        match explore(sys(), &program, Limits::default()) {
            CheckOutcome::Pass { states, terminals } => {
                assert!(states > 10);
                assert!(terminals >= 1);
            }
            other => panic!("expected pass, got {other:?}"),
        }
    }

    #[test]
    fn read_read_write_two_blocks_pass() {
        let program = Program {
            per_core: vec![
                vec![(MemOp::Read, a(0)), (MemOp::Write, a(1))],
                vec![(MemOp::Read, a(1)), (MemOp::Read, a(0))],
            ],
        };
        match explore(sys(), &program, Limits::default()) {
            CheckOutcome::Pass { .. } => {}
            other => panic!("expected pass, got {other:?}"),
        }
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let program = Program {
            per_core: vec![
                vec![(MemOp::Write, a(0)), (MemOp::Write, a(1))],
                vec![(MemOp::Write, a(1)), (MemOp::Write, a(0))],
            ],
        };
        match explore(sys(), &program, Limits { max_states: 5 }) {
            CheckOutcome::BudgetExceeded { states } => assert!(states > 5),
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn hta_conflicting_writes_pass() {
        use crate::hta::HtaSystem;
        let program = Program {
            per_core: vec![
                vec![(MemOp::Write, a(0)), (MemOp::Read, a(0))],
                vec![(MemOp::Write, a(0))],
            ],
        };
        let sys = HtaSystem::new(MachineParams::tiny(2, 1), FaultPlan::none());
        match explore(sys, &program, Limits::default()) {
            CheckOutcome::Pass { states, .. } => assert!(states > 10),
            other => panic!("expected pass, got {other:?}"),
        }
    }

    #[test]
    fn skipped_invalidation_deadlocks_and_is_reported() {
        use crate::hta::HtaSystem;
        let program = Program {
            per_core: vec![
                vec![(MemOp::Read, a(0))],
                vec![(MemOp::Read, a(0)), (MemOp::Write, a(0))],
            ],
        };
        let sys = HtaSystem::new(
            MachineParams::tiny(2, 1),
            FaultPlan::seeded(crate::protocol::Fault::SkipInvalidation),
        );
        match explore(sys, &program, Limits::default()) {
            CheckOutcome::Failed { violation, .. } => {
                assert!(
                    matches!(violation, Violation::Stuck { .. })
                        || matches!(violation, Violation::Swmr { .. }),
                    "unexpected violation kind: {violation:?}"
                );
            }
            other => panic!("expected a failure, got {other:?}"),
        }
    }

    #[test]
    fn silver_double_grant_is_caught() {
        // the faulty split only runs when the LLC holds a full token set, so
        // walk one through the victim chain first, then read it remotely
        let program = Program {
            per_core: vec![
                vec![
                    (MemOp::Write, a(0)),
                    (MemOp::Read, a(1)),
                    (MemOp::Read, a(2)),
                ],
                vec![],
                vec![(MemOp::Read, a(0))],
                vec![],
            ],
        };
        let faulty = || {
            RainbowSystem::new(
                MachineParams::tiny(2, 2),
                FaultPlan::seeded(crate::protocol::Fault::SilverDoubleGrant),
            )
        };
        match explore(faulty(), &program, Limits::default()) {
            CheckOutcome::Failed { violation, trace } => {
                let again = replay(faulty(), &program, &trace);
                assert_eq!(again, Err(violation));
            }
            other => panic!("expected a caught fault, got {other:?}"),
        }
    }

    #[test]
    fn seeded_fault_is_caught_and_replays() {
        let program = Program {
            per_core: vec![
                vec![(MemOp::Read, a(0))],
                vec![(MemOp::Read, a(0)), (MemOp::Write, a(0))],
            ],
        };
        let faulty = || {
            RainbowSystem::new(
                MachineParams::tiny(2, 1),
                FaultPlan::seeded(crate::protocol::Fault::DropToken),
            )
        };
        match explore(faulty(), &program, Limits::default()) {
            CheckOutcome::Failed { violation, trace } => {
                let again = replay(faulty(), &program, &trace);
                assert_eq!(again, Err(violation));
            }
            other => panic!("expected a caught fault, got {other:?}"),
        }
    }
}
