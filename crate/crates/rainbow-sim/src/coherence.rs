//! Shared protocol vocabulary: system shape, block addresses, colored token
//! arithmetic and the message taxonomy used for traffic accounting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size in bytes of a control message (header only).
pub const CTRL_MSG_BYTES: u32 = 8;
/// Size in bytes of a data-carrying message (64B block + 8B header).
pub const DATA_MSG_BYTES: u32 = 72;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("token conservation violated for merge: {0:?} + {1:?} exceeds full set")]
    ConservationViolation(TokenSet, TokenSet),
    #[error("holder has no spare silver token to grant")]
    InsufficientSilver,
    #[error("holder has no spare bronze token to grant")]
    InsufficientBronze,
}

/// Static shape of the simulated machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemShape {
    pub num_chips: u32,
    pub cores_per_chip: u32,
    pub llc_banks_per_chip: u32,
    pub block_size: u32,
}

impl SystemShape {
    pub fn new(num_chips: u32, cores_per_chip: u32, llc_banks_per_chip: u32) -> Self {
        let s = SystemShape {
            num_chips,
            cores_per_chip,
            llc_banks_per_chip,
            block_size: 64,
        };
        s.validate().expect("invalid system shape");
        s
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_chips < 1 || self.cores_per_chip < 1 || self.llc_banks_per_chip < 1 {
            return Err("chips, cores per chip and llc banks must all be >= 1".into());
        }
        if !self.block_size.is_power_of_two() || self.block_size < 8 {
            return Err("block size must be a power of two >= 8".into());
        }
        if !self.llc_banks_per_chip.is_power_of_two() {
            return Err("llc bank count must be a power of two".into());
        }
        Ok(())
    }

    pub fn total_cores(&self) -> u32 {
        self.num_chips * self.cores_per_chip
    }

    pub fn block_bits(&self) -> u32 {
        self.block_size.trailing_zeros()
    }

    pub fn bank_bits(&self) -> u32 {
        self.llc_banks_per_chip.trailing_zeros()
    }

    /// LLC bank an address maps to inside a chip (LSB interleaving).
    pub fn bank_of(&self, addr: BlockAddress) -> u32 {
        ((addr.0 >> self.block_bits()) as u32) & (self.llc_banks_per_chip - 1)
    }

    /// Home memory controller chip for an address (bits above the bank bits).
    pub fn home_chip_of(&self, addr: BlockAddress) -> u32 {
        ((addr.0 >> (self.block_bits() + self.bank_bits())) % self.num_chips as u64) as u32
    }

    pub fn global_core(&self, chip: u32, core: u32) -> u32 {
        chip * self.cores_per_chip + core
    }

    pub fn chip_of_core(&self, global_core: u32) -> u32 {
        global_core / self.cores_per_chip
    }

    pub fn local_core(&self, global_core: u32) -> u32 {
        global_core % self.cores_per_chip
    }
}

/// A block-aligned physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockAddress(pub u64);

impl BlockAddress {
    pub fn new(value: u64, shape: &SystemShape) -> Result<Self, String> {
        if value & (shape.block_size as u64 - 1) != 0 {
            return Err(format!("address {value:#x} is not block aligned"));
        }
        Ok(BlockAddress(value))
    }

    pub fn is_aligned(&self, shape: &SystemShape) -> bool {
        self.0 & (shape.block_size as u64 - 1) == 0
    }
}

/// Per-block holding of colored tokens: the coherence permission currency.
///
/// One bronze token permits reading; the full set permits writing. The gold
/// holder answers external (off-chip) reads, a silver holder answers reads
/// from cores of its own chip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSet {
    pub gold: u8,
    pub silver: u32,
    pub bronze: u32,
}

impl TokenSet {
    pub const EMPTY: TokenSet = TokenSet {
        gold: 0,
        silver: 0,
        bronze: 0,
    };

    pub fn new(gold: u8, silver: u32, bronze: u32) -> Self {
        debug_assert!(gold <= 1);
        TokenSet {
            gold,
            silver,
            bronze,
        }
    }

    /// The complete token set for a block: one gold, one silver per chip,
    /// one bronze per core.
    pub fn full_set(shape: &SystemShape) -> TokenSet {
        TokenSet {
            gold: 1,
            silver: shape.num_chips,
            bronze: shape.total_cores(),
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == TokenSet::EMPTY
    }

    pub fn is_full(&self, shape: &SystemShape) -> bool {
        *self == TokenSet::full_set(shape)
    }

    /// Component-wise sum, failing if the result would exceed the full set.
    pub fn merge(&self, other: &TokenSet, shape: &SystemShape) -> Result<TokenSet, TokenError> {
        let full = TokenSet::full_set(shape);
        let sum = TokenSet {
            gold: self.gold + other.gold,
            silver: self.silver + other.silver,
            bronze: self.bronze + other.bronze,
        };
        if sum.gold > full.gold || sum.silver > full.silver || sum.bronze > full.bronze {
            return Err(TokenError::ConservationViolation(*self, *other));
        }
        Ok(sum)
    }

    /// Component-wise sum without the conservation bound. Used only where the
    /// bound is checked by the caller (e.g. summing holdings for an audit).
    pub fn saturating_add(&self, other: &TokenSet) -> TokenSet {
        TokenSet {
            gold: self.gold + other.gold,
            silver: self.silver + other.silver,
            bronze: self.bronze + other.bronze,
        }
    }

    /// Component-wise difference; panics if `other` is not contained in self.
    pub fn minus(&self, other: &TokenSet) -> TokenSet {
        debug_assert!(self.contains(other));
        TokenSet {
            gold: self.gold - other.gold,
            silver: self.silver - other.silver,
            bronze: self.bronze - other.bronze,
        }
    }

    pub fn contains(&self, other: &TokenSet) -> bool {
        self.gold >= other.gold && self.silver >= other.silver && self.bronze >= other.bronze
    }

    /// Grant for an external (other-chip) read served by the gold holder:
    /// one silver plus as many bronzes as the requesting chip has cores,
    /// capped so the holder keeps gold, one silver and one bronze.
    pub fn split_for_external_read(
        &self,
        requestor_chip_cores: u32,
    ) -> Result<(TokenSet, TokenSet), TokenError> {
        if self.gold != 1 || self.silver < 2 {
            return Err(TokenError::InsufficientSilver);
        }
        if self.bronze < 2 {
            return Err(TokenError::InsufficientBronze);
        }
        let granted = TokenSet {
            gold: 0,
            silver: 1,
            bronze: requestor_chip_cores.min(self.bronze - 1).max(1),
        };
        Ok((granted, self.minus(&granted)))
    }
}

/// The kind of unit an agent is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentKind {
    CoreCache,
    LlcBank,
    DfLlc,
    MemCtrl,
}

/// Identity of a protocol agent: a core's private cache controller, an LLC
/// bank (with its co-located D|F-LLC), or a memory controller (with D|F-MEM).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId {
    pub kind: AgentKind,
    pub chip: u32,
    pub unit: u32,
}

impl AgentId {
    pub fn core(shape: &SystemShape, global_core: u32) -> AgentId {
        AgentId {
            kind: AgentKind::CoreCache,
            chip: shape.chip_of_core(global_core),
            unit: shape.local_core(global_core),
        }
    }

    pub fn llc_bank(chip: u32, bank: u32) -> AgentId {
        AgentId {
            kind: AgentKind::LlcBank,
            chip,
            unit: bank,
        }
    }

    pub fn mem_ctrl(chip: u32) -> AgentId {
        AgentId {
            kind: AgentKind::MemCtrl,
            chip,
            unit: 0,
        }
    }

    pub fn in_bounds(&self, shape: &SystemShape) -> bool {
        self.chip < shape.num_chips
            && match self.kind {
                AgentKind::CoreCache => self.unit < shape.cores_per_chip,
                AgentKind::LlcBank | AgentKind::DfLlc => self.unit < shape.llc_banks_per_chip,
                AgentKind::MemCtrl => self.unit == 0,
            }
    }

    pub fn global_core(&self, shape: &SystemShape) -> u32 {
        debug_assert_eq!(self.kind, AgentKind::CoreCache);
        shape.global_core(self.chip, self.unit)
    }
}

/// Protocol message classes, used for traffic accounting. `Ack` (transaction
/// completion notification) is the only class beyond the base taxonomy; it is
/// how a blocking controller learns it may release an MSHR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    ReadReq,
    WriteReq,
    TokenCountQuery,
    TokenCountReply,
    DataResp,
    TokenResp,
    Inval,
    EvictNotify,
    ReconstructBcast,
    MemReadReq,
    MemWriteBack,
    Ack,
}

/// Wire size of a message: 72B when it carries a data block, 8B otherwise.
pub fn message_bytes(carries_data: bool) -> u32 {
    if carries_data {
        DATA_MSG_BYTES
    } else {
        CTRL_MSG_BYTES
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(chips: u32, cores: u32) -> SystemShape {
        SystemShape::new(chips, cores, 1)
    }

    #[test]
    fn full_set_matches_shape() {
        assert_eq!(
            TokenSet::full_set(&shape(2, 4)),
            TokenSet::new(1, 2, 8)
        );
        assert_eq!(
            TokenSet::full_set(&shape(1, 1)),
            TokenSet::new(1, 1, 1)
        );
        assert_eq!(
            TokenSet::full_set(&shape(4, 4)),
            TokenSet::new(1, 4, 16)
        );
    }

    #[test]
    fn merge_sums_and_checks_bounds() {
        let s = shape(2, 4);
        let a = TokenSet::new(1, 1, 4);
        let b = TokenSet::new(0, 1, 4);
        assert_eq!(a.merge(&b, &s).unwrap(), TokenSet::new(1, 2, 8));
        assert_eq!(
            TokenSet::EMPTY.merge(&TokenSet::new(1, 2, 8), &s).unwrap(),
            TokenSet::new(1, 2, 8)
        );
        assert!(matches!(
            TokenSet::new(1, 2, 8).merge(&TokenSet::new(0, 0, 1), &s),
            Err(TokenError::ConservationViolation(..))
        ));
    }

    #[test]
    fn split_for_external_read_grants_min_rule() {
        let holder = TokenSet::new(1, 2, 8);
        let (granted, retained) = holder.split_for_external_read(4).unwrap();
        assert_eq!(granted, TokenSet::new(0, 1, 4));
        assert_eq!(retained, TokenSet::new(1, 1, 4));

        let holder = TokenSet::new(1, 2, 2);
        let (granted, retained) = holder.split_for_external_read(4).unwrap();
        assert_eq!(granted, TokenSet::new(0, 1, 1));
        assert_eq!(retained, TokenSet::new(1, 1, 1));

        assert_eq!(
            TokenSet::new(1, 1, 4).split_for_external_read(4),
            Err(TokenError::InsufficientSilver)
        );
    }

    #[test]
    fn split_then_merge_round_trips() {
        let s = shape(4, 4);
        for silver in 2..=4u32 {
            for bronze in 2..=16u32 {
                let holder = TokenSet::new(1, silver, bronze);
                let (g, r) = holder.split_for_external_read(4).unwrap();
                assert!(g.bronze >= 1);
                assert_eq!(g.merge(&r, &s).unwrap(), holder);
            }
        }
    }

    #[test]
    fn is_full_checks_exact_equality() {
        let s = shape(2, 4);
        assert!(TokenSet::new(1, 2, 8).is_full(&s));
        assert!(!TokenSet::new(1, 2, 7).is_full(&s));
        assert!(!TokenSet::EMPTY.is_full(&s));
    }

    #[test]
    fn address_alignment() {
        let s = shape(2, 4);
        assert!(BlockAddress::new(0x1040, &s).is_ok());
        assert!(BlockAddress::new(0x1041, &s).is_err());
    }

    #[test]
    fn home_and_bank_interleaving() {
        let s = SystemShape::new(2, 4, 4);
        // block bits = 6, bank bits = 2
        assert_eq!(s.bank_of(BlockAddress(0x40)), 1);
        assert_eq!(s.bank_of(BlockAddress(0xc0)), 3);
        assert_eq!(s.home_chip_of(BlockAddress(0x100)), 1);
        assert_eq!(s.home_chip_of(BlockAddress(0x200)), 0);
    }

    #[test]
    fn message_sizes() {
        assert_eq!(message_bytes(true), 72);
        assert_eq!(message_bytes(false), 8);
    }
}
