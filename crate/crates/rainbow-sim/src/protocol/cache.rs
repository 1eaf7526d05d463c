//! Generic set-associative, LRU-replaced storage used for private caches and
//! LLC banks. Replacement is decoupled from insertion: `insert` may leave a
//! set overfull and the owning controller later picks a victim it is allowed
//! to evict (eviction is a protocol transaction, not a container side effect).

use crate::coherence::BlockAddress;
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CacheConfig {
    pub sets: u32,
    pub ways: u32,
    pub index_shift: u32,
}

impl CacheConfig {
    pub fn new(sets: u32, ways: u32, index_shift: u32) -> Self {
        assert!(sets.is_power_of_two() && ways >= 1);
        CacheConfig {
            sets,
            ways,
            index_shift,
        }
    }

    /// Geometry from a size in KiB, associativity and block size.
    pub fn from_kib(kib: u32, ways: u32, block_bytes: u32, index_shift: u32) -> Self {
        let lines = (kib * 1024 / block_bytes).max(ways);
        Self::new((lines / ways).max(1).next_power_of_two(), ways, index_shift)
    }

    pub fn lines(&self) -> u32 {
        self.sets * self.ways
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Line<L> {
    addr: BlockAddress,
    payload: L,
    lru: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SetAssocCache<L> {
    config: CacheConfig,
    sets: Vec<Vec<Line<L>>>,
    clock: u64,
}

impl<L> SetAssocCache<L> {
    pub fn new(config: CacheConfig) -> Self {
        SetAssocCache {
            sets: (0..config.sets).map(|_| Vec::new()).collect(),
            config,
            clock: 0,
        }
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn set_of(&self, addr: BlockAddress) -> usize {
        ((addr.0 >> self.config.index_shift) & (self.config.sets as u64 - 1)) as usize
    }

    pub fn get(&mut self, addr: BlockAddress) -> Option<&mut L> {
        self.clock += 1;
        let clock = self.clock;
        let set = self.set_of(addr);
        self.sets[set].iter_mut().find(|l| l.addr == addr).map(|l| {
            l.lru = clock;
            &mut l.payload
        })
    }

    pub fn peek(&self, addr: BlockAddress) -> Option<&L> {
        self.sets[self.set_of(addr)]
            .iter()
            .find(|l| l.addr == addr)
            .map(|l| &l.payload)
    }

    pub fn peek_mut(&mut self, addr: BlockAddress) -> Option<&mut L> {
        let set = self.set_of(addr);
        self.sets[set]
            .iter_mut()
            .find(|l| l.addr == addr)
            .map(|l| &mut l.payload)
    }

    /// Install a line; the set may become overfull until the controller
    /// completes an eviction. Panics if the address is already present.
    pub fn insert(&mut self, addr: BlockAddress, payload: L) {
        debug_assert!(self.peek(addr).is_none(), "address already cached");
        self.clock += 1;
        let clock = self.clock;
        let set = self.set_of(addr);
        self.sets[set].push(Line {
            addr,
            payload,
            lru: clock,
        });
    }

    pub fn remove(&mut self, addr: BlockAddress) -> Option<L> {
        let set = self.set_of(addr);
        let pos = self.sets[set].iter().position(|l| l.addr == addr)?;
        Some(self.sets[set].swap_remove(pos).payload)
    }

    /// LRU victim in `addr`'s set among lines `evictable` accepts, but only
    /// if the set holds more lines than it has ways (or `force`).
    pub fn victim_in_set(
        &self,
        addr: BlockAddress,
        evictable: impl Fn(BlockAddress, &L) -> bool,
    ) -> Option<BlockAddress> {
        let set = &self.sets[self.set_of(addr)];
        if (set.len() as u32) <= self.config.ways {
            return None;
        }
        set.iter()
            .filter(|l| evictable(l.addr, &l.payload))
            .min_by_key(|l| l.lru)
            .map(|l| l.addr)
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockAddress, &L)> {
        self.sets.iter().flatten().map(|l| (l.addr, &l.payload))
    }
}

impl<L: Hash> SetAssocCache<L> {
    /// Hash with LRU stamps replaced by their within-set rank, so two states
    /// that differ only in absolute stamp values collapse together.
    pub fn canonical_hash<H: Hasher>(&self, h: &mut H) {
        for set in &self.sets {
            let mut order: Vec<&Line<L>> = set.iter().collect();
            order.sort_by_key(|l| l.addr);
            let mut by_lru: Vec<u64> = set.iter().map(|l| l.lru).collect();
            by_lru.sort_unstable();
            for line in order {
                line.addr.hash(h);
                line.payload.hash(h);
                let rank = by_lru.binary_search(&line.lru).unwrap();
                rank.hash(h);
            }
            u64::MAX.hash(h); // set separator
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a(i: u64) -> BlockAddress {
        BlockAddress(i << 6)
    }

    #[test]
    fn insert_get_remove() {
        let mut c: SetAssocCache<u32> = SetAssocCache::new(CacheConfig::new(2, 2, 6));
        c.insert(a(0), 10);
        c.insert(a(2), 20);
        assert_eq!(c.get(a(0)), Some(&mut 10));
        assert_eq!(c.remove(a(2)), Some(20));
        assert!(c.peek(a(2)).is_none());
    }

    #[test]
    fn victim_only_when_overfull_and_lru() {
        let mut c: SetAssocCache<u32> = SetAssocCache::new(CacheConfig::new(1, 2, 6));
        c.insert(a(0), 0);
        c.insert(a(1), 1);
        assert_eq!(c.victim_in_set(a(0), |_, _| true), None);
        c.insert(a(2), 2);
        c.get(a(0)); // touch: a(1) is now LRU
        assert_eq!(c.victim_in_set(a(2), |_, _| true), Some(a(1)));
        // Busy lines can be excluded from victim selection.
        assert_eq!(c.victim_in_set(a(2), |addr, _| addr != a(1)), Some(a(2)));
    }

    #[test]
    fn canonical_hash_ignores_absolute_stamps() {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::Hasher;
        let mut c1: SetAssocCache<u32> = SetAssocCache::new(CacheConfig::new(1, 4, 6));
        let mut c2 = c1.clone();
        c1.insert(a(0), 5);
        c1.insert(a(1), 6);
        // Same content, different stamp history.
        c2.insert(a(1), 6);
        c2.insert(a(0), 5);
        c2.get(a(0));
        c2.get(a(1));
        let (mut h1, mut h2) = (DefaultHasher::new(), DefaultHasher::new());
        c1.canonical_hash(&mut h1);
        c2.canonical_hash(&mut h2);
        assert_eq!(h1.finish(), h2.finish());
    }
}
