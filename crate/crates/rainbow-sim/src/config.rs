//! Machine configuration: TOML schema with defaults matching the reference
//! 4-chip server, the L/M/S tracking-capacity ladder used by sweeps, and the
//! derived per-structure parameters handed to the protocol constructors.

use crate::coherence::SystemShape;
use crate::dlcbf::DlcbfConfig;
use crate::engine::LatencyConfig;
use crate::protocol::CacheConfig;
use crate::sparse_dir::DirConfig;
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub chips: u32,
    pub cores: CoresConfig,
    pub cache: CacheSection,
    pub llc: LlcConfig,
    pub mem: MemConfig,
    pub net: NetConfig,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CoresConfig {
    pub count: u32,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CacheSection {
    pub l1: L1Config,
    pub l2: L2Config,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct L1Config {
    pub kb: u32,
    pub assoc: u32,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct L2Config {
    pub kb: u32,
    pub assoc: u32,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LlcConfig {
    pub mb: u32,
    pub assoc: u32,
    pub banks: u32,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MemConfig {
    pub cycles: u64,
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub link_bytes: u32,
}

impl Default for CoresConfig {
    fn default() -> Self {
        CoresConfig { count: 4 }
    }
}
impl Default for CacheSection {
    fn default() -> Self {
        CacheSection {
            l1: L1Config::default(),
            l2: L2Config::default(),
        }
    }
}
impl Default for L1Config {
    fn default() -> Self {
        L1Config { kb: 32, assoc: 4 }
    }
}
impl Default for L2Config {
    fn default() -> Self {
        L2Config { kb: 128, assoc: 8 }
    }
}
impl Default for LlcConfig {
    fn default() -> Self {
        LlcConfig {
            mb: 4,
            assoc: 16,
            banks: 4,
        }
    }
}
impl Default for MemConfig {
    fn default() -> Self {
        MemConfig { cycles: 300 }
    }
}
impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { link_bytes: 16 }
    }
}
impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            chips: 4,
            cores: CoresConfig::default(),
            cache: CacheSection::default(),
            llc: LlcConfig::default(),
            mem: MemConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let shape = self.shape();
        shape.validate().map_err(ConfigError::Invalid)?;
        if self.cache.l1.assoc < 1 || self.cache.l2.assoc < 1 || self.llc.assoc < 1 {
            return Err(ConfigError::Invalid("associativity must be >= 1".into()));
        }
        if self.cache.l1.kb < 1 || self.cache.l2.kb < 1 || self.llc.mb < 1 {
            return Err(ConfigError::Invalid("cache sizes must be >= 1".into()));
        }
        if self.net.link_bytes < 1 {
            return Err(ConfigError::Invalid("link width must be >= 1 byte".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> SystemShape {
        SystemShape {
            num_chips: self.chips,
            cores_per_chip: self.cores.count,
            llc_banks_per_chip: self.llc.banks,
            block_size: 64,
        }
    }
}

/// Tracking-capacity ladder: how many blocks the coherence bookkeeping can
/// follow precisely. L is overprovisioned, M is the balanced point, S is
/// deliberately starved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeClass {
    L,
    M,
    S,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::L, SizeClass::M, SizeClass::S];

    pub fn parse(s: &str) -> Option<SizeClass> {
        match s {
            "L" | "l" => Some(SizeClass::L),
            "M" | "m" => Some(SizeClass::M),
            "S" | "s" => Some(SizeClass::S),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SizeClass::L => "L",
            SizeClass::M => "M",
            SizeClass::S => "S",
        }
    }

    /// Probe-filter entries per chip for the broadcast baseline.
    pub fn probe_entries(&self) -> u32 {
        match self {
            SizeClass::L => 131072,
            SizeClass::M => 16384,
            SizeClass::S => 4096,
        }
    }

    /// D-LLC entries per chip (all banks combined).
    pub fn dllc_entries(&self) -> u32 {
        match self {
            SizeClass::L => 32768,
            SizeClass::M => 512,
            SizeClass::S => 128,
        }
    }

    /// D-MEM entries per home memory controller.
    pub fn dmem_entries(&self) -> u32 {
        match self {
            SizeClass::L => 32768,
            SizeClass::M => 4096,
            SizeClass::S => 1024,
        }
    }
}

/// Everything a protocol constructor needs, derived from a [`SimConfig`]
/// plus a [`SizeClass`].
#[derive(Debug, Clone, PartialEq)]
pub struct MachineParams {
    pub shape: SystemShape,
    pub l1: CacheConfig,
    pub l2: CacheConfig,
    /// Whole-chip LLC geometry; banking only affects message routing.
    pub llc: CacheConfig,
    pub lat: LatencyConfig,
    pub dllc: DirConfig,
    pub dmem: DirConfig,
    pub probe: DirConfig,
    pub fllc: DlcbfConfig,
    pub fmem: DlcbfConfig,
}

const DIR_WAYS: u32 = 4;

fn dir_geometry(entries: u32, ways_cap: u32, domain_population: u32, index_shift: u32) -> DirConfig {
    let ways = ways_cap.min(entries).max(1);
    let sets = (entries / ways).max(1).next_power_of_two();
    DirConfig {
        sets,
        ways,
        domain_population,
        index_shift,
    }
}

impl MachineParams {
    pub fn derive(cfg: &SimConfig, class: SizeClass) -> Self {
        let shape = cfg.shape();
        let block_bits = shape.block_bits();
        let dir_shift = block_bits + shape.bank_bits();
        let l1 = CacheConfig::from_kib(cfg.cache.l1.kb, cfg.cache.l1.assoc, 64, block_bits);
        let l2 = CacheConfig::from_kib(cfg.cache.l2.kb, cfg.cache.l2.assoc, 64, block_bits);
        let llc = CacheConfig::from_kib(cfg.llc.mb * 1024, cfg.llc.assoc, 64, block_bits);
        let lat = LatencyConfig {
            memory_cycles: cfg.mem.cycles,
            link_width_bytes: cfg.net.link_bytes,
            ..LatencyConfig::default()
        };
        // Filter capacity follows what the structure can ever observe: F-LLC
        // tracks one bit per block held in a chip's private caches, F-MEM one
        // count per chip caching a home block anywhere on the chip.
        let priv_lines = shape.cores_per_chip * (l1.lines() + l2.lines());
        let chip_lines = priv_lines + llc.lines();
        MachineParams {
            shape,
            l1,
            l2,
            llc,
            lat,
            dllc: dir_geometry(
                class.dllc_entries(),
                DIR_WAYS,
                shape.cores_per_chip,
                dir_shift,
            ),
            dmem: dir_geometry(class.dmem_entries(), DIR_WAYS, shape.num_chips, dir_shift),
            probe: dir_geometry(
                class.probe_entries(),
                DIR_WAYS,
                shape.num_chips,
                dir_shift,
            ),
            fllc: DlcbfConfig::size_for_fpr(priv_lines as u64, 0.05, 0x11),
            fmem: DlcbfConfig::size_for_fpr(chip_lines as u64, 0.05, 0x22),
        }
    }

    /// Desk-scale machine for exhaustive exploration: single-bank chips,
    /// one-line private caches, two-way LLC and tracking structures small
    /// enough that eviction paths actually fire.
    pub fn tiny(num_chips: u32, cores_per_chip: u32) -> Self {
        let shape = SystemShape::new(num_chips, cores_per_chip, 1);
        let block_bits = shape.block_bits();
        let filter = DlcbfConfig {
            subtables: 2,
            buckets_per_subtable: 4,
            cells_per_bucket: 2,
            fingerprint_bits: 8,
            counter_bits: 3,
            seed: 7,
        };
        MachineParams {
            shape,
            l1: CacheConfig::new(1, 1, block_bits),
            l2: CacheConfig::new(1, 1, block_bits),
            llc: CacheConfig::new(1, 2, block_bits),
            lat: LatencyConfig::default(),
            dllc: DirConfig {
                sets: 1,
                ways: 2,
                domain_population: cores_per_chip,
                index_shift: block_bits,
            },
            dmem: DirConfig {
                sets: 1,
                ways: 2,
                domain_population: num_chips,
                index_shift: block_bits,
            },
            probe: DirConfig {
                sets: 1,
                ways: 2,
                domain_population: num_chips,
                index_shift: block_bits,
            },
            fllc: filter,
            fmem: DlcbfConfig { seed: 8, ..filter },
        }
    }

    /// Variant with single-entry directories, for demonstrating that
    /// directory displacement never forces an invalidation.
    pub fn with_one_entry_dirs(mut self) -> Self {
        self.dllc.sets = 1;
        self.dllc.ways = 1;
        self.dmem.sets = 1;
        self.dmem.ways = 1;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_machine() {
        let c = SimConfig::default();
        assert_eq!(c.chips, 4);
        assert_eq!(c.cores.count, 4);
        assert_eq!(c.cache.l1.kb, 32);
        assert_eq!(c.cache.l1.assoc, 4);
        assert_eq!(c.cache.l2.kb, 128);
        assert_eq!(c.llc.mb, 4);
        assert_eq!(c.llc.banks, 4);
        assert_eq!(c.mem.cycles, 300);
        assert_eq!(c.net.link_bytes, 16);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = SimConfig::from_toml_str(
            r#"
chips = 2
[cores]
count = 4
[cache.l1]
kb = 32
assoc = 4
[cache.l2]
kb = 128
[llc]
mb = 4
banks = 4
[mem]
cycles = 300
[net]
link_bytes = 16
"#,
        )
        .unwrap();
        assert_eq!(c.chips, 2);
        assert_eq!(c, SimConfig { chips: 2, ..SimConfig::default() });
        // Omitted keys take defaults.
        let c = SimConfig::from_toml_str("chips = 2").unwrap();
        assert_eq!(c.cache.l2.kb, 128);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(SimConfig::from_toml_str("chipz = 2").is_err());
        assert!(SimConfig::from_toml_str("[llc]\nmbb = 1").is_err());
    }

    #[test]
    fn ladder_entries() {
        assert_eq!(SizeClass::L.probe_entries(), 131072);
        assert_eq!(SizeClass::M.probe_entries(), 16384);
        assert_eq!(SizeClass::S.probe_entries(), 4096);
        assert_eq!(SizeClass::L.dllc_entries(), 32768);
        assert_eq!(SizeClass::M.dllc_entries(), 512);
        assert_eq!(SizeClass::S.dllc_entries(), 128);
        assert_eq!(SizeClass::M.dmem_entries(), 4096);
    }

    #[test]
    fn derived_geometry() {
        let p = MachineParams::derive(&SimConfig::default(), SizeClass::M);
        assert_eq!(p.l1.lines(), 32 * 1024 / 64);
        assert_eq!(p.l2.lines(), 128 * 1024 / 64);
        assert_eq!(p.llc.lines(), 4 * 1024 * 1024 / 64);
        assert_eq!(p.dllc.entries(), 512);
        assert_eq!(p.dmem.entries(), 4096);
        assert_eq!(p.probe.entries(), 16384);
        assert_eq!(p.dllc.index_shift, 6 + 2);
        // Small directories keep at least one way.
        let s = MachineParams::derive(&SimConfig::default(), SizeClass::S);
        assert!(s.dllc.ways >= 1 && s.dllc.sets.is_power_of_two());
    }

    #[test]
    fn tiny_machine_is_valid() {
        let p = MachineParams::tiny(2, 2);
        assert_eq!(p.shape.total_cores(), 4);
        p.dllc.validate().unwrap();
        p.dmem.validate().unwrap();
        p.fllc.validate().unwrap();
        let one = p.with_one_entry_dirs();
        assert_eq!(one.dllc.entries(), 1);
    }
}
