//! Synthetic trace generation and trace file I/O.
//!
//! Trace files are plain text, one record per line: `core op hex_addr`
//! (e.g. `3 W 0x1040`), `#` starts a comment, UTF-8, LF newlines.

use crate::coherence::{BlockAddress, SystemShape};
use crate::protocol::MemOp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub core: u32,
    pub op: MemOp,
    pub addr: BlockAddress,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Private,
    SharedUniform,
    ProducerConsumer,
    Migratory,
}

impl Pattern {
    pub fn parse(s: &str) -> Option<Pattern> {
        match s {
            "private" => Some(Pattern::Private),
            "shared-uniform" => Some(Pattern::SharedUniform),
            "producer-consumer" => Some(Pattern::ProducerConsumer),
            "migratory" => Some(Pattern::Migratory),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub pattern: Pattern,
    pub footprint_blocks: u64,
    pub ops_per_core: u64,
    pub shared_fraction: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.footprint_blocks < 1 {
            return Err("footprint must be at least one block".into());
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err("shared fraction must be in [0, 1]".into());
        }
        Ok(())
    }
}

const WRITE_FRACTION: f64 = 0.3;

fn block_addr(block_index: u64, shape: &SystemShape) -> BlockAddress {
    BlockAddress(block_index << shape.block_bits())
}

/// Generate a synthetic trace. Deterministic in (spec, shape).
pub fn generate(spec: &GeneratorSpec, shape: &SystemShape) -> Vec<TraceRecord> {
    spec.validate().expect("invalid generator spec");
    let cores = shape.total_cores();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trace = Vec::with_capacity((cores as u64 * spec.ops_per_core) as usize);
    match spec.pattern {
        Pattern::Private | Pattern::SharedUniform => {
            let shared = if spec.pattern == Pattern::Private {
                0.0
            } else {
                spec.shared_fraction
            };
            // Shared region occupies the low block indices; private regions
            // follow, one disjoint range per core.
            for round in 0..spec.ops_per_core {
                let _ = round;
                for core in 0..cores {
                    let p: f64 = rng.gen();
                    let in_shared = p < shared;
                    let block = if in_shared {
                        spec.footprint_blocks * cores as u64
                            + rng.gen_range(0..spec.footprint_blocks)
                    } else {
                        core as u64 * spec.footprint_blocks
                            + rng.gen_range(0..spec.footprint_blocks)
                    };
                    let op = if rng.gen::<f64>() < WRITE_FRACTION {
                        MemOp::Write
                    } else {
                        MemOp::Read
                    };
                    trace.push(TraceRecord {
                        core,
                        op,
                        addr: block_addr(block, shape),
                    });
                }
            }
        }
        Pattern::ProducerConsumer => {
            // Rotating producer writes a block, every other core reads it.
            let mut issued = vec![0u64; cores as usize];
            let mut block = 0u64;
            let mut producer = 0u32;
            while issued.iter().any(|&n| n < spec.ops_per_core) {
                if issued[producer as usize] < spec.ops_per_core {
                    trace.push(TraceRecord {
                        core: producer,
                        op: MemOp::Write,
                        addr: block_addr(block, shape),
                    });
                    issued[producer as usize] += 1;
                }
                for c in 0..cores {
                    if c != producer && issued[c as usize] < spec.ops_per_core {
                        trace.push(TraceRecord {
                            core: c,
                            op: MemOp::Read,
                            addr: block_addr(block, shape),
                        });
                        issued[c as usize] += 1;
                    }
                }
                block = (block + 1) % spec.footprint_blocks;
                producer = (producer + 1) % cores;
            }
        }
        Pattern::Migratory => {
            // A block migrates core to core under read-modify-write.
            let mut issued = vec![0u64; cores as usize];
            let mut block = 0u64;
            let mut turn = 0u32;
            while issued.iter().any(|&n| n < spec.ops_per_core) {
                if issued[turn as usize] + 2 <= spec.ops_per_core
                    || issued[turn as usize] < spec.ops_per_core
                {
                    let addr = block_addr(block, shape);
                    trace.push(TraceRecord {
                        core: turn,
                        op: MemOp::Read,
                        addr,
                    });
                    issued[turn as usize] += 1;
                    if issued[turn as usize] < spec.ops_per_core {
                        trace.push(TraceRecord {
                            core: turn,
                            op: MemOp::Write,
                            addr,
                        });
                        issued[turn as usize] += 1;
                    }
                }
                turn = (turn + 1) % cores;
                if turn == 0 {
                    block = (block + 1) % spec.footprint_blocks;
                }
            }
        }
    }
    trace
}

pub fn save_trace(trace: &[TraceRecord], path: &Path) -> Result<(), TraceError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# core op hex_addr")?;
    for r in trace {
        let op = match r.op {
            MemOp::Read => 'R',
            MemOp::Write => 'W',
        };
        writeln!(f, "{} {} {:#x}", r.core, op, r.addr.0)?;
    }
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut trace = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        if let Some(rec) = parse_line(&line, idx + 1)? {
            trace.push(rec);
        }
    }
    Ok(trace)
}

/// Parse one trace line; comments and blank lines yield `None`.
pub fn parse_line(line: &str, line_no: usize) -> Result<Option<TraceRecord>, TraceError> {
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let err = |msg: &str| TraceError::Parse {
        line: line_no,
        msg: msg.to_string(),
    };
    let mut parts = body.split_whitespace();
    let core: u32 = parts
        .next()
        .ok_or_else(|| err("missing core index"))?
        .parse()
        .map_err(|_| err("bad core index"))?;
    let op = match parts.next().ok_or_else(|| err("missing op"))? {
        "R" | "r" => MemOp::Read,
        "W" | "w" => MemOp::Write,
        other => {
            return Err(err(&format!("bad op {other:?} (expected R or W)")));
        }
    };
    let addr_s = parts.next().ok_or_else(|| err("missing address"))?;
    let addr_v = if let Some(hex) = addr_s.strip_prefix("0x").or(addr_s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).map_err(|_| err("bad hex address"))?
    } else {
        addr_s.parse().map_err(|_| err("bad address"))?
    };
    if parts.next().is_some() {
        return Err(err("trailing fields"));
    }
    Ok(Some(TraceRecord {
        core,
        op,
        addr: BlockAddress(addr_v),
    }))
}

/// Check trace records against a shape: aligned addresses, cores in range.
pub fn validate_trace(trace: &[TraceRecord], shape: &SystemShape) -> Result<(), String> {
    for (i, r) in trace.iter().enumerate() {
        if r.core >= shape.total_cores() {
            return Err(format!("record {i}: core {} out of range", r.core));
        }
        if !r.addr.is_aligned(shape) {
            return Err(format!("record {i}: address {:#x} not aligned", r.addr.0));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn shape() -> SystemShape {
        SystemShape::new(2, 2, 1)
    }

    fn spec(pattern: Pattern) -> GeneratorSpec {
        GeneratorSpec {
            pattern,
            footprint_blocks: 16,
            ops_per_core: 50,
            shared_fraction: 0.5,
            seed: 42,
        }
    }

    #[test]
    fn private_has_no_inter_core_overlap() {
        let t = generate(&spec(Pattern::Private), &shape());
        let mut per_core: Vec<HashSet<u64>> = vec![HashSet::new(); 4];
        for r in &t {
            per_core[r.core as usize].insert(r.addr.0);
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert!(per_core[i].is_disjoint(&per_core[j]));
            }
        }
    }

    #[test]
    fn shared_fraction_zero_is_private() {
        let mut s = spec(Pattern::SharedUniform);
        s.shared_fraction = 0.0;
        assert_eq!(generate(&s, &shape()), generate(&spec(Pattern::Private), &shape()));
    }

    #[test]
    fn generators_are_deterministic() {
        for p in [
            Pattern::Private,
            Pattern::SharedUniform,
            Pattern::ProducerConsumer,
            Pattern::Migratory,
        ] {
            assert_eq!(generate(&spec(p), &shape()), generate(&spec(p), &shape()));
            assert_eq!(
                generate(&spec(p), &shape()).len() as u64,
                4 * spec(p).ops_per_core
            );
        }
    }

    #[test]
    fn migratory_alternates_rmw() {
        let t = generate(&spec(Pattern::Migratory), &shape());
        // Per core, records come in read-then-write pairs on one block.
        let first: Vec<_> = t.iter().filter(|r| r.core == 0).take(2).collect();
        assert_eq!(first[0].op, MemOp::Read);
        assert_eq!(first[1].op, MemOp::Write);
        assert_eq!(first[0].addr, first[1].addr);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.trace");
        let t = generate(&spec(Pattern::SharedUniform), &shape());
        save_trace(&t, &path).unwrap();
        assert_eq!(load_trace(&path).unwrap(), t);
    }

    #[test]
    fn parse_line_formats() {
        let r = parse_line("3 W 0x1040", 1).unwrap().unwrap();
        assert_eq!(
            r,
            TraceRecord {
                core: 3,
                op: MemOp::Write,
                addr: BlockAddress(0x1040)
            }
        );
        assert!(parse_line("# comment", 1).unwrap().is_none());
        assert!(parse_line("   ", 1).unwrap().is_none());
        let e = parse_line("3 X 0x1040", 7).unwrap_err();
        assert!(matches!(e, TraceError::Parse { line: 7, .. }));
    }
}
