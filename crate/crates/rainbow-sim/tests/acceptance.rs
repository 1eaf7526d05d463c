//! End-to-end acceptance suite. Each test prints a single pass/fail line
//! tagged with its criterion number before asserting, so a full run gives a
//! compact scoreboard.

use rainbow_sim::checker::{explore, replay, CheckOutcome, Limits, Program};
use rainbow_sim::cli::{conflict_program, latency_csv, links_csv, stats_csv, sweep_row};
use rainbow_sim::coherence::BlockAddress;
use rainbow_sim::config::{MachineParams, SimConfig, SizeClass};
use rainbow_sim::dlcbf::{DlcbfConfig, DlcbfFilter};
use rainbow_sim::engine::{run, EngineParams, RunStats};
use rainbow_sim::hta::HtaSystem;
use rainbow_sim::protocol::{Fault, FaultPlan, MemOp};
use rainbow_sim::rainbow::RainbowSystem;
use rainbow_sim::workload::{generate, GeneratorSpec, Pattern};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn verdict(criterion: u32, ok: bool, detail: &str) {
    println!(
        "[criterion {criterion}] {}: {detail}",
        if ok { "pass" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

#[derive(Clone, Copy)]
enum Proto {
    Rainbow,
    Hta,
}

fn run_sim(
    proto: Proto,
    params: &MachineParams,
    spec: &GeneratorSpec,
    audit_every: Option<u64>,
) -> RunStats {
    let trace = generate(spec, &params.shape);
    let engine = EngineParams {
        lat: params.lat,
        audit_every,
        max_events: u64::MAX,
    };
    match proto {
        Proto::Rainbow => {
            let mut sys = RainbowSystem::new(params.clone(), FaultPlan::none());
            run(&mut sys, &engine, &trace).expect("clean rainbow run")
        }
        Proto::Hta => {
            let mut sys = HtaSystem::new(params.clone(), FaultPlan::none());
            run(&mut sys, &engine, &trace).expect("clean hta run")
        }
    }
}

fn a(i: u64) -> BlockAddress {
    BlockAddress(i * 64)
}

// -------------------------------------------------- 1: exhaustive oracle

/// Explore every interleaving of a conflict-heavy program at 2 chips x
/// 2 cores x 2 blocks for both protocols, then confirm that each of the five
/// seeded protocol bugs is caught and that its witness trace replays.
#[test]
fn criterion_1_exhaustive_check_and_mutations() {
    let params = MachineParams::tiny(2, 2);
    let program = conflict_program(4, 2, 2);
    let limits = Limits::default();

    let clean_rainbow = explore(
        RainbowSystem::new(params.clone(), FaultPlan::none()),
        &program,
        limits,
    );
    assert!(
        matches!(clean_rainbow, CheckOutcome::Pass { .. }),
        "rainbow clean exploration: {clean_rainbow:?}"
    );
    let clean_hta = explore(
        HtaSystem::new(params.clone(), FaultPlan::none()),
        &program,
        limits,
    );
    assert!(
        matches!(clean_hta, CheckOutcome::Pass { .. }),
        "hta clean exploration: {clean_hta:?}"
    );

    // The faulty LLC split only runs once a full token set has been pushed
    // down the victim chain, so that bug needs its own program.
    let split_program = Program {
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

    let mut caught = 0;
    for fault in Fault::ALL {
        let plan = FaultPlan::seeded(fault);
        let prog = if fault == Fault::SilverDoubleGrant {
            &split_program
        } else {
            &program
        };
        let (outcome, confirmed) = if fault == Fault::HtaInclusivityBreak {
            let o = explore(HtaSystem::new(params.clone(), plan), prog, limits);
            match o {
                CheckOutcome::Failed { violation, trace } => (
                    Some(violation.clone()),
                    replay(HtaSystem::new(params.clone(), plan), prog, &trace)
                        == Err(violation),
                ),
                _ => (None, false),
            }
        } else {
            let o = explore(RainbowSystem::new(params.clone(), plan), prog, limits);
            match o {
                CheckOutcome::Failed { violation, trace } => (
                    Some(violation.clone()),
                    replay(RainbowSystem::new(params.clone(), plan), prog, &trace)
                        == Err(violation),
                ),
                _ => (None, false),
            }
        };
        assert!(
            outcome.is_some() && confirmed,
            "seeded bug {} not caught with a replaying witness",
            fault.name()
        );
        caught += 1;
    }
    verdict(
        1,
        caught == Fault::ALL.len(),
        &format!(
            "both protocols pass exhaustively; {caught}/{} seeded bugs caught with replaying witnesses",
            Fault::ALL.len()
        ),
    );
}

// -------------------------------------------------- 2: invariants at scale

/// One-million-access traces on the two reference shapes with a full
/// invariant audit every 10^4 cycles; any violation aborts the run.
#[test]
fn criterion_2_token_conservation_at_scale() {
    let spec = |ops| GeneratorSpec {
        pattern: Pattern::SharedUniform,
        footprint_blocks: 4096,
        ops_per_core: ops,
        shared_fraction: 0.5,
        seed: 1,
    };
    let two_cmp = SimConfig {
        chips: 2,
        ..SimConfig::default()
    };
    let four_cmp = SimConfig::default();
    let mut total = 0;
    for (cfg, ops) in [(two_cmp, 125_000), (four_cmp, 62_500)] {
        let params = MachineParams::derive(&cfg, SizeClass::L);
        let stats = run_sim(Proto::Rainbow, &params, &spec(ops), Some(10_000));
        total += stats.accesses;
    }
    verdict(
        2,
        total == 2_000_000,
        &format!("{total} audited accesses across 2-chip and 4-chip shapes, zero violations"),
    );
}

// -------------------------------------------------- 3: filter vs oracle

/// Drive the d-left counting Bloom filter through a million randomized
/// balanced operations against an exact multiset oracle: membership must
/// never be under-reported, and the false-positive rate at design load must
/// be below 5% with 95% confidence.
#[test]
fn criterion_3_dlcbf_oracle_and_fpr() {
    let design_items: u64 = 16_384;
    let cfg = DlcbfConfig::size_for_fpr(design_items, 0.05, 0x5eed);
    let mut filter = DlcbfFilter::new(cfg);
    let mut oracle: BTreeMap<u64, u64> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let universe = 1u64 << 26;

    let mut false_negatives = 0u64;
    for _ in 0..1_000_000u64 {
        match rng.gen_range(0..3u32) {
            0 => {
                if (oracle.len() as u64) < design_items {
                    let b = rng.gen_range(0..universe);
                    filter.increment(a(b)).expect("insert within capacity");
                    *oracle.entry(b).or_insert(0) += 1;
                }
            }
            1 => {
                if !oracle.is_empty() {
                    let pick = rng.gen_range(0..oracle.len());
                    let (&b, _) = oracle.iter().nth(pick).expect("non-empty");
                    filter.decrement(a(b)).expect("resident delete");
                    let n = oracle.get_mut(&b).expect("resident");
                    *n -= 1;
                    if *n == 0 {
                        oracle.remove(&b);
                    }
                }
            }
            _ => {
                let b = rng.gen_range(0..universe);
                if oracle.contains_key(&b) && !filter.contains(a(b)) {
                    false_negatives += 1;
                }
            }
        }
    }

    // top up to exactly the design load, then measure the FPR on fresh keys
    while (oracle.len() as u64) < design_items {
        let b = rng.gen_range(0..universe);
        if oracle.contains_key(&b) {
            continue;
        }
        filter.increment(a(b)).expect("insert within capacity");
        oracle.insert(b, 1);
    }
    let queries = 100_000u64;
    let mut fp = 0u64;
    let mut done = 0u64;
    while done < queries {
        let b = rng.gen_range(universe..2 * universe);
        if filter.contains(a(b)) {
            fp += 1;
        }
        done += 1;
    }
    let phat = fp as f64 / queries as f64;
    // one-sided 95% upper bound on the true rate
    let upper = phat + 1.645 * (phat * (1.0 - phat) / queries as f64).sqrt();
    verdict(
        3,
        false_negatives == 0 && upper <= 0.05,
        &format!(
            "no false negatives over 10^6 ops; fpr {phat:.4} (95% upper bound {upper:.4}) at design load"
        ),
    );
}

// -------------------------------------------------- 4: shrinking trackers

/// On a sharing-heavy trace whose shared footprint overwhelms the smallest
/// probe filter, the baseline's externally caused misses must grow as the
/// tracking structures shrink while the token protocol barely moves.
#[test]
fn criterion_4_tracking_pressure_trend() {
    let cfg = SimConfig::default();
    let spec = GeneratorSpec {
        pattern: Pattern::SharedUniform,
        footprint_blocks: 8192,
        ops_per_core: 3000,
        shared_fraction: 0.9,
        seed: 1,
    };
    let mut hta_misses = Vec::new();
    let mut rb_misses = Vec::new();
    for class in SizeClass::ALL {
        let params = MachineParams::derive(&cfg, class);
        let h = run_sim(Proto::Hta, &params, &spec, Some(20_000));
        let r = run_sim(Proto::Rainbow, &params, &spec, Some(20_000));
        hta_misses.push(h.counter("external_invalidation_misses"));
        rb_misses.push(r.counter("llc_misses"));
    }
    let monotone = hta_misses.windows(2).all(|w| w[1] >= w[0]);
    let doubled = hta_misses[2] >= 2 * hta_misses[0];
    let spread = (*rb_misses.iter().max().unwrap() as f64
        / *rb_misses.iter().min().unwrap() as f64)
        - 1.0;
    verdict(
        4,
        monotone && doubled && spread <= 0.05,
        &format!(
            "hta externally caused misses L/M/S = {hta_misses:?} (monotone, S >= 2x L); \
             rainbow llc misses {rb_misses:?} vary {:.2}%",
            spread * 100.0
        ),
    );
}

// -------------------------------------------------- 5: parity when roomy

/// With overprovisioned tracking structures the two protocols should be
/// within ten percent of each other on average access latency for every
/// generated pattern.
#[test]
fn criterion_5_latency_parity_at_l() {
    let cfg = SimConfig::default();
    let params = MachineParams::derive(&cfg, SizeClass::L);
    let mut detail = String::new();
    let mut ok = true;
    for pattern in [
        Pattern::Private,
        Pattern::SharedUniform,
        Pattern::ProducerConsumer,
        Pattern::Migratory,
    ] {
        let spec = GeneratorSpec {
            pattern,
            footprint_blocks: 1024,
            ops_per_core: 4000,
            shared_fraction: 0.5,
            seed: 7,
        };
        let r = run_sim(Proto::Rainbow, &params, &spec, Some(20_000));
        let h = run_sim(Proto::Hta, &params, &spec, Some(20_000));
        let ratio = r.avg_latency() / h.avg_latency();
        ok &= (ratio - 1.0).abs() <= 0.10;
        detail.push_str(&format!("{pattern:?} {ratio:.3} "));
    }
    verdict(5, ok, &format!("latency ratios (rainbow/hta): {detail}"));
}

// -------------------------------------------------- 6: headline direction

/// With the smallest tracking structures on a sharing-heavy trace, the token
/// protocol must finish the whole trace earlier than the baseline.
#[test]
fn criterion_6_completion_at_s() {
    let cfg = SimConfig::default();
    let params = MachineParams::derive(&cfg, SizeClass::S);
    let spec = GeneratorSpec {
        pattern: Pattern::SharedUniform,
        footprint_blocks: 8192,
        ops_per_core: 3000,
        shared_fraction: 0.9,
        seed: 1,
    };
    let r = run_sim(Proto::Rainbow, &params, &spec, Some(20_000));
    let h = run_sim(Proto::Hta, &params, &spec, Some(20_000));
    verdict(
        6,
        r.completion_cycle < h.completion_cycle,
        &format!(
            "completion cycles at S: rainbow {} < hta {}",
            r.completion_cycle, h.completion_cycle
        ),
    );
}

// -------------------------------------------------- 7: loose inclusivity

/// Directory capacity pressure must never turn into invalidations: with the
/// sparse directories cut to a single entry everything still passes and the
/// dedicated counter stays at zero.
#[test]
fn criterion_7_one_entry_directories() {
    let tiny = MachineParams::tiny(2, 2).with_one_entry_dirs();
    let outcome = explore(
        RainbowSystem::new(tiny, FaultPlan::none()),
        &conflict_program(4, 2, 2),
        Limits::default(),
    );
    assert!(
        matches!(outcome, CheckOutcome::Pass { .. }),
        "one-entry-dir exploration: {outcome:?}"
    );

    let params = MachineParams::derive(&SimConfig::default(), SizeClass::L).with_one_entry_dirs();
    let spec = GeneratorSpec {
        pattern: Pattern::SharedUniform,
        footprint_blocks: 2048,
        ops_per_core: 2000,
        shared_fraction: 0.7,
        seed: 3,
    };
    let stats = run_sim(Proto::Rainbow, &params, &spec, Some(5_000));
    let evic_invals = stats.counter("rainbow_dir_eviction_invals");
    verdict(
        7,
        evic_invals == 0,
        &format!(
            "checker and engine clean with 1-entry directories; {evic_invals} eviction-forced invalidations"
        ),
    );
}

// -------------------------------------------------- 8: determinism

/// Identical inputs must produce byte-identical outputs, end to end.
#[test]
fn criterion_8_determinism() {
    let cfg = SimConfig::default();
    let params = MachineParams::derive(&cfg, SizeClass::M);
    let spec = GeneratorSpec {
        pattern: Pattern::ProducerConsumer,
        footprint_blocks: 512,
        ops_per_core: 2000,
        shared_fraction: 0.5,
        seed: 11,
    };
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let mut blob = String::new();
        for proto in [Proto::Rainbow, Proto::Hta] {
            let stats = run_sim(proto, &params, &spec, None);
            blob.push_str(&stats_csv(&stats));
            blob.push_str(&latency_csv(&stats));
            blob.push_str(&links_csv(&stats));
            blob.push_str(&sweep_row("p", "M", "producer-consumer", &stats));
        }
        outputs.push(blob);
    }
    verdict(
        8,
        outputs[0] == outputs[1],
        &format!(
            "two invocations produced byte-identical CSVs ({} bytes)",
            outputs[0].len()
        ),
    );
}
