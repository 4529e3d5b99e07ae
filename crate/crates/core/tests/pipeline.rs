use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use branch_landing::bloom::{random_sids, size_filter, BloomFilter, FilterParams};
use branch_landing::harness::{embedded, evaluate_corpus, CycleModel};
use branch_landing::instrument::{run_pipeline, Config, InstrumentedProgram, DEFAULT_SEEDS};
use branch_landing::ir::{parse_program, serialize_program, Sid};
use branch_landing::par::Exec;
use branch_landing::policy::{Granularity, PolicyKind};
use branch_landing::vm::{FaultKind, Machine, DEFAULT_MAX_STEPS};

fn family_with_slot(policy: PolicyKind) -> Machine {
    let cp = embedded().into_iter().find(|c| c.name == "family").unwrap();
    let ip = run_pipeline(&cp.program, &Config::new(policy, Granularity::Function)).unwrap().instrumented;
    let mut m = Machine::load(&ip.program).unwrap();
    let slot = m.symbol("auth_slot").unwrap();
    let bypass = m.symbol("auth_bypass").unwrap();
    m.corrupt(slot, bypass).unwrap();
    m
}

#[test]
fn same_signature_hijack_passes_func_but_not_cfg() {
    let r = family_with_slot(PolicyKind::FuncType).run(DEFAULT_MAX_STEPS).unwrap();
    assert_eq!(r.fault, None);
    // every check now succeeds, so the tally is the iteration count
    assert_eq!(r.output, vec![16]);
    assert_eq!(r.brl_outcomes.fail, 0);

    let mut m = family_with_slot(PolicyKind::Cfg);
    let r = m.run(DEFAULT_MAX_STEPS).unwrap();
    let f = r.fault.unwrap();
    assert_eq!(f.kind, FaultKind::CfpUnauthorized);
    assert_eq!(f.pc, m.symbol("auth_bypass").unwrap());
    assert!(r.output.is_empty());
}

#[test]
fn spurious_authorizations_stay_rare() {
    // |S| = 1000 SIDs in the binary; T authorizes a random subset. Sets
    // below ~32 members get m <= 256, where double hashing runs several
    // times above the analytic rate.
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let universe: Vec<Sid> = random_sids(1000, &mut rng).into_iter().collect();
        let n = rng.gen_range(32..=256);
        let allowed: BTreeSet<Sid> = universe.iter().take(n).copied().collect();
        let s = size_filter(n, 1e-3);
        let f = BloomFilter::encode(
            &allowed,
            FilterParams { m: s.m, k: s.k, seed1: DEFAULT_SEEDS.0, seed2: DEFAULT_SEEDS.1 ^ trial },
        );
        let spurious = universe[n..].iter().filter(|s| f.query(**s)).count();
        assert!(spurious <= 5, "trial {trial}: {spurious} spurious authorizations with |AllowedSources| = {n}");
    }
}

#[test]
fn instrumented_text_round_trips() {
    for cp in embedded() {
        for policy in [PolicyKind::FuncType, PolicyKind::Cfg] {
            let ip = run_pipeline(&cp.program, &Config::new(policy, Granularity::BasicBlock)).unwrap().instrumented;
            let text = serialize_program(&ip.program);
            let back = InstrumentedProgram::from_program(parse_program(&text).unwrap()).unwrap();
            assert_eq!(back, ip, "{}", cp.name);
        }
    }
}

#[test]
fn instrumented_output_matches_at_every_granularity() {
    for cp in embedded() {
        let base = Machine::load(&cp.program).unwrap().run(DEFAULT_MAX_STEPS).unwrap();
        for g in [Granularity::Module, Granularity::Function, Granularity::BasicBlock] {
            for policy in [PolicyKind::FuncType, PolicyKind::Cfg] {
                let ip = run_pipeline(&cp.program, &Config::new(policy, g.clone())).unwrap().instrumented;
                let r = Machine::load(&ip.program).unwrap().run(DEFAULT_MAX_STEPS).unwrap();
                assert_eq!(r.fault, None, "{} {policy:?} {}", cp.name, g.name());
                assert_eq!(r.output, base.output, "{} {policy:?} {}", cp.name, g.name());
            }
        }
    }
}

#[test]
fn sequential_and_parallel_reports_agree() {
    let corpus = embedded();
    let models = CycleModel::standard();
    let a = evaluate_corpus(&corpus, &models, Exec::Sequential).unwrap();
    let b = evaluate_corpus(&corpus, &models, Exec::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corpus_report_matches_snapshot() {
    let report = evaluate_corpus(&embedded(), &CycleModel::standard(), Exec::Parallel).unwrap();
    let got = serde_json::to_string_pretty(&report).unwrap() + "\n";
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/report.json");
    let want = std::fs::read_to_string(path).unwrap();
    assert!(got == want, "report differs from tests/fixtures/report.json");
}
