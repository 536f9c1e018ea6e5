use envfuzz_core::engine::{replay_crash, NoClock, Reproduction, StopReason};
use envfuzz_core::replay::call_matches;
use envfuzz_core::targets::{Process, Reply, Step, BUNDLED_TARGETS};
use envfuzz_core::*;

fn recording(name: &str) -> Recording {
    record(
        bundled_target(name).unwrap(),
        &bundled_script(name).unwrap(),
    )
    .unwrap()
    .recording
}

fn factory(name: &'static str) -> impl Fn() -> Process {
    move || bundled_target(name).unwrap()
}

#[test]
fn record_then_replay_is_exact() {
    for name in BUNDLED_TARGETS {
        let rec = recording(name);
        rec.validate().unwrap();
        let first = replay_plain(&rec, bundled_target(name).unwrap()).unwrap();
        assert!(first.divergence.is_zero(), "{name}");
        assert_eq!(first.calls.len(), rec.len(), "{name}");
        for (r, c) in rec.records.iter().zip(&first.calls) {
            assert!(call_matches(r, c), "{name}: seq {}", r.seq);
        }
        for _ in 0..9 {
            let again = replay_plain(&rec, bundled_target(name).unwrap()).unwrap();
            assert_eq!(again.calls, first.calls);
            assert_eq!(again.digest, first.digest);
        }
    }
}

/// Restoring a snapshot and feeding the same replies yields the same run as
/// continuing the original process.
#[test]
fn snapshot_continuation_is_identical() {
    for name in BUNDLED_TARGETS {
        let rec = recording(name);
        for cut in 0..rec.len() {
            let mut p = bundled_target(name).unwrap();
            let mut reply = None;
            let mut i = 0;
            let mut snap = None;
            let mut tail_a = Vec::new();
            while let Step::Call(call) = p.step(reply.take()).unwrap() {
                if i == cut {
                    snap = Some((p.snapshot(), call.clone()));
                }
                if i >= cut {
                    tail_a.push(call.clone());
                }
                reply = Some(envfuzz_core::replay::faithful_step(&rec.records[i], &call).unwrap());
                i += 1;
            }
            let edges_a = p.edges().to_vec();
            let status_a = p.status();

            let (snap, first) = snap.unwrap();
            let mut q = snap.restore();
            let mut tail_b = vec![first.clone()];
            let mut reply: Option<Reply> =
                Some(envfuzz_core::replay::faithful_step(&rec.records[cut], &first).unwrap());
            let mut j = cut + 1;
            while let Step::Call(call) = q.step(reply.take()).unwrap() {
                tail_b.push(call.clone());
                reply = Some(envfuzz_core::replay::faithful_step(&rec.records[j], &call).unwrap());
                j += 1;
            }
            assert_eq!(tail_a, tail_b, "{name} cut {cut}");
            assert_eq!(q.edges(), &edges_a[..], "{name} cut {cut}");
            assert_eq!(q.status(), status_a);
        }
    }
}

#[test]
fn campaign_counters_are_consistent() {
    for name in BUNDLED_TARGETS {
        let rec = recording(name);
        let cfg = CampaignConfig {
            max_passes: Some(3),
            ..Default::default()
        };
        let c = fuzz_campaign(&rec, &factory(name), &cfg, &NoClock).unwrap();
        let r = &c.report;
        assert_eq!(r.passes, 3);
        assert_eq!(r.stop, StopReason::Passes);
        // The calibration replay plus one spine per pass.
        assert_eq!(r.spine_execs, 4, "{name}");
        assert_eq!(r.execs(), r.spine_execs + r.branch_execs);
        assert_eq!(r.prefix_reexecutions, 0, "{name}");
        assert!(r.branch_execs > 0);
        assert_eq!(r.coverage_slots, c.feedback.virgin.population());
        let plain = replay_plain(&rec, bundled_target(name).unwrap()).unwrap();
        assert_eq!(r.spine_digest, plain.digest);
        for (seq, corpus) in &c.corpora {
            assert_eq!(corpus.seeds[0].data, rec.records[*seq as usize].payload());
            assert_eq!(r.corpus_sizes[seq], corpus.len());
        }
    }
}

#[test]
fn execution_budget_is_respected() {
    let rec = recording("echo_server");
    let cfg = CampaignConfig {
        max_passes: None,
        max_execs: Some(777),
        ..Default::default()
    };
    let c = fuzz_campaign(&rec, &factory("echo_server"), &cfg, &NoClock).unwrap();
    assert_eq!(c.report.execs(), 777);
    assert_eq!(c.report.stop, StopReason::Executions);
}

#[test]
fn zero_passes_do_nothing() {
    let rec = recording("calc");
    let cfg = CampaignConfig {
        max_passes: Some(0),
        ..Default::default()
    };
    let c = fuzz_campaign(&rec, &factory("calc"), &cfg, &NoClock).unwrap();
    assert_eq!(c.report.execs(), 0);
    assert!(c.crashes.is_empty());
}

#[test]
fn same_seed_same_campaign() {
    let rec = recording("calc");
    let cfg = CampaignConfig {
        seed: 5,
        max_passes: None,
        max_execs: Some(20_000),
        ..Default::default()
    };
    let a = fuzz_campaign(&rec, &factory("calc"), &cfg, &NoClock).unwrap();
    let b = fuzz_campaign(&rec, &factory("calc"), &cfg, &NoClock).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.crashes, b.crashes);
    assert_eq!(a.corpora, b.corpora);
    let c = fuzz_campaign(
        &rec,
        &factory("calc"),
        &CampaignConfig { seed: 6, ..cfg },
        &NoClock,
    )
    .unwrap();
    assert_ne!(a.corpora, c.corpora);
}

#[test]
fn every_crash_reproduces() {
    let rec = recording("calc");
    let cfg = CampaignConfig {
        max_passes: None,
        max_execs: Some(30_000),
        ..Default::default()
    };
    let c = fuzz_campaign(&rec, &factory("calc"), &cfg, &NoClock).unwrap();
    assert!(!c.crashes.is_empty());
    for r in triage(&c.crashes, &rec, &factory("calc"), cfg.step_budget).unwrap() {
        assert_eq!(r.verdict, Reproduction::Reproduced, "{:016x}", r.dedup_key);
    }
    let e = &c.crashes[0];
    let out = replay_crash(e, &rec, bundled_target("calc").unwrap(), cfg.step_budget)
        .unwrap()
        .unwrap();
    assert_eq!(out.status.fault(), Some(e.fault));
    assert_eq!(out.mutated, e.mutated_payloads);
}
