use std::collections::BTreeSet;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use wasm_canary::corpus::OptLevel;
use wasm_canary::harness::{
    classify, default_markers, run_artifact, Class, CrashPolicy, HarnessError, Launcher, OutcomeSummary,
    RunOutcome, RunStatus,
};

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}

#[test]
fn native_runs_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let smash = script(
        dir.path(),
        "smash",
        "echo '*** stack smashing detected ***: terminated' >&2\nkill -ABRT $$",
    );
    let out = run_artifact(&smash, &Launcher::Native, 3, Duration::from_secs(5), &default_markers()).unwrap();
    assert_eq!(out.len(), 3);
    for o in &out {
        assert_eq!(o.status, RunStatus::Signal { name: "SIGABRT".into() });
        assert_eq!(o.markers, BTreeSet::from(["stack-smash".to_string()]));
    }
    assert_eq!(CrashPolicy::default().crash_rate(&out), 1.0);

    let fine = script(dir.path(), "fine", "echo hello");
    let out = run_artifact(&fine, &Launcher::Native, 2, Duration::from_secs(5), &default_markers()).unwrap();
    assert!(out.iter().all(|o| o.status == RunStatus::Exit { code: 0 } && o.markers.is_empty()));

    let code = script(dir.path(), "code", "exit 7");
    let out = run_artifact(&code, &Launcher::Native, 1, Duration::from_secs(5), &default_markers()).unwrap();
    assert_eq!(out[0].status, RunStatus::Exit { code: 7 });
    assert!(!CrashPolicy::default().is_crash(&out[0]));
    let strict = CrashPolicy {
        nonzero_exit_is_crash: true,
        ..CrashPolicy::default()
    };
    assert!(strict.is_crash(&out[0]));
}

#[test]
fn timeouts_kill_the_process_group() {
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("child-alive");
    let hang = script(
        dir.path(),
        "hang",
        &format!("(sleep 2; touch {}) &\nsleep 30", marker.display()),
    );
    let start = Instant::now();
    let out = run_artifact(&hang, &Launcher::Native, 1, Duration::from_millis(300), &default_markers()).unwrap();
    assert!(start.elapsed() < Duration::from_secs(5));
    assert_eq!(out[0].status, RunStatus::Timeout);
    assert!(!CrashPolicy::default().is_crash(&out[0]));
    std::thread::sleep(Duration::from_millis(2500));
    assert!(!marker.exists());
}

#[test]
fn runtime_template_substitution() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("module.wasm");
    std::fs::write(&art, b"").unwrap();
    let rt = script(dir.path(), "rt", "echo \"wasm trap: $1\" >&2\nexit 134");
    let launcher = Launcher::Runtime(format!("{} {{artifact}} {{args}}", rt.display()));
    let out = run_artifact(&art, &launcher, 1, Duration::from_secs(5), &default_markers()).unwrap();
    assert_eq!(out[0].status, RunStatus::Exit { code: 134 });
    assert!(out[0].markers.contains("wasm-trap"));
    assert!(CrashPolicy::default().is_crash(&out[0]));

    let missing = Launcher::Runtime("/nonexistent/runtime {artifact}".into());
    assert!(matches!(
        run_artifact(&art, &missing, 1, Duration::from_secs(1), &default_markers()),
        Err(HarnessError::RuntimeMissing { .. } | HarnessError::SpawnFailure { .. })
    ));
    let no_slot = Launcher::Runtime(format!("{}", rt.display()));
    assert!(matches!(
        run_artifact(&art, &no_slot, 1, Duration::from_secs(1), &default_markers()),
        Err(HarnessError::Template(_))
    ));
}

fn arb_outcome() -> impl Strategy<Value = RunOutcome> {
    let status = prop_oneof![
        (-3i32..200).prop_map(|code| RunStatus::Exit { code }),
        prop::sample::select(vec!["SIGSEGV", "SIGABRT", "SIGBUS"])
            .prop_map(|s| RunStatus::Signal { name: s.into() }),
        Just(RunStatus::Timeout),
    ];
    let markers = prop::collection::btree_set(
        prop::sample::select(vec!["stack-smash", "sigsegv", "unreachable", "wasm-trap"]).prop_map(String::from),
        0..3,
    );
    (status, markers, 0.0f64..1.0, 0u32..100).prop_map(|(status, markers, wall_time, run)| RunOutcome {
        artifact: "a".into(),
        run,
        status,
        markers,
        wall_time,
    })
}

fn crashed(o: &RunOutcome, p: &CrashPolicy) -> bool {
    match &o.status {
        RunStatus::Signal { .. } => true,
        RunStatus::Timeout => p.timeout_is_crash,
        RunStatus::Exit { code } => *code != 0 && (p.nonzero_exit_is_crash || !o.markers.is_empty()),
    }
}

proptest! {
    #[test]
    fn class_ignores_run_order(
        native in prop::collection::vec(arb_outcome(), 0..12),
        wasm in prop::collection::vec(arb_outcome(), 0..12),
        nonzero in any::<bool>(),
        timeout in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let p = CrashPolicy { nonzero_exit_is_crash: nonzero, timeout_is_crash: timeout };
        let a = classify("c", OptLevel::O1, &native, &wasm, &p);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let (mut n2, mut w2) = (native.clone(), wasm.clone());
        rand::seq::SliceRandom::shuffle(&mut n2[..], &mut rng);
        rand::seq::SliceRandom::shuffle(&mut w2[..], &mut rng);
        let b = classify("c", OptLevel::O1, &n2, &w2, &p);
        prop_assert_eq!(a.class, b.class);

        let nc = native.iter().any(|o| crashed(o, &p));
        let wc = wasm.iter().any(|o| crashed(o, &p));
        let want = match (nc, wc) {
            (false, false) => Class::NoCrash,
            (true, true) => Class::BothCrash,
            (false, true) => Class::WasmOnlyCrash,
            (true, false) => Class::NativeOnlyCrash,
        };
        prop_assert_eq!(a.class, want);

        let s = OutcomeSummary::of(&native, &p);
        prop_assert_eq!(s.runs as usize, native.len());
        prop_assert_eq!(s.crashes as usize, native.iter().filter(|o| crashed(o, &p)).count());
        let total: u32 = s.exit_codes.values().sum::<u32>() + s.signals.values().sum::<u32>() + s.timeouts;
        prop_assert_eq!(total, s.runs);
    }
}
