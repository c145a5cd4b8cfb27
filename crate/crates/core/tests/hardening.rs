mod common;

use proptest::prelude::*;
use wasm_canary::canary::{self, Action, CanaryConfig, GuardMode, CHECK_SITE_INSTRS};
use wasm_canary::corpus::OptLevel;
use wasm_canary::frame;
use wasm_canary::wasm::interp::{Status, Trap};
use wasm_canary::wasm::WasmModule;

fn harden(m: &WasmModule, cfg: &CanaryConfig) -> (WasmModule, canary::HardenReport) {
    let an = frame::analyze_module(m).unwrap();
    let (h, r) = canary::harden(m, &an.frames, cfg).unwrap();
    canary::verify_hardening(m, &h, &r).unwrap();
    (h, r)
}

#[test]
fn corpus_hardens_validates_and_stays_small() {
    let cfg = CanaryConfig::default();
    let (mut before, mut after) = (0usize, 0usize);
    for (case, opt, path) in common::bundled_modules() {
        let (bytes, m) = common::load(&path);
        let (h, r) = harden(&m, &cfg);
        assert!(r.hardened_count() > 0, "{case} {opt}");
        let out = h.encode().unwrap();
        common::validate(&out).unwrap_or_else(|e| panic!("{case} {opt}: {e}"));
        assert_eq!(r.original_size, bytes.len());
        assert_eq!(r.hardened_size, out.len());
        for e in r.hardened() {
            let bound = 6 + 5 * e.check_sites as i64;
            assert!(e.instruction_delta <= bound, "{case} {opt} f{}", e.function);
            assert_eq!(
                e.instruction_delta,
                3 + (CHECK_SITE_INSTRS * e.check_sites) as i64
            );
        }
        let growth = (out.len() - bytes.len()) as f64 / bytes.len() as f64;
        assert!(growth < 0.15, "{case} {opt}: {growth:.3}");
        before += bytes.len();
        after += out.len();
    }
    assert!(((after - before) as f64 / before as f64) < 0.15);
}

#[test]
fn hardening_is_deterministic() {
    let path = common::bundled("cwe121-wchar-t-declare-loop", OptLevel::O1);
    let (_, m) = common::load(&path);
    let a = harden(&m, &CanaryConfig::default()).0.encode().unwrap();
    let b = harden(&m, &CanaryConfig::default()).0.encode().unwrap();
    assert_eq!(a, b);
}

#[test]
fn behavior_is_preserved_without_frame_crossings() {
    let cfg = CanaryConfig::default();
    let mut compared = 0;
    for (case, opt, path) in common::bundled_modules() {
        let (_, m) = common::load(&path);
        let (before, crossings) = common::frame_crossings(&m, cfg.frame_growth());
        if !crossings.is_empty() {
            continue;
        }
        let (h, _) = harden(&m, &cfg);
        let after = common::run(&h, None);
        assert_eq!(before.status, after.status, "{case} {opt}");
        assert_eq!(before.stdout, after.stdout, "{case} {opt}");
        assert_eq!(before.stderr, after.stderr, "{case} {opt}");
        compared += 1;
    }
    assert!(compared >= 20, "only {compared} modules without crossings");
}

#[test]
fn executed_escapes_trap_after_hardening() {
    let cfg = CanaryConfig::default();
    for (case, opt, path) in common::bundled_modules() {
        let (_, m) = common::load(&path);
        let an = frame::analyze_module(&m).unwrap();
        if an.escapes.escapes().count() == 0 {
            continue;
        }
        let (_, crossings) = common::frame_crossings(&m, cfg.guard_size);
        let (h, _) = harden(&m, &cfg);
        let t = common::run(&h, None);
        if !crossings.is_empty() {
            assert_eq!(
                t.status,
                Status::Trapped { reason: Trap::Unreachable },
                "{case} {opt}"
            );
        }
    }
}

#[test]
fn guard_sizes_and_random_mode_on_corpus() {
    let path = common::bundled("cwe121-char-declare-loop", OptLevel::O1);
    let (_, m) = common::load(&path);
    let safe = common::bundled("safe-char-declare-loop", OptLevel::O1);
    let (_, s) = common::load(&safe);
    for k in [4, 8, 12, 16] {
        for mode in [GuardMode::Fixed, GuardMode::PerRunRandom] {
            let cfg = CanaryConfig {
                guard_size: k,
                mode,
                ..CanaryConfig::default()
            };
            let (h, r) = harden(&m, &cfg);
            common::validate(&h.encode().unwrap()).unwrap();
            assert_eq!(r.frame_growth, 16);
            assert_eq!(
                common::run(&h, None).status,
                Status::Trapped { reason: Trap::Unreachable },
                "K={k} {mode:?}"
            );
            let (hs, _) = harden(&s, &cfg);
            let orig = common::run(&s, None);
            let t = common::run(&hs, None);
            assert_eq!((t.status, t.stdout), (orig.status, orig.stdout), "K={k} {mode:?}");
        }
    }
}

#[test]
fn skipped_functions_are_reported() {
    let m = common::fixture("entry_point.wat");
    let an = frame::analyze_module(&m).unwrap();
    let (h, r) = canary::harden(&m, &an.frames, &CanaryConfig::default()).unwrap();
    assert_eq!(r.hardened_count(), 0);
    assert!(r
        .functions
        .iter()
        .all(|e| matches!(&e.action, Action::Skipped(why) if why.starts_with("no-frame"))));
    assert_eq!(h, m);
}

fn store_module(n: u32, d: u32, w: u32) -> WasmModule {
    let store = match w {
        1 => "i32.const 0xaa i32.store8",
        2 => "i32.const 0xaaaa i32.store16",
        4 => "i32.const 0xaaaaaaaa i32.store",
        _ => "i64.const 0xaaaaaaaaaaaaaaaa i64.store",
    };
    let src = format!(
        r#"(module
  (memory (export "memory") 2)
  (global $sp (mut i32) (i32.const 65536))
  (func $f (local i32)
    global.get 0 i32.const {n} i32.sub local.tee 0 global.set 0
    local.get 0 {store} offset={d}
    local.get 0 i32.const {n} i32.add global.set 0)
  (func (export "_start") call $f))"#
    );
    WasmModule::decode(&wat::parse_str(src).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn traps_iff_store_overlaps_guard(
        n in (1u32..8).prop_map(|x| x * 16),
        k in prop::sample::select(vec![4u32, 8, 12, 16]),
        w in prop::sample::select(vec![1u32, 2, 4, 8]),
        back in 0u32..=8,
        fwd in 0u32..=16,
    ) {
        let d = (n - back + fwd.min(back + k)).min(n + k);
        let m = store_module(n, d, w);
        let cfg = CanaryConfig { guard_size: k, ..CanaryConfig::default() };
        let (h, _) = harden(&m, &cfg);
        let t = common::run(&h, None);
        let overlaps = d < n + k && d + w > n;
        prop_assert_eq!(t.trapped(), overlaps, "N={} K={} d={} w={}", n, k, d, w);
        if overlaps {
            prop_assert_eq!(t.status, Status::Trapped { reason: Trap::Unreachable });
        }
    }

    #[test]
    fn guard_value_parsing(bytes in prop::collection::vec(any::<u8>(), 1..=8)) {
        let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        let v = canary::parse_guard_value(&format!("0x{hex}")).unwrap();
        prop_assert_eq!(&v[..bytes.len()], &bytes[..]);
        prop_assert!(v[bytes.len()..].iter().all(|b| *b == 0));
    }
}
