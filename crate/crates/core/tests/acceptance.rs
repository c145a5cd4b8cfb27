//! End-to-end checks, one line per criterion. Exits nonzero if any fails.
//!
//! Runs the corpus diff once (O0 and O1) through `wasm-canary exec`, or
//! through `WASM_CANARY_RUNTIME` when set.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use wasm_canary::canary::{self, CanaryConfig};
use wasm_canary::corpus::{Category, OptLevel};
use wasm_canary::frame;
use wasm_canary::harness::{self, Class, CrashPolicy, DiffConfig, DivergenceStatus, Report, RunSettings};
use wasm_canary::wasm::interp::Status;
use wasm_canary::wasm::{Op, WasmModule};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn harden(m: &WasmModule, cfg: &CanaryConfig) -> Result<(WasmModule, canary::HardenReport), String> {
    let an = frame::analyze_module(m).map_err(|e| e.to_string())?;
    let (h, r) = canary::harden(m, &an.frames, cfg).map_err(|e| e.to_string())?;
    canary::verify_hardening(m, &h, &r).map_err(|e| e.to_string())?;
    Ok((h, r))
}

fn round_trip() -> Outcome {
    let start = Instant::now();
    let modules = common::bundled_modules();
    for (case, opt, path) in &modules {
        let (bytes, m) = common::load(path);
        ensure!(m.encode().map_err(|e| e.to_string())? == bytes, "{case} {opt} differs");
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(5), "took {t:?}");
    Ok(format!("{} modules byte-identical in {:.2}s", modules.len(), t.as_secs_f64()))
}

fn frame_detection() -> Outcome {
    let mut functions = 0;
    for (case, opt, path) in common::bundled_modules() {
        if opt != OptLevel::O1 {
            continue;
        }
        let (bytes, m) = common::load(&path);
        let an = frame::analyze_module(&m).map_err(|e| e.to_string())?;
        let sp = an.sp_global.ok_or(format!("{case}: no stack pointer"))?;
        for (f, n) in common::idiom_frames(&bytes, sp) {
            let found = an.frames.frames.iter().find(|x| x.function == f);
            ensure!(found.map(|x| x.frame_size) == Some(n), "{case}: function {f} frame {n} not detected");
            functions += 1;
        }
        for f in &an.frames.frames {
            let c = m.body(f.function).unwrap().instrs[f.prologue_constant.instr].op().clone();
            ensure!(c == Op::I32Const(f.frame_size as i32), "{case}: f{} size {} vs {c:?}", f.function, f.frame_size);
        }
    }
    let size = |m: &WasmModule| -> Result<Vec<u32>, String> {
        let an = frame::analyze_module(m).map_err(|e| e.to_string())?;
        Ok(an.frames.frames.iter().map(|f| f.frame_size).collect())
    };
    ensure!(size(&common::fixture("listing_frame64.wat"))? == [64], "64-byte fixture");
    ensure!(size(&common::fixture("frame16_store32.wat"))? == [16], "16-byte fixture");
    let (_, compiled) = common::load(&common::bundled("cwe121-char-declare-loop", OptLevel::O1));
    let compiled = size(&compiled)?;
    Ok(format!(
        "{functions} idiom functions at O1 all detected with matching constants; fixtures 64/16; compiled char loop frame {compiled:?}"
    ))
}

fn escape_detection() -> Outcome {
    let an = frame::analyze_module(&common::fixture("frame16_store32.wat")).map_err(|e| e.to_string())?;
    let n = an.frames.frames[0].frame_size as i64;
    let esc: Vec<_> = an.escapes.escapes().collect();
    ensure!(esc.len() == 1, "{} escapes", esc.len());
    let e = esc[0];
    ensure!(e.effective_offset + e.width as i64 > n, "offset {} width {}", e.effective_offset, e.width);
    let (_, safe) = common::load(&common::bundled("safe-char-declare-loop", OptLevel::O1));
    let s = frame::analyze_module(&safe).map_err(|e| e.to_string())?;
    ensure!(s.escapes.findings.is_empty(), "safe control has {} findings", s.escapes.findings.len());
    Ok(format!(
        "escape at offset {} width {} > frame {n}; safe control 0 findings",
        e.effective_offset, e.width
    ))
}

fn diff_report() -> Result<Report, String> {
    let mut manifest = common::manifest();
    manifest.toolchain.apply_env();
    let runtime = std::env::var(harness::ENV_RUNTIME)
        .unwrap_or_else(|_| format!("{} exec --fuel 20000000 {{artifact}} {{args}}", env!("CARGO_BIN_EXE_wasm-canary")));
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = DiffConfig {
        run: RunSettings {
            runs: manifest.defaults.runs_per_case,
            timeout: Duration::from_secs_f64(manifest.defaults.timeout_seconds),
            markers: harness::default_markers(),
            policy: CrashPolicy::default(),
            runtime,
        },
        optimizations: vec![OptLevel::O0, OptLevel::O1],
        canary: CanaryConfig::default(),
        work_dir: work.path().to_path_buf(),
        jobs: std::thread::available_parallelism().map_or(4, |n| n.get()),
        sanity_checks: true,
    };
    let report = harness::run_diff(&manifest, &cfg);
    let errors: Vec<String> = report
        .errors
        .iter()
        .cloned()
        .chain(report.cases.iter().flat_map(|c| c.errors.iter().map(move |e| format!("{} {}: {e}", c.id, c.optimization))))
        .collect();
    if !errors.is_empty() {
        return Err(errors.join("; "));
    }
    Ok(report)
}

fn divergence(r: &Report) -> Outcome {
    let s = r
        .summary
        .iter()
        .find(|s| s.optimization == OptLevel::O1)
        .ok_or("no O1 summary")?;
    let pre = &s.pre_hardening;
    ensure!(pre.wasm_only_crash == 0, "{} wasm-only crashes", pre.wasm_only_crash);
    if s.divergence == DivergenceStatus::ClosedByToolchain {
        ensure!(pre.native_only_crash == 0, "closed but {} native-only", pre.native_only_crash);
        return Ok("divergence closed by toolchain: 0 native-only, 0 wasm-only".into());
    }
    let smashed: Vec<&str> = r
        .cases
        .iter()
        .filter(|c| c.optimization == OptLevel::O1)
        .filter(|c| r.pre(&c.id, OptLevel::O1).map(|d| d.class) == Some(Class::NativeOnlyCrash))
        .filter(|c| c.native.markers.get(harness::STACK_SMASH).copied().unwrap_or(0) > 0)
        .map(|c| c.id.as_str())
        .collect();
    ensure!(smashed.len() >= 5, "only {} native-only crashes with stack smashing: {smashed:?}", smashed.len());
    Ok(format!(
        "O1 classes no/both/wasm/native = {}/{}/{}/{}; {} native-only with stack smashing detected",
        pre.no_crash,
        pre.both_crash,
        pre.wasm_only_crash,
        pre.native_only_crash,
        smashed.len()
    ))
}

fn hardening_efficacy(r: &Report) -> Outcome {
    let opt = OptLevel::O1;
    let (mut fixed, mut safe) = (0, 0);
    for c in r.cases.iter().filter(|c| c.optimization == opt) {
        let pre = r.pre(&c.id, opt).ok_or(format!("{}: no class", c.id))?.class;
        let post = r.post(&c.id, opt).ok_or(format!("{}: no hardened class", c.id))?.class;
        if pre == Class::NativeOnlyCrash {
            ensure!(post == Class::BothCrash, "{} stays {post}", c.id);
            let h = c.hardened_wasm.as_ref().ok_or(format!("{}: no hardened runs", c.id))?;
            ensure!(
                h.markers.get("unreachable").copied().unwrap_or(0) == h.runs,
                "{} hardened runs did not all trap via unreachable: {:?}",
                c.id,
                h.markers
            );
            fixed += 1;
        }
        if c.category == Category::Safe {
            ensure!(pre == Class::NoCrash && post == Class::NoCrash, "safe {} is {pre}/{post}", c.id);
            safe += 1;
        }
    }
    ensure!(safe > 0, "no safe controls");
    Ok(format!("{fixed} native-only -> both-crash via unreachable at O1; {safe} safe controls no-crash"))
}

fn store_module(n: u32, d: u32, w: u32) -> WasmModule {
    let store = match w {
        1 => "i32.const 0x5a i32.store8",
        4 => "i32.const 0x5a5a5a5a i32.store",
        _ => "i64.const 0x5a5a5a5a5a5a5a5a i64.store",
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

fn boundary_sweep() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for n in [16u32, 32, 64, 112] {
        for k in [4u32, 8, 12, 16] {
            let cfg = CanaryConfig {
                guard_size: k,
                ..CanaryConfig::default()
            };
            for w in [1u32, 4, 8] {
                for d in n - 8..=n + k {
                    let m = store_module(n, d, w);
                    let (h, _) = harden(&m, &cfg)?;
                    let t = common::run(&h, None);
                    let overlaps = d < n + k && d + w > n;
                    let trapped = t.status
                        == Status::Trapped {
                            reason: wasm_canary::wasm::interp::Trap::Unreachable,
                        };
                    ensure!(trapped == overlaps, "N={n} K={k} W={w} d={d}: {:?}", t.status);
                    ensure!(overlaps || t.status == Status::Completed { results: vec![] }, "N={n} K={k} W={w} d={d}: {:?}", t.status);
                    checked += 1;
                }
            }
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(30), "took {t:?}");
    Ok(format!("{checked} (N, K, W, d) stores trap iff they overlap the guard, {:.2}s", t.as_secs_f64()))
}

fn behavior_preservation() -> Outcome {
    let cfg = CanaryConfig::default();
    let (mut compared, mut skipped) = (0, Vec::new());
    for (case, opt, path) in common::bundled_modules() {
        let (_, m) = common::load(&path);
        let (before, crossings) = common::frame_crossings(&m, cfg.frame_growth());
        if !crossings.is_empty() {
            skipped.push(format!("{case}@{opt}"));
            continue;
        }
        let (h, _) = harden(&m, &cfg)?;
        let after = common::run(&h, None);
        ensure!(before.status == after.status, "{case} {opt}: {:?} vs {:?}", before.status, after.status);
        ensure!(before.stdout == after.stdout && before.stderr == after.stderr, "{case} {opt}: output differs");
        compared += 1;
    }
    ensure!(compared > 0, "nothing compared");
    Ok(format!("{compared} modules identical; {} with frame-boundary crossings excluded", skipped.len()))
}

fn pattern(r: &Report, id: &str) -> Option<BTreeMap<OptLevel, (Class, f64, f64)>> {
    [OptLevel::O0, OptLevel::O1]
        .into_iter()
        .map(|o| r.pre(id, o).map(|d| (o, (d.class, d.native_crash_rate, d.wasm_crash_rate))))
        .collect()
}

fn flips(p: &BTreeMap<OptLevel, (Class, f64, f64)>) -> bool {
    let (o0, o1) = (&p[&OptLevel::O0], &p[&OptLevel::O1]);
    o0.1 == 0.0 && o1.1 > 0.0 && o0.2 == 0.0 && o1.2 == 0.0
}

fn optimization_sensitivity(r: &Report) -> Outcome {
    let primary = "cwe121-alloca-loop-17";
    let p = pattern(r, primary).ok_or(format!("{primary} missing at O0/O1"))?;
    if flips(&p) {
        return Ok(format!("{primary}: native no-crash at O0, crash at O1; wasm no-crash at both"));
    }
    ensure!(
        p.values().all(|(_, _, wasm)| *wasm == 0.0),
        "{primary}: wasm crashes before hardening"
    );
    let others: BTreeSet<&str> = r
        .cases
        .iter()
        .filter(|c| c.category == Category::OptimizationSensitive && c.id != primary)
        .map(|c| c.id.as_str())
        .collect();
    let flipped: Vec<&str> = others
        .into_iter()
        .filter(|id| pattern(r, id).is_some_and(|p| flips(&p)))
        .collect();
    ensure!(!flipped.is_empty(), "{primary} shows {p:?} and no other case flips");
    Ok(format!(
        "drift: {primary} native crash rate O0 {} / O1 {} with this compiler, reported as closed by toolchain; {} flips O0 no-crash -> O1 crash with wasm no-crash at both",
        p[&OptLevel::O0].1,
        p[&OptLevel::O1].1,
        flipped.join(", ")
    ))
}

fn size_overhead() -> Outcome {
    let cfg = CanaryConfig::default();
    let (mut before, mut after, mut worst) = (0usize, 0usize, 0f64);
    for (case, opt, path) in common::bundled_modules() {
        let (bytes, m) = common::load(&path);
        let (h, r) = harden(&m, &cfg)?;
        for e in r.hardened() {
            let bound = 6 + 5 * e.check_sites as i64;
            ensure!(e.instruction_delta <= bound, "{case} {opt} f{}: {} > {bound}", e.function, e.instruction_delta);
            let body = |m: &WasmModule| m.body(e.function).map_or(0, |b| b.instrs.len() as i64);
            ensure!(body(&h) - body(&m) == e.instruction_delta, "{case} {opt} f{}: reported delta is not the counted one", e.function);
        }
        let out = h.encode().map_err(|e| e.to_string())?.len();
        worst = worst.max((out - bytes.len()) as f64 / bytes.len() as f64);
        before += bytes.len();
        after += out;
    }
    let growth = (after - before) as f64 / before as f64;
    ensure!(growth < 0.15, "growth {:.1}%", growth * 100.0);
    Ok(format!(
        "per-function delta within 6 + 5*sites; corpus {before} -> {after} bytes (+{:.1}%, worst module +{:.1}%)",
        growth * 100.0,
        worst * 100.0
    ))
}

fn main() {
    let mut failed = 0;
    let mut line = |n: u32, name: &str, r: Outcome| {
        match r {
            Ok(msg) => println!("criterion {n}: PASS {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL {name}: {msg}");
            }
        }
    };
    line(1, "round-trip identity", round_trip());
    line(2, "frame detection", frame_detection());
    line(3, "static escape detection", escape_detection());
    match diff_report() {
        Ok(r) => {
            line(4, "divergence reproduction", divergence(&r));
            line(5, "hardening efficacy", hardening_efficacy(&r));
            line(6, "oracle boundary sweep", boundary_sweep());
            line(7, "behavior preservation", behavior_preservation());
            line(8, "optimization sensitivity", optimization_sensitivity(&r));
        }
        Err(e) => {
            for (n, name) in [(4, "divergence reproduction"), (5, "hardening efficacy"), (8, "optimization sensitivity")] {
                line(n, name, Err(format!("diff failed: {e}")));
            }
            line(6, "oracle boundary sweep", boundary_sweep());
            line(7, "behavior preservation", behavior_preservation());
        }
    }
    line(9, "size overhead", size_overhead());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
