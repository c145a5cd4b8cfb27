//! Native vs wasm crash comparison on a few corpus cases, before and after
//! hardening.
//!
//! Uses WASM_CANARY_RUNTIME or `wasmtime` when available, otherwise the
//! `wasm-canary` binary built next to this example (`cargo build` first).
//!
//! cargo run --example differential

use std::path::PathBuf;
use std::time::Duration;

use wasm_canary::canary::CanaryConfig;
use wasm_canary::corpus::{self, OptLevel};
use wasm_canary::harness::{self, CrashPolicy, DiffConfig, RunSettings};

fn runtime() -> String {
    if let Ok(t) = std::env::var(harness::ENV_RUNTIME) {
        return t;
    }
    let found = std::env::var_os("PATH")
        .map(|p| std::env::split_paths(&p).any(|d| d.join("wasmtime").is_file()))
        .unwrap_or(false);
    if found {
        return "wasmtime run {artifact} {args}".into();
    }
    let exe = std::env::current_exe().unwrap();
    let bin = exe.parent().and_then(|p| p.parent()).unwrap().join("wasm-canary");
    format!("{} exec {{artifact}} {{args}}", bin.display())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus/manifest.toml");
    let mut manifest = corpus::load_manifest(&manifest_path)?;
    manifest.toolchain.apply_env();
    manifest.retain_cases(&[
        "cwe121-char-declare-loop".into(),
        "cwe121-char-alloca-loop".into(),
        "safe-memcpy-alloca".into(),
    ])?;
    let work = tempfile::tempdir()?;
    let cfg = DiffConfig {
        run: RunSettings {
            runs: 5,
            timeout: Duration::from_secs(5),
            markers: harness::default_markers(),
            policy: CrashPolicy::default(),
            runtime: runtime(),
        },
        optimizations: vec![OptLevel::O0, OptLevel::O1],
        canary: CanaryConfig::default(),
        work_dir: work.path().to_path_buf(),
        jobs: 4,
        sanity_checks: false,
    };
    let report = harness::run_diff(&manifest, &cfg);
    print!("{}", report.summary_table());
    println!();
    print!("{}", report.case_table());
    for e in &report.errors {
        println!("error: {e}");
    }
    Ok(())
}
