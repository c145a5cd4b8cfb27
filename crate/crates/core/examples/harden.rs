//! Insert canaries, check the rewrite, and write the hardened module.
//!
//! cargo run --example harden [-- in.wasm out.wasm]

use std::path::PathBuf;

use wasm_canary::canary::{self, Action, CanaryConfig, GuardMode};
use wasm_canary::frame;
use wasm_canary::wasm::WasmModule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let input = args.next().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../corpus/cwe121-wchar-t-declare-loop/wasm32-wasi-O1/module.wasm")
    });
    let output = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("hardened.wasm"));

    let bytes = std::fs::read(&input)?;
    let m = WasmModule::decode(&bytes)?;
    let an = frame::analyze_module(&m)?;

    for cfg in [
        CanaryConfig::default(),
        CanaryConfig {
            guard_size: 16,
            mode: GuardMode::PerRunRandom,
            ..CanaryConfig::default()
        },
    ] {
        let (h, report) = canary::harden(&m, &an.frames, &cfg)?;
        canary::verify_hardening(&m, &h, &report)?;
        println!(
            "K={} {:?}: {} -> {} bytes",
            cfg.guard_size, cfg.mode, report.original_size, report.hardened_size
        );
        for e in &report.functions {
            match &e.action {
                Action::Hardened => println!(
                    "  f{}: frame {} -> {}, {} check sites, +{} instrs",
                    e.function,
                    e.old_frame_size.unwrap_or(0),
                    e.new_frame_size.unwrap_or(0),
                    e.check_sites,
                    e.instruction_delta
                ),
                Action::Skipped(why) => println!("  f{}: skipped ({why})", e.function),
            }
        }
        if cfg.mode == GuardMode::Fixed {
            std::fs::write(&output, h.encode()?)?;
            println!("  wrote {}", output.display());
        }
    }
    Ok(())
}
