//! Run a module before and after hardening in the reference interpreter.
//!
//! cargo run --example interpret [-- module.wasm]

use std::path::PathBuf;

use wasm_canary::canary::{self, CanaryConfig};
use wasm_canary::frame;
use wasm_canary::wasm::interp::{self, InterpConfig};
use wasm_canary::wasm::WasmModule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../corpus/cwe121-char-declare-memcpy/wasm32-wasi-O1/module.wasm")
    });
    let m = WasmModule::decode(&std::fs::read(&path)?)?;
    let an = frame::analyze_module(&m)?;
    let (h, _) = canary::harden(&m, &an.frames, &CanaryConfig::default())?;

    let cfg = InterpConfig {
        fuel: 50_000_000,
        watch_global: an.sp_global,
        ..InterpConfig::default()
    };
    for (label, module) in [("original", &m), ("hardened", &h)] {
        let t = interp::interpret(module, "_start", &cfg)?;
        println!(
            "{label:>8}: {:?} after {} instructions, {} stores",
            t.status,
            t.fuel_used,
            t.stores.len()
        );
        let out = String::from_utf8_lossy(&t.stdout);
        for line in out.lines().take(3) {
            println!("          | {line}");
        }
    }
    Ok(())
}
