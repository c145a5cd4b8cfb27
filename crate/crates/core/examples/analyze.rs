//! Find shadow-stack frames and stores that land outside them.
//!
//! cargo run --example analyze [-- module.wasm]

use std::path::PathBuf;

use wasm_canary::frame::{self, Severity};
use wasm_canary::wasm::WasmModule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../corpus/cwe121-char-declare-loop/wasm32-wasi-O1/module.wasm")
    });
    let m = WasmModule::decode(&std::fs::read(&path)?)?;
    let an = frame::analyze_module(&m)?;
    let names = m.function_names();
    let name = |f: u32| names.get(&f).cloned().unwrap_or_else(|| format!("func[{f}]"));

    println!("{}: stack pointer {:?}", path.display(), an.sp_global);
    for f in &an.frames.frames {
        println!(
            "  frame {:>4} bytes  {} ({} restore sites)",
            f.frame_size,
            name(f.function),
            f.check_sites().len()
        );
    }
    for s in &an.frames.skipped {
        println!("  skipped {}: {}", name(s.function), s.detail);
    }
    for e in &an.escapes.findings {
        let what = match e.severity {
            Severity::EscapesFrame => "escapes",
            Severity::TouchesFrameTopWord => "touches top word of",
        };
        println!(
            "  {} store at offset {} ({} bytes) {what} its {}-byte frame",
            name(e.function),
            e.effective_offset,
            e.width,
            e.frame_size
        );
    }
    Ok(())
}
