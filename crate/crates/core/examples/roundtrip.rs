//! Decode a module, list what is in it, and re-encode it byte for byte.
//!
//! cargo run --example roundtrip [-- module.wasm]

use std::path::PathBuf;

use wasm_canary::wasm::WasmModule;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../corpus/cwe131-memcpy-45/wasm32-wasi-O2/module.wasm")
    });
    let bytes = std::fs::read(&path)?;
    let m = match WasmModule::decode(&bytes) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("decode failed at byte offset {}: {e}", e.offset());
            std::process::exit(2);
        }
    };
    println!(
        "{} types, {} imports, {} functions, {} globals, {} data segments, {} custom sections",
        m.types.len(),
        m.imports.len(),
        m.functions.len(),
        m.globals.len(),
        m.data.len(),
        m.customs.len()
    );
    let names = m.function_names();
    for (i, body) in m.functions.iter().enumerate() {
        let f = m.imported_function_count() + i as u32;
        println!(
            "  f{f:<3} {:<32} {:>4} instrs, {} locals",
            names.get(&f).map(String::as_str).unwrap_or("?"),
            body.instrs.len(),
            body.declared_local_count()
        );
    }
    let again = m.encode()?;
    println!("re-encoded {} bytes, identical: {}", again.len(), again == bytes);
    Ok(())
}
