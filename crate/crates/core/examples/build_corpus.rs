//! Compile part of the bundled corpus into a scratch directory and show the
//! recorded metadata.
//!
//! cargo run --example build_corpus

use std::path::PathBuf;

use wasm_canary::corpus::{self, Target};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus/manifest.toml");
    let mut manifest = corpus::load_manifest(&manifest_path)?;
    manifest.toolchain.apply_env();
    manifest.validate()?;
    manifest.retain_cases(&["safe-char-declare-loop".into(), "cwe121-char-declare-loop".into()])?;

    let out = tempfile::tempdir()?;
    let built = corpus::build_corpus(&manifest, out.path(), |_, cell| cell.target == Target::Wasm, 4);
    for r in built {
        match r {
            Ok(a) => println!(
                "{:<28} {:<16} {} bytes  sha256 {}..  {}",
                a.case,
                a.cell.to_string(),
                std::fs::metadata(&a.path)?.len(),
                &a.metadata.artifact_sha256[..12],
                a.metadata.compiler_version
            ),
            Err(e) => println!("error: {e}"),
        }
    }
    Ok(())
}
