fn main() {
    std::process::exit(wasm_canary::cli::main());
}
