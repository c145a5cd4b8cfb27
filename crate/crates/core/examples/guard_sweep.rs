//! Single stores walking across the guard of a synthetic frame: the
//! hardened function traps exactly when the store overlaps [N, N+K).

use wasm_canary::canary::{self, CanaryConfig};
use wasm_canary::frame;
use wasm_canary::wasm::interp::{self, InterpConfig};
use wasm_canary::wasm::WasmModule;

fn store_at(n: u32, d: u32) -> WasmModule {
    let src = format!(
        r#"(module
  (memory (export "memory") 2)
  (global $sp (mut i32) (i32.const 65536))
  (func $f (local i32)
    global.get 0 i32.const {n} i32.sub local.tee 0 global.set 0
    local.get 0 i32.const 0x41414141 i32.store offset={d}
    local.get 0 i32.const {n} i32.add global.set 0)
  (func (export "_start") call $f))"#
    );
    WasmModule::decode(&wat::parse_str(src).unwrap()).unwrap()
}

fn main() {
    let (n, k) = (32, 8);
    let cfg = CanaryConfig {
        guard_size: k,
        ..CanaryConfig::default()
    };
    println!("frame {n}, guard {k}, 4-byte stores");
    for d in n - 8..=n + k {
        let m = store_at(n, d);
        let an = frame::analyze_module(&m).unwrap();
        let (h, _) = canary::harden(&m, &an.frames, &cfg).unwrap();
        let t = interp::interpret(&h, "_start", &InterpConfig::default()).unwrap();
        let bar: String = (0..n + k + 4)
            .map(|i| match (i >= d && i < d + 4, i >= n && i < n + k) {
                (true, true) => 'X',
                (true, false) => 'w',
                (false, true) => 'g',
                (false, false) => '.',
            })
            .skip(n as usize - 8)
            .collect();
        println!("  d={d:>2} {bar}  {}", if t.trapped() { "trap" } else { "ok" });
    }
}
