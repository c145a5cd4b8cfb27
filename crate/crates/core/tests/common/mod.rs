#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use wasm_canary::corpus::{self, Artifact, Cell, CorpusManifest, OptLevel, Target};
use wasm_canary::frame;
use wasm_canary::wasm::interp::{self, ExecutionTrace, InterpConfig, TraceEvent};
use wasm_canary::wasm::WasmModule;

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn manifest_path() -> PathBuf {
    repo_root().join("corpus/manifest.toml")
}

pub fn manifest() -> CorpusManifest {
    corpus::load_manifest(&manifest_path()).expect("bundled manifest loads")
}

pub fn schema(name: &str) -> serde_json::Value {
    let p = repo_root().join("schemas").join(name);
    serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap()
}

/// Validates `instance` against a schema file, resolving references to the
/// sibling schema files.
pub fn schema_errors(name: &str, instance: &serde_json::Value) -> Vec<String> {
    let base = "https://example.invalid/wasm-canary/";
    let mut opts = jsonschema::JSONSchema::options();
    for other in ["analysis.schema.json", "harden.schema.json", "report.schema.json"] {
        opts.with_document(format!("{base}{other}"), schema(other));
    }
    let compiled = opts.compile(&schema(name)).expect("schema compiles");
    let errors = match compiled.validate(instance) {
        Ok(()) => Vec::new(),
        Err(errs) => errs.map(|e| format!("{}: {e}", e.instance_path)).collect(),
    };
    errors
}

/// Bundled wasm artifact for every (case, optimization) pair.
pub fn bundled_modules() -> Vec<(String, OptLevel, PathBuf)> {
    let m = manifest();
    let mut out = Vec::new();
    for case in &m.cases {
        for cell in &case.compile_matrix {
            if cell.target != Target::Wasm {
                continue;
            }
            let a = Artifact::locate(&m.root, &case.id, *cell)
                .unwrap_or_else(|e| panic!("{} {}: {e}", case.id, cell));
            out.push((case.id.clone(), cell.opt, a.path));
        }
    }
    out
}

pub fn bundled(case: &str, opt: OptLevel) -> PathBuf {
    let m = manifest();
    Artifact::locate(&m.root, case, Cell::new(Target::Wasm, opt))
        .unwrap()
        .path
}

pub fn load(path: &Path) -> (Vec<u8>, WasmModule) {
    let bytes = std::fs::read(path).unwrap();
    let m = WasmModule::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    (bytes, m)
}

pub fn fixture(name: &str) -> WasmModule {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let bytes = wat::parse_file(&p).unwrap();
    WasmModule::decode(&bytes).unwrap()
}

pub fn validate(bytes: &[u8]) -> Result<(), String> {
    wasmparser::Validator::new()
        .validate_all(bytes)
        .map(|_| ())
        .map_err(|e| e.to_string())
}

pub fn have(program: &str) -> bool {
    std::process::Command::new(program)
        .arg("--version")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

pub const FUEL: u64 = 200_000_000;

pub fn run(m: &WasmModule, watch: Option<u32>) -> ExecutionTrace {
    let cfg = InterpConfig {
        fuel: FUEL,
        watch_global: watch,
        ..InterpConfig::default()
    };
    interp::interpret(m, "_start", &cfg).unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Crossing {
    pub function: u32,
    pub frame_size: u32,
    pub base: u32,
    pub address: u64,
    pub width: u32,
}

struct Live {
    invocation: u64,
    function: u32,
    base: Option<u32>,
    /// Stack bytes this invocation owns and the event index they were
    /// allocated at.
    own: Option<(u64, u64, usize)>,
}

/// wasm-ld's default stack size.
pub const STACK_SIZE: u64 = 64 * 1024;

/// Runs the module and reports every frame-boundary crossing:
/// - a store touching [base+N, base+N+window) of a live frame, where a guard
///   of `window` bytes would sit after hardening;
/// - a load or store into the unallocated stack below the current stack
///   pointer, except a frameless leaf touching the `N` bytes it reserves
///   below the pointer with `global.get sp; i32.const N; i32.sub`;
/// - a load from the loader's own frame (or leaf reserve) of a byte not
///   written since that frame was allocated, i.e. stale data whose position
///   depends on the layout of frames that are gone.
pub fn frame_crossings(m: &WasmModule, window: u32) -> (ExecutionTrace, Vec<Crossing>) {
    let an = frame::analyze_module(m).unwrap();
    let Some(sp) = an.sp_global else {
        return (run(m, None), Vec::new());
    };
    let frames: HashMap<u32, _> = an
        .frames
        .frames
        .iter()
        .map(|f| (f.function, f.clone()))
        .collect();
    let reserves: HashMap<u32, u32> = (0..m.functions.len() as u32)
        .map(|i| i + m.imported_function_count())
        .filter(|f| !frames.contains_key(f))
        .filter_map(|f| leaf_reserve(m, sp, f).map(|n| (f, n)))
        .collect();
    let cfg = InterpConfig {
        fuel: FUEL,
        watch_global: Some(sp),
        trace_loads: true,
        ..InterpConfig::default()
    };
    let trace = interp::interpret(m, "_start", &cfg).unwrap();
    let top = sp_init(m, sp);
    let mut current = top;
    let mut stack: Vec<Live> = Vec::new();
    let mut written: Vec<usize> = vec![usize::MAX; trace.memory.len()];
    let mut out = Vec::new();
    for (idx, ev) in trace.events.iter().enumerate() {
        match ev {
            TraceEvent::Enter { invocation, function } => stack.push(Live {
                invocation: *invocation,
                function: *function,
                base: None,
                own: reserves
                    .get(function)
                    .map(|n| (current - *n as u64, current, idx)),
            }),
            TraceEvent::Exit { .. } => {
                stack.pop();
            }
            TraceEvent::GlobalSet {
                invocation,
                function,
                instr,
                value,
            } => {
                current = *value as u64;
                let Some(f) = frames.get(function) else { continue };
                let Some(live) = stack.iter_mut().rev().find(|l| l.invocation == *invocation) else {
                    continue;
                };
                if *instr == f.prologue.end {
                    live.base = Some(*value as u32);
                    live.own = Some((*value as u64, *value as u64 + f.frame_size as u64, idx));
                } else if f.epilogues.iter().any(|e| e.span.end == *instr) {
                    live.base = None;
                    live.own = None;
                }
            }
            TraceEvent::Load(a) | TraceEvent::Store(a) => {
                let end = a.address + a.width as u64;
                let reserved = reserves.get(&a.function).map_or(current, |n| current - *n as u64);
                let below = a.address < current && end > top.saturating_sub(STACK_SIZE);
                if below && (a.address < reserved || end > current) {
                    out.push(Crossing {
                        function: a.function,
                        frame_size: frames.get(&a.function).map_or(0, |f| f.frame_size),
                        base: current as u32,
                        address: a.address,
                        width: a.width,
                    });
                }
                if matches!(ev, TraceEvent::Load(_)) {
                    let own = stack
                        .iter()
                        .rev()
                        .find(|l| l.invocation == a.invocation)
                        .and_then(|l| l.own);
                    if let Some((lo, hi, since)) = own {
                        let stale = (a.address.max(lo)..end.min(hi))
                            .any(|b| written[b as usize] == usize::MAX || written[b as usize] < since);
                        if stale {
                            out.push(Crossing {
                                function: a.function,
                                frame_size: frames.get(&a.function).map_or(0, |f| f.frame_size),
                                base: lo as u32,
                                address: a.address,
                                width: a.width,
                            });
                        }
                    }
                    continue;
                }
                written[a.address as usize..end as usize].fill(idx);
                for live in &stack {
                    let (Some(base), Some(f)) = (live.base, frames.get(&live.function)) else {
                        continue;
                    };
                    let lo = base as u64 + f.frame_size as u64;
                    let hi = lo + window as u64;
                    if a.address < hi && end > lo {
                        out.push(Crossing {
                            function: live.function,
                            frame_size: f.frame_size,
                            base,
                            address: a.address,
                            width: a.width,
                        });
                    }
                }
            }
        }
    }
    (trace, out)
}

fn sp_init(m: &WasmModule, sp: u32) -> u64 {
    let defined = sp - m.imported_global_count();
    match m.globals[defined as usize].init.first().map(|i| i.op().clone()) {
        Some(wasm_canary::wasm::Op::I32Const(v)) => v as u32 as u64,
        other => panic!("stack pointer initializer {other:?}"),
    }
}

/// Bytes a frameless function carves below the stack pointer: the first
/// `i32.const N` followed by `i32.sub` within a few instructions of
/// `global.get sp`, either literally or through locals as at -O0.
fn leaf_reserve(m: &WasmModule, sp: u32, f: u32) -> Option<u32> {
    use wasm_canary::wasm::Op;
    let instrs = &m.body(f)?.instrs;
    let at = instrs.iter().position(|i| i.op() == &Op::GlobalGet(sp))?;
    let window = &instrs[at + 1..(at + 8).min(instrs.len())];
    let n = window.iter().find_map(|i| match i.op() {
        Op::I32Const(n) if *n > 0 => Some(*n as u32),
        _ => None,
    })?;
    window
        .iter()
        .any(|i| i.op() == &Op::Numeric(0x6b))
        .then_some(n)
}

/// Frame allocations found by matching `global.get sp; i32.const N;
/// i32.sub; [local.tee]; global.set sp` with wasmparser. Returns
/// (function index, N) for the first match in each function.
pub fn idiom_frames(bytes: &[u8], sp: u32) -> Vec<(u32, u32)> {
    use wasmparser::{Operator, Parser, Payload, TypeRef};
    let mut imported = 0u32;
    let mut next = 0u32;
    let mut out = Vec::new();
    for payload in Parser::new(0).parse_all(bytes) {
        match payload.unwrap() {
            Payload::ImportSection(r) => {
                for imp in r {
                    if matches!(imp.unwrap().ty, TypeRef::Func(_)) {
                        imported += 1;
                    }
                }
            }
            Payload::CodeSectionEntry(body) => {
                let index = imported + next;
                next += 1;
                let ops: Vec<Operator> = body
                    .get_operators_reader()
                    .unwrap()
                    .into_iter()
                    .map(|o| o.unwrap())
                    .collect();
                for i in 0..ops.len().saturating_sub(3) {
                    let (Operator::GlobalGet { global_index: g }, Operator::I32Const { value }, Operator::I32Sub) =
                        (&ops[i], &ops[i + 1], &ops[i + 2])
                    else {
                        continue;
                    };
                    if *g != sp || *value <= 0 {
                        continue;
                    }
                    let mut j = i + 3;
                    if matches!(ops.get(j), Some(Operator::LocalTee { .. })) {
                        j += 1;
                    }
                    if matches!(ops.get(j), Some(Operator::GlobalSet { global_index }) if *global_index == sp) {
                        out.push((index, *value as u32));
                        break;
                    }
                }
            }
            _ => {}
        }
    }
    out
}
