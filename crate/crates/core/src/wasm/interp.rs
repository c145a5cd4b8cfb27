//! Reference interpreter used as a verification oracle.
//!
//! Single memory, stubbed host imports, fuel-bounded. Every memory store is
//! recorded so callers can check exactly which bytes a run touched.

use std::collections::HashMap;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::instr::{LoadKind, MemArg, Op, StoreKind};
use super::types::*;
use super::WasmModule;

const PAGE: usize = 65536;
/// Upper bound on memory the oracle will allocate, in pages.
const MAX_PAGES: u32 = 1024;
const MAX_CALL_DEPTH: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Value {
    I32(i32),
    I64(i64),
    /// Raw bits.
    F32(u32),
    F64(u64),
}

impl Value {
    pub fn default_for(t: ValType) -> Value {
        match t {
            ValType::I64 => Value::I64(0),
            ValType::F32 => Value::F32(0),
            ValType::F64 => Value::F64(0),
            _ => Value::I32(0),
        }
    }

    pub fn as_i32(self) -> i32 {
        match self {
            Value::I32(v) => v,
            Value::I64(v) => v as i32,
            Value::F32(v) => v as i32,
            Value::F64(v) => v as i32,
        }
    }

    pub fn as_i64(self) -> i64 {
        match self {
            Value::I32(v) => i64::from(v),
            Value::I64(v) => v,
            Value::F32(v) => i64::from(v),
            Value::F64(v) => v as i64,
        }
    }

    fn f32(self) -> f32 {
        match self {
            Value::F32(b) => f32::from_bits(b),
            other => f32::from_bits(other.as_i32() as u32),
        }
    }

    fn f64(self) -> f64 {
        match self {
            Value::F64(b) => f64::from_bits(b),
            other => f64::from_bits(other.as_i64() as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trap {
    Unreachable,
    MemoryOutOfBounds,
    DivideByZero,
    IntegerOverflow,
    InvalidConversion,
    IndirectCallTypeMismatch,
    UndefinedElement,
    CallStackExhausted,
    Unsupported(String),
}

impl std::fmt::Display for Trap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Trap::Unreachable => write!(f, "wasm `unreachable` instruction executed"),
            Trap::MemoryOutOfBounds => write!(f, "out of bounds memory access"),
            Trap::DivideByZero => write!(f, "integer divide by zero"),
            Trap::IntegerOverflow => write!(f, "integer overflow"),
            Trap::InvalidConversion => write!(f, "invalid conversion to integer"),
            Trap::IndirectCallTypeMismatch => write!(f, "indirect call type mismatch"),
            Trap::UndefinedElement => write!(f, "undefined element"),
            Trap::CallStackExhausted => write!(f, "call stack exhausted"),
            Trap::Unsupported(what) => write!(f, "unsupported instruction {what}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum Status {
    Completed { results: Vec<Value> },
    /// The module called an exit stub.
    Exited { code: i32 },
    Trapped { reason: Trap },
    FuelExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Access {
    pub address: u64,
    pub width: u32,
    pub function: u32,
    pub instr: usize,
    pub invocation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "event")]
pub enum TraceEvent {
    Enter { invocation: u64, function: u32 },
    Exit { invocation: u64 },
    Store(Access),
    /// Only recorded with [`InterpConfig::trace_loads`].
    Load(Access),
    /// Write to the watched global (see [`InterpConfig::watch_global`]).
    GlobalSet {
        invocation: u64,
        function: u32,
        instr: usize,
        value: i64,
    },
}

#[derive(Debug, Clone)]
pub struct InterpConfig {
    pub fuel: u64,
    /// Seed for the entropy stub; identical seeds give identical traces.
    pub seed: u64,
    pub args: Vec<Value>,
    /// Global whose writes are recorded as [`TraceEvent::GlobalSet`].
    pub watch_global: Option<u32>,
    /// Record every load, including host reads, as [`TraceEvent::Load`].
    pub trace_loads: bool,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig {
            fuel: 10_000_000,
            seed: 0,
            args: Vec::new(),
            watch_global: None,
            trace_loads: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionTrace {
    pub status: Status,
    #[serde(skip)]
    pub initial_memory: Vec<u8>,
    #[serde(skip)]
    pub memory: Vec<u8>,
    pub stores: Vec<Access>,
    #[serde(skip)]
    pub events: Vec<TraceEvent>,
    /// Bytes written through `fd_write` to descriptor 1.
    pub stdout: Vec<u8>,
    /// Bytes written through `fd_write` to descriptor 2.
    pub stderr: Vec<u8>,
    pub fuel_used: u64,
}

impl ExecutionTrace {
    pub fn trapped(&self) -> bool {
        matches!(self.status, Status::Trapped { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InterpError {
    #[error("no exported function named `{0}`")]
    MissingExport(String),
    #[error("import {module}.{field} has no stub")]
    UnstubbedImport { module: String, field: String },
    #[error("fuel must be positive")]
    ZeroFuel,
    #[error("entry expects {expected} arguments, got {got}")]
    ArgumentCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Host {
    FdWrite,
    ProcExit,
    RandomGet,
    PrintI32,
    Exit,
}

/// The import stubs the oracle provides.
pub const STUBBED_IMPORTS: [(&str, &str); 5] = [
    ("wasi_snapshot_preview1", "fd_write"),
    ("wasi_snapshot_preview1", "proc_exit"),
    ("wasi_snapshot_preview1", "random_get"),
    ("env", "print_i32"),
    ("env", "exit"),
];

fn host_for(module: &str, field: &str, ty: &FuncType) -> Option<Host> {
    use ValType::I32;
    let sig = |p: &[ValType], r: &[ValType]| ty.params == p && ty.results == r;
    match (module, field) {
        ("wasi_snapshot_preview1", "fd_write") if sig(&[I32; 4], &[I32]) => Some(Host::FdWrite),
        ("wasi_snapshot_preview1", "proc_exit") if sig(&[I32], &[]) => Some(Host::ProcExit),
        ("wasi_snapshot_preview1", "random_get") if sig(&[I32, I32], &[I32]) => {
            Some(Host::RandomGet)
        }
        ("env", "print_i32") if sig(&[I32], &[]) => Some(Host::PrintI32),
        ("env", "exit") if sig(&[I32], &[]) => Some(Host::Exit),
        _ => None,
    }
}

/// Matching `else`/`end` positions for every block-opening instruction.
#[derive(Debug, Default)]
struct ControlMap {
    end: HashMap<usize, usize>,
    else_: HashMap<usize, usize>,
}

fn control_map(instrs: &[super::Instr]) -> ControlMap {
    let mut map = ControlMap::default();
    let mut open: Vec<usize> = Vec::new();
    for (i, ins) in instrs.iter().enumerate() {
        match ins.op() {
            Op::Block(_) | Op::Loop(_) | Op::If(_) => open.push(i),
            Op::Else => {
                if let Some(&s) = open.last() {
                    map.else_.insert(s, i);
                }
            }
            Op::End => {
                if let Some(s) = open.pop() {
                    map.end.insert(s, i);
                }
            }
            _ => {}
        }
    }
    map
}

enum Halt {
    Trap(Trap),
    Exit(i32),
    Fuel,
}

impl From<Trap> for Halt {
    fn from(t: Trap) -> Self {
        Halt::Trap(t)
    }
}

struct Label {
    height: usize,
    arity: usize,
    /// Instruction to continue at when branched to.
    target: usize,
    is_loop: bool,
}

struct Machine<'m> {
    module: &'m WasmModule,
    hosts: Vec<Host>,
    imported_funcs: u32,
    imported_globals: u32,
    controls: Vec<Option<ControlMap>>,
    memory: Vec<u8>,
    max_pages: u32,
    globals: Vec<Value>,
    table: Vec<Option<u32>>,
    fuel: u64,
    fuel_used: u64,
    rng: ChaCha8Rng,
    watch_global: Option<u32>,
    trace_loads: bool,
    events: Vec<TraceEvent>,
    stores: Vec<Access>,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    next_invocation: u64,
    depth: usize,
}

/// Runs the exported function `entry` to completion, trap, exit or fuel
/// exhaustion.
pub fn interpret(
    m: &WasmModule,
    entry: &str,
    config: &InterpConfig,
) -> Result<ExecutionTrace, InterpError> {
    if config.fuel == 0 {
        return Err(InterpError::ZeroFuel);
    }
    let func = m
        .exported_function(entry)
        .ok_or_else(|| InterpError::MissingExport(entry.to_string()))?;

    let mut hosts = Vec::new();
    for imp in &m.imports {
        let unstubbed = || InterpError::UnstubbedImport {
            module: imp.module.clone(),
            field: imp.field.clone(),
        };
        match &imp.desc {
            ImportDesc::Func(t) => {
                let ty = &m.types[*t as usize];
                hosts.push(host_for(&imp.module, &imp.field, ty).ok_or_else(unstubbed)?);
            }
            _ => return Err(unstubbed()),
        }
    }
    let params = m.function_type(func).map(|t| t.params.len()).unwrap_or(0);
    if params != config.args.len() {
        return Err(InterpError::ArgumentCount {
            expected: params,
            got: config.args.len(),
        });
    }

    let mem = m.memories.first().copied();
    let pages = mem.map_or(0, |l| l.min.min(MAX_PAGES));
    let max_pages = mem.map_or(0, |l| l.max.unwrap_or(MAX_PAGES).min(MAX_PAGES));
    let mut machine = Machine {
        module: m,
        hosts,
        imported_funcs: m.imported_function_count(),
        imported_globals: m.imported_global_count(),
        controls: (0..m.functions.len()).map(|_| None).collect(),
        memory: vec![0; pages as usize * PAGE],
        max_pages,
        globals: Vec::new(),
        table: Vec::new(),
        fuel: config.fuel,
        fuel_used: 0,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        watch_global: config.watch_global,
        trace_loads: config.trace_loads,
        events: Vec::new(),
        stores: Vec::new(),
        stdout: Vec::new(),
        stderr: Vec::new(),
        next_invocation: 0,
        depth: 0,
    };

    let status = match machine.instantiate() {
        Err(t) => Status::Trapped { reason: t },
        Ok(()) => {
            let initial = machine.memory.clone();
            let result = match m.start {
                Some(s) => machine.call(s, Vec::new()).and_then(|_| machine.call(func, config.args.clone())),
                None => machine.call(func, config.args.clone()),
            };
            let status = match result {
                Ok(results) => Status::Completed { results },
                Err(Halt::Trap(t)) => Status::Trapped { reason: t },
                Err(Halt::Exit(code)) => Status::Exited { code },
                Err(Halt::Fuel) => Status::FuelExhausted,
            };
            return Ok(ExecutionTrace {
                status,
                initial_memory: initial,
                memory: machine.memory,
                stores: machine.stores,
                events: machine.events,
                stdout: machine.stdout,
                stderr: machine.stderr,
                fuel_used: machine.fuel_used,
            });
        }
    };
    Ok(ExecutionTrace {
        status,
        initial_memory: machine.memory.clone(),
        memory: machine.memory,
        stores: Vec::new(),
        events: Vec::new(),
        stdout: Vec::new(),
        stderr: Vec::new(),
        fuel_used: 0,
    })
}

fn const_value(expr: &[super::Instr], globals: &[Value]) -> Value {
    match expr.first().map(|i| i.op()) {
        Some(Op::I32Const(v)) => Value::I32(*v),
        Some(Op::I64Const(v)) => Value::I64(*v),
        Some(Op::F32Const(v)) => Value::F32(*v),
        Some(Op::F64Const(v)) => Value::F64(*v),
        Some(Op::GlobalGet(g)) => globals.get(*g as usize).copied().unwrap_or(Value::I32(0)),
        _ => Value::I32(0),
    }
}

impl<'m> Machine<'m> {
    fn instantiate(&mut self) -> Result<(), Trap> {
        let m = self.module;
        for g in &m.globals {
            let v = const_value(&g.init, &self.globals);
            self.globals.push(v);
        }
        if let Some(t) = m.tables.first() {
            self.table = vec![None; t.limits.min as usize];
        }
        for seg in &m.elements {
            if let (ElementMode::Active { offset, .. }, ElementItems::Functions(funcs)) =
                (&seg.mode, &seg.items)
            {
                let base = const_value(offset, &self.globals).as_i32() as u32 as usize;
                if base + funcs.len() > self.table.len() {
                    return Err(Trap::UndefinedElement);
                }
                for (i, f) in funcs.iter().enumerate() {
                    self.table[base + i] = Some(*f);
                }
            }
        }
        for seg in &m.data {
            if let DataMode::Active { offset, .. } = &seg.mode {
                let base = const_value(offset, &self.globals).as_i32() as u32 as usize;
                let end = base + seg.bytes.len();
                if end > self.memory.len() {
                    return Err(Trap::MemoryOutOfBounds);
                }
                self.memory[base..end].copy_from_slice(&seg.bytes);
            }
        }
        Ok(())
    }

    fn tick(&mut self) -> Result<(), Halt> {
        if self.fuel == 0 {
            return Err(Halt::Fuel);
        }
        self.fuel -= 1;
        self.fuel_used += 1;
        Ok(())
    }

    fn effective(&self, base: i32, m: &MemArg, width: u32) -> Result<usize, Trap> {
        let addr = u64::from(base as u32) + u64::from(m.offset);
        if addr + u64::from(width) > self.memory.len() as u64 {
            return Err(Trap::MemoryOutOfBounds);
        }
        Ok(addr as usize)
    }

    fn read_bytes<const N: usize>(&self, addr: usize) -> [u8; N] {
        self.memory[addr..addr + N].try_into().unwrap()
    }

    fn traced_read(&mut self, addr: usize, width: usize, ctx: (u32, usize, u64)) {
        if self.trace_loads && width > 0 {
            self.events.push(TraceEvent::Load(Access {
                address: addr as u64,
                width: width as u32,
                function: ctx.0,
                instr: ctx.1,
                invocation: ctx.2,
            }));
        }
    }

    fn load(&mut self, kind: LoadKind, m: &MemArg, base: i32, ctx: (u32, usize, u64)) -> Result<Value, Trap> {
        let a = self.effective(base, m, kind.width())?;
        self.traced_read(a, kind.width() as usize, ctx);
        Ok(match kind {
            LoadKind::I32 => Value::I32(i32::from_le_bytes(self.read_bytes(a))),
            LoadKind::I64 => Value::I64(i64::from_le_bytes(self.read_bytes(a))),
            LoadKind::F32 => Value::F32(u32::from_le_bytes(self.read_bytes(a))),
            LoadKind::F64 => Value::F64(u64::from_le_bytes(self.read_bytes(a))),
            LoadKind::I32S8 => Value::I32(i32::from(self.memory[a] as i8)),
            LoadKind::I32U8 => Value::I32(i32::from(self.memory[a])),
            LoadKind::I32S16 => Value::I32(i32::from(i16::from_le_bytes(self.read_bytes(a)))),
            LoadKind::I32U16 => Value::I32(i32::from(u16::from_le_bytes(self.read_bytes(a)))),
            LoadKind::I64S8 => Value::I64(i64::from(self.memory[a] as i8)),
            LoadKind::I64U8 => Value::I64(i64::from(self.memory[a])),
            LoadKind::I64S16 => Value::I64(i64::from(i16::from_le_bytes(self.read_bytes(a)))),
            LoadKind::I64U16 => Value::I64(i64::from(u16::from_le_bytes(self.read_bytes(a)))),
            LoadKind::I64S32 => Value::I64(i64::from(i32::from_le_bytes(self.read_bytes(a)))),
            LoadKind::I64U32 => Value::I64(i64::from(u32::from_le_bytes(self.read_bytes(a)))),
        })
    }

    fn write(&mut self, addr: usize, bytes: &[u8], ctx: (u32, usize, u64)) {
        self.memory[addr..addr + bytes.len()].copy_from_slice(bytes);
        let ev = Access {
            address: addr as u64,
            width: bytes.len() as u32,
            function: ctx.0,
            instr: ctx.1,
            invocation: ctx.2,
        };
        self.stores.push(ev);
        self.events.push(TraceEvent::Store(ev));
    }

    fn store(
        &mut self,
        kind: StoreKind,
        m: &MemArg,
        base: i32,
        v: Value,
        ctx: (u32, usize, u64),
    ) -> Result<(), Trap> {
        let a = self.effective(base, m, kind.width())?;
        let bytes: Vec<u8> = match kind {
            StoreKind::I32 => v.as_i32().to_le_bytes().to_vec(),
            StoreKind::I64 => v.as_i64().to_le_bytes().to_vec(),
            StoreKind::F32 => v.f32().to_bits().to_le_bytes().to_vec(),
            StoreKind::F64 => v.f64().to_bits().to_le_bytes().to_vec(),
            StoreKind::I32As8 | StoreKind::I64As8 => vec![v.as_i64() as u8],
            StoreKind::I32As16 | StoreKind::I64As16 => (v.as_i64() as u16).to_le_bytes().to_vec(),
            StoreKind::I64As32 => (v.as_i64() as u32).to_le_bytes().to_vec(),
        };
        self.write(a, &bytes, ctx);
        Ok(())
    }

    fn mem_range(&self, addr: i32, len: i32) -> Result<std::ops::Range<usize>, Trap> {
        let start = addr as u32 as u64;
        let end = start + len as u32 as u64;
        if end > self.memory.len() as u64 {
            return Err(Trap::MemoryOutOfBounds);
        }
        Ok(start as usize..end as usize)
    }

    fn call_host(&mut self, host: Host, args: &[Value], ctx: (u32, usize, u64)) -> Result<Vec<Value>, Halt> {
        match host {
            Host::FdWrite => {
                let (fd, iovs, n, nwritten) =
                    (args[0].as_i32(), args[1].as_i32(), args[2].as_i32(), args[3].as_i32());
                let mut total = 0u32;
                for i in 0..n {
                    let at = self.mem_range(iovs.wrapping_add(i * 8), 8)?.start;
                    self.traced_read(at, 8, ctx);
                    let ptr = i32::from_le_bytes(self.read_bytes(at));
                    let len = i32::from_le_bytes(self.read_bytes(at + 4));
                    let range = self.mem_range(ptr, len)?;
                    self.traced_read(range.start, range.len(), ctx);
                    let bytes = self.memory[range].to_vec();
                    total += bytes.len() as u32;
                    match fd {
                        1 => self.stdout.extend(bytes),
                        2 => self.stderr.extend(bytes),
                        _ => return Ok(vec![Value::I32(8)]), // EBADF
                    }
                }
                let at = self.mem_range(nwritten, 4)?.start;
                self.write(at, &total.to_le_bytes(), ctx);
                Ok(vec![Value::I32(0)])
            }
            Host::ProcExit | Host::Exit => Err(Halt::Exit(args[0].as_i32())),
            Host::RandomGet => {
                let range = self.mem_range(args[0].as_i32(), args[1].as_i32())?;
                let mut buf = vec![0u8; range.len()];
                self.rng.fill_bytes(&mut buf);
                if !buf.is_empty() {
                    self.write(range.start, &buf, ctx);
                }
                Ok(vec![Value::I32(0)])
            }
            Host::PrintI32 => {
                self.stdout
                    .extend(format!("{}\n", args[0].as_i32()).into_bytes());
                Ok(Vec::new())
            }
        }
    }

    fn call(&mut self, func: u32, args: Vec<Value>) -> Result<Vec<Value>, Halt> {
        if func < self.imported_funcs {
            let host = self.hosts[func as usize];
            let invocation = self.next_invocation;
            self.next_invocation += 1;
            return self.call_host(host, &args, (func, 0, invocation));
        }
        if self.depth >= MAX_CALL_DEPTH {
            return Err(Trap::CallStackExhausted.into());
        }
        self.depth += 1;
        let invocation = self.next_invocation;
        self.next_invocation += 1;
        self.events.push(TraceEvent::Enter {
            invocation,
            function: func,
        });
        let r = self.run(func, args, invocation);
        self.events.push(TraceEvent::Exit { invocation });
        self.depth -= 1;
        r
    }

    fn block_arity(&self, bt: &BlockType) -> (usize, usize) {
        match bt {
            BlockType::Empty => (0, 0),
            BlockType::Value(_) => (0, 1),
            BlockType::Func(t) => {
                let ty = &self.module.types[*t as usize];
                (ty.params.len(), ty.results.len())
            }
        }
    }

    fn run(&mut self, func: u32, args: Vec<Value>, invocation: u64) -> Result<Vec<Value>, Halt> {
        let m = self.module;
        let def = (func - self.imported_funcs) as usize;
        let body = &m.functions[def];
        let sig = &m.types[body.type_index as usize];
        let result_arity = sig.results.len();
        let mut locals: Vec<Value> = args;
        for (n, t) in &body.locals {
            for _ in 0..*n {
                locals.push(Value::default_for(*t));
            }
        }
        if self.controls[def].is_none() {
            self.controls[def] = Some(control_map(&body.instrs));
        }
        let instrs = &body.instrs;
        let mut stack: Vec<Value> = Vec::with_capacity(16);
        let mut labels: Vec<Label> = Vec::new();
        let mut pc = 0usize;

        macro_rules! pop {
            () => {
                stack.pop().expect("operand stack underflow")
            };
        }
        macro_rules! end_of {
            ($i:expr) => {
                self.controls[def].as_ref().unwrap().end[&$i]
            };
        }

        loop {
            self.tick()?;
            let op = instrs[pc].op();
            let ctx = (func, pc, invocation);
            match op {
                Op::Unreachable => return Err(Trap::Unreachable.into()),
                Op::Nop => {}
                Op::Block(bt) => {
                    let (p, r) = self.block_arity(bt);
                    labels.push(Label {
                        height: stack.len() - p,
                        arity: r,
                        target: end_of!(pc) + 1,
                        is_loop: false,
                    });
                }
                Op::Loop(bt) => {
                    let (p, _) = self.block_arity(bt);
                    labels.push(Label {
                        height: stack.len() - p,
                        arity: p,
                        target: pc,
                        is_loop: true,
                    });
                }
                Op::If(bt) => {
                    let (p, r) = self.block_arity(bt);
                    let cond = pop!().as_i32();
                    let end = end_of!(pc);
                    labels.push(Label {
                        height: stack.len() - p,
                        arity: r,
                        target: end + 1,
                        is_loop: false,
                    });
                    if cond == 0 {
                        let else_ = self.controls[def].as_ref().unwrap().else_.get(&pc).copied();
                        match else_ {
                            Some(e) => pc = e,
                            None => {
                                labels.pop();
                                pc = end;
                            }
                        }
                    }
                }
                Op::Else => {
                    // reached the end of the `then` arm: leave the if block
                    let label = labels.pop().expect("else without label");
                    pc = label.target;
                    continue;
                }
                Op::End => {
                    if labels.is_empty() {
                        let start = stack.len() - result_arity;
                        return Ok(stack.split_off(start));
                    }
                    labels.pop();
                }
                Op::Br(l) => {
                    match self.branch(&mut stack, &mut labels, *l) {
                        Some(target) => {
                            pc = target;
                            continue;
                        }
                        None => {
                            let start = stack.len() - result_arity;
                            return Ok(stack.split_off(start));
                        }
                    }
                }
                Op::BrIf(l) => {
                    if pop!().as_i32() != 0 {
                        match self.branch(&mut stack, &mut labels, *l) {
                            Some(target) => {
                                pc = target;
                                continue;
                            }
                            None => {
                                let start = stack.len() - result_arity;
                                return Ok(stack.split_off(start));
                            }
                        }
                    }
                }
                Op::BrTable { targets, default } => {
                    let i = pop!().as_i32() as u32 as usize;
                    let l = targets.get(i).copied().unwrap_or(*default);
                    match self.branch(&mut stack, &mut labels, l) {
                        Some(target) => {
                            pc = target;
                            continue;
                        }
                        None => {
                            let start = stack.len() - result_arity;
                            return Ok(stack.split_off(start));
                        }
                    }
                }
                Op::Return => {
                    let start = stack.len() - result_arity;
                    return Ok(stack.split_off(start));
                }
                Op::Call(f) => {
                    let n = m.function_type(*f).map_or(0, |t| t.params.len());
                    let args = stack.split_off(stack.len() - n);
                    let results = self.call(*f, args)?;
                    stack.extend(results);
                }
                Op::CallIndirect { type_index, .. } => {
                    let idx = pop!().as_i32() as u32 as usize;
                    let target = self
                        .table
                        .get(idx)
                        .copied()
                        .flatten()
                        .ok_or(Trap::UndefinedElement)?;
                    let want = &m.types[*type_index as usize];
                    if m.function_type(target) != Some(want) {
                        return Err(Trap::IndirectCallTypeMismatch.into());
                    }
                    let args = stack.split_off(stack.len() - want.params.len());
                    let results = self.call(target, args)?;
                    stack.extend(results);
                }
                Op::Drop => {
                    pop!();
                }
                Op::Select => {
                    let c = pop!().as_i32();
                    let b = pop!();
                    let a = pop!();
                    stack.push(if c != 0 { a } else { b });
                }
                Op::LocalGet(i) => stack.push(locals[*i as usize]),
                Op::LocalSet(i) => locals[*i as usize] = pop!(),
                Op::LocalTee(i) => locals[*i as usize] = *stack.last().unwrap(),
                Op::GlobalGet(g) => {
                    let idx = g.checked_sub(self.imported_globals).ok_or_else(|| {
                        Trap::Unsupported("imported global".into())
                    })?;
                    stack.push(self.globals[idx as usize]);
                }
                Op::GlobalSet(g) => {
                    let v = pop!();
                    let idx = g.checked_sub(self.imported_globals).ok_or_else(|| {
                        Trap::Unsupported("imported global".into())
                    })?;
                    self.globals[idx as usize] = v;
                    if self.watch_global == Some(*g) {
                        self.events.push(TraceEvent::GlobalSet {
                            invocation,
                            function: func,
                            instr: pc,
                            value: v.as_i64(),
                        });
                    }
                }
                Op::Load(kind, ma) => {
                    let base = pop!().as_i32();
                    stack.push(self.load(*kind, ma, base, ctx)?);
                }
                Op::Store(kind, ma) => {
                    let v = pop!();
                    let base = pop!().as_i32();
                    self.store(*kind, ma, base, v, ctx)?;
                }
                Op::MemorySize => stack.push(Value::I32((self.memory.len() / PAGE) as i32)),
                Op::MemoryGrow => {
                    let delta = pop!().as_i32() as u32;
                    let old = (self.memory.len() / PAGE) as u32;
                    if u64::from(old) + u64::from(delta) > u64::from(self.max_pages) {
                        stack.push(Value::I32(-1));
                    } else {
                        self.memory.resize((old + delta) as usize * PAGE, 0);
                        stack.push(Value::I32(old as i32));
                    }
                }
                Op::I32Const(v) => stack.push(Value::I32(*v)),
                Op::I64Const(v) => stack.push(Value::I64(*v)),
                Op::F32Const(v) => stack.push(Value::F32(*v)),
                Op::F64Const(v) => stack.push(Value::F64(*v)),
                Op::Numeric(code) => {
                    let arity = super::instr::numeric_arity(*code);
                    let v = if arity == 1 {
                        let a = pop!();
                        numeric_unary(*code, a)?
                    } else {
                        let b = pop!();
                        let a = pop!();
                        numeric_binary(*code, a, b)?
                    };
                    stack.push(v);
                }
                Op::Other { opcode: 0xfc, sub: Some(sub), .. } => match sub {
                    0..=7 => {
                        let a = pop!();
                        stack.push(trunc_sat(*sub, a));
                    }
                    10 => {
                        let n = pop!().as_i32();
                        let src = pop!().as_i32();
                        let dst = pop!().as_i32();
                        let s = self.mem_range(src, n)?;
                        let d = self.mem_range(dst, n)?;
                        let bytes = self.memory[s].to_vec();
                        if !bytes.is_empty() {
                            self.write(d.start, &bytes, ctx);
                        }
                    }
                    11 => {
                        let n = pop!().as_i32();
                        let val = pop!().as_i32() as u8;
                        let dst = pop!().as_i32();
                        let d = self.mem_range(dst, n)?;
                        if !d.is_empty() {
                            let bytes = vec![val; d.len()];
                            self.write(d.start, &bytes, ctx);
                        }
                    }
                    _ => return Err(Trap::Unsupported(op.to_string()).into()),
                },
                Op::Other { .. } => return Err(Trap::Unsupported(op.to_string()).into()),
            }
            pc += 1;
        }
    }

    /// Performs a branch to relative label `l`; `None` means the function
    /// body itself was targeted (a return).
    fn branch(&self, stack: &mut Vec<Value>, labels: &mut Vec<Label>, l: u32) -> Option<usize> {
        let l = l as usize;
        if l >= labels.len() {
            return None;
        }
        let idx = labels.len() - 1 - l;
        let label = &labels[idx];
        let keep = stack.split_off(stack.len() - label.arity);
        stack.truncate(label.height);
        stack.extend(keep);
        let target = label.target;
        if label.is_loop {
            // the loop instruction re-pushes its label
            labels.truncate(idx);
        } else {
            labels.truncate(idx);
        }
        Some(target)
    }
}

fn bool_i32(b: bool) -> Value {
    Value::I32(i32::from(b))
}

fn wasm_nearest_f32(x: f32) -> f32 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 {
        2.0 * (x / 2.0).round()
    } else {
        r
    }
}

fn wasm_nearest_f64(x: f64) -> f64 {
    let r = x.round();
    if (x - x.trunc()).abs() == 0.5 {
        2.0 * (x / 2.0).round()
    } else {
        r
    }
}

fn fmin32(a: f32, b: f32) -> f32 {
    if a.is_nan() || b.is_nan() {
        f32::NAN
    } else if a == b {
        if a.is_sign_negative() { a } else { b }
    } else {
        a.min(b)
    }
}

fn fmax32(a: f32, b: f32) -> f32 {
    if a.is_nan() || b.is_nan() {
        f32::NAN
    } else if a == b {
        if a.is_sign_positive() { a } else { b }
    } else {
        a.max(b)
    }
}

fn fmin64(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else if a == b {
        if a.is_sign_negative() { a } else { b }
    } else {
        a.min(b)
    }
}

fn fmax64(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else if a == b {
        if a.is_sign_positive() { a } else { b }
    } else {
        a.max(b)
    }
}

/// Checked float-to-int truncation: `lo < x < hi` must hold after truncation.
fn trunc_checked(x: f64, lo: f64, hi: f64) -> Result<f64, Trap> {
    if x.is_nan() {
        return Err(Trap::InvalidConversion);
    }
    let t = x.trunc();
    if t <= lo || t >= hi {
        return Err(Trap::IntegerOverflow);
    }
    Ok(t)
}

fn trunc_sat(sub: u32, a: Value) -> Value {
    match sub {
        0 => Value::I32(a.f32() as i32),
        1 => Value::I32((a.f32() as u32) as i32),
        2 => Value::I32(a.f64() as i32),
        3 => Value::I32((a.f64() as u32) as i32),
        4 => Value::I64(a.f32() as i64),
        5 => Value::I64((a.f32() as u64) as i64),
        6 => Value::I64(a.f64() as i64),
        _ => Value::I64((a.f64() as u64) as i64),
    }
}

fn numeric_unary(code: u8, a: Value) -> Result<Value, Trap> {
    let i = a.as_i32();
    let l = a.as_i64();
    Ok(match code {
        0x45 => bool_i32(i == 0),
        0x50 => bool_i32(l == 0),
        0x67 => Value::I32(i.leading_zeros() as i32),
        0x68 => Value::I32(i.trailing_zeros() as i32),
        0x69 => Value::I32(i.count_ones() as i32),
        0x79 => Value::I64(i64::from(l.leading_zeros())),
        0x7a => Value::I64(i64::from(l.trailing_zeros())),
        0x7b => Value::I64(i64::from(l.count_ones())),
        0x8b => Value::F32(a.f32().abs().to_bits()),
        0x8c => Value::F32((-a.f32()).to_bits()),
        0x8d => Value::F32(a.f32().ceil().to_bits()),
        0x8e => Value::F32(a.f32().floor().to_bits()),
        0x8f => Value::F32(a.f32().trunc().to_bits()),
        0x90 => Value::F32(wasm_nearest_f32(a.f32()).to_bits()),
        0x91 => Value::F32(a.f32().sqrt().to_bits()),
        0x99 => Value::F64(a.f64().abs().to_bits()),
        0x9a => Value::F64((-a.f64()).to_bits()),
        0x9b => Value::F64(a.f64().ceil().to_bits()),
        0x9c => Value::F64(a.f64().floor().to_bits()),
        0x9d => Value::F64(a.f64().trunc().to_bits()),
        0x9e => Value::F64(wasm_nearest_f64(a.f64()).to_bits()),
        0x9f => Value::F64(a.f64().sqrt().to_bits()),
        0xa7 => Value::I32(l as i32),
        0xa8 => Value::I32(trunc_checked(f64::from(a.f32()), -2147483649.0, 2147483648.0)? as i32),
        0xa9 => Value::I32(trunc_checked(f64::from(a.f32()), -1.0, 4294967296.0)? as u32 as i32),
        0xaa => Value::I32(trunc_checked(a.f64(), -2147483649.0, 2147483648.0)? as i32),
        0xab => Value::I32(trunc_checked(a.f64(), -1.0, 4294967296.0)? as u32 as i32),
        0xac => Value::I64(i64::from(i)),
        0xad => Value::I64(i64::from(i as u32)),
        0xae => Value::I64(trunc_checked(f64::from(a.f32()), -9223373136366403584.0, 9223372036854775808.0)? as i64),
        0xaf => Value::I64(trunc_checked(f64::from(a.f32()), -1.0, 18446744073709551616.0)? as u64 as i64),
        0xb0 => Value::I64(trunc_checked(a.f64(), -9223372036854777856.0, 9223372036854775808.0)? as i64),
        0xb1 => Value::I64(trunc_checked(a.f64(), -1.0, 18446744073709551616.0)? as u64 as i64),
        0xb2 => Value::F32((i as f32).to_bits()),
        0xb3 => Value::F32((i as u32 as f32).to_bits()),
        0xb4 => Value::F32((l as f32).to_bits()),
        0xb5 => Value::F32((l as u64 as f32).to_bits()),
        0xb6 => Value::F32((a.f64() as f32).to_bits()),
        0xb7 => Value::F64(f64::from(i).to_bits()),
        0xb8 => Value::F64(f64::from(i as u32).to_bits()),
        0xb9 => Value::F64((l as f64).to_bits()),
        0xba => Value::F64((l as u64 as f64).to_bits()),
        0xbb => Value::F64(f64::from(a.f32()).to_bits()),
        0xbc => Value::I32(a.f32().to_bits() as i32),
        0xbd => Value::I64(a.f64().to_bits() as i64),
        0xbe => Value::F32(i as u32),
        0xbf => Value::F64(l as u64),
        0xc0 => Value::I32(i32::from(i as i8)),
        0xc1 => Value::I32(i32::from(i as i16)),
        0xc2 => Value::I64(i64::from(l as i8)),
        0xc3 => Value::I64(i64::from(l as i16)),
        0xc4 => Value::I64(i64::from(l as i32)),
        _ => return Err(Trap::Unsupported(super::instr::numeric_name(code).into())),
    })
}

fn numeric_binary(code: u8, a: Value, b: Value) -> Result<Value, Trap> {
    let (x, y) = (a.as_i32(), b.as_i32());
    let (lx, ly) = (a.as_i64(), b.as_i64());
    let (fx, fy) = (a.f32(), b.f32());
    let (dx, dy) = (a.f64(), b.f64());
    Ok(match code {
        0x46 => bool_i32(x == y),
        0x47 => bool_i32(x != y),
        0x48 => bool_i32(x < y),
        0x49 => bool_i32((x as u32) < (y as u32)),
        0x4a => bool_i32(x > y),
        0x4b => bool_i32((x as u32) > (y as u32)),
        0x4c => bool_i32(x <= y),
        0x4d => bool_i32((x as u32) <= (y as u32)),
        0x4e => bool_i32(x >= y),
        0x4f => bool_i32((x as u32) >= (y as u32)),
        0x51 => bool_i32(lx == ly),
        0x52 => bool_i32(lx != ly),
        0x53 => bool_i32(lx < ly),
        0x54 => bool_i32((lx as u64) < (ly as u64)),
        0x55 => bool_i32(lx > ly),
        0x56 => bool_i32((lx as u64) > (ly as u64)),
        0x57 => bool_i32(lx <= ly),
        0x58 => bool_i32((lx as u64) <= (ly as u64)),
        0x59 => bool_i32(lx >= ly),
        0x5a => bool_i32((lx as u64) >= (ly as u64)),
        0x5b => bool_i32(fx == fy),
        0x5c => bool_i32(fx != fy),
        0x5d => bool_i32(fx < fy),
        0x5e => bool_i32(fx > fy),
        0x5f => bool_i32(fx <= fy),
        0x60 => bool_i32(fx >= fy),
        0x61 => bool_i32(dx == dy),
        0x62 => bool_i32(dx != dy),
        0x63 => bool_i32(dx < dy),
        0x64 => bool_i32(dx > dy),
        0x65 => bool_i32(dx <= dy),
        0x66 => bool_i32(dx >= dy),
        0x6a => Value::I32(x.wrapping_add(y)),
        0x6b => Value::I32(x.wrapping_sub(y)),
        0x6c => Value::I32(x.wrapping_mul(y)),
        0x6d => {
            if y == 0 {
                return Err(Trap::DivideByZero);
            }
            if x == i32::MIN && y == -1 {
                return Err(Trap::IntegerOverflow);
            }
            Value::I32(x / y)
        }
        0x6e => {
            if y == 0 {
                return Err(Trap::DivideByZero);
            }
            Value::I32(((x as u32) / (y as u32)) as i32)
        }
        0x6f => {
            if y == 0 {
                return Err(Trap::DivideByZero);
            }
            Value::I32(x.wrapping_rem(y))
        }
        0x70 => {
            if y == 0 {
                return Err(Trap::DivideByZero);
            }
            Value::I32(((x as u32) % (y as u32)) as i32)
        }
        0x71 => Value::I32(x & y),
        0x72 => Value::I32(x | y),
        0x73 => Value::I32(x ^ y),
        0x74 => Value::I32(x.wrapping_shl(y as u32)),
        0x75 => Value::I32(x.wrapping_shr(y as u32)),
        0x76 => Value::I32((x as u32).wrapping_shr(y as u32) as i32),
        0x77 => Value::I32(x.rotate_left(y as u32 % 32)),
        0x78 => Value::I32(x.rotate_right(y as u32 % 32)),
        0x7c => Value::I64(lx.wrapping_add(ly)),
        0x7d => Value::I64(lx.wrapping_sub(ly)),
        0x7e => Value::I64(lx.wrapping_mul(ly)),
        0x7f => {
            if ly == 0 {
                return Err(Trap::DivideByZero);
            }
            if lx == i64::MIN && ly == -1 {
                return Err(Trap::IntegerOverflow);
            }
            Value::I64(lx / ly)
        }
        0x80 => {
            if ly == 0 {
                return Err(Trap::DivideByZero);
            }
            Value::I64(((lx as u64) / (ly as u64)) as i64)
        }
        0x81 => {
            if ly == 0 {
                return Err(Trap::DivideByZero);
            }
            Value::I64(lx.wrapping_rem(ly))
        }
        0x82 => {
            if ly == 0 {
                return Err(Trap::DivideByZero);
            }
            Value::I64(((lx as u64) % (ly as u64)) as i64)
        }
        0x83 => Value::I64(lx & ly),
        0x84 => Value::I64(lx | ly),
        0x85 => Value::I64(lx ^ ly),
        0x86 => Value::I64(lx.wrapping_shl(ly as u32)),
        0x87 => Value::I64(lx.wrapping_shr(ly as u32)),
        0x88 => Value::I64((lx as u64).wrapping_shr(ly as u32) as i64),
        0x89 => Value::I64(lx.rotate_left((ly as u64 % 64) as u32)),
        0x8a => Value::I64(lx.rotate_right((ly as u64 % 64) as u32)),
        0x92 => Value::F32((fx + fy).to_bits()),
        0x93 => Value::F32((fx - fy).to_bits()),
        0x94 => Value::F32((fx * fy).to_bits()),
        0x95 => Value::F32((fx / fy).to_bits()),
        0x96 => Value::F32(fmin32(fx, fy).to_bits()),
        0x97 => Value::F32(fmax32(fx, fy).to_bits()),
        0x98 => Value::F32(fx.copysign(fy).to_bits()),
        0xa0 => Value::F64((dx + dy).to_bits()),
        0xa1 => Value::F64((dx - dy).to_bits()),
        0xa2 => Value::F64((dx * dy).to_bits()),
        0xa3 => Value::F64((dx / dy).to_bits()),
        0xa4 => Value::F64(fmin64(dx, dy).to_bits()),
        0xa5 => Value::F64(fmax64(dx, dy).to_bits()),
        0xa6 => Value::F64(dx.copysign(dy).to_bits()),
        _ => return Err(Trap::Unsupported(super::instr::numeric_name(code).into())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(src: &str) -> WasmModule {
        WasmModule::decode(&wat::parse_str(src).unwrap()).unwrap()
    }

    fn run(src: &str, config: &InterpConfig) -> ExecutionTrace {
        interpret(&module(src), "run", config).unwrap()
    }

    #[test]
    fn arithmetic_and_calls() {
        let t = run(
            r#"(module
                 (func $sq (param i32) (result i32) local.get 0 local.get 0 i32.mul)
                 (func (export "run") (result i32 i64)
                   i32.const 7 call $sq
                   i64.const -1 i64.const 3 i64.shr_u))"#,
            &InterpConfig::default(),
        );
        assert_eq!(
            t.status,
            Status::Completed {
                results: vec![Value::I32(49), Value::I64((u64::MAX >> 3) as i64)]
            }
        );
    }

    #[test]
    fn loops_and_branches() {
        let t = run(
            r#"(module (func (export "run") (result i32) (local i32 i32)
                 block loop
                   local.get 0 i32.const 10 i32.ge_s br_if 1
                   local.get 1 local.get 0 i32.add local.set 1
                   local.get 0 i32.const 1 i32.add local.set 0
                   br 0
                 end end
                 local.get 1))"#,
            &InterpConfig::default(),
        );
        assert_eq!(t.status, Status::Completed { results: vec![Value::I32(45)] });
    }

    #[test]
    fn stores_are_recorded() {
        let t = run(
            r#"(module (memory 1)
                 (func (export "run")
                   i32.const 100 i32.const 0x01020304 i32.store offset=4
                   i32.const 0 i64.const 9 i64.store8 offset=3))"#,
            &InterpConfig::default(),
        );
        assert_eq!(t.stores.len(), 2);
        assert_eq!((t.stores[0].address, t.stores[0].width), (104, 4));
        assert_eq!((t.stores[1].address, t.stores[1].width), (3, 1));
        assert_eq!(&t.memory[104..108], &[4, 3, 2, 1]);
        assert_eq!(t.memory[3], 9);
        assert!(t.initial_memory.iter().all(|b| *b == 0));
    }

    #[test]
    fn loads_traced_on_request() {
        let src = r#"(module (memory 1)
                 (func (export "run") (result i32) i32.const 8 i32.load16_u offset=2))"#;
        let quiet = run(src, &InterpConfig::default());
        assert!(!quiet.events.iter().any(|e| matches!(e, TraceEvent::Load(_))));
        let cfg = InterpConfig {
            trace_loads: true,
            ..InterpConfig::default()
        };
        let loud = run(src, &cfg);
        let loads: Vec<_> = loud
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Load(a) => Some((a.address, a.width)),
                _ => None,
            })
            .collect();
        assert_eq!(loads, vec![(10, 2)]);
    }

    #[test]
    fn out_of_bounds_traps() {
        let t = run(
            r#"(module (memory 1)
                 (func (export "run") i32.const 65534 i32.const 0 i32.store))"#,
            &InterpConfig::default(),
        );
        assert_eq!(t.status, Status::Trapped { reason: Trap::MemoryOutOfBounds });
        assert!(t.stores.is_empty());
    }

    #[test]
    fn traps_are_classified() {
        let cases = [
            ("unreachable", Trap::Unreachable),
            ("i32.const 1 i32.const 0 i32.div_s drop", Trap::DivideByZero),
            ("i32.const 0x80000000 i32.const -1 i32.div_s drop", Trap::IntegerOverflow),
        ];
        for (body, want) in cases {
            let t = run(
                &format!(r#"(module (func (export "run") {body}))"#),
                &InterpConfig::default(),
            );
            assert_eq!(t.status, Status::Trapped { reason: want }, "{body}");
        }
    }

    #[test]
    fn wasi_output_and_exit() {
        let t = run(
            r#"(module
                 (import "wasi_snapshot_preview1" "fd_write"
                   (func $w (param i32 i32 i32 i32) (result i32)))
                 (import "wasi_snapshot_preview1" "proc_exit" (func $x (param i32)))
                 (memory (export "memory") 1)
                 (data (i32.const 16) "hi\n")
                 (func (export "run")
                   i32.const 0 i32.const 16 i32.store
                   i32.const 4 i32.const 3 i32.store
                   i32.const 1 i32.const 0 i32.const 1 i32.const 8 call $w drop
                   i32.const 2 i32.const 0 i32.const 1 i32.const 8 call $w drop
                   i32.const 3 call $x
                   unreachable))"#,
            &InterpConfig::default(),
        );
        assert_eq!(t.status, Status::Exited { code: 3 });
        assert_eq!(t.stdout, b"hi\n");
        assert_eq!(t.stderr, b"hi\n");
        assert_eq!(u32::from_le_bytes(t.memory[8..12].try_into().unwrap()), 3);
    }

    #[test]
    fn fuel_bounds_execution() {
        let src = r#"(module (func (export "run") loop br 0 end))"#;
        let cfg = InterpConfig {
            fuel: 1000,
            ..InterpConfig::default()
        };
        let t = run(src, &cfg);
        assert_eq!(t.status, Status::FuelExhausted);
        assert_eq!(t.fuel_used, 1000);
        let zero = InterpConfig {
            fuel: 0,
            ..InterpConfig::default()
        };
        assert_eq!(interpret(&module(src), "run", &zero), Err(InterpError::ZeroFuel));
    }

    #[test]
    fn entropy_follows_seed() {
        let src = r#"(module
             (import "wasi_snapshot_preview1" "random_get"
               (func $r (param i32 i32) (result i32)))
             (memory 1)
             (func (export "run") (result i64) i32.const 0 i32.const 8 call $r drop i32.const 0 i64.load))"#;
        let at = |seed| {
            run(
                src,
                &InterpConfig {
                    seed,
                    ..InterpConfig::default()
                },
            )
            .status
        };
        assert_eq!(at(1), at(1));
        assert_ne!(at(1), at(2));
    }

    #[test]
    fn watched_global_writes() {
        let t = run(
            r#"(module (global (mut i32) (i32.const 64))
                 (func (export "run") global.get 0 i32.const 16 i32.sub global.set 0))"#,
            &InterpConfig {
                watch_global: Some(0),
                ..InterpConfig::default()
            },
        );
        let sets: Vec<_> = t
            .events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::GlobalSet { value, instr, .. } => Some((*instr, *value)),
                _ => None,
            })
            .collect();
        assert_eq!(sets, vec![(3, 48)]);
    }

    #[test]
    fn rejects_unknown_imports_and_exports() {
        let m = module(r#"(module (import "env" "mystery" (func)) (func (export "run")))"#);
        assert!(matches!(
            interpret(&m, "run", &InterpConfig::default()),
            Err(InterpError::UnstubbedImport { .. })
        ));
        let m = module(r#"(module (func (export "run")))"#);
        assert_eq!(
            interpret(&m, "main", &InterpConfig::default()),
            Err(InterpError::MissingExport("main".into()))
        );
    }
}
