//! Shadow-stack frame detection and static out-of-frame store detection.
//!
//! Both run the same forward abstract interpretation over a function body.
//! Values are tracked symbolically as constants or as offsets from the
//! stack pointer's value on function entry; anything else is unknown.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::wasm::{BlockType, FunctionBody, Op, ValType, WasmModule};

/// Library calls that return their destination argument.
const DEST_RETURNING: [&str; 14] = [
    "memset", "memcpy", "memmove", "strcpy", "strncpy", "strcat", "strncat", "wmemset",
    "wmemcpy", "wmemmove", "wcscpy", "wcsncpy", "wcscat", "wcsncat",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestoreStyle {
    AddFromBaseLocal,
    AddFromCurrentGlobal,
    SavedOldSpLocal,
}

/// Inclusive instruction index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

/// An `i32.const` folded into a stack-pointer adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstSite {
    pub instr: usize,
    /// Whether the constant is the right operand of `i32.sub`.
    pub subtracted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Epilogue {
    /// Ends at the `global.set` that restores the stack pointer.
    pub span: Span,
    pub style: RestoreStyle,
    pub constant: Option<ConstSite>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameInfo {
    pub function: u32,
    pub sp_global: u32,
    pub frame_size: u32,
    pub base_local: Option<u32>,
    /// Ends at the `global.set` that allocates the frame.
    pub prologue: Span,
    pub prologue_constant: ConstSite,
    pub epilogues: Vec<Epilogue>,
    pub restore_style: Option<RestoreStyle>,
    /// `return`s (and branches out of the body) taken with the frame still
    /// allocated.
    pub live_returns: Vec<usize>,
    /// Set when the frame was found but its shape cannot be rewritten safely.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape_issue: Option<String>,
}

impl FrameInfo {
    /// Instruction indices before which a guard check belongs: every
    /// stack-pointer restore and every live return.
    pub fn check_sites(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.epilogues.iter().map(|e| e.span.end).collect();
        v.extend(&self.live_returns);
        v.sort_unstable();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    NoFrame,
    UnrecognizedPrologue,
    DynamicFrameSize,
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SkipReason::NoFrame => "no-frame",
            SkipReason::UnrecognizedPrologue => "unrecognized-prologue",
            SkipReason::DynamicFrameSize => "dynamic-frame-size",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub function: u32,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameScan {
    pub frames: Vec<FrameInfo>,
    pub skipped: Vec<Skipped>,
}

impl FrameScan {
    pub fn frame(&self, function: u32) -> Option<&FrameInfo> {
        self.frames.iter().find(|f| f.function == function)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    EscapesFrame,
    TouchesFrameTopWord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscapeFinding {
    pub function: u32,
    pub instr: usize,
    pub width: u32,
    /// Offset of the first byte written, relative to the frame base.
    pub effective_offset: i64,
    pub frame_size: u32,
    pub severity: Severity,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscapeScan {
    pub findings: Vec<EscapeFinding>,
    /// Stores per function whose address could not be derived.
    pub unresolved: BTreeMap<u32, usize>,
}

impl EscapeScan {
    pub fn escapes(&self) -> impl Iterator<Item = &EscapeFinding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::EscapesFrame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("globals {candidates:?} each match {count} prologues; stack pointer is ambiguous")]
    AmbiguousStackPointer { candidates: Vec<u32>, count: usize },
}

/// Frames and escape findings for a whole module.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleAnalysis {
    pub sp_global: Option<u32>,
    #[serde(flatten)]
    pub frames: FrameScan,
    pub escapes: EscapeScan,
}

pub fn analyze_module(m: &WasmModule) -> Result<ModuleAnalysis, FrameError> {
    let Some(sp) = detect_sp_global(m)? else {
        let skipped = (0..m.functions.len() as u32)
            .map(|i| Skipped {
                function: m.imported_function_count() + i,
                reason: SkipReason::NoFrame,
                detail: "no stack-pointer global".into(),
            })
            .collect();
        return Ok(ModuleAnalysis {
            sp_global: None,
            frames: FrameScan {
                frames: Vec::new(),
                skipped,
            },
            escapes: EscapeScan::default(),
        });
    };
    let frames = detect_frames(m, sp);
    let escapes = find_escaping_stores(m, &frames.frames);
    Ok(ModuleAnalysis {
        sp_global: Some(sp),
        frames,
        escapes,
    })
}

/// The mutable i32 global used as stack pointer by the most functions.
pub fn detect_sp_global(m: &WasmModule) -> Result<Option<u32>, FrameError> {
    let mut set_in_code = HashSet::new();
    for f in &m.functions {
        for i in &f.instrs {
            if let Op::GlobalSet(g) = i.op() {
                set_in_code.insert(*g);
            }
        }
    }
    let names = m.function_names();
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for g in 0..m.global_count() {
        let Some(ty) = m.global_type(g) else { continue };
        if !ty.mutable || ty.val != ValType::I32 || !set_in_code.contains(&g) {
            continue;
        }
        let n = (0..m.functions.len())
            .filter(|&i| {
                let index = m.imported_function_count() + i as u32;
                frame_for(m, &names, index, &m.functions[i], g).is_ok()
            })
            .count();
        counts.push((g, n));
    }
    let best = counts.iter().map(|(_, n)| *n).max().unwrap_or(0);
    if best == 0 {
        return Ok(None);
    }
    let top: Vec<u32> = counts
        .iter()
        .filter(|(_, n)| *n == best)
        .map(|(g, _)| *g)
        .collect();
    if top.len() > 1 {
        return Err(FrameError::AmbiguousStackPointer {
            candidates: top,
            count: best,
        });
    }
    Ok(Some(top[0]))
}

pub fn detect_frames(m: &WasmModule, sp: u32) -> FrameScan {
    let names = m.function_names();
    let mut scan = FrameScan::default();
    for (i, body) in m.functions.iter().enumerate() {
        let index = m.imported_function_count() + i as u32;
        match frame_for(m, &names, index, body, sp) {
            Ok(f) => scan.frames.push(f),
            Err(s) => scan.skipped.push(s),
        }
    }
    scan
}

pub fn find_escaping_stores(m: &WasmModule, frames: &[FrameInfo]) -> EscapeScan {
    let names = m.function_names();
    let mut scan = EscapeScan::default();
    for frame in frames {
        let Some(body) = m.body(frame.function) else { continue };
        let Ok(a) = analyze(m, &names, body, frame.sp_global) else { continue };
        let n = i64::from(frame.frame_size);
        let mut unresolved = 0;
        for s in &a.stores {
            match s.addr {
                AVal::Sp { delta, .. } => {
                    let eff = n + delta + i64::from(s.offset);
                    let end = eff + i64::from(s.width);
                    let severity = if end > n {
                        Severity::EscapesFrame
                    } else if eff < n && end > n - 8 {
                        Severity::TouchesFrameTopWord
                    } else {
                        continue;
                    };
                    scan.findings.push(EscapeFinding {
                        function: frame.function,
                        instr: s.instr,
                        width: s.width,
                        effective_offset: eff,
                        frame_size: frame.frame_size,
                        severity,
                    });
                }
                AVal::Unknown | AVal::SpDyn => unresolved += 1,
                AVal::Const { .. } => {}
            }
        }
        if unresolved > 0 {
            scan.unresolved.insert(frame.function, unresolved);
        }
    }
    scan
}

fn skip(function: u32, reason: SkipReason, detail: impl Into<String>) -> Skipped {
    Skipped {
        function,
        reason,
        detail: detail.into(),
    }
}

fn is_pure(op: &Op) -> bool {
    matches!(
        op,
        Op::GlobalGet(_)
            | Op::I32Const(_)
            | Op::LocalGet(_)
            | Op::LocalSet(_)
            | Op::LocalTee(_)
            | Op::Numeric(0x6a | 0x6b)
    )
}

fn frame_for(
    m: &WasmModule,
    names: &HashMap<u32, String>,
    function: u32,
    body: &FunctionBody,
    sp: u32,
) -> Result<FrameInfo, Skipped> {
    let a = analyze(m, names, body, sp)
        .map_err(|e| skip(function, SkipReason::UnrecognizedPrologue, e))?;
    let Some(first) = a.sp_sets.first() else {
        return Err(skip(function, SkipReason::NoFrame, "stack pointer never written"));
    };
    let instrs = &body.instrs;
    if let Some(p) = instrs[..first.instr].iter().position(|i| !is_pure(i.op())) {
        return Err(skip(
            function,
            SkipReason::UnrecognizedPrologue,
            format!("instruction {p} precedes the first stack-pointer write"),
        ));
    }
    let single_use = |c: &ConstSite| {
        matches!(instrs[c.instr].op(), Op::I32Const(_)) && a.uses.get(&c.instr) == Some(&1)
    };
    let (n, konst, start) = match first.value {
        AVal::Sp {
            delta,
            konst: Some(k),
            start,
            ..
        } if delta < 0 && -delta <= i64::from(u32::MAX) => {
            if !single_use(&k) {
                return Err(skip(
                    function,
                    SkipReason::UnrecognizedPrologue,
                    "frame-size constant has other uses",
                ));
            }
            ((-delta) as u32, k, start)
        }
        AVal::SpDyn => {
            return Err(skip(
                function,
                SkipReason::DynamicFrameSize,
                "frame size is not a constant",
            ))
        }
        _ => {
            return Err(skip(
                function,
                SkipReason::UnrecognizedPrologue,
                format!("stack pointer write at {} is not a decrement", first.instr),
            ))
        }
    };
    let base_local = first
        .sp_locals
        .iter()
        .filter(|(_, d)| *d == -i64::from(n))
        .map(|(l, _)| *l)
        .min();

    let mut issue: Option<String> = None;
    let mut note = |s: String| {
        issue.get_or_insert(s);
    };
    let mut epilogues = Vec::new();
    for s in &a.sp_sets[1..] {
        match s.value {
            AVal::Sp {
                delta: 0,
                konst,
                start,
                base_via,
                ..
            } => {
                let style = match (konst, base_via) {
                    (None, _) => RestoreStyle::SavedOldSpLocal,
                    (Some(_), Via::Global) => RestoreStyle::AddFromCurrentGlobal,
                    (Some(_), Via::Local(_)) => RestoreStyle::AddFromBaseLocal,
                    (Some(_), Via::Call) => {
                        note(format!("restore at {} derives from a call result", s.instr));
                        RestoreStyle::AddFromBaseLocal
                    }
                };
                if let Some(k) = &konst {
                    if !single_use(k) {
                        note(format!("restore constant at {} has other uses", k.instr));
                    }
                }
                if !matches!(s.sp_before, AVal::Sp { delta, .. } if delta == -i64::from(n)) {
                    note(format!("frame state unknown at restore {}", s.instr));
                }
                let run = pure_run_start(instrs, s.instr);
                epilogues.push(Epilogue {
                    span: Span {
                        start: run.max(start.min(s.instr)),
                        end: s.instr,
                    },
                    style,
                    constant: konst,
                });
            }
            AVal::SpDyn => note(format!("variable stack adjustment at {}", s.instr)),
            _ => note(format!("additional stack-pointer adjustment at {}", s.instr)),
        }
    }
    let mut live_returns = Vec::new();
    for (at, state) in &a.returns {
        match state {
            AVal::Sp { delta: 0, .. } => {}
            AVal::Sp { delta, .. } if *delta == -i64::from(n) => live_returns.push(*at),
            _ => note(format!("frame state unknown at return {at}")),
        }
    }
    let restore_style = epilogues.first().map(|e| e.style);
    Ok(FrameInfo {
        function,
        sp_global: sp,
        frame_size: n,
        base_local,
        prologue: Span {
            start: start.min(first.instr),
            end: first.instr,
        },
        prologue_constant: konst,
        epilogues,
        restore_style,
        live_returns,
        shape_issue: issue,
    })
}

fn pure_run_start(instrs: &[crate::wasm::Instr], end: usize) -> usize {
    let mut s = end;
    while s > 0 && is_pure(instrs[s - 1].op()) {
        s -= 1;
    }
    s
}

// ---------------------------------------------------------------------------
// abstract interpretation

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Via {
    Global,
    Local(u32),
    Call,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AVal {
    Unknown,
    /// i32 constant produced by instruction `origin`.
    Const { value: i64, origin: usize },
    /// Entry stack pointer plus `delta`.
    Sp {
        delta: i64,
        /// Earliest instruction contributing to the value.
        start: usize,
        /// Last constant folded in.
        konst: Option<ConstSite>,
        /// Where the value was last read from.
        via: Via,
        /// Where the stack-pointer operand of the last fold was read from.
        base_via: Via,
    },
    /// Stack-pointer derived with a non-constant offset.
    SpDyn,
}

impl AVal {
    fn sp_delta(&self) -> Option<i64> {
        match self {
            AVal::Sp { delta, .. } => Some(*delta),
            _ => None,
        }
    }
}

#[derive(Debug)]
struct SpSet {
    instr: usize,
    value: AVal,
    sp_before: AVal,
    sp_locals: Vec<(u32, i64)>,
}

#[derive(Debug)]
struct StoreRec {
    instr: usize,
    addr: AVal,
    width: u32,
    offset: u32,
}

#[derive(Debug, Default)]
struct Analysis {
    sp_sets: Vec<SpSet>,
    stores: Vec<StoreRec>,
    returns: Vec<(usize, AVal)>,
    /// Consumers per `i32.const` instruction.
    uses: HashMap<usize, u32>,
}

#[derive(Clone)]
struct Snapshot {
    locals: Vec<AVal>,
    sp: AVal,
    values: Vec<AVal>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Body,
    Block,
    Loop,
    If,
}

struct Ctl {
    kind: Kind,
    height: usize,
    params: usize,
    results: usize,
    entry: Option<Snapshot>,
    exits: Vec<Snapshot>,
    saw_else: bool,
}

struct Engine<'a> {
    m: &'a WasmModule,
    names: &'a HashMap<u32, String>,
    sp_global: u32,
    locals: Vec<AVal>,
    stack: Vec<AVal>,
    sp: AVal,
    live: bool,
    ctls: Vec<Ctl>,
    out: Analysis,
}

fn block_arity(m: &WasmModule, bt: &BlockType) -> (usize, usize) {
    match bt {
        BlockType::Empty => (0, 0),
        BlockType::Value(_) => (0, 1),
        BlockType::Func(t) => m
            .types
            .get(*t as usize)
            .map_or((0, 0), |t| (t.params.len(), t.results.len())),
    }
}

/// (pops, pushes) for passthrough instructions.
fn other_effect(opcode: u8, sub: Option<u32>) -> Option<(usize, usize)> {
    Some(match (opcode, sub) {
        (0x1c, _) => (3, 1),
        (0x25, _) => (1, 1),
        (0x26, _) => (2, 0),
        (0xd0, _) | (0xd2, _) => (0, 1),
        (0xd1, _) => (1, 1),
        (0xfc, Some(0..=7)) => (1, 1),
        (0xfc, Some(8 | 10 | 11 | 12 | 14 | 17)) => (3, 0),
        (0xfc, Some(9 | 13)) => (0, 0),
        (0xfc, Some(15)) => (2, 1),
        (0xfc, Some(16)) => (0, 1),
        _ => return None,
    })
}

/// Locals written and whether the stack pointer is written inside each
/// loop, keyed by the loop instruction.
fn loop_writes(instrs: &[crate::wasm::Instr], sp: u32) -> HashMap<usize, (HashSet<u32>, bool)> {
    let mut out: HashMap<usize, (HashSet<u32>, bool)> = HashMap::new();
    let mut open: Vec<(usize, bool)> = Vec::new();
    for (i, ins) in instrs.iter().enumerate() {
        match ins.op() {
            Op::Loop(_) => {
                out.insert(i, Default::default());
                open.push((i, true));
            }
            Op::Block(_) | Op::If(_) => open.push((i, false)),
            Op::End => {
                open.pop();
            }
            Op::LocalSet(l) | Op::LocalTee(l) => {
                for (s, is_loop) in &open {
                    if *is_loop {
                        out.get_mut(s).unwrap().0.insert(*l);
                    }
                }
            }
            Op::GlobalSet(g) if *g == sp => {
                for (s, is_loop) in &open {
                    if *is_loop {
                        out.get_mut(s).unwrap().1 = true;
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn analyze(
    m: &WasmModule,
    names: &HashMap<u32, String>,
    body: &FunctionBody,
    sp_global: u32,
) -> Result<Analysis, String> {
    let sig = m
        .types
        .get(body.type_index as usize)
        .ok_or("function type out of range")?;
    let nlocals = sig.params.len() as u64 + body.declared_local_count();
    if nlocals > 100_000 {
        return Err(format!("{nlocals} locals"));
    }
    let mut e = Engine {
        m,
        names,
        sp_global,
        locals: vec![AVal::Unknown; nlocals as usize],
        stack: Vec::new(),
        sp: AVal::Sp {
            delta: 0,
            start: 0,
            konst: None,
            via: Via::Global,
            base_via: Via::Global,
        },
        live: true,
        ctls: vec![Ctl {
            kind: Kind::Body,
            height: 0,
            params: 0,
            results: sig.results.len(),
            entry: None,
            exits: Vec::new(),
            saw_else: false,
        }],
        out: Analysis::default(),
    };
    let loops = loop_writes(&body.instrs, sp_global);
    for (idx, ins) in body.instrs.iter().enumerate() {
        e.step(idx, ins.op(), &loops)?;
        if e.ctls.is_empty() {
            break;
        }
    }
    Ok(e.out)
}

impl Engine<'_> {
    fn consume(&mut self, v: AVal) {
        if let AVal::Const { origin, .. } = v {
            *self.out.uses.entry(origin).or_insert(0) += 1;
        }
    }

    /// A constant that disappears into an unknown value may still have
    /// consumers the analysis did not see.
    fn lose(&mut self, v: AVal) {
        if let AVal::Const { origin, .. } = v {
            *self.out.uses.entry(origin).or_insert(0) += 2;
        }
    }

    fn pop(&mut self) -> AVal {
        let floor = self.ctls.last().map_or(0, |c| c.height);
        if self.stack.len() > floor {
            self.stack.pop().unwrap()
        } else {
            AVal::Unknown
        }
    }

    fn pop_consume(&mut self, n: usize) -> Vec<AVal> {
        let mut v: Vec<AVal> = (0..n).map(|_| self.pop()).collect();
        v.reverse();
        for x in &v {
            self.consume(*x);
        }
        v
    }

    fn top(&self, n: usize) -> Vec<AVal> {
        let floor = self.ctls.last().map_or(0, |c| c.height);
        let avail = self.stack.len().saturating_sub(floor);
        let mut v = vec![AVal::Unknown; n.saturating_sub(avail)];
        v.extend_from_slice(&self.stack[self.stack.len() - n.min(avail)..]);
        v
    }

    fn snapshot(&self, values: Vec<AVal>) -> Snapshot {
        Snapshot {
            locals: self.locals.clone(),
            sp: self.sp,
            values,
        }
    }

    fn merge_val(&mut self, a: AVal, b: AVal) -> AVal {
        if a == b {
            return a;
        }
        if let (
            AVal::Sp {
                delta: d1,
                start: s1,
                konst: k1,
                via: v1,
                base_via: b1,
            },
            AVal::Sp {
                delta: d2,
                start: s2,
                konst: k2,
                via: v2,
                base_via: b2,
            },
        ) = (a, b)
        {
            if d1 == d2 && k1 == k2 && v1 == v2 && b1 == b2 {
                return AVal::Sp {
                    delta: d1,
                    start: s1.min(s2),
                    konst: k1,
                    via: v1,
                    base_via: b1,
                };
            }
        }
        if matches!(a, AVal::SpDyn) || matches!(b, AVal::SpDyn) {
            return AVal::SpDyn;
        }
        self.lose(a);
        self.lose(b);
        AVal::Unknown
    }

    fn merge(&mut self, snaps: Vec<Snapshot>) -> Snapshot {
        let mut it = snaps.into_iter();
        let mut acc = it.next().expect("merge of no states");
        for s in it {
            for i in 0..acc.locals.len() {
                acc.locals[i] = self.merge_val(acc.locals[i], s.locals[i]);
            }
            acc.sp = self.merge_val(acc.sp, s.sp);
            for i in 0..acc.values.len() {
                acc.values[i] = self.merge_val(acc.values[i], s.values[i]);
            }
        }
        acc
    }

    fn branch(&mut self, idx: usize, depth: u32) {
        let Some(t) = self.ctls.len().checked_sub(1 + depth as usize) else {
            return;
        };
        match self.ctls[t].kind {
            Kind::Body => self.out.returns.push((idx, self.sp)),
            Kind::Loop => {}
            _ => {
                let values = self.top(self.ctls[t].results);
                let snap = self.snapshot(values);
                self.ctls[t].exits.push(snap);
            }
        }
    }

    fn push_ctl(&mut self, kind: Kind, params: usize, results: usize, entry: Option<Snapshot>) {
        let height = self.stack.len().saturating_sub(params);
        self.ctls.push(Ctl {
            kind,
            height,
            params,
            results,
            entry,
            exits: Vec::new(),
            saw_else: false,
        });
    }

    fn step(
        &mut self,
        idx: usize,
        op: &Op,
        loops: &HashMap<usize, (HashSet<u32>, bool)>,
    ) -> Result<(), String> {
        if !self.live {
            match op {
                Op::Block(_) | Op::Loop(_) | Op::If(_) => {
                    self.push_ctl(Kind::Block, 0, 0, None);
                    self.ctls.last_mut().unwrap().height = self.stack.len();
                }
                Op::Else => {
                    let c = self.ctls.last_mut().unwrap();
                    c.saw_else = true;
                    if let Some(entry) = c.entry.clone() {
                        let height = c.height;
                        self.stack.truncate(height);
                        self.stack.extend(entry.values);
                        self.locals = entry.locals;
                        self.sp = entry.sp;
                        self.live = true;
                    }
                }
                Op::End => self.end(idx),
                _ => {}
            }
            return Ok(());
        }
        match op {
            Op::Unreachable => self.live = false,
            Op::Nop => {}
            Op::Block(bt) => {
                let (p, r) = block_arity(self.m, bt);
                self.push_ctl(Kind::Block, p, r, None);
            }
            Op::Loop(bt) => {
                let (p, r) = block_arity(self.m, bt);
                if let Some((written, sp_written)) = loops.get(&idx) {
                    for l in written {
                        if let Some(v) = self.locals.get(*l as usize).copied() {
                            self.lose(v);
                            self.locals[*l as usize] = AVal::Unknown;
                        }
                    }
                    if *sp_written {
                        self.sp = AVal::Unknown;
                    }
                }
                // values flowing into a loop may be re-read on later iterations
                for v in self.top(p) {
                    self.lose(v);
                }
                let n = self.stack.len();
                for v in &mut self.stack[n.saturating_sub(p)..] {
                    *v = AVal::Unknown;
                }
                self.push_ctl(Kind::Loop, p, r, None);
            }
            Op::If(bt) => {
                let (p, r) = block_arity(self.m, bt);
                self.pop_consume(1);
                let values = self.top(p);
                let snap = self.snapshot(values);
                self.push_ctl(Kind::If, p, r, Some(snap));
            }
            Op::Else => {
                let results = self.ctls.last().unwrap().results;
                let values = self.top(results);
                let snap = self.snapshot(values);
                let c = self.ctls.last_mut().unwrap();
                c.exits.push(snap);
                c.saw_else = true;
                let entry = c.entry.clone().expect("else outside if");
                let height = c.height;
                self.stack.truncate(height);
                self.stack.extend(entry.values);
                self.locals = entry.locals;
                self.sp = entry.sp;
            }
            Op::End => self.end(idx),
            Op::Br(l) => {
                self.branch(idx, *l);
                self.live = false;
            }
            Op::BrIf(l) => {
                self.pop_consume(1);
                self.branch(idx, *l);
            }
            Op::BrTable { targets, default } => {
                self.pop_consume(1);
                let mut seen = HashSet::new();
                for t in targets.iter().chain(std::iter::once(default)) {
                    if seen.insert(*t) {
                        self.branch(idx, *t);
                    }
                }
                self.live = false;
            }
            Op::Return => {
                self.out.returns.push((idx, self.sp));
                self.live = false;
            }
            Op::Call(f) => {
                let ty = self.m.function_type(*f).ok_or("call target out of range")?;
                let (np, nr) = (ty.params.len(), ty.results.len());
                let args = self.pop_consume(np);
                let dest = self
                    .names
                    .get(f)
                    .is_some_and(|n| DEST_RETURNING.contains(&n.as_str()));
                for i in 0..nr {
                    let v = match (dest, i, args.first()) {
                        (true, 0, Some(AVal::Sp { delta, start, konst, base_via, .. })) => {
                            AVal::Sp {
                                delta: *delta,
                                start: *start,
                                konst: *konst,
                                via: Via::Call,
                                base_via: *base_via,
                            }
                        }
                        _ => AVal::Unknown,
                    };
                    self.stack.push(v);
                }
            }
            Op::CallIndirect { type_index, .. } => {
                let ty = self
                    .m
                    .types
                    .get(*type_index as usize)
                    .ok_or("call_indirect type out of range")?;
                let (np, nr) = (ty.params.len(), ty.results.len());
                self.pop_consume(np + 1);
                self.stack.extend(std::iter::repeat(AVal::Unknown).take(nr));
            }
            Op::Drop => {
                self.pop_consume(1);
            }
            Op::Select => {
                self.pop_consume(3);
                self.stack.push(AVal::Unknown);
            }
            Op::LocalGet(l) => {
                let v = self.locals.get(*l as usize).copied().ok_or("local out of range")?;
                let v = match v {
                    AVal::Sp {
                        delta,
                        start,
                        konst,
                        base_via,
                        ..
                    } => AVal::Sp {
                        delta,
                        start,
                        konst,
                        via: Via::Local(*l),
                        base_via,
                    },
                    other => other,
                };
                self.stack.push(v);
            }
            Op::LocalSet(l) => {
                let v = self.pop();
                *self.locals.get_mut(*l as usize).ok_or("local out of range")? = v;
            }
            Op::LocalTee(l) => {
                let v = self.top(1)[0];
                *self.locals.get_mut(*l as usize).ok_or("local out of range")? = v;
            }
            Op::GlobalGet(g) => {
                let v = if *g == self.sp_global {
                    match self.sp {
                        AVal::Sp { delta, .. } => AVal::Sp {
                            delta,
                            start: idx,
                            konst: None,
                            via: Via::Global,
                            base_via: Via::Global,
                        },
                        other => other,
                    }
                } else {
                    AVal::Unknown
                };
                self.stack.push(v);
            }
            Op::GlobalSet(g) => {
                let v = self.pop();
                self.consume(v);
                if *g == self.sp_global {
                    let sp_locals = self
                        .locals
                        .iter()
                        .enumerate()
                        .filter_map(|(i, v)| v.sp_delta().map(|d| (i as u32, d)))
                        .collect();
                    self.out.sp_sets.push(SpSet {
                        instr: idx,
                        value: v,
                        sp_before: self.sp,
                        sp_locals,
                    });
                    self.sp = v;
                }
            }
            Op::Load(..) => {
                self.pop_consume(1);
                self.stack.push(AVal::Unknown);
            }
            Op::Store(kind, ma) => {
                let v = self.pop_consume(2);
                self.out.stores.push(StoreRec {
                    instr: idx,
                    addr: v[0],
                    width: kind.width(),
                    offset: ma.offset,
                });
            }
            Op::MemorySize => self.stack.push(AVal::Unknown),
            Op::MemoryGrow => {
                self.pop_consume(1);
                self.stack.push(AVal::Unknown);
            }
            Op::I32Const(c) => self.stack.push(AVal::Const {
                value: i64::from(*c),
                origin: idx,
            }),
            Op::I64Const(_) | Op::F32Const(_) | Op::F64Const(_) => self.stack.push(AVal::Unknown),
            Op::Numeric(code) => {
                let n = crate::wasm::instr::numeric_arity(*code);
                let args = {
                    let mut v: Vec<AVal> = (0..n).map(|_| self.pop()).collect();
                    v.reverse();
                    v
                };
                let r = if n == 2 {
                    self.fold(idx, *code, args[0], args[1])
                } else {
                    self.consume(args[0]);
                    AVal::Unknown
                };
                self.stack.push(r);
            }
            Op::Other { opcode, sub, .. } => {
                let (pops, pushes) = other_effect(*opcode, *sub)
                    .ok_or_else(|| format!("instruction {op} at {idx} not modelled"))?;
                self.pop_consume(pops);
                self.stack
                    .extend(std::iter::repeat(AVal::Unknown).take(pushes));
            }
        }
        Ok(())
    }

    fn fold(&mut self, idx: usize, code: u8, a: AVal, b: AVal) -> AVal {
        let sp_plus = |s: AVal, c: i64, k: ConstSite| match s {
            AVal::Sp {
                delta, start, via, ..
            } => AVal::Sp {
                delta: delta + c,
                start: start.min(k.instr),
                konst: Some(k),
                via,
                base_via: via,
            },
            _ => unreachable!(),
        };
        let r = match (code, a, b) {
            (0x6a, AVal::Const { value: x, .. }, AVal::Const { value: y, .. }) => AVal::Const {
                value: i64::from((x as i32).wrapping_add(y as i32)),
                origin: idx,
            },
            (0x6b, AVal::Const { value: x, .. }, AVal::Const { value: y, .. }) => AVal::Const {
                value: i64::from((x as i32).wrapping_sub(y as i32)),
                origin: idx,
            },
            (0x6a, s @ AVal::Sp { .. }, AVal::Const { value, origin })
            | (0x6a, AVal::Const { value, origin }, s @ AVal::Sp { .. }) => sp_plus(
                s,
                value,
                ConstSite {
                    instr: origin,
                    subtracted: false,
                },
            ),
            (0x6b, s @ AVal::Sp { .. }, AVal::Const { value, origin }) => sp_plus(
                s,
                -value,
                ConstSite {
                    instr: origin,
                    subtracted: true,
                },
            ),
            (0x6a | 0x6b | 0x71, AVal::Sp { .. } | AVal::SpDyn, _) => AVal::SpDyn,
            (0x6a, _, AVal::Sp { .. } | AVal::SpDyn) => AVal::SpDyn,
            _ => AVal::Unknown,
        };
        self.consume(a);
        self.consume(b);
        r
    }

    fn end(&mut self, idx: usize) {
        let c = self.ctls.pop().expect("unbalanced end");
        if c.kind == Kind::Body {
            if self.live {
                self.out.returns.push((idx, self.sp));
            }
            return;
        }
        let mut exits = c.exits;
        if self.live {
            let values = self.top_at(c.height, c.results);
            exits.push(self.snapshot(values));
        }
        if c.kind == Kind::If && !c.saw_else {
            if let Some(mut entry) = c.entry {
                entry.values.resize(c.results, AVal::Unknown);
                exits.push(entry);
            }
        }
        self.stack.truncate(c.height);
        if exits.is_empty() {
            self.live = false;
            return;
        }
        let merged = self.merge(exits);
        self.locals = merged.locals;
        self.sp = merged.sp;
        self.stack.extend(merged.values);
        self.live = true;
        let _ = c.params;
    }

    fn top_at(&self, floor: usize, n: usize) -> Vec<AVal> {
        let avail = self.stack.len().saturating_sub(floor);
        let mut v = vec![AVal::Unknown; n.saturating_sub(avail)];
        v.extend_from_slice(&self.stack[self.stack.len() - n.min(avail)..]);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(wat_src: &str) -> WasmModule {
        WasmModule::decode(&wat::parse_str(wat_src).unwrap()).unwrap()
    }

    const LISTING_VA: &str = r#"
      (module
        (global $sp (mut i32) (i32.const 65536))
        (memory 2)
        (func $memset (param i32 i32 i32) (result i32) local.get 0)
        (func $main (param i32 i32) (result i32) (local i32)
          global.get 0
          i32.const 64
          i32.sub
          local.tee 2
          global.set 0
          local.get 2
          i32.const 67
          i32.const 99
          call $memset
          local.tee 2
          i32.const 0
          i32.store8 offset=99
          local.get 2
          i32.const 64
          i32.add
          global.set 0
          i32.const 0)
        (export "main" (func $main)))"#;

    #[test]
    fn listing_frame_and_escape() {
        let m = module(LISTING_VA);
        let a = analyze_module(&m).unwrap();
        assert_eq!(a.sp_global, Some(0));
        let f = a.frames.frame(1).unwrap();
        assert_eq!(f.frame_size, 64);
        assert_eq!(f.base_local, Some(2));
        assert_eq!(f.prologue, Span { start: 0, end: 4 });
        assert_eq!(f.epilogues.len(), 1);
        assert_eq!(f.epilogues[0].style, RestoreStyle::AddFromBaseLocal);
        assert_eq!(f.epilogues[0].span, Span { start: 12, end: 15 });
        assert!(f.shape_issue.is_none());
        let e: Vec<_> = a.escapes.escapes().collect();
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].effective_offset, e[0].width), (99, 1));
        assert_eq!(a.frames.skipped[0].reason, SkipReason::NoFrame);
    }

    #[test]
    fn frameless_module_has_no_sp() {
        let m = module(
            "(module (func (param i32 i32) (result i32) (local i32) local.get 0))",
        );
        assert_eq!(detect_sp_global(&m).unwrap(), None);
    }

    #[test]
    fn boundary_store_is_inside() {
        let m = module(
            r#"(module (global (mut i32) (i32.const 1024)) (memory 1)
              (func (local i32)
                global.get 0 i32.const 16 i32.sub local.tee 0 global.set 0
                local.get 0 i64.const 0 i64.store offset=8
                local.get 0 i32.const 16 i32.add global.set 0))"#,
        );
        let a = analyze_module(&m).unwrap();
        assert_eq!(a.escapes.escapes().count(), 0);
        // offset 8 of a 16-byte frame is the top word
        assert_eq!(a.escapes.findings[0].severity, Severity::TouchesFrameTopWord);
    }

    #[test]
    fn current_global_and_saved_restores() {
        let m = module(
            r#"(module (global (mut i32) (i32.const 1024)) (memory 1)
              (func
                global.get 0 i32.const 32 i32.sub global.set 0
                global.get 0 i32.const 32 i32.add global.set 0)
              (func (local i32 i32)
                global.get 0 local.tee 0 i32.const 48 i32.sub local.tee 1 global.set 0
                local.get 0 global.set 0))"#,
        );
        let a = analyze_module(&m).unwrap();
        let f0 = a.frames.frame(0).unwrap();
        assert_eq!(f0.restore_style, Some(RestoreStyle::AddFromCurrentGlobal));
        assert_eq!(f0.base_local, None);
        let f1 = a.frames.frame(1).unwrap();
        assert_eq!(f1.frame_size, 48);
        assert_eq!(f1.base_local, Some(1));
        assert_eq!(f1.restore_style, Some(RestoreStyle::SavedOldSpLocal));
        assert_eq!(f1.epilogues[0].constant, None);
    }

    #[test]
    fn dynamic_and_shared_constants() {
        let m = module(
            r#"(module (global (mut i32) (i32.const 1024)) (memory 1)
              (func (param i32)
                global.get 0 local.get 0 i32.sub global.set 0)
              (func (local i32)
                i32.const 16 local.set 0
                global.get 0 local.get 0 i32.sub global.set 0
                global.get 0 local.get 0 i32.add global.set 0))"#,
        );
        let s = detect_frames(&m, 0);
        assert_eq!(s.skipped[0].reason, SkipReason::DynamicFrameSize);
        assert_eq!(s.skipped[1].reason, SkipReason::UnrecognizedPrologue);
    }

    #[test]
    fn live_returns_and_dead_code() {
        let m = module(
            r#"(module (global (mut i32) (i32.const 1024)) (memory 1)
              (func (param i32) (local i32)
                global.get 0 i32.const 16 i32.sub local.tee 1 global.set 0
                block
                  local.get 0
                  br_if 0
                  local.get 1 i32.const 16 i32.add global.set 0
                  return
                end
                local.get 1 i32.const 16 i32.add global.set 0
                return
                unreachable))"#,
        );
        let f = detect_frames(&m, 0).frames.remove(0);
        assert_eq!(f.epilogues.len(), 2);
        assert!(f.live_returns.is_empty());
        assert!(f.shape_issue.is_none());
        assert_eq!(f.check_sites().len(), 2);
    }

    #[test]
    fn ambiguous_stack_pointer() {
        let m = module(
            r#"(module (global (mut i32) (i32.const 1024)) (global (mut i32) (i32.const 2048))
              (func global.get 0 i32.const 16 i32.sub global.set 0)
              (func global.get 1 i32.const 16 i32.sub global.set 1))"#,
        );
        match detect_sp_global(&m) {
            Err(FrameError::AmbiguousStackPointer { candidates, .. }) => {
                assert_eq!(candidates, vec![0, 1])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loop_carried_addresses_are_unresolved() {
        let m = module(
            r#"(module (global (mut i32) (i32.const 1024)) (memory 1)
              (func (local i32 i32)
                global.get 0 i32.const 16 i32.sub local.tee 0 global.set 0
                loop
                  local.get 0 local.get 1 i32.add i32.const 0 i32.store8
                  local.get 1 i32.const 1 i32.add local.tee 1 i32.const 32 i32.ne br_if 0
                end
                local.get 0 i32.const 16 i32.add global.set 0))"#,
        );
        let a = analyze_module(&m).unwrap();
        assert!(a.escapes.findings.is_empty());
        assert_eq!(a.escapes.unresolved.get(&0), Some(&1));
    }
}
