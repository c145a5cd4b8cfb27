//! Binary-level stack canaries for shadow-stack frames.
//!
//! A hardened frame grows by K bytes rounded up to the stack alignment: the
//! prologue and epilogue constants change from N to N+A, so the frame base
//! moves down by A while every body offset stays valid. The guard occupies
//! [base+N, base+N+K), directly above the old frame; any remaining bytes up
//! to the caller's region are padding that keeps the base aligned. The guard
//! is written right after the prologue and compared before each
//! stack-pointer restore and each live return; a mismatch executes
//! `unreachable`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::frame::{self, FrameInfo, FrameScan};
use crate::wasm::{
    BlockType, EncodeError, FuncType, FunctionBody, Global, GlobalType, ImportDesc, Instr,
    MemArg, Op, StoreKind, LoadKind, ValType, WasmModule,
};

/// Default guard bytes in memory order.
pub const DEFAULT_GUARD: [u8; 8] = [0x00, 0xFF, 0x0A, 0x0D, 0xDE, 0xC0, 0xAD, 0xDE];

/// Instructions inserted before each check site.
pub const CHECK_SITE_INSTRS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuardMode {
    Fixed,
    PerRunRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OnViolation {
    Trap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanaryConfig {
    /// Guard size K in bytes.
    pub guard_size: u32,
    pub mode: GuardMode,
    /// Guard bytes in memory order; cycled to fill K bytes.
    pub fixed_value: [u8; 8],
    /// Entropy import for per-run-random mode, as (module, field).
    pub random_import: Option<(String, String)>,
    pub on_violation: OnViolation,
    /// Alignment the compiler assumes for the stack pointer. Frames grow by
    /// K rounded up to this.
    pub stack_align: u32,
}

impl Default for CanaryConfig {
    fn default() -> Self {
        CanaryConfig {
            guard_size: 8,
            mode: GuardMode::Fixed,
            fixed_value: DEFAULT_GUARD,
            random_import: None,
            on_violation: OnViolation::Trap,
            stack_align: 16,
        }
    }
}

impl CanaryConfig {
    pub fn validate(&self) -> Result<(), CanaryError> {
        let k = self.guard_size;
        if k == 0 || k % 4 != 0 || k > 16 {
            return Err(CanaryError::InvalidConfig(format!(
                "guard size {k} must be a positive multiple of 4 no larger than 16"
            )));
        }
        let a = self.stack_align;
        if !a.is_power_of_two() || a > 64 {
            return Err(CanaryError::InvalidConfig(format!(
                "stack alignment {a} must be a power of two no larger than 64"
            )));
        }
        if self.mode == GuardMode::Fixed && self.fixed_value[0] != 0 {
            return Err(CanaryError::InvalidConfig(format!(
                "guard value {} must start with a zero byte",
                hex::encode(self.fixed_value)
            )));
        }
        Ok(())
    }

    /// Bytes each hardened frame grows by.
    pub fn frame_growth(&self) -> u32 {
        self.guard_size.div_ceil(self.stack_align) * self.stack_align
    }

    fn entropy_import(&self) -> (String, String) {
        self.random_import.clone().unwrap_or_else(|| {
            ("wasi_snapshot_preview1".to_string(), "random_get".to_string())
        })
    }
}

/// Parses up to 8 guard bytes written as hex in memory order, e.g.
/// `00FF0A0DDEC0ADDE`. An optional `0x` prefix and `_` separators are
/// accepted; short values are zero-padded at the end.
pub fn parse_guard_value(s: &str) -> Result<[u8; 8], CanaryError> {
    let digits: String = s
        .trim()
        .trim_start_matches("0x")
        .trim_start_matches("0X")
        .chars()
        .filter(|c| *c != '_')
        .collect();
    if digits.is_empty() || digits.len() > 16 || digits.len() % 2 != 0 {
        return Err(CanaryError::InvalidConfig(format!(
            "guard value `{s}` must be 1 to 8 bytes of hex"
        )));
    }
    let bytes = hex::decode(&digits)
        .map_err(|e| CanaryError::InvalidConfig(format!("guard value `{s}`: {e}")))?;
    let mut out = [0u8; 8];
    out[..bytes.len()].copy_from_slice(&bytes);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanaryError {
    #[error("invalid canary configuration: {0}")]
    InvalidConfig(String),
    #[error("per-run-random guard needs function import {module}.{field} (i32, i32) -> i32")]
    GuardImportMissing { module: String, field: String },
    #[error("no stack-pointer global")]
    NoStackPointer,
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "action", content = "reason")]
pub enum Action {
    Hardened,
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionEntry {
    pub function: u32,
    #[serde(flatten)]
    pub action: Action,
    pub old_frame_size: Option<u32>,
    pub new_frame_size: Option<u32>,
    pub check_sites: usize,
    pub instruction_delta: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardenReport {
    pub guard_size: u32,
    /// Bytes added to each hardened frame (guard plus alignment padding).
    pub frame_growth: u32,
    pub guard_mode: GuardMode,
    /// Memory-order hex of the fixed guard bytes.
    pub guard_value: String,
    pub sp_global: Option<u32>,
    pub functions: Vec<FunctionEntry>,
    pub check_function: Option<u32>,
    pub seed_function: Option<u32>,
    pub guard_global: Option<u32>,
    /// Functions appended to the module (check helper, seeding code).
    pub added_functions: u32,
    pub original_size: usize,
    pub hardened_size: usize,
    pub size_delta_bytes: i64,
    pub instruction_delta: i64,
}

impl HardenReport {
    pub fn hardened(&self) -> impl Iterator<Item = &FunctionEntry> {
        self.functions
            .iter()
            .filter(|f| f.action == Action::Hardened)
    }

    pub fn hardened_count(&self) -> usize {
        self.hardened().count()
    }

    pub fn entry(&self, function: u32) -> Option<&FunctionEntry> {
        self.functions.iter().find(|f| f.function == function)
    }

    fn guard_bytes(&self) -> [u8; 8] {
        parse_guard_value(&self.guard_value).unwrap_or(DEFAULT_GUARD)
    }
}

/// Where the guard value comes from in generated code.
#[derive(Debug, Clone, Copy)]
enum GuardSource {
    Fixed([u8; 8]),
    Global(u32),
}

fn cycled(bytes: [u8; 8], at: u32) -> [u8; 8] {
    let mut out = [0u8; 8];
    for (i, b) in out.iter_mut().enumerate() {
        *b = bytes[(at as usize + i) % 8];
    }
    out
}

/// (offset within the guard, width) for each guard word.
fn guard_words(k: u32) -> Vec<(u32, u32)> {
    let mut v = Vec::new();
    let mut at = 0;
    while at < k {
        let w = if k - at >= 8 { 8 } else { 4 };
        v.push((at, w));
        at += w;
    }
    v
}

fn word_value(src: GuardSource, at: u32, width: u32) -> Vec<Op> {
    match (src, width) {
        (GuardSource::Fixed(b), 8) => vec![Op::I64Const(i64::from_le_bytes(cycled(b, at)))],
        (GuardSource::Fixed(b), _) => {
            let c = cycled(b, at);
            vec![Op::I32Const(i32::from_le_bytes([c[0], c[1], c[2], c[3]]))]
        }
        (GuardSource::Global(g), 8) => vec![Op::GlobalGet(g)],
        // bytes 8..12 repeat bytes 0..4, the low half of the guard word
        (GuardSource::Global(g), _) => vec![Op::GlobalGet(g), Op::Numeric(0xa7)],
    }
}

/// Code storing the guard at `sp + frame_size`, placed right after the
/// prologue.
fn guard_store_seq(src: GuardSource, sp: u32, frame_size: u32, k: u32) -> Vec<Op> {
    let mut v = Vec::new();
    for (at, w) in guard_words(k) {
        v.push(Op::GlobalGet(sp));
        v.extend(word_value(src, at, w));
        let (kind, align) = if w == 8 {
            (StoreKind::I64, 3)
        } else {
            (StoreKind::I32, 2)
        };
        v.push(Op::Store(
            kind,
            MemArg {
                align,
                offset: frame_size + at,
            },
        ));
    }
    v
}

/// Code placed before each check site: passes the guard slot address to the
/// check function.
fn check_seq(sp: u32, frame_size: u32, check: u32) -> Vec<Op> {
    vec![
        Op::GlobalGet(sp),
        Op::I32Const(frame_size as i32),
        Op::Numeric(0x6a),
        Op::Call(check),
    ]
}

fn check_function_body(m: &mut WasmModule, src: GuardSource, k: u32) -> FunctionBody {
    let ty = m.intern_type(FuncType::new([ValType::I32], []));
    let mut ops = vec![Op::Block(BlockType::Empty)];
    for (at, w) in guard_words(k) {
        ops.push(Op::LocalGet(0));
        let (kind, align, ne) = if w == 8 {
            (LoadKind::I64, 3, 0x52)
        } else {
            (LoadKind::I32, 2, 0x47)
        };
        ops.push(Op::Load(kind, MemArg { align, offset: at }));
        ops.extend(word_value(src, at, w));
        ops.push(Op::Numeric(ne));
        ops.push(Op::BrIf(0));
    }
    ops.extend([Op::Return, Op::End, Op::Unreachable, Op::End]);
    FunctionBody::new(ty, Vec::new(), ops.into_iter().map(Instr::new).collect())
}

/// Fills the guard global from the entropy import, clearing its low byte.
fn seed_function_body(m: &mut WasmModule, sp: u32, entropy: u32, guard: u32) -> FunctionBody {
    let ty = m.intern_type(FuncType::new([], []));
    let ops = vec![
        Op::GlobalGet(sp),
        Op::I32Const(16),
        Op::Numeric(0x6b),
        Op::LocalTee(0),
        Op::I32Const(8),
        Op::Call(entropy),
        Op::Drop,
        Op::LocalGet(0),
        Op::Load(LoadKind::I64, MemArg { align: 3, offset: 0 }),
        Op::I64Const(-256),
        Op::Numeric(0x83),
        Op::GlobalSet(guard),
        Op::End,
    ];
    FunctionBody::new(ty, vec![(1, ValType::I32)], ops.into_iter().map(Instr::new).collect())
}

struct Plan<'f> {
    frame: &'f FrameInfo,
    patches: BTreeMap<usize, i32>,
}

fn plan<'f>(body: &FunctionBody, frame: &'f FrameInfo, growth: u32) -> Result<Plan<'f>, String> {
    if let Some(issue) = &frame.shape_issue {
        return Err(format!("unsupported-frame-shape: {issue}"));
    }
    if frame.check_sites().is_empty() {
        return Err("no-check-site: frame is never released".into());
    }
    let k = growth as i32;
    let konst = |at: usize| match body.instrs[at].op() {
        Op::I32Const(v) => Ok(*v),
        _ => Err(format!("unsupported-frame-shape: instruction {at} is not a constant")),
    };
    let mut patches = BTreeMap::new();
    let p = frame.prologue_constant;
    let v = konst(p.instr)?;
    let nv = if p.subtracted { v.checked_add(k) } else { v.checked_sub(k) };
    patches.insert(p.instr, nv.ok_or("unsupported-frame-shape: frame size overflows")?);
    for e in &frame.epilogues {
        if let Some(c) = e.constant {
            let v = konst(c.instr)?;
            let nv = if c.subtracted { v.checked_sub(k) } else { v.checked_add(k) };
            patches.insert(c.instr, nv.ok_or("unsupported-frame-shape: frame size overflows")?);
        }
    }
    if frame.frame_size.checked_add(16).is_none() {
        return Err("unsupported-frame-shape: frame size overflows".into());
    }
    Ok(Plan { frame, patches })
}

fn rewrite(body: &FunctionBody, plan: &Plan<'_>, src: GuardSource, k: u32, check: u32) -> Vec<Instr> {
    let f = plan.frame;
    let sites = f.check_sites();
    let mut out = Vec::with_capacity(body.instrs.len() + 8 + 4 * sites.len());
    for (i, ins) in body.instrs.iter().enumerate() {
        if sites.binary_search(&i).is_ok() {
            out.extend(check_seq(f.sp_global, f.frame_size, check).into_iter().map(Instr::new));
        }
        match plan.patches.get(&i) {
            Some(v) => out.push(Instr::new(Op::I32Const(*v))),
            None => out.push(ins.clone()),
        }
        if i == f.prologue.end {
            out.extend(
                guard_store_seq(src, f.sp_global, f.frame_size, k)
                    .into_iter()
                    .map(Instr::new),
            );
        }
    }
    out
}

/// Adds guards to every frame in `frames` whose shape allows it.
pub fn harden(
    m: &WasmModule,
    frames: &FrameScan,
    cfg: &CanaryConfig,
) -> Result<(WasmModule, HardenReport), CanaryError> {
    cfg.validate()?;
    let original_size = m.encode()?.len();
    let k = cfg.guard_size;
    let growth = cfg.frame_growth();
    let sp = frames.frames.first().map(|f| f.sp_global);
    let mut entries = Vec::new();
    let mut plans = Vec::new();
    for (i, body) in m.functions.iter().enumerate() {
        let index = m.imported_function_count() + i as u32;
        let skipped = |reason: String, frame: Option<&FrameInfo>| FunctionEntry {
            function: index,
            action: Action::Skipped(reason),
            old_frame_size: frame.map(|f| f.frame_size),
            new_frame_size: None,
            check_sites: 0,
            instruction_delta: 0,
        };
        match frames.frame(index) {
            Some(f) => match plan(body, f, growth) {
                Ok(p) => {
                    entries.push(FunctionEntry {
                        function: index,
                        action: Action::Hardened,
                        old_frame_size: Some(f.frame_size),
                        new_frame_size: Some(f.frame_size + growth),
                        check_sites: f.check_sites().len(),
                        instruction_delta: 0,
                    });
                    plans.push((i, p));
                }
                Err(reason) => entries.push(skipped(reason, Some(f))),
            },
            None => {
                let reason = frames
                    .skipped
                    .iter()
                    .find(|s| s.function == index)
                    .map_or("no-frame".to_string(), |s| format!("{}: {}", s.reason, s.detail));
                entries.push(skipped(reason, None));
            }
        }
    }

    let mut report = HardenReport {
        guard_size: k,
        frame_growth: growth,
        guard_mode: cfg.mode,
        guard_value: hex::encode_upper(cfg.fixed_value),
        sp_global: sp,
        functions: entries,
        check_function: None,
        seed_function: None,
        guard_global: None,
        added_functions: 0,
        original_size,
        hardened_size: original_size,
        size_delta_bytes: 0,
        instruction_delta: 0,
    };
    let Some(sp) = sp.filter(|_| !plans.is_empty()) else {
        return Ok((m.clone(), report));
    };

    let mut out = m.clone();
    let mut added = Vec::new();
    let src = match cfg.mode {
        GuardMode::Fixed => GuardSource::Fixed(cfg.fixed_value),
        GuardMode::PerRunRandom => {
            let (module, field) = cfg.entropy_import();
            let want = FuncType::new([ValType::I32, ValType::I32], [ValType::I32]);
            let entropy = m
                .imports
                .iter()
                .filter(|i| matches!(i.desc, ImportDesc::Func(_)))
                .position(|i| {
                    i.module == module
                        && i.field == field
                        && matches!(i.desc, ImportDesc::Func(t) if m.types.get(t as usize) == Some(&want))
                })
                .ok_or(CanaryError::GuardImportMissing { module, field })?
                as u32;
            let guard = out.global_count();
            out.globals.push(Global {
                ty: GlobalType {
                    val: ValType::I64,
                    mutable: true,
                },
                init: vec![Instr::new(Op::I64Const(0)), Instr::new(Op::End)],
            });
            report.guard_global = Some(guard);
            let seed = out.function_count() + added.len() as u32;
            added.push(seed_function_body(&mut out, sp, entropy, guard));
            report.seed_function = Some(seed);
            GuardSource::Global(guard)
        }
    };
    let check = out.function_count() + added.len() as u32;
    added.push(check_function_body(&mut out, src, k));
    report.check_function = Some(check);

    if let Some(seed) = report.seed_function {
        match out.start {
            None => out.start = Some(seed),
            Some(old) => {
                let ty = out.intern_type(FuncType::new([], []));
                let wrapper = out.function_count() + added.len() as u32;
                added.push(FunctionBody::new(
                    ty,
                    Vec::new(),
                    [Op::Call(seed), Op::Call(old), Op::End]
                        .into_iter()
                        .map(Instr::new)
                        .collect(),
                ));
                out.start = Some(wrapper);
            }
        }
    }

    for (i, p) in &plans {
        let body = &m.functions[*i];
        let instrs = rewrite(body, p, src, k, check);
        let delta = instrs.len() as i64 - body.instrs.len() as i64;
        out.functions[*i] = FunctionBody::new(body.type_index, body.locals.clone(), instrs);
        let index = m.imported_function_count() + *i as u32;
        if let Some(e) = report.functions.iter_mut().find(|e| e.function == index) {
            e.instruction_delta = delta;
        }
        report.instruction_delta += delta;
    }
    report.added_functions = added.len() as u32;
    out.functions.extend(added);
    let bytes = out.encode()?;
    report.hardened_size = bytes.len();
    report.size_delta_bytes = bytes.len() as i64 - original_size as i64;
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub function: Option<u32>,
    pub property: String,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.function {
            Some(func) => write!(f, "function {func}: {}: {}", self.property, self.detail),
            None => write!(f, "module: {}: {}", self.property, self.detail),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("hardening verification failed: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct VerificationFailure {
    pub violations: Vec<Violation>,
}

fn ops_match(instrs: &[Instr], at: usize, want: &[Op]) -> bool {
    instrs.len() >= at + want.len()
        && instrs[at..at + want.len()]
            .iter()
            .zip(want)
            .all(|(i, w)| i.op() == w)
}

/// Structural check of a hardened module against its original and the
/// report `harden` produced, without executing anything.
pub fn verify_hardening(
    original: &WasmModule,
    hardened: &WasmModule,
    report: &HardenReport,
) -> Result<(), VerificationFailure> {
    let mut v = Vec::new();
    let mut bad = |function: Option<u32>, property: &str, detail: String| {
        v.push(Violation {
            function,
            property: property.to_string(),
            detail,
        })
    };

    if hardened.imports != original.imports {
        bad(None, "index-spaces", "imports changed".into());
    }
    if hardened.exports != original.exports {
        bad(None, "index-spaces", "exports changed".into());
    }
    if hardened.types.len() < original.types.len()
        || hardened.types[..original.types.len()] != original.types[..]
    {
        bad(None, "index-spaces", "existing types changed".into());
    }
    let extra_globals = u32::from(report.guard_global.is_some()) as usize;
    if hardened.globals.len() != original.globals.len() + extra_globals
        || hardened.globals[..original.globals.len().min(hardened.globals.len())]
            != original.globals[..original.globals.len().min(hardened.globals.len())]
    {
        bad(None, "index-spaces", "globals changed".into());
    }
    let expected_funcs = original.functions.len() + report.added_functions as usize;
    if hardened.functions.len() != expected_funcs {
        bad(
            None,
            "index-spaces",
            format!(
                "{} defined functions, expected {expected_funcs}",
                hardened.functions.len()
            ),
        );
    }
    let check_ty = FuncType::new([ValType::I32], []);
    if report.hardened_count() > 0
        && report.check_function.and_then(|c| hardened.function_type(c)) != Some(&check_ty)
    {
        bad(None, "check-function", "missing or mistyped".into());
    }
    let src = match (report.guard_mode, report.guard_global) {
        (GuardMode::PerRunRandom, Some(g)) => GuardSource::Global(g),
        _ => GuardSource::Fixed(report.guard_bytes()),
    };
    let k = report.guard_size;
    let growth = report.frame_growth;

    let before = report.sp_global.map(|sp| frame::detect_frames(original, sp));
    let after = report.sp_global.map(|sp| frame::detect_frames(hardened, sp));
    let same = |a: &FunctionBody, b: &FunctionBody| {
        a.type_index == b.type_index && a.locals == b.locals && a.instrs == b.instrs
    };

    for (i, body) in original.functions.iter().enumerate() {
        let index = original.imported_function_count() + i as u32;
        let Some(hbody) = hardened.functions.get(i) else { continue };
        let Some(entry) = report.entry(index) else {
            bad(Some(index), "report", "function missing from report".into());
            continue;
        };
        if entry.action != Action::Hardened {
            if !same(body, hbody) {
                bad(Some(index), "unchanged", "skipped function was modified".into());
            }
            continue;
        }
        let old = before.as_ref().and_then(|s| s.frame(index));
        let new = after.as_ref().and_then(|s| s.frame(index));
        let (Some(old), Some(new)) = (old, new) else {
            bad(Some(index), "frame-constant", "frame not found".into());
            continue;
        };
        if entry.old_frame_size != Some(old.frame_size)
            || entry.new_frame_size != Some(old.frame_size + growth)
        {
            bad(
                Some(index),
                "frame-constant",
                format!(
                    "report says {:?} -> {:?}, original frame is {}",
                    entry.old_frame_size, entry.new_frame_size, old.frame_size
                ),
            );
        }
        if new.frame_size != old.frame_size + growth {
            bad(
                Some(index),
                "frame-constant",
                format!(
                    "frame is {} bytes, expected {} + {growth}",
                    new.frame_size, old.frame_size
                ),
            );
            continue;
        }
        if let Some(issue) = &new.shape_issue {
            bad(Some(index), "frame-constant", issue.clone());
        }
        if new.epilogues.len() != old.epilogues.len() {
            bad(
                Some(index),
                "frame-constant",
                format!(
                    "{} restores, expected {}",
                    new.epilogues.len(),
                    old.epilogues.len()
                ),
            );
        }
        let store = guard_store_seq(src, new.sp_global, old.frame_size, k);
        let stores = (0..hbody.instrs.len())
            .filter(|&at| ops_match(&hbody.instrs, at, &store))
            .count();
        if !ops_match(&hbody.instrs, new.prologue.end + 1, &store) || stores != 1 {
            bad(
                Some(index),
                "guard-store",
                format!("{stores} guard stores, expected exactly one after the prologue"),
            );
        }
        let Some(check) = report.check_function else { continue };
        let want = check_seq(new.sp_global, old.frame_size, check);
        let sites = new.check_sites();
        for site in &sites {
            if *site < want.len() || !ops_match(&hbody.instrs, site - want.len(), &want) {
                bad(
                    Some(index),
                    "check-site",
                    format!("no guard check before instruction {site}"),
                );
            }
        }
        if sites.len() != entry.check_sites {
            bad(
                Some(index),
                "check-site",
                format!("{} sites, report says {}", sites.len(), entry.check_sites),
            );
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(VerificationFailure { violations: v })
    }
}
