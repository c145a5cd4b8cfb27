use std::fmt;

use super::leb::{self, Reader};
use super::types::{BlockType, ValType};
use super::DecodeError;

/// Static memory immediate of loads and stores. `align` is the log2 exponent,
/// so the alignment it denotes is always a power of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemArg {
    pub align: u32,
    pub offset: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoadKind {
    I32,
    I64,
    F32,
    F64,
    I32S8,
    I32U8,
    I32S16,
    I32U16,
    I64S8,
    I64U8,
    I64S16,
    I64U16,
    I64S32,
    I64U32,
}

impl LoadKind {
    const ALL: [LoadKind; 14] = [
        LoadKind::I32,
        LoadKind::I64,
        LoadKind::F32,
        LoadKind::F64,
        LoadKind::I32S8,
        LoadKind::I32U8,
        LoadKind::I32S16,
        LoadKind::I32U16,
        LoadKind::I64S8,
        LoadKind::I64U8,
        LoadKind::I64S16,
        LoadKind::I64U16,
        LoadKind::I64S32,
        LoadKind::I64U32,
    ];

    pub fn from_opcode(op: u8) -> Option<Self> {
        (0x28..=0x35)
            .contains(&op)
            .then(|| Self::ALL[(op - 0x28) as usize])
    }

    pub fn opcode(self) -> u8 {
        0x28 + Self::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    /// Number of bytes read from memory.
    pub fn width(self) -> u32 {
        match self {
            LoadKind::I32S8 | LoadKind::I32U8 | LoadKind::I64S8 | LoadKind::I64U8 => 1,
            LoadKind::I32S16 | LoadKind::I32U16 | LoadKind::I64S16 | LoadKind::I64U16 => 2,
            LoadKind::I32 | LoadKind::F32 | LoadKind::I64S32 | LoadKind::I64U32 => 4,
            LoadKind::I64 | LoadKind::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LoadKind::I32 => "i32.load",
            LoadKind::I64 => "i64.load",
            LoadKind::F32 => "f32.load",
            LoadKind::F64 => "f64.load",
            LoadKind::I32S8 => "i32.load8_s",
            LoadKind::I32U8 => "i32.load8_u",
            LoadKind::I32S16 => "i32.load16_s",
            LoadKind::I32U16 => "i32.load16_u",
            LoadKind::I64S8 => "i64.load8_s",
            LoadKind::I64U8 => "i64.load8_u",
            LoadKind::I64S16 => "i64.load16_s",
            LoadKind::I64U16 => "i64.load16_u",
            LoadKind::I64S32 => "i64.load32_s",
            LoadKind::I64U32 => "i64.load32_u",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StoreKind {
    I32,
    I64,
    F32,
    F64,
    I32As8,
    I32As16,
    I64As8,
    I64As16,
    I64As32,
}

impl StoreKind {
    const ALL: [StoreKind; 9] = [
        StoreKind::I32,
        StoreKind::I64,
        StoreKind::F32,
        StoreKind::F64,
        StoreKind::I32As8,
        StoreKind::I32As16,
        StoreKind::I64As8,
        StoreKind::I64As16,
        StoreKind::I64As32,
    ];

    pub fn from_opcode(op: u8) -> Option<Self> {
        (0x36..=0x3e)
            .contains(&op)
            .then(|| Self::ALL[(op - 0x36) as usize])
    }

    pub fn opcode(self) -> u8 {
        0x36 + Self::ALL.iter().position(|k| *k == self).unwrap() as u8
    }

    /// Number of bytes written to memory.
    pub fn width(self) -> u32 {
        match self {
            StoreKind::I32As8 | StoreKind::I64As8 => 1,
            StoreKind::I32As16 | StoreKind::I64As16 => 2,
            StoreKind::I32 | StoreKind::F32 | StoreKind::I64As32 => 4,
            StoreKind::I64 | StoreKind::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StoreKind::I32 => "i32.store",
            StoreKind::I64 => "i64.store",
            StoreKind::F32 => "f32.store",
            StoreKind::F64 => "f64.store",
            StoreKind::I32As8 => "i32.store8",
            StoreKind::I32As16 => "i32.store16",
            StoreKind::I64As8 => "i64.store8",
            StoreKind::I64As16 => "i64.store16",
            StoreKind::I64As32 => "i64.store32",
        }
    }
}

/// Decoded operation. Everything outside the modelled subset is kept as
/// [`Op::Other`] with its complete encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Unreachable,
    Nop,
    Block(BlockType),
    Loop(BlockType),
    If(BlockType),
    Else,
    End,
    Br(u32),
    BrIf(u32),
    BrTable { targets: Vec<u32>, default: u32 },
    Return,
    Call(u32),
    CallIndirect { type_index: u32, table: u32 },
    Drop,
    Select,
    LocalGet(u32),
    LocalSet(u32),
    LocalTee(u32),
    GlobalGet(u32),
    GlobalSet(u32),
    Load(LoadKind, MemArg),
    Store(StoreKind, MemArg),
    MemorySize,
    MemoryGrow,
    I32Const(i32),
    I64Const(i64),
    /// Raw IEEE-754 bits.
    F32Const(u32),
    F64Const(u64),
    /// Immediate-free numeric instruction in 0x45..=0xc4.
    Numeric(u8),
    Other {
        opcode: u8,
        sub: Option<u32>,
        bytes: Box<[u8]>,
    },
}

/// One instruction plus, when it came from a binary, its original bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Instr {
    op: Op,
    raw: Option<Box<[u8]>>,
}

impl From<Op> for Instr {
    fn from(op: Op) -> Self {
        Instr::new(op)
    }
}

impl Instr {
    pub fn new(op: Op) -> Self {
        Instr { op, raw: None }
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    /// Replaces the operation, dropping the original encoding.
    pub fn set_op(&mut self, op: Op) {
        self.op = op;
        self.raw = None;
    }

    pub fn raw(&self) -> Option<&[u8]> {
        self.raw.as_deref()
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        match &self.raw {
            Some(raw) => out.extend_from_slice(raw),
            None => encode_op(&self.op, out),
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Instr, DecodeError> {
        let start = r.pos();
        let op = decode_op(r)?;
        let raw = r.slice(start, r.pos());
        let mut canonical = Vec::with_capacity(raw.len());
        encode_op(&op, &mut canonical);
        let raw = (canonical != raw).then(|| raw.to_vec().into_boxed_slice());
        Ok(Instr { op, raw })
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.op)
    }
}

fn decode_block_type(r: &mut Reader<'_>) -> Result<BlockType, DecodeError> {
    match r.peek() {
        Some(0x40) => {
            r.byte()?;
            Ok(BlockType::Empty)
        }
        Some(b) if ValType::from_byte(b).is_some() => {
            r.byte()?;
            Ok(BlockType::Value(ValType::from_byte(b).unwrap()))
        }
        _ => {
            let at = r.offset();
            let idx = r.s33()?;
            if idx < 0 {
                return Err(DecodeError::Malformed {
                    offset: at,
                    reason: "invalid block type".into(),
                });
            }
            Ok(BlockType::Func(idx as u32))
        }
    }
}

fn decode_memarg(r: &mut Reader<'_>) -> Result<MemArg, DecodeError> {
    let at = r.offset();
    let align = r.u32()?;
    if align & 0x40 != 0 {
        return Err(DecodeError::Unsupported {
            offset: at,
            feature: "multi-memory".into(),
        });
    }
    if align >= 32 {
        return Err(DecodeError::Malformed {
            offset: at,
            reason: "alignment exponent out of range".into(),
        });
    }
    let offset = r.u32()?;
    Ok(MemArg { align, offset })
}

fn zero_byte(r: &mut Reader<'_>) -> Result<(), DecodeError> {
    let at = r.offset();
    let idx = r.u32()?;
    if idx != 0 {
        return Err(DecodeError::Unsupported {
            offset: at,
            feature: "multi-memory".into(),
        });
    }
    Ok(())
}

fn decode_op(r: &mut Reader<'_>) -> Result<Op, DecodeError> {
    let at = r.offset();
    let start = r.pos();
    let opcode = r.byte()?;
    let unsupported = |feature: &str| DecodeError::Unsupported {
        offset: at,
        feature: feature.into(),
    };
    let op = match opcode {
        0x00 => Op::Unreachable,
        0x01 => Op::Nop,
        0x02 => Op::Block(decode_block_type(r)?),
        0x03 => Op::Loop(decode_block_type(r)?),
        0x04 => Op::If(decode_block_type(r)?),
        0x05 => Op::Else,
        0x06..=0x0a | 0x18 | 0x19 | 0x1f => return Err(unsupported("exception-handling")),
        0x0b => Op::End,
        0x0c => Op::Br(r.u32()?),
        0x0d => Op::BrIf(r.u32()?),
        0x0e => {
            let n = r.u32()?;
            let mut targets = Vec::with_capacity(n.min(4096) as usize);
            for _ in 0..n {
                targets.push(r.u32()?);
            }
            Op::BrTable {
                targets,
                default: r.u32()?,
            }
        }
        0x0f => Op::Return,
        0x10 => Op::Call(r.u32()?),
        0x11 => {
            let type_index = r.u32()?;
            let table = r.u32()?;
            Op::CallIndirect { type_index, table }
        }
        0x12 | 0x13 => return Err(unsupported("tail-call")),
        0x14 | 0x15 => return Err(unsupported("function-references")),
        0x1a => Op::Drop,
        0x1b => Op::Select,
        0x1c => {
            let n = r.u32()?;
            for _ in 0..n {
                r.byte()?;
            }
            other(r, opcode, None, start)
        }
        0x20 => Op::LocalGet(r.u32()?),
        0x21 => Op::LocalSet(r.u32()?),
        0x22 => Op::LocalTee(r.u32()?),
        0x23 => Op::GlobalGet(r.u32()?),
        0x24 => Op::GlobalSet(r.u32()?),
        0x25 | 0x26 => {
            r.u32()?;
            other(r, opcode, None, start)
        }
        0x28..=0x35 => Op::Load(LoadKind::from_opcode(opcode).unwrap(), decode_memarg(r)?),
        0x36..=0x3e => Op::Store(StoreKind::from_opcode(opcode).unwrap(), decode_memarg(r)?),
        0x3f => {
            zero_byte(r)?;
            Op::MemorySize
        }
        0x40 => {
            zero_byte(r)?;
            Op::MemoryGrow
        }
        0x41 => Op::I32Const(r.s32()?),
        0x42 => Op::I64Const(r.s64()?),
        0x43 => {
            let b = r.take(4)?;
            Op::F32Const(u32::from_le_bytes(b.try_into().unwrap()))
        }
        0x44 => {
            let b = r.take(8)?;
            Op::F64Const(u64::from_le_bytes(b.try_into().unwrap()))
        }
        0x45..=0xc4 => Op::Numeric(opcode),
        0xd0 => {
            r.byte()?;
            other(r, opcode, None, start)
        }
        0xd1 => other(r, opcode, None, start),
        0xd2 => {
            r.u32()?;
            other(r, opcode, None, start)
        }
        0xfc => {
            let sub = r.u32()?;
            match sub {
                0..=7 => {}
                8 => {
                    r.u32()?;
                    zero_byte(r)?;
                }
                9 | 13 | 15 | 16 | 17 => {
                    r.u32()?;
                }
                10 => {
                    zero_byte(r)?;
                    zero_byte(r)?;
                }
                11 => zero_byte(r)?,
                12 | 14 => {
                    r.u32()?;
                    r.u32()?;
                }
                _ => return Err(unsupported(&format!("0xfc {sub} instruction"))),
            }
            other(r, opcode, Some(sub), start)
        }
        0xfd => return Err(unsupported("simd")),
        0xfe => return Err(unsupported("threads")),
        _ => {
            return Err(DecodeError::Malformed {
                offset: at,
                reason: format!("unknown opcode 0x{opcode:02x}"),
            })
        }
    };
    Ok(op)
}

fn other(r: &Reader<'_>, opcode: u8, sub: Option<u32>, start: usize) -> Op {
    Op::Other {
        opcode,
        sub,
        bytes: r.slice(start, r.pos()).to_vec().into_boxed_slice(),
    }
}

fn encode_block_type(bt: &BlockType, out: &mut Vec<u8>) {
    match bt {
        BlockType::Empty => out.push(0x40),
        BlockType::Value(v) => out.push(v.byte()),
        BlockType::Func(idx) => leb::write_i64(out, i64::from(*idx)),
    }
}

fn encode_memarg(m: &MemArg, out: &mut Vec<u8>) {
    leb::write_u32(out, m.align);
    leb::write_u32(out, m.offset);
}

pub fn encode_op(op: &Op, out: &mut Vec<u8>) {
    match op {
        Op::Unreachable => out.push(0x00),
        Op::Nop => out.push(0x01),
        Op::Block(bt) => {
            out.push(0x02);
            encode_block_type(bt, out);
        }
        Op::Loop(bt) => {
            out.push(0x03);
            encode_block_type(bt, out);
        }
        Op::If(bt) => {
            out.push(0x04);
            encode_block_type(bt, out);
        }
        Op::Else => out.push(0x05),
        Op::End => out.push(0x0b),
        Op::Br(l) => {
            out.push(0x0c);
            leb::write_u32(out, *l);
        }
        Op::BrIf(l) => {
            out.push(0x0d);
            leb::write_u32(out, *l);
        }
        Op::BrTable { targets, default } => {
            out.push(0x0e);
            leb::write_u32(out, targets.len() as u32);
            for t in targets {
                leb::write_u32(out, *t);
            }
            leb::write_u32(out, *default);
        }
        Op::Return => out.push(0x0f),
        Op::Call(f) => {
            out.push(0x10);
            leb::write_u32(out, *f);
        }
        Op::CallIndirect { type_index, table } => {
            out.push(0x11);
            leb::write_u32(out, *type_index);
            leb::write_u32(out, *table);
        }
        Op::Drop => out.push(0x1a),
        Op::Select => out.push(0x1b),
        Op::LocalGet(i) => {
            out.push(0x20);
            leb::write_u32(out, *i);
        }
        Op::LocalSet(i) => {
            out.push(0x21);
            leb::write_u32(out, *i);
        }
        Op::LocalTee(i) => {
            out.push(0x22);
            leb::write_u32(out, *i);
        }
        Op::GlobalGet(i) => {
            out.push(0x23);
            leb::write_u32(out, *i);
        }
        Op::GlobalSet(i) => {
            out.push(0x24);
            leb::write_u32(out, *i);
        }
        Op::Load(k, m) => {
            out.push(k.opcode());
            encode_memarg(m, out);
        }
        Op::Store(k, m) => {
            out.push(k.opcode());
            encode_memarg(m, out);
        }
        Op::MemorySize => out.extend_from_slice(&[0x3f, 0x00]),
        Op::MemoryGrow => out.extend_from_slice(&[0x40, 0x00]),
        Op::I32Const(v) => {
            out.push(0x41);
            leb::write_i32(out, *v);
        }
        Op::I64Const(v) => {
            out.push(0x42);
            leb::write_i64(out, *v);
        }
        Op::F32Const(bits) => {
            out.push(0x43);
            out.extend_from_slice(&bits.to_le_bytes());
        }
        Op::F64Const(bits) => {
            out.push(0x44);
            out.extend_from_slice(&bits.to_le_bytes());
        }
        Op::Numeric(code) => out.push(*code),
        Op::Other { bytes, .. } => out.extend_from_slice(bytes),
    }
}

impl Op {
    /// Opens a structured-control block (`block`, `loop`, `if`).
    pub fn opens_block(&self) -> bool {
        matches!(self, Op::Block(_) | Op::Loop(_) | Op::If(_))
    }

    /// Unconditional transfer: code after it in the same block is dead.
    pub fn ends_flow(&self) -> bool {
        matches!(
            self,
            Op::Unreachable | Op::Br(_) | Op::BrTable { .. } | Op::Return
        )
    }
}

pub fn numeric_name(code: u8) -> &'static str {
    const NAMES: [&str; 128] = [
        "i32.eqz", "i32.eq", "i32.ne", "i32.lt_s", "i32.lt_u", "i32.gt_s", "i32.gt_u",
        "i32.le_s", "i32.le_u", "i32.ge_s", "i32.ge_u", "i64.eqz", "i64.eq", "i64.ne",
        "i64.lt_s", "i64.lt_u", "i64.gt_s", "i64.gt_u", "i64.le_s", "i64.le_u", "i64.ge_s",
        "i64.ge_u", "f32.eq", "f32.ne", "f32.lt", "f32.gt", "f32.le", "f32.ge", "f64.eq",
        "f64.ne", "f64.lt", "f64.gt", "f64.le", "f64.ge", "i32.clz", "i32.ctz",
        "i32.popcnt", "i32.add", "i32.sub", "i32.mul", "i32.div_s", "i32.div_u",
        "i32.rem_s", "i32.rem_u", "i32.and", "i32.or", "i32.xor", "i32.shl", "i32.shr_s",
        "i32.shr_u", "i32.rotl", "i32.rotr", "i64.clz", "i64.ctz", "i64.popcnt", "i64.add",
        "i64.sub", "i64.mul", "i64.div_s", "i64.div_u", "i64.rem_s", "i64.rem_u", "i64.and",
        "i64.or", "i64.xor", "i64.shl", "i64.shr_s", "i64.shr_u", "i64.rotl", "i64.rotr",
        "f32.abs", "f32.neg", "f32.ceil", "f32.floor", "f32.trunc", "f32.nearest",
        "f32.sqrt", "f32.add", "f32.sub", "f32.mul", "f32.div", "f32.min", "f32.max",
        "f32.copysign", "f64.abs", "f64.neg", "f64.ceil", "f64.floor", "f64.trunc",
        "f64.nearest", "f64.sqrt", "f64.add", "f64.sub", "f64.mul", "f64.div", "f64.min",
        "f64.max", "f64.copysign", "i32.wrap_i64", "i32.trunc_f32_s", "i32.trunc_f32_u",
        "i32.trunc_f64_s", "i32.trunc_f64_u", "i64.extend_i32_s", "i64.extend_i32_u",
        "i64.trunc_f32_s", "i64.trunc_f32_u", "i64.trunc_f64_s", "i64.trunc_f64_u",
        "f32.convert_i32_s", "f32.convert_i32_u", "f32.convert_i64_s", "f32.convert_i64_u",
        "f32.demote_f64", "f64.convert_i32_s", "f64.convert_i32_u", "f64.convert_i64_s",
        "f64.convert_i64_u", "f64.promote_f32", "i32.reinterpret_f32", "i64.reinterpret_f64",
        "f32.reinterpret_i32", "f64.reinterpret_i64", "i32.extend8_s", "i32.extend16_s",
        "i64.extend8_s", "i64.extend16_s", "i64.extend32_s",
    ];
    NAMES.get(code.wrapping_sub(0x45) as usize).copied().unwrap_or("<numeric>")
}

/// Operand count consumed by an immediate-free numeric instruction; all of
/// them push exactly one result.
pub fn numeric_arity(code: u8) -> usize {
    match code {
        0x45 | 0x50 => 1,
        0x46..=0x4f | 0x51..=0x66 => 2,
        0x67..=0x69 | 0x79..=0x7b | 0x8b..=0x91 | 0x99..=0x9f => 1,
        0x6a..=0x78 | 0x7c..=0x8a | 0x92..=0x98 | 0xa0..=0xa6 => 2,
        _ => 1,
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bt = |bt: &BlockType| match bt {
            BlockType::Empty => String::new(),
            BlockType::Value(v) => format!(" (result {v})"),
            BlockType::Func(i) => format!(" (type {i})"),
        };
        let ma = |m: &MemArg| {
            if m.offset == 0 {
                String::new()
            } else {
                format!(" offset={}", m.offset)
            }
        };
        match self {
            Op::Unreachable => write!(f, "unreachable"),
            Op::Nop => write!(f, "nop"),
            Op::Block(b) => write!(f, "block{}", bt(b)),
            Op::Loop(b) => write!(f, "loop{}", bt(b)),
            Op::If(b) => write!(f, "if{}", bt(b)),
            Op::Else => write!(f, "else"),
            Op::End => write!(f, "end"),
            Op::Br(l) => write!(f, "br {l}"),
            Op::BrIf(l) => write!(f, "br_if {l}"),
            Op::BrTable { targets, default } => {
                write!(f, "br_table")?;
                for t in targets {
                    write!(f, " {t}")?;
                }
                write!(f, " {default}")
            }
            Op::Return => write!(f, "return"),
            Op::Call(i) => write!(f, "call {i}"),
            Op::CallIndirect { type_index, .. } => write!(f, "call_indirect (type {type_index})"),
            Op::Drop => write!(f, "drop"),
            Op::Select => write!(f, "select"),
            Op::LocalGet(i) => write!(f, "local.get {i}"),
            Op::LocalSet(i) => write!(f, "local.set {i}"),
            Op::LocalTee(i) => write!(f, "local.tee {i}"),
            Op::GlobalGet(i) => write!(f, "global.get {i}"),
            Op::GlobalSet(i) => write!(f, "global.set {i}"),
            Op::Load(k, m) => write!(f, "{}{}", k.name(), ma(m)),
            Op::Store(k, m) => write!(f, "{}{}", k.name(), ma(m)),
            Op::MemorySize => write!(f, "memory.size"),
            Op::MemoryGrow => write!(f, "memory.grow"),
            Op::I32Const(v) => write!(f, "i32.const {v}"),
            Op::I64Const(v) => write!(f, "i64.const {v}"),
            Op::F32Const(b) => write!(f, "f32.const {}", f32::from_bits(*b)),
            Op::F64Const(b) => write!(f, "f64.const {}", f64::from_bits(*b)),
            Op::Numeric(c) => write!(f, "{}", numeric_name(*c)),
            Op::Other { opcode, sub, .. } => match sub {
                Some(s) => write!(f, "<0x{opcode:02x} {s}>"),
                None => write!(f, "<0x{opcode:02x}>"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode_all(bytes: &[u8]) -> Vec<Instr> {
        let mut r = Reader::new(bytes);
        let mut out = Vec::new();
        while !r.is_empty() {
            out.push(Instr::decode(&mut r).unwrap());
        }
        out
    }

    #[test]
    fn non_minimal_immediates_keep_their_bytes() {
        // i32.const 64 padded to 5 bytes, then i32.sub
        let bytes = [0x41, 0xc0, 0x80, 0x80, 0x80, 0x00, 0x6b];
        let instrs = decode_all(&bytes);
        assert_eq!(instrs[0].op(), &Op::I32Const(64));
        assert!(instrs[0].raw().is_some());
        assert!(instrs[1].raw().is_none());
        let mut out = Vec::new();
        for i in &instrs {
            i.encode(&mut out);
        }
        assert_eq!(out, bytes);
    }

    #[test]
    fn set_op_drops_original_encoding() {
        let mut instrs = decode_all(&[0x41, 0xc0, 0x80, 0x80, 0x80, 0x00]);
        instrs[0].set_op(Op::I32Const(72));
        let mut out = Vec::new();
        instrs[0].encode(&mut out);
        assert_eq!(out, [0x41, 0xc8, 0x00]);
    }

    #[test]
    fn store8_with_offset() {
        let instrs = decode_all(&[0x3a, 0x00, 0x63]);
        assert_eq!(
            instrs[0].op(),
            &Op::Store(StoreKind::I32As8, MemArg { align: 0, offset: 99 })
        );
        assert_eq!(instrs[0].to_string(), "i32.store8 offset=99");
    }

    #[test]
    fn passthrough_keeps_bytes() {
        // memory.fill 0 and i32.trunc_sat_f32_s
        let bytes = [0xfc, 0x0b, 0x00, 0xfc, 0x00];
        let instrs = decode_all(&bytes);
        assert!(matches!(instrs[0].op(), Op::Other { sub: Some(11), .. }));
        let mut out = Vec::new();
        for i in &instrs {
            i.encode(&mut out);
        }
        assert_eq!(out, bytes);
    }

    #[test]
    fn simd_and_threads_are_named() {
        for (bytes, feature) in [([0xfdu8, 0x00], "simd"), ([0xfe, 0x00], "threads")] {
            let mut r = Reader::new(&bytes);
            match Instr::decode(&mut r) {
                Err(DecodeError::Unsupported { feature: f, offset }) => {
                    assert_eq!(f, feature);
                    assert_eq!(offset, 0);
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn kinds_roundtrip_opcodes() {
        for op in 0x28..=0x35u8 {
            assert_eq!(LoadKind::from_opcode(op).unwrap().opcode(), op);
        }
        for op in 0x36..=0x3eu8 {
            assert_eq!(StoreKind::from_opcode(op).unwrap().opcode(), op);
        }
        assert_eq!(numeric_name(0x6b), "i32.sub");
        assert_eq!(numeric_name(0xc4), "i64.extend32_s");
    }
}
