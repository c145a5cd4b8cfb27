use std::collections::HashMap;

use super::encode;
use super::instr::{Instr, Op};
use super::leb::Reader;
use super::types::*;
use super::{DecodeError, FunctionBody, Preserved, SectionRecord, WasmModule, MAGIC, VERSION};

/// Position of a known section id in the required ordering.
pub(crate) fn section_order(id: u8) -> u8 {
    match id {
        1..=9 => id,
        12 => 10,
        10 => 11,
        11 => 12,
        _ => u8::MAX,
    }
}

pub(crate) fn decode_module(bytes: &[u8]) -> Result<WasmModule, DecodeError> {
    if bytes.len() < 8 || bytes[0..4] != MAGIC {
        return Err(DecodeError::Malformed {
            offset: 0,
            reason: "missing wasm magic header".into(),
        });
    }
    if bytes[4..8] != VERSION {
        return Err(DecodeError::Malformed {
            offset: 4,
            reason: format!("unsupported binary version {:02x?}", &bytes[4..8]),
        });
    }

    let mut m = WasmModule::default();
    let mut r = Reader::with_base(&bytes[8..], 8);
    let mut last_order = 0u8;
    let mut function_types: Vec<u32> = Vec::new();
    let mut saw_code = false;

    while !r.is_empty() {
        let header_at = r.offset();
        let id = r.byte()?;
        let size_start = r.pos();
        let size = r.u32()? as usize;
        let size_prefix = r.slice(size_start, r.pos()).to_vec();
        let payload_at = r.offset();
        let payload = r.take(size)?;
        let mut sr = Reader::with_base(payload, payload_at);

        let mut record = SectionRecord {
            id,
            custom: None,
            size_prefix,
            payload: Preserved {
                raw: payload.to_vec(),
                fingerprint: Vec::new(),
            },
        };

        if id != 0 {
            let order = section_order(id);
            if order == u8::MAX {
                return Err(DecodeError::Unsupported {
                    offset: header_at,
                    feature: format!("section id {id}"),
                });
            }
            if order <= last_order {
                return Err(DecodeError::Malformed {
                    offset: header_at,
                    reason: format!("section {id} out of order or duplicated"),
                });
            }
            last_order = order;
        }

        match id {
            0 => {
                let name = sr.name()?;
                let data = payload[sr.pos()..].to_vec();
                sr.take(sr.remaining())?;
                record.custom = Some(m.customs.len());
                m.customs.push(CustomSection { name, data });
            }
            1 => {
                for _ in 0..sr.u32()? {
                    m.types.push(read_func_type(&mut sr)?);
                }
            }
            2 => {
                for _ in 0..sr.u32()? {
                    let module = sr.name()?;
                    let field = sr.name()?;
                    let at = sr.offset();
                    let desc = match sr.byte()? {
                        0x00 => {
                            let t = sr.u32()?;
                            check_index(t, m.types.len() as u32, "type", sr.offset())?;
                            ImportDesc::Func(t)
                        }
                        0x01 => ImportDesc::Table(read_table_type(&mut sr)?),
                        0x02 => ImportDesc::Memory(read_limits(&mut sr)?),
                        0x03 => ImportDesc::Global(read_global_type(&mut sr)?),
                        k => {
                            return Err(DecodeError::Malformed {
                                offset: at,
                                reason: format!("unknown import kind {k}"),
                            })
                        }
                    };
                    m.imports.push(Import { module, field, desc });
                }
            }
            3 => {
                for _ in 0..sr.u32()? {
                    let at = sr.offset();
                    let t = sr.u32()?;
                    check_index(t, m.types.len() as u32, "type", at)?;
                    function_types.push(t);
                }
            }
            4 => {
                for _ in 0..sr.u32()? {
                    m.tables.push(read_table_type(&mut sr)?);
                }
            }
            5 => {
                for _ in 0..sr.u32()? {
                    m.memories.push(read_limits(&mut sr)?);
                }
            }
            6 => {
                for _ in 0..sr.u32()? {
                    let ty = read_global_type(&mut sr)?;
                    let init = read_const_expr(&mut sr)?;
                    m.globals.push(Global { ty, init });
                }
            }
            7 => {
                let funcs = m.imported_function_count() + function_types.len() as u32;
                for _ in 0..sr.u32()? {
                    let name = sr.name()?;
                    let at = sr.offset();
                    let kind = ExternalKind::from_byte(sr.byte()?).ok_or_else(|| {
                        DecodeError::Malformed {
                            offset: at,
                            reason: "unknown export kind".into(),
                        }
                    })?;
                    let index = sr.u32()?;
                    let limit = match kind {
                        ExternalKind::Func => funcs,
                        ExternalKind::Table => m.table_count(),
                        ExternalKind::Memory => m.memory_count(),
                        ExternalKind::Global => m.global_count(),
                    };
                    check_index(index, limit, "export", at)?;
                    m.exports.push(Export { name, kind, index });
                }
            }
            8 => {
                let at = sr.offset();
                let f = sr.u32()?;
                check_index(
                    f,
                    m.imported_function_count() + function_types.len() as u32,
                    "function",
                    at,
                )?;
                m.start = Some(f);
            }
            9 => {
                for _ in 0..sr.u32()? {
                    m.elements.push(read_element(&mut sr)?);
                }
            }
            12 => m.data_count = Some(sr.u32()?),
            10 => {
                saw_code = true;
                let at = sr.offset();
                let count = sr.u32()?;
                if count as usize != function_types.len() {
                    return Err(DecodeError::Malformed {
                        offset: at,
                        reason: format!(
                            "code section has {count} bodies, function section declares {}",
                            function_types.len()
                        ),
                    });
                }
                let imported = m.imported_function_count();
                let ctx = ValidationCtx::new(&m, &function_types);
                let mut bodies = Vec::with_capacity(function_types.len());
                for (i, &type_index) in function_types.iter().enumerate() {
                    bodies.push(read_body(&mut sr, type_index, &ctx, imported + i as u32)?);
                }
                m.functions = bodies;
            }
            11 => {
                for _ in 0..sr.u32()? {
                    m.data.push(read_data(&mut sr)?);
                }
            }
            _ => unreachable!(),
        }

        if !sr.is_empty() {
            return Err(DecodeError::Malformed {
                offset: sr.offset(),
                reason: format!("section {id} has {} trailing bytes", sr.remaining()),
            });
        }
        m.layout.push(record);
    }

    if !saw_code && !function_types.is_empty() {
        return Err(DecodeError::Malformed {
            offset: bytes.len(),
            reason: "function section without code section".into(),
        });
    }
    if let Some(n) = m.data_count {
        if n as usize != m.data.len() {
            return Err(DecodeError::Malformed {
                offset: bytes.len(),
                reason: "data count does not match data section".into(),
            });
        }
    }

    // Fingerprints: canonical encodings of what was decoded.
    let fingerprints: Vec<Vec<u8>> = m
        .layout
        .iter()
        .map(|rec| encode::section_payload(&m, rec.id, rec.custom))
        .collect();
    for (rec, fp) in m.layout.iter_mut().zip(fingerprints) {
        rec.payload.fingerprint = fp;
    }
    Ok(m)
}

fn check_index(index: u32, limit: u32, what: &str, offset: usize) -> Result<(), DecodeError> {
    if index >= limit {
        return Err(DecodeError::Malformed {
            offset,
            reason: format!("{what} index {index} out of range (limit {limit})"),
        });
    }
    Ok(())
}

fn read_val_type(r: &mut Reader<'_>) -> Result<ValType, DecodeError> {
    let at = r.offset();
    let b = r.byte()?;
    ValType::from_byte(b).ok_or_else(|| DecodeError::Malformed {
        offset: at,
        reason: format!("invalid value type 0x{b:02x}"),
    })
}

fn read_func_type(r: &mut Reader<'_>) -> Result<FuncType, DecodeError> {
    let at = r.offset();
    let form = r.byte()?;
    if form != 0x60 {
        return Err(DecodeError::Unsupported {
            offset: at,
            feature: format!("type form 0x{form:02x}"),
        });
    }
    let mut params = Vec::new();
    for _ in 0..r.u32()? {
        params.push(read_val_type(r)?);
    }
    let mut results = Vec::new();
    for _ in 0..r.u32()? {
        results.push(read_val_type(r)?);
    }
    Ok(FuncType { params, results })
}

fn read_limits(r: &mut Reader<'_>) -> Result<Limits, DecodeError> {
    let at = r.offset();
    match r.byte()? {
        0x00 => Ok(Limits {
            min: r.u32()?,
            max: None,
        }),
        0x01 => Ok(Limits {
            min: r.u32()?,
            max: Some(r.u32()?),
        }),
        0x02 | 0x03 => Err(DecodeError::Unsupported {
            offset: at,
            feature: "threads (shared memory)".into(),
        }),
        f => Err(DecodeError::Unsupported {
            offset: at,
            feature: format!("limits flags 0x{f:02x} (memory64)"),
        }),
    }
}

fn read_table_type(r: &mut Reader<'_>) -> Result<TableType, DecodeError> {
    let elem = read_val_type(r)?;
    let limits = read_limits(r)?;
    Ok(TableType { elem, limits })
}

fn read_global_type(r: &mut Reader<'_>) -> Result<GlobalType, DecodeError> {
    let val = read_val_type(r)?;
    let at = r.offset();
    let mutable = match r.byte()? {
        0 => false,
        1 => true,
        b => {
            return Err(DecodeError::Malformed {
                offset: at,
                reason: format!("invalid mutability {b}"),
            })
        }
    };
    Ok(GlobalType { val, mutable })
}

fn read_const_expr(r: &mut Reader<'_>) -> Result<Vec<Instr>, DecodeError> {
    let mut out = Vec::new();
    loop {
        let at = r.offset();
        let ins = Instr::decode(r)?;
        if ins.op().opens_block() {
            return Err(DecodeError::Malformed {
                offset: at,
                reason: "control instruction in constant expression".into(),
            });
        }
        let end = matches!(ins.op(), Op::End);
        out.push(ins);
        if end {
            return Ok(out);
        }
    }
}

fn read_func_indices(r: &mut Reader<'_>) -> Result<Vec<u32>, DecodeError> {
    let n = r.u32()?;
    let mut v = Vec::with_capacity(n.min(1 << 16) as usize);
    for _ in 0..n {
        v.push(r.u32()?);
    }
    Ok(v)
}

fn read_exprs(r: &mut Reader<'_>) -> Result<Vec<Vec<Instr>>, DecodeError> {
    let n = r.u32()?;
    let mut v = Vec::new();
    for _ in 0..n {
        v.push(read_const_expr(r)?);
    }
    Ok(v)
}

fn read_element(r: &mut Reader<'_>) -> Result<ElementSegment, DecodeError> {
    let at = r.offset();
    let flags = r.u32()?;
    let seg = match flags {
        0 => {
            let offset = read_const_expr(r)?;
            ElementSegment {
                flags,
                mode: ElementMode::Active { table: 0, offset },
                elem_type: None,
                items: ElementItems::Functions(read_func_indices(r)?),
            }
        }
        1 | 3 => {
            let elem_type = Some(r.byte()?);
            ElementSegment {
                flags,
                mode: if flags == 1 {
                    ElementMode::Passive
                } else {
                    ElementMode::Declarative
                },
                elem_type,
                items: ElementItems::Functions(read_func_indices(r)?),
            }
        }
        2 => {
            let table = r.u32()?;
            let offset = read_const_expr(r)?;
            let elem_type = Some(r.byte()?);
            ElementSegment {
                flags,
                mode: ElementMode::Active { table, offset },
                elem_type,
                items: ElementItems::Functions(read_func_indices(r)?),
            }
        }
        4 => {
            let offset = read_const_expr(r)?;
            ElementSegment {
                flags,
                mode: ElementMode::Active { table: 0, offset },
                elem_type: None,
                items: ElementItems::Exprs(read_exprs(r)?),
            }
        }
        5 | 7 => {
            let elem_type = Some(r.byte()?);
            ElementSegment {
                flags,
                mode: if flags == 5 {
                    ElementMode::Passive
                } else {
                    ElementMode::Declarative
                },
                elem_type,
                items: ElementItems::Exprs(read_exprs(r)?),
            }
        }
        6 => {
            let table = r.u32()?;
            let offset = read_const_expr(r)?;
            let elem_type = Some(r.byte()?);
            ElementSegment {
                flags,
                mode: ElementMode::Active { table, offset },
                elem_type,
                items: ElementItems::Exprs(read_exprs(r)?),
            }
        }
        _ => {
            return Err(DecodeError::Malformed {
                offset: at,
                reason: format!("invalid element segment flags {flags}"),
            })
        }
    };
    Ok(seg)
}

fn read_data(r: &mut Reader<'_>) -> Result<DataSegment, DecodeError> {
    let at = r.offset();
    let flags = r.u32()?;
    let mode = match flags {
        0 => DataMode::Active {
            memory: 0,
            offset: read_const_expr(r)?,
        },
        1 => DataMode::Passive,
        2 => {
            let memory = r.u32()?;
            DataMode::Active {
                memory,
                offset: read_const_expr(r)?,
            }
        }
        _ => {
            return Err(DecodeError::Malformed {
                offset: at,
                reason: format!("invalid data segment flags {flags}"),
            })
        }
    };
    let len = r.u32()? as usize;
    let bytes = r.take(len)?.to_vec();
    Ok(DataSegment { flags, mode, bytes })
}

/// Index-space sizes needed to validate code bodies.
struct ValidationCtx<'m> {
    types: &'m [FuncType],
    functions: u32,
    globals: u32,
    memories: u32,
    tables: u32,
    function_types: Vec<u32>,
}

impl<'m> ValidationCtx<'m> {
    fn new(m: &'m WasmModule, defined: &[u32]) -> Self {
        let mut function_types: Vec<u32> = m
            .imports
            .iter()
            .filter_map(|i| match i.desc {
                ImportDesc::Func(t) => Some(t),
                _ => None,
            })
            .collect();
        function_types.extend_from_slice(defined);
        ValidationCtx {
            types: &m.types,
            functions: function_types.len() as u32,
            globals: m.global_count(),
            memories: m.memory_count(),
            tables: m.table_count(),
            function_types,
        }
    }
}

fn read_body(
    r: &mut Reader<'_>,
    type_index: u32,
    ctx: &ValidationCtx<'_>,
    func_index: u32,
) -> Result<FunctionBody, DecodeError> {
    let raw_start = r.pos();
    let size = r.u32()? as usize;
    let body_at = r.offset();
    let body = r.take(size)?;
    let raw = r.slice(raw_start, r.pos()).to_vec();
    let mut br = Reader::with_base(body, body_at);

    let mut locals = Vec::new();
    let mut total: u64 = 0;
    for _ in 0..br.u32()? {
        let at = br.offset();
        let n = br.u32()?;
        total += u64::from(n);
        if total > u64::from(u32::MAX) {
            return Err(DecodeError::Malformed {
                offset: at,
                reason: "too many locals".into(),
            });
        }
        locals.push((n, read_val_type(&mut br)?));
    }
    let sig = &ctx.types[type_index as usize];
    let local_count = sig.params.len() as u64 + total;

    let mut instrs = Vec::new();
    // Open control constructs; `true` for `if` blocks that may take `else`.
    let mut control: Vec<bool> = Vec::new();
    loop {
        if br.is_empty() {
            return Err(DecodeError::Malformed {
                offset: br.offset(),
                reason: format!("function {func_index} body ends without `end`"),
            });
        }
        let at = br.offset();
        let ins = Instr::decode(&mut br)?;
        validate_instr(ins.op(), ctx, local_count, control.len() as u32, at)?;
        match ins.op() {
            Op::Block(_) | Op::Loop(_) => control.push(false),
            Op::If(_) => control.push(true),
            Op::Else => match control.last_mut() {
                Some(is_if @ true) => *is_if = false,
                _ => {
                    return Err(DecodeError::Malformed {
                        offset: at,
                        reason: "`else` outside of `if`".into(),
                    })
                }
            },
            Op::End => {
                if control.pop().is_none() {
                    instrs.push(ins);
                    break;
                }
            }
            _ => {}
        }
        instrs.push(ins);
    }
    if !br.is_empty() {
        return Err(DecodeError::Malformed {
            offset: br.offset(),
            reason: format!("function {func_index} has bytes after its final `end`"),
        });
    }

    let mut f = FunctionBody::new(type_index, locals, instrs);
    let fingerprint = encode::body_bytes(&f);
    f.original = Some(Preserved { raw, fingerprint });
    Ok(f)
}

fn validate_instr(
    op: &Op,
    ctx: &ValidationCtx<'_>,
    local_count: u64,
    depth: u32,
    at: usize,
) -> Result<(), DecodeError> {
    let bad = |reason: String| DecodeError::Malformed { offset: at, reason };
    let block_type = |bt: &BlockType| match bt {
        BlockType::Func(t) if *t as usize >= ctx.types.len() => {
            Err(bad(format!("block type index {t} out of range")))
        }
        _ => Ok(()),
    };
    let label = |l: u32| {
        if l > depth {
            Err(bad(format!("branch depth {l} exceeds nesting {depth}")))
        } else {
            Ok(())
        }
    };
    match op {
        Op::Block(bt) | Op::Loop(bt) | Op::If(bt) => block_type(bt)?,
        Op::Br(l) | Op::BrIf(l) => label(*l)?,
        Op::BrTable { targets, default } => {
            for t in targets {
                label(*t)?;
            }
            label(*default)?;
        }
        Op::Call(f) => {
            if *f >= ctx.functions {
                return Err(bad(format!("function index {f} out of range")));
            }
            debug_assert!((ctx.function_types[*f as usize] as usize) < ctx.types.len());
        }
        Op::CallIndirect { type_index, table } => {
            if *type_index as usize >= ctx.types.len() {
                return Err(bad(format!("type index {type_index} out of range")));
            }
            if *table >= ctx.tables {
                return Err(bad(format!("table index {table} out of range")));
            }
        }
        Op::LocalGet(i) | Op::LocalSet(i) | Op::LocalTee(i) => {
            if u64::from(*i) >= local_count {
                return Err(bad(format!("local index {i} out of range")));
            }
        }
        Op::GlobalGet(g) | Op::GlobalSet(g) => {
            if *g >= ctx.globals {
                return Err(bad(format!("global index {g} out of range")));
            }
        }
        Op::Load(..) | Op::Store(..) | Op::MemorySize | Op::MemoryGrow => {
            if ctx.memories == 0 {
                return Err(bad("memory instruction without a memory".into()));
            }
        }
        _ => {}
    }
    Ok(())
}

/// Function-name subsection (id 1) of a `name` custom section.
pub(crate) fn parse_function_names(data: &[u8]) -> Result<HashMap<u32, String>, DecodeError> {
    let mut r = Reader::new(data);
    let mut names = HashMap::new();
    while !r.is_empty() {
        let id = r.byte()?;
        let size = r.u32()? as usize;
        let sub = r.take(size)?;
        if id == 1 {
            let mut sr = Reader::new(sub);
            for _ in 0..sr.u32()? {
                let idx = sr.u32()?;
                let name = sr.name()?;
                names.insert(idx, name);
            }
        }
    }
    Ok(names)
}
