use super::decode::section_order;
use super::instr::Instr;
use super::leb::{write_name, write_u32};
use super::types::*;
use super::{EncodeError, FunctionBody, WasmModule, MAGIC, VERSION};

fn write_len(out: &mut Vec<u8>, n: usize) {
    write_u32(out, n as u32);
}

fn write_expr(out: &mut Vec<u8>, expr: &[Instr]) {
    for i in expr {
        i.encode(out);
    }
}

fn write_limits(out: &mut Vec<u8>, l: &Limits) {
    match l.max {
        None => {
            out.push(0x00);
            write_u32(out, l.min);
        }
        Some(max) => {
            out.push(0x01);
            write_u32(out, l.min);
            write_u32(out, max);
        }
    }
}

fn write_global_type(out: &mut Vec<u8>, g: &GlobalType) {
    out.push(g.val.byte());
    out.push(u8::from(g.mutable));
}

/// Size-prefixed canonical encoding of a function body. Instructions keep
/// their original bytes when they have them.
pub(crate) fn body_bytes(f: &FunctionBody) -> Vec<u8> {
    let mut body = Vec::new();
    write_len(&mut body, f.locals.len());
    for (n, t) in &f.locals {
        write_u32(&mut body, *n);
        body.push(t.byte());
    }
    for i in &f.instrs {
        i.encode(&mut body);
    }
    let mut out = Vec::with_capacity(body.len() + 5);
    write_len(&mut out, body.len());
    out.extend(body);
    out
}

fn emit_body(out: &mut Vec<u8>, f: &FunctionBody) {
    let canonical = body_bytes(f);
    match &f.original {
        Some(p) if p.fingerprint == canonical => out.extend_from_slice(&p.raw),
        _ => out.extend(canonical),
    }
}

fn write_element(out: &mut Vec<u8>, e: &ElementSegment) {
    write_u32(out, e.flags);
    match (&e.mode, e.flags) {
        (ElementMode::Active { offset, .. }, 0 | 4) => write_expr(out, offset),
        (ElementMode::Active { table, offset }, _) => {
            write_u32(out, *table);
            write_expr(out, offset);
        }
        _ => {}
    }
    if let Some(t) = e.elem_type {
        out.push(t);
    }
    match &e.items {
        ElementItems::Functions(f) => {
            write_len(out, f.len());
            for i in f {
                write_u32(out, *i);
            }
        }
        ElementItems::Exprs(x) => {
            write_len(out, x.len());
            for e in x {
                write_expr(out, e);
            }
        }
    }
}

fn write_data(out: &mut Vec<u8>, d: &DataSegment) {
    write_u32(out, d.flags);
    match &d.mode {
        DataMode::Active { memory, offset } => {
            if d.flags == 2 {
                write_u32(out, *memory);
            }
            write_expr(out, offset);
        }
        DataMode::Passive => {}
    }
    write_len(out, d.bytes.len());
    out.extend_from_slice(&d.bytes);
}

/// Canonical payload of one section of `m`.
pub(crate) fn section_payload(m: &WasmModule, id: u8, custom: Option<usize>) -> Vec<u8> {
    let mut out = Vec::new();
    match id {
        0 => {
            let c = &m.customs[custom.expect("custom section record without index")];
            write_name(&mut out, &c.name);
            out.extend_from_slice(&c.data);
        }
        1 => {
            write_len(&mut out, m.types.len());
            for t in &m.types {
                out.push(0x60);
                write_len(&mut out, t.params.len());
                out.extend(t.params.iter().map(|v| v.byte()));
                write_len(&mut out, t.results.len());
                out.extend(t.results.iter().map(|v| v.byte()));
            }
        }
        2 => {
            write_len(&mut out, m.imports.len());
            for i in &m.imports {
                write_name(&mut out, &i.module);
                write_name(&mut out, &i.field);
                out.push(i.desc.kind().byte());
                match &i.desc {
                    ImportDesc::Func(t) => write_u32(&mut out, *t),
                    ImportDesc::Table(t) => {
                        out.push(t.elem.byte());
                        write_limits(&mut out, &t.limits);
                    }
                    ImportDesc::Memory(l) => write_limits(&mut out, l),
                    ImportDesc::Global(g) => write_global_type(&mut out, g),
                }
            }
        }
        3 => {
            write_len(&mut out, m.functions.len());
            for f in &m.functions {
                write_u32(&mut out, f.type_index);
            }
        }
        4 => {
            write_len(&mut out, m.tables.len());
            for t in &m.tables {
                out.push(t.elem.byte());
                write_limits(&mut out, &t.limits);
            }
        }
        5 => {
            write_len(&mut out, m.memories.len());
            for l in &m.memories {
                write_limits(&mut out, l);
            }
        }
        6 => {
            write_len(&mut out, m.globals.len());
            for g in &m.globals {
                write_global_type(&mut out, &g.ty);
                write_expr(&mut out, &g.init);
            }
        }
        7 => {
            write_len(&mut out, m.exports.len());
            for e in &m.exports {
                write_name(&mut out, &e.name);
                out.push(e.kind.byte());
                write_u32(&mut out, e.index);
            }
        }
        8 => write_u32(&mut out, m.start.unwrap_or(0)),
        9 => {
            write_len(&mut out, m.elements.len());
            for e in &m.elements {
                write_element(&mut out, e);
            }
        }
        10 => {
            write_len(&mut out, m.functions.len());
            for f in &m.functions {
                emit_body(&mut out, f);
            }
        }
        11 => {
            write_len(&mut out, m.data.len());
            for d in &m.data {
                write_data(&mut out, d);
            }
        }
        12 => write_u32(&mut out, m.data_count.unwrap_or(m.data.len() as u32)),
        _ => unreachable!("unknown section id {id}"),
    }
    out
}

fn has_content(m: &WasmModule, id: u8) -> bool {
    match id {
        1 => !m.types.is_empty(),
        2 => !m.imports.is_empty(),
        3 | 10 => !m.functions.is_empty(),
        4 => !m.tables.is_empty(),
        5 => !m.memories.is_empty(),
        6 => !m.globals.is_empty(),
        7 => !m.exports.is_empty(),
        8 => m.start.is_some(),
        9 => !m.elements.is_empty(),
        11 => !m.data.is_empty(),
        12 => m.data_count.is_some(),
        _ => false,
    }
}

fn check_limits(m: &WasmModule) -> Result<(), EncodeError> {
    let limit = u32::MAX as usize;
    let counts = [
        ("types", m.types.len()),
        ("imports", m.imports.len()),
        ("functions", m.functions.len()),
        ("globals", m.globals.len()),
        ("exports", m.exports.len()),
        ("data segments", m.data.len()),
    ];
    for (what, n) in counts {
        if n > limit {
            return Err(EncodeError::Overflow(format!("{n} {what}")));
        }
    }
    if let Some(s) = m.start {
        if s >= m.function_count() {
            return Err(EncodeError::Overflow(format!(
                "start function {s} outside function index space"
            )));
        }
    }
    Ok(())
}

fn emit_section(
    out: &mut Vec<u8>,
    m: &WasmModule,
    id: u8,
    custom: Option<usize>,
    record: Option<&super::SectionRecord>,
) -> Result<(), EncodeError> {
    let payload = section_payload(m, id, custom);
    out.push(id);
    match record {
        Some(rec) if rec.payload.fingerprint == payload => {
            out.extend_from_slice(&rec.size_prefix);
            out.extend_from_slice(&rec.payload.raw);
        }
        _ => {
            if payload.len() > u32::MAX as usize {
                return Err(EncodeError::Overflow(format!(
                    "section {id} is {} bytes",
                    payload.len()
                )));
            }
            write_len(out, payload.len());
            out.extend(payload);
        }
    }
    Ok(())
}

pub(crate) fn encode_module(m: &WasmModule) -> Result<Vec<u8>, EncodeError> {
    check_limits(m)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION);

    let present: Vec<u8> = m.layout.iter().filter(|r| r.id != 0).map(|r| r.id).collect();
    let mut pending: Vec<u8> = [1u8, 2, 3, 4, 5, 6, 7, 8, 9, 12, 10, 11]
        .into_iter()
        .filter(|id| has_content(m, *id) && !present.contains(id))
        .collect();

    let mut customs_seen = 0usize;
    for rec in &m.layout {
        if rec.id != 0 {
            let order = section_order(rec.id);
            while let Some(&next) = pending.first() {
                if section_order(next) >= order {
                    break;
                }
                emit_section(&mut out, m, next, None, None)?;
                pending.remove(0);
            }
        } else {
            customs_seen = customs_seen.max(rec.custom.map_or(0, |c| c + 1));
        }
        if rec.id == 0 && rec.custom.is_some_and(|c| c >= m.customs.len()) {
            continue;
        }
        emit_section(&mut out, m, rec.id, rec.custom, Some(rec))?;
    }
    for id in pending {
        emit_section(&mut out, m, id, None, None)?;
    }
    for i in customs_seen..m.customs.len() {
        emit_section(&mut out, m, 0, Some(i), None)?;
    }
    Ok(out)
}
