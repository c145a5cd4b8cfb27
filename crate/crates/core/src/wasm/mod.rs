//! WebAssembly core binary model: decoding, byte-exact re-encoding and a
//! small reference interpreter.
//!
//! Every decoded item remembers how it was encoded. Re-encoding an untouched
//! module reproduces the input bytes exactly; modified functions and
//! sections are re-encoded canonically while untouched neighbours keep their
//! original bytes.

mod decode;
mod encode;
pub mod instr;
pub mod interp;
pub mod leb;
pub mod types;

use std::collections::HashMap;

pub use instr::{Instr, LoadKind, MemArg, Op, StoreKind};
pub use types::*;

pub const MAGIC: [u8; 4] = [0x00, 0x61, 0x73, 0x6d];
pub const VERSION: [u8; 4] = [0x01, 0x00, 0x00, 0x00];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("malformed binary at offset {offset:#x}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported feature at offset {offset:#x}: {feature}")]
    Unsupported { offset: usize, feature: String },
}

impl DecodeError {
    pub fn offset(&self) -> usize {
        match self {
            DecodeError::Malformed { offset, .. } | DecodeError::Unsupported { offset, .. } => {
                *offset
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("encoding overflow: {0}")]
    Overflow(String),
}

/// Original bytes of an item together with the canonical encoding of its
/// decoded form at decode time. If the canonical encoding is unchanged at
/// encode time, the original bytes are emitted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub(crate) struct Preserved {
    pub raw: Vec<u8>,
    pub fingerprint: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SectionRecord {
    pub id: u8,
    /// Index into `WasmModule::customs` for custom sections.
    pub custom: Option<usize>,
    pub size_prefix: Vec<u8>,
    pub payload: Preserved,
}

/// A defined function: its type and its code body.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionBody {
    pub type_index: u32,
    /// Declared locals as (count, type) runs, beyond the parameters.
    pub locals: Vec<(u32, ValType)>,
    /// Flat instruction sequence, including the final `end`.
    pub instrs: Vec<Instr>,
    pub(crate) original: Option<Preserved>,
}

impl FunctionBody {
    pub fn new(type_index: u32, locals: Vec<(u32, ValType)>, instrs: Vec<Instr>) -> Self {
        FunctionBody {
            type_index,
            locals,
            instrs,
            original: None,
        }
    }

    pub fn declared_local_count(&self) -> u64 {
        self.locals.iter().map(|(n, _)| u64::from(*n)).sum()
    }

    /// Types of all locals, parameters first.
    pub fn local_types(&self, sig: &FuncType) -> Vec<ValType> {
        let mut v = sig.params.clone();
        for (n, t) in &self.locals {
            v.extend(std::iter::repeat(*t).take(*n as usize));
        }
        v
    }

    /// Appends one declared local and returns its index.
    pub fn add_local(&mut self, sig: &FuncType, ty: ValType) -> u32 {
        let index = sig.params.len() as u32 + self.declared_local_count() as u32;
        match self.locals.last_mut() {
            Some((n, t)) if *t == ty => *n += 1,
            _ => self.locals.push((1, ty)),
        }
        index
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WasmModule {
    pub types: Vec<FuncType>,
    pub imports: Vec<Import>,
    /// Defined functions (function and code sections zipped together).
    pub functions: Vec<FunctionBody>,
    pub tables: Vec<TableType>,
    pub memories: Vec<Limits>,
    pub globals: Vec<Global>,
    pub exports: Vec<Export>,
    pub start: Option<u32>,
    pub elements: Vec<ElementSegment>,
    pub data_count: Option<u32>,
    pub data: Vec<DataSegment>,
    pub customs: Vec<CustomSection>,
    pub(crate) layout: Vec<SectionRecord>,
}

impl WasmModule {
    pub fn decode(bytes: &[u8]) -> Result<WasmModule, DecodeError> {
        decode::decode_module(bytes)
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        encode::encode_module(self)
    }

    pub fn imported_function_count(&self) -> u32 {
        self.imports
            .iter()
            .filter(|i| matches!(i.desc, ImportDesc::Func(_)))
            .count() as u32
    }

    pub fn imported_global_count(&self) -> u32 {
        self.imports
            .iter()
            .filter(|i| matches!(i.desc, ImportDesc::Global(_)))
            .count() as u32
    }

    pub fn function_count(&self) -> u32 {
        self.imported_function_count() + self.functions.len() as u32
    }

    pub fn global_count(&self) -> u32 {
        self.imported_global_count() + self.globals.len() as u32
    }

    pub fn memory_count(&self) -> u32 {
        self.imports
            .iter()
            .filter(|i| matches!(i.desc, ImportDesc::Memory(_)))
            .count() as u32
            + self.memories.len() as u32
    }

    pub fn table_count(&self) -> u32 {
        self.imports
            .iter()
            .filter(|i| matches!(i.desc, ImportDesc::Table(_)))
            .count() as u32
            + self.tables.len() as u32
    }

    /// Type of a global in the global index space.
    pub fn global_type(&self, index: u32) -> Option<GlobalType> {
        let imported = self.imported_global_count();
        if index < imported {
            self.imports
                .iter()
                .filter_map(|i| match &i.desc {
                    ImportDesc::Global(g) => Some(*g),
                    _ => None,
                })
                .nth(index as usize)
        } else {
            self.globals.get((index - imported) as usize).map(|g| g.ty)
        }
    }

    /// Type index of a function in the function index space.
    pub fn function_type_index(&self, index: u32) -> Option<u32> {
        let imported = self.imported_function_count();
        if index < imported {
            self.imports
                .iter()
                .filter_map(|i| match &i.desc {
                    ImportDesc::Func(t) => Some(*t),
                    _ => None,
                })
                .nth(index as usize)
        } else {
            self.functions
                .get((index - imported) as usize)
                .map(|f| f.type_index)
        }
    }

    pub fn function_type(&self, index: u32) -> Option<&FuncType> {
        self.function_type_index(index)
            .and_then(|t| self.types.get(t as usize))
    }

    /// Defined function body for an index in the function index space.
    pub fn body(&self, index: u32) -> Option<&FunctionBody> {
        index
            .checked_sub(self.imported_function_count())
            .and_then(|i| self.functions.get(i as usize))
    }

    pub fn body_mut(&mut self, index: u32) -> Option<&mut FunctionBody> {
        let imported = self.imported_function_count();
        index
            .checked_sub(imported)
            .and_then(move |i| self.functions.get_mut(i as usize))
    }

    /// The imported function at `index`, if that index is an import.
    pub fn function_import(&self, index: u32) -> Option<&Import> {
        self.imports
            .iter()
            .filter(|i| matches!(i.desc, ImportDesc::Func(_)))
            .nth(index as usize)
    }

    pub fn export(&self, name: &str) -> Option<&Export> {
        self.exports.iter().find(|e| e.name == name)
    }

    pub fn exported_function(&self, name: &str) -> Option<u32> {
        self.export(name)
            .filter(|e| e.kind == ExternalKind::Func)
            .map(|e| e.index)
    }

    /// Index of a type equal to `ty`, appending it to the type section if
    /// no such type exists. Appending never shifts existing indices.
    pub fn intern_type(&mut self, ty: FuncType) -> u32 {
        if let Some(i) = self.types.iter().position(|t| *t == ty) {
            return i as u32;
        }
        self.types.push(ty);
        self.types.len() as u32 - 1
    }

    /// Function names from the `name` custom section, plus import field
    /// names for imported functions that have no entry there.
    pub fn function_names(&self) -> HashMap<u32, String> {
        let mut names = HashMap::new();
        for (i, imp) in self
            .imports
            .iter()
            .filter(|i| matches!(i.desc, ImportDesc::Func(_)))
            .enumerate()
        {
            names.insert(i as u32, imp.field.clone());
        }
        if let Some(section) = self.customs.iter().find(|c| c.name == "name") {
            if let Ok(parsed) = decode::parse_function_names(&section.data) {
                names.extend(parsed);
            }
        }
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(src: &str) -> (Vec<u8>, WasmModule) {
        let bytes = wat::parse_str(src).unwrap();
        let m = WasmModule::decode(&bytes).unwrap();
        (bytes, m)
    }

    #[test]
    fn untouched_module_encodes_identically() {
        let (bytes, m) = parse(
            r#"(module
                 (type (func (param i32) (result i32)))
                 (import "env" "f" (func $f (type 0)))
                 (table 2 funcref)
                 (memory 1 4)
                 (global $g (mut i32) (i32.const 1024))
                 (func $h (export "h") (type 0) local.get 0 call $f)
                 (elem (i32.const 0) $f $h)
                 (data (i32.const 8) "abc")
                 (start $s)
                 (func $s))"#,
        );
        assert_eq!(m.encode().unwrap(), bytes);
        assert_eq!(m.imported_function_count(), 1);
        assert_eq!(m.function_count(), 3);
        assert_eq!(m.exported_function("h"), Some(1));
        assert_eq!(m.function_type(1).unwrap().params, vec![ValType::I32]);
        assert!(m.body(0).is_none());
        assert!(m.global_type(0).unwrap().mutable);
    }

    #[test]
    fn edited_body_reencodes() {
        let (_, mut m) = parse(r#"(module (func (export "f") (result i32) i32.const 1))"#);
        let body = m.body_mut(0).unwrap();
        body.instrs[0] = Instr::new(Op::I32Const(-300));
        let sig = m.types[0].clone();
        let local = m.body_mut(0).unwrap().add_local(&sig, ValType::I64);
        assert_eq!(local, 0);
        let out = m.encode().unwrap();
        let back = WasmModule::decode(&out).unwrap();
        assert_eq!(back.body(0).unwrap().instrs[0].op(), &Op::I32Const(-300));
        assert_eq!(back.body(0).unwrap().locals, vec![(1, ValType::I64)]);
        assert!(wasmparser::Validator::new().validate_all(&out).is_ok());
    }

    #[test]
    fn names_come_from_the_name_section() {
        let (bytes, m) = parse(r#"(module (func $alpha) (func $beta))"#);
        let names = m.function_names();
        assert_eq!(names.get(&0).map(String::as_str), Some("alpha"));
        assert_eq!(names.get(&1).map(String::as_str), Some("beta"));
        assert_eq!(m.encode().unwrap(), bytes);
    }

    #[test]
    fn interned_types_are_shared() {
        let mut m = WasmModule::default();
        let a = m.intern_type(FuncType {
            params: vec![ValType::I32],
            results: vec![],
        });
        let b = m.intern_type(FuncType {
            params: vec![ValType::I32],
            results: vec![],
        });
        assert_eq!(a, b);
        assert_eq!(m.types.len(), 1);
    }

    #[test]
    fn bad_magic_and_version() {
        assert_eq!(WasmModule::decode(b"\0as").unwrap_err().offset(), 0);
        assert_eq!(WasmModule::decode(b"\0asm\x0d\0\x01\0").unwrap_err().offset(), 4);
    }
}
