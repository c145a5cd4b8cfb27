mod common;

use proptest::prelude::*;
use wasm_canary::wasm::{DecodeError, WasmModule};

#[test]
fn bundled_modules_round_trip_and_validate() {
    let modules = common::bundled_modules();
    assert!(modules.len() >= 16);
    for (case, opt, path) in modules {
        let (bytes, m) = common::load(&path);
        assert_eq!(m.encode().unwrap(), bytes, "{case} {opt}");
        common::validate(&bytes).unwrap();
        assert!(m.exported_function("_start").is_some(), "{case} {opt}");
    }
}

#[test]
fn header_only_module() {
    let bytes = [0x00, 0x61, 0x73, 0x6d, 0x01, 0x00, 0x00, 0x00];
    let m = WasmModule::decode(&bytes).unwrap();
    assert_eq!(m, WasmModule::decode(&bytes).unwrap());
    assert!(m.types.is_empty() && m.functions.is_empty() && m.customs.is_empty());
    assert_eq!(m.encode().unwrap(), bytes);
}

#[test]
fn listing_module_shape() {
    let m = common::fixture("entry_point.wat");
    let main = m.body(0).unwrap();
    let sig = m.function_type(0).unwrap();
    assert_eq!(sig.params.len(), 2);
    assert_eq!(sig.results.len(), 1);
    assert_eq!(main.declared_local_count(), 1);
    assert_eq!(main.local_types(sig).len(), 3);
    let bytes = m.encode().unwrap();
    common::validate(&bytes).unwrap();
    assert_eq!(WasmModule::decode(&bytes).unwrap().encode().unwrap(), bytes);
}

#[test]
fn compiled_case_has_one_mutable_i32_global() {
    let (_, m) = common::load(&common::bundled(
        "cwe121-char-declare-loop",
        wasm_canary::corpus::OptLevel::O1,
    ));
    let mutable: Vec<_> = (0..m.global_count())
        .filter(|g| m.global_type(*g).unwrap().mutable)
        .collect();
    assert_eq!(mutable.len(), 1);
    assert_eq!(
        wasm_canary::frame::detect_sp_global(&m).unwrap(),
        Some(mutable[0])
    );
}

#[test]
fn malformed_inputs_report_offsets() {
    let e = WasmModule::decode(b"\0asm\x02\0\0\0").unwrap_err();
    assert_eq!(e.offset(), 4);
    let e = WasmModule::decode(b"\0asx\x01\0\0\0").unwrap_err();
    assert_eq!(e.offset(), 0);
    // type section claiming 16 bytes with only 2 present
    let e = WasmModule::decode(b"\0asm\x01\0\0\0\x01\x10\x01\x60").unwrap_err();
    assert!(matches!(e, DecodeError::Malformed { .. }));
    assert!(e.offset() >= 8);
    // unterminated LEB in the section size
    let e = WasmModule::decode(b"\0asm\x01\0\0\0\x01\xff\xff").unwrap_err();
    assert!(e.offset() >= 9);
}

#[test]
fn unsupported_opcode_is_named() {
    let bytes = wat::parse_str(
        r#"(module (memory 1 1 shared)
             (func (result i32) i32.const 0 i32.atomic.load))"#,
    )
    .unwrap();
    match WasmModule::decode(&bytes) {
        Err(DecodeError::Unsupported { feature, .. }) => assert!(feature.contains("threads")),
        other => panic!("{other:?}"),
    }
}

fn arb_module() -> impl Strategy<Value = String> {
    let instr = prop_oneof![
        (any::<i32>()).prop_map(|v| format!("i32.const {v} drop")),
        (any::<i64>()).prop_map(|v| format!("i64.const {v} drop")),
        (0u32..4096, any::<u8>()).prop_map(|(o, v)| format!(
            "i32.const 0 i32.const {v} i32.store8 offset={o}"
        )),
        (0u32..4096).prop_map(|o| format!("i32.const 0 i64.load offset={o} drop")),
        Just("global.get 0 i32.const 16 i32.sub global.set 0".to_string()),
        Just("block nop end loop nop end".to_string()),
        Just("f32.const 1.5 f32.sqrt drop".to_string()),
        Just("i32.const 1 if nop else nop end".to_string()),
    ];
    (
        prop::collection::vec(prop::collection::vec(instr, 0..12), 1..5),
        prop::collection::vec(any::<u8>(), 0..32),
        any::<bool>(),
    )
        .prop_map(|(funcs, data, custom)| {
            let mut s = String::from(
                "(module (memory (export \"memory\") 1) (global (mut i32) (i32.const 1024))\n",
            );
            for (i, body) in funcs.iter().enumerate() {
                s.push_str(&format!("(func $f{i} (export \"f{i}\") (local i32 i64) {})\n", body.join(" ")));
            }
            let hex: String = data.iter().map(|b| format!("\\{b:02x}")).collect();
            s.push_str(&format!("(data (i32.const 16) \"{hex}\")\n"));
            if custom {
                s.push_str("(@custom \"note\" \"payload\")\n");
            }
            s.push(')');
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generated_modules_round_trip(src in arb_module()) {
        let bytes = wat::parse_str(&src).unwrap();
        let m = WasmModule::decode(&bytes).unwrap();
        prop_assert_eq!(m.encode().unwrap(), bytes);
    }

    #[test]
    fn truncation_never_panics(src in arb_module(), cut in 0.0f64..1.0) {
        let bytes = wat::parse_str(&src).unwrap();
        let n = (bytes.len() as f64 * cut) as usize;
        if let Err(e) = WasmModule::decode(&bytes[..n]) {
            prop_assert!(e.offset() <= n);
        }
    }
}
