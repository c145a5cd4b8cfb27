mod common;

use wasm_canary::corpus::OptLevel;
use wasm_canary::frame::{self, Severity};

#[test]
fn listing_frame_64_escapes_at_99() {
    let m = common::fixture("listing_frame64.wat");
    let an = frame::analyze_module(&m).unwrap();
    assert_eq!(an.sp_global, Some(0));
    assert_eq!(an.frames.frames.len(), 1);
    assert_eq!(an.frames.frames[0].frame_size, 64);
    let esc: Vec<_> = an.escapes.escapes().collect();
    assert_eq!(esc.len(), 1);
    assert_eq!((esc[0].effective_offset, esc[0].width), (99, 1));
}

#[test]
fn frame_16_store_32_beyond() {
    let m = common::fixture("frame16_store32.wat");
    let an = frame::analyze_module(&m).unwrap();
    let f = &an.frames.frames[0];
    assert_eq!(f.frame_size, 16);
    let esc: Vec<_> = an.escapes.escapes().collect();
    assert_eq!(esc.len(), 1);
    assert_eq!(esc[0].effective_offset, 32);
    assert_eq!(esc[0].width, 8);
    assert!(esc[0].effective_offset + esc[0].width as i64 > f.frame_size as i64);
}

#[test]
fn frameless_listing_has_no_frames() {
    let m = common::fixture("entry_point.wat");
    let an = frame::analyze_module(&m).unwrap();
    assert_eq!(an.sp_global, None);
    assert!(an.frames.frames.is_empty());
    assert!(an.escapes.findings.is_empty());
}

#[test]
fn detector_agrees_with_idiom_scan_on_corpus() {
    for (case, opt, path) in common::bundled_modules() {
        let (bytes, m) = common::load(&path);
        let an = frame::analyze_module(&m).unwrap();
        let sp = an.sp_global.expect("compiled modules use a stack pointer");
        let mut detected: Vec<(u32, u32)> = an
            .frames
            .frames
            .iter()
            .map(|f| (f.function, f.frame_size))
            .collect();
        detected.sort();
        let mut literal = common::idiom_frames(&bytes, sp);
        literal.sort();
        if opt == OptLevel::O1 {
            assert_eq!(detected, literal, "{case} {opt}");
        } else {
            assert!(literal.iter().all(|f| detected.contains(f)), "{case} {opt}");
        }
        for f in &an.frames.frames {
            let body = m.body(f.function).unwrap();
            let c = &body.instrs[f.prologue_constant.instr];
            assert_eq!(
                c.op(),
                &wasm_canary::wasm::Op::I32Const(f.frame_size as i32),
                "{case} {opt}"
            );
        }
    }
}

#[test]
fn corpus_escapes_and_safe_controls() {
    let escapes = |case: &str| {
        let (_, m) = common::load(&common::bundled(case, OptLevel::O1));
        frame::analyze_module(&m).unwrap()
    };
    let an = escapes("cwe121-char-declare-loop");
    assert_eq!(an.frames.frames.iter().map(|f| f.frame_size).collect::<Vec<_>>(), [64]);
    let e: Vec<_> = an.escapes.escapes().collect();
    assert_eq!((e[0].effective_offset, e[0].width), (99, 1));

    assert!(escapes("safe-char-declare-loop").escapes.findings.is_empty());
    for (case, _, path) in common::bundled_modules() {
        if case.starts_with("safe-") {
            let (_, m) = common::load(&path);
            let an = frame::analyze_module(&m).unwrap();
            assert_eq!(an.escapes.escapes().count(), 0, "{case}");
            assert!(an
                .escapes
                .findings
                .iter()
                .all(|f| f.severity == Severity::TouchesFrameTopWord));
        }
    }
}
