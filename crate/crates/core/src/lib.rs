//! Stack-frame analysis, canary hardening and differential testing for
//! WebAssembly binaries produced by C compilers.

pub mod wasm;
pub mod frame;
pub mod canary;
pub mod corpus;
pub mod harness;
pub mod cli;
