//! Command-line front end: `analyze`, `harden`, `diff`, `report`,
//! `corpus-build` and `exec`.
//!
//! Exit codes: 0 success, 1 diff expectations violated, 2 usage or
//! infrastructure error, 3 analysis found an escaping store, 4 nothing was
//! hardened.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::canary::{self, CanaryConfig, GuardMode, HardenReport, OnViolation};
use crate::corpus::{self, Cell, CorpusManifest, OptLevel, Target};
use crate::frame::{self, ModuleAnalysis, Severity};
use crate::harness::{self, CrashPolicy, DiffConfig, Report, RunSettings};
use crate::wasm::interp::{self, InterpConfig, Status};
use crate::wasm::WasmModule;

pub const EXIT_OK: i32 = 0;
pub const EXIT_EXPECTATIONS: i32 = 1;
pub const EXIT_ERROR: i32 = 2;
pub const EXIT_ESCAPES: i32 = 3;
pub const EXIT_NOTHING_HARDENED: i32 = 4;
/// `exec`: the module trapped.
pub const EXIT_TRAP: i32 = 134;
/// `exec`: fuel ran out.
pub const EXIT_FUEL: i32 = 124;

/// Version of the `analyze --json` and `harden --json` layouts.
pub const OUTPUT_SCHEMA_VERSION: &str = "1.0.0";

#[derive(Debug, Parser)]
#[command(name = "wasm-canary", version, about = "Shadow-stack analysis and stack canaries for wasm")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect shadow-stack frames and stores that escape them.
    Analyze(AnalyzeArgs),
    /// Insert stack canaries into every recognized frame.
    Harden(HardenArgs),
    /// Compile the corpus, run native and wasm builds, harden, run again.
    Diff(DiffArgs),
    /// Print a saved diff report.
    Report(ReportArgs),
    /// Compile corpus cases into artifacts with metadata.
    CorpusBuild(CorpusBuildArgs),
    /// Run a WASI module's `_start` in the built-in interpreter.
    Exec(ExecArgs),
}

/// `--json` with no value writes to stdout.
#[derive(Debug, Clone, Args, Default)]
pub struct JsonOut {
    /// Write JSON to PATH, or stdout with `-` or no value.
    #[arg(long, value_name = "PATH", num_args = 0..=1, default_missing_value = "-")]
    pub json: Option<PathBuf>,
}

impl JsonOut {
    fn to_stdout(&self) -> bool {
        self.json.as_deref() == Some(Path::new("-"))
    }

    fn write<T: Serialize>(&self, value: &T) -> Result<(), String> {
        let Some(path) = &self.json else { return Ok(()) };
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        if self.to_stdout() {
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| e.to_string())
        } else {
            harness::write_atomic(path, text.as_bytes()).map_err(|e| e.to_string())
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub module: PathBuf,
    #[command(flatten)]
    pub json: JsonOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuardModeArg {
    Fixed,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnViolationArg {
    Trap,
}

#[derive(Debug, Clone, Args)]
pub struct CanaryArgs {
    /// Guard bytes per frame: 4, 8, 12 or 16.
    #[arg(long, value_name = "K", default_value_t = 8, value_parser = parse_guard_size)]
    pub guard_size: u32,
    #[arg(long, value_enum, default_value_t = GuardModeArg::Fixed)]
    pub guard_mode: GuardModeArg,
    /// Guard bytes in memory order, up to 8 bytes of hex. First byte must be 00.
    #[arg(long, value_name = "HEX", value_parser = parse_guard_value)]
    pub guard_value: Option<[u8; 8]>,
    /// Entropy import used by `--guard-mode random`.
    #[arg(long, value_name = "MODULE.FIELD")]
    pub random_import: Option<String>,
    #[arg(long, value_enum, default_value_t = OnViolationArg::Trap)]
    pub on_violation: OnViolationArg,
    /// Stack alignment assumed by the compiler.
    #[arg(long, value_name = "BYTES", default_value_t = 16)]
    pub stack_align: u32,
}

fn parse_guard_size(s: &str) -> Result<u32, String> {
    let k: u32 = s.parse().map_err(|e| format!("{e}"))?;
    if k == 0 || k > 16 || k % 4 != 0 {
        return Err("must be a multiple of 4 between 4 and 16".into());
    }
    Ok(k)
}

fn parse_guard_value(s: &str) -> Result<[u8; 8], String> {
    canary::parse_guard_value(s).map_err(|e| e.to_string())
}

impl CanaryArgs {
    pub fn config(&self) -> Result<CanaryConfig, String> {
        let mut cfg = CanaryConfig {
            guard_size: self.guard_size,
            stack_align: self.stack_align,
            on_violation: match self.on_violation {
                OnViolationArg::Trap => OnViolation::Trap,
            },
            ..CanaryConfig::default()
        };
        match self.guard_mode {
            GuardModeArg::Fixed => {
                if self.random_import.is_some() {
                    return Err("--random-import needs --guard-mode random".into());
                }
                if let Some(v) = self.guard_value {
                    cfg.fixed_value = v;
                }
            }
            GuardModeArg::Random => {
                if self.guard_value.is_some() {
                    return Err("--guard-value cannot be used with --guard-mode random".into());
                }
                cfg.mode = GuardMode::PerRunRandom;
                if let Some(spec) = &self.random_import {
                    let (m, f) = spec
                        .split_once('.')
                        .ok_or("--random-import must be MODULE.FIELD")?;
                    cfg.random_import = Some((m.to_string(), f.to_string()));
                }
            }
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct HardenArgs {
    pub input: PathBuf,
    /// Hardened module path.
    #[arg(short, long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub canary: CanaryArgs,
    #[command(flatten)]
    pub json: JsonOut,
}

#[derive(Debug, Clone, Args)]
pub struct ToolchainArgs {
    #[arg(long, default_value = "corpus/manifest.toml")]
    pub manifest: PathBuf,
    /// Native compiler template; overrides WASM_CANARY_CC_NATIVE.
    #[arg(long, value_name = "TEMPLATE")]
    pub cc_native: Option<String>,
    /// Wasm compiler template; overrides WASM_CANARY_CC_WASM.
    #[arg(long, value_name = "TEMPLATE")]
    pub cc_wasm: Option<String>,
    /// Second native compiler; overrides WASM_CANARY_CC_NATIVE_SECOND.
    #[arg(long, value_name = "TEMPLATE")]
    pub cc_second: Option<String>,
    /// Restrict to these case ids.
    #[arg(long, value_delimiter = ',')]
    pub cases: Vec<String>,
    #[arg(short, long, default_value_t = default_jobs())]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}

impl ToolchainArgs {
    pub fn load(&self) -> Result<CorpusManifest, String> {
        let mut m = corpus::load_manifest(&self.manifest).map_err(|e| e.to_string())?;
        m.toolchain.apply_env();
        if let Some(t) = &self.cc_native {
            m.toolchain.native_cc = t.clone();
        }
        if let Some(t) = &self.cc_wasm {
            m.toolchain.wasm_cc = t.clone();
        }
        if let Some(t) = &self.cc_second {
            m.toolchain.second_native_cc = Some(t.clone());
        }
        if !self.cases.is_empty() {
            m.retain_cases(&self.cases).map_err(|e| e.to_string())?;
        }
        Ok(m)
    }
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[command(flatten)]
    pub toolchain: ToolchainArgs,
    /// Runs per artifact (manifest default otherwise).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub runs: Option<u32>,
    /// Seconds per run (manifest default otherwise).
    #[arg(long, value_name = "SECS", value_parser = parse_timeout)]
    pub timeout: Option<f64>,
    /// Optimization levels (repeatable; manifest default otherwise).
    #[arg(long, value_parser = parse_opt)]
    pub opt: Vec<OptLevel>,
    /// Wasm runtime template with `{artifact}` and optional `{args}`.
    #[arg(long, value_name = "TEMPLATE", env = harness::ENV_RUNTIME)]
    pub runtime_cmd: Option<String>,
    /// Build and scratch directory.
    #[arg(long, default_value = "target/wasm-canary")]
    pub work_dir: PathBuf,
    /// Skip sanity checks on native-only crashes.
    #[arg(long)]
    pub no_sanity: bool,
    #[arg(long)]
    pub nonzero_exit_is_crash: bool,
    #[arg(long)]
    pub timeout_is_crash: bool,
    #[command(flatten)]
    pub canary: CanaryArgs,
    #[command(flatten)]
    pub json: JsonOut,
}

fn parse_timeout(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !(t > 0.0 && t.is_finite()) {
        return Err("must be a positive number of seconds".into());
    }
    Ok(t)
}

fn parse_opt(s: &str) -> Result<OptLevel, String> {
    s.parse()
}

fn parse_target(s: &str) -> Result<Target, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub report: PathBuf,
    /// Also list every case.
    #[arg(long)]
    pub cases: bool,
    #[command(flatten)]
    pub json: JsonOut,
}

#[derive(Debug, Args)]
pub struct CorpusBuildArgs {
    #[command(flatten)]
    pub toolchain: ToolchainArgs,
    /// Output root (the manifest's directory by default).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Targets to build (repeatable; all by default).
    #[arg(long, value_parser = parse_target)]
    pub target: Vec<Target>,
    /// Optimization levels to build (repeatable; all in the matrix by default).
    #[arg(long, value_parser = parse_opt)]
    pub opt: Vec<OptLevel>,
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    pub module: PathBuf,
    #[arg(long, default_value = "_start")]
    pub entry: String,
    #[arg(long, default_value_t = 200_000_000)]
    pub fuel: u64,
    /// Seed for `random_get`; random when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ignored; accepted so runtime templates can pass `{args}`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
    pub args: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub schema_version: String,
    pub module: String,
    pub function_names: std::collections::BTreeMap<u32, String>,
    #[serde(flatten)]
    pub analysis: ModuleAnalysis,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HardenOutput {
    pub schema_version: String,
    pub input: String,
    pub output: Option<String>,
    #[serde(flatten)]
    pub report: HardenReport,
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (_, 0) => log::LevelFilter::Warn,
        (_, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    run(cli.command)
}

pub fn run(command: Command) -> i32 {
    let result = match command {
        Command::Analyze(a) => analyze(&a),
        Command::Harden(a) => harden(&a),
        Command::Diff(a) => diff(&a),
        Command::Report(a) => report(&a),
        Command::CorpusBuild(a) => corpus_build(&a),
        Command::Exec(a) => exec(&a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = Cli::command().error(clap::error::ErrorKind::ArgumentConflict, msg).print();
            EXIT_ERROR
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            EXIT_ERROR
        }
    }
}

enum Failure {
    Usage(String),
    Other(String),
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Other(s)
    }
}

fn read_module(path: &Path) -> Result<WasmModule, Failure> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    WasmModule::decode(&bytes).map_err(|e| {
        Failure::Other(format!(
            "{}: decode failed at byte offset {} ({e})",
            path.display(),
            e.offset()
        ))
    })
}

fn analyze(a: &AnalyzeArgs) -> Result<i32, Failure> {
    let m = read_module(&a.module)?;
    let analysis = frame::analyze_module(&m).map_err(|e| e.to_string())?;
    let names = m.function_names();
    let escapes = analysis.escapes.escapes().count();
    if !a.json.to_stdout() {
        print!("{}", analysis_table(&analysis, &names));
    }
    let involved: std::collections::BTreeMap<u32, String> = analysis
        .frames
        .frames
        .iter()
        .map(|f| f.function)
        .chain(analysis.frames.skipped.iter().map(|s| s.function))
        .filter_map(|i| names.get(&i).map(|n| (i, n.clone())))
        .collect();
    a.json.write(&AnalyzeOutput {
        schema_version: OUTPUT_SCHEMA_VERSION.into(),
        module: a.module.display().to_string(),
        function_names: involved,
        analysis,
    })?;
    Ok(if escapes > 0 { EXIT_ESCAPES } else { EXIT_OK })
}

/// Human-readable listing of frames, skipped functions and findings.
pub fn analysis_table(
    an: &ModuleAnalysis,
    names: &std::collections::HashMap<u32, String>,
) -> String {
    let name = |i: u32| names.get(&i).cloned().unwrap_or_else(|| format!("func[{i}]"));
    let mut s = String::new();
    match an.sp_global {
        Some(g) => s.push_str(&format!("stack pointer: global {g}\n")),
        None => s.push_str("stack pointer: none\n"),
    }
    s.push_str(&format!(
        "{:>5}  {:<28} {:>6}  {:<8} {}\n",
        "func", "name", "frame", "checks", "status"
    ));
    let mut rows: Vec<(u32, String)> = Vec::new();
    for f in &an.frames.frames {
        let status = match &f.shape_issue {
            Some(issue) => format!("unsupported: {issue}"),
            None => "frame".into(),
        };
        rows.push((
            f.function,
            format!(
                "{:>5}  {:<28} {:>6}  {:<8} {}",
                f.function,
                name(f.function),
                f.frame_size,
                f.check_sites().len(),
                status
            ),
        ));
    }
    for sk in &an.frames.skipped {
        if sk.reason == frame::SkipReason::NoFrame {
            continue;
        }
        rows.push((
            sk.function,
            format!(
                "{:>5}  {:<28} {:>6}  {:<8} skipped: {} ({})",
                sk.function,
                name(sk.function),
                "-",
                "-",
                sk.reason,
                sk.detail
            ),
        ));
    }
    rows.sort_by_key(|r| r.0);
    for (_, r) in rows {
        s.push_str(&r);
        s.push('\n');
    }
    if an.escapes.findings.is_empty() {
        s.push_str("no out-of-frame stores\n");
    }
    for f in &an.escapes.findings {
        s.push_str(&format!(
            "{}: {} instr {} writes {} byte(s) at frame+{} (frame {})\n",
            match f.severity {
                Severity::EscapesFrame => "ESCAPE",
                Severity::TouchesFrameTopWord => "warning",
            },
            name(f.function),
            f.instr,
            f.width,
            f.effective_offset,
            f.frame_size
        ));
    }
    s
}

fn harden(a: &HardenArgs) -> Result<i32, Failure> {
    let cfg = a.canary.config().map_err(Failure::Usage)?;
    let m = read_module(&a.input)?;
    let an = frame::analyze_module(&m).map_err(|e| e.to_string())?;
    let (h, report) = canary::harden(&m, &an.frames, &cfg).map_err(|e| e.to_string())?;
    let names = m.function_names();
    let written = report.hardened_count() > 0;
    if written {
        canary::verify_hardening(&m, &h, &report).map_err(|e| e.to_string())?;
        let bytes = h.encode().map_err(|e| e.to_string())?;
        harness::write_atomic(&a.output, &bytes).map_err(|e| e.to_string())?;
    }
    if !a.json.to_stdout() {
        print!("{}", harden_table(&report, &names));
        if written {
            println!("wrote {}", a.output.display());
        } else {
            println!("no frame hardened; {} not written", a.output.display());
        }
    }
    a.json.write(&HardenOutput {
        schema_version: OUTPUT_SCHEMA_VERSION.into(),
        input: a.input.display().to_string(),
        output: written.then(|| a.output.display().to_string()),
        report,
    })?;
    Ok(if written { EXIT_OK } else { EXIT_NOTHING_HARDENED })
}

pub fn harden_table(r: &HardenReport, names: &std::collections::HashMap<u32, String>) -> String {
    let name = |i: u32| names.get(&i).cloned().unwrap_or_else(|| format!("func[{i}]"));
    let mut s = format!(
        "guard: {} bytes ({}, value {}), frames grow by {}\n",
        r.guard_size,
        match r.guard_mode {
            GuardMode::Fixed => "fixed",
            GuardMode::PerRunRandom => "per-run-random",
        },
        r.guard_value,
        r.frame_growth
    );
    for e in &r.functions {
        match &e.action {
            canary::Action::Hardened => s.push_str(&format!(
                "{:>5}  {:<28} frame {} -> {}, {} check site(s), +{} instrs\n",
                e.function,
                name(e.function),
                e.old_frame_size.unwrap_or(0),
                e.new_frame_size.unwrap_or(0),
                e.check_sites,
                e.instruction_delta
            )),
            canary::Action::Skipped(why) => s.push_str(&format!(
                "{:>5}  {:<28} skipped: {why}\n",
                e.function,
                name(e.function)
            )),
        }
    }
    s.push_str(&format!(
        "size {} -> {} bytes ({:+}), {} function(s) hardened\n",
        r.original_size,
        r.hardened_size,
        r.size_delta_bytes,
        r.hardened_count()
    ));
    s
}

/// Runtime template: `wasmtime` when on PATH, else this binary's `exec`.
pub fn default_runtime() -> String {
    if which("wasmtime").is_some() {
        return "wasmtime run {artifact} {args}".into();
    }
    let exe = std::env::current_exe()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|_| "wasm-canary".into());
    let exe = shlex::try_quote(&exe).map(|c| c.into_owned()).unwrap_or(exe);
    format!("{exe} exec {{artifact}} {{args}}")
}

fn which(program: &str) -> Option<PathBuf> {
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|d| d.join(program))
            .find(|p| p.is_file())
    })
}

fn diff(a: &DiffArgs) -> Result<i32, Failure> {
    let canary_cfg = a.canary.config().map_err(Failure::Usage)?;
    let manifest = a.toolchain.load()?;
    manifest.validate().map_err(|e| e.to_string())?;
    let optimizations = if a.opt.is_empty() {
        vec![manifest.defaults.optimization]
    } else {
        let mut v = a.opt.clone();
        v.sort();
        v.dedup();
        v
    };
    let runtime = a.runtime_cmd.clone().unwrap_or_else(default_runtime);
    log::info!("wasm runtime: {runtime}");
    let cfg = DiffConfig {
        run: RunSettings {
            runs: a.runs.unwrap_or(manifest.defaults.runs_per_case),
            timeout: Duration::from_secs_f64(a.timeout.unwrap_or(manifest.defaults.timeout_seconds)),
            markers: harness::default_markers(),
            policy: CrashPolicy {
                nonzero_exit_is_crash: a.nonzero_exit_is_crash,
                timeout_is_crash: a.timeout_is_crash,
            },
            runtime,
        },
        optimizations,
        canary: canary_cfg,
        work_dir: a.work_dir.clone(),
        jobs: a.toolchain.jobs,
        sanity_checks: !a.no_sanity,
    };
    std::fs::create_dir_all(&cfg.work_dir).map_err(|e| format!("{}: {e}", cfg.work_dir.display()))?;
    let report = harness::run_diff(&manifest, &cfg);
    let saved = cfg.work_dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
    harness::write_atomic(&saved, text.as_bytes()).map_err(|e| e.to_string())?;
    if !a.json.to_stdout() {
        print_report(&report, true);
        println!("report: {}", saved.display());
    }
    a.json.write(&report)?;
    Ok(report.exit_code())
}

fn print_report(r: &Report, cases: bool) {
    print!("{}", r.summary_table());
    if cases {
        println!();
        print!("{}", r.case_table());
    }
    for c in &r.cases {
        for e in c.expectations.iter().filter(|e| !e.ok) {
            println!(
                "expectation violated: {} {} {:?}: expected {}, observed {}",
                c.id, e.cell, e.phase, e.expected, e.observed
            );
        }
        for err in &c.errors {
            println!("error: {} {}: {err}", c.id, c.optimization);
        }
    }
    for err in &r.errors {
        println!("error: {err}");
    }
}

fn report(a: &ReportArgs) -> Result<i32, Failure> {
    let text = std::fs::read_to_string(&a.report).map_err(|e| format!("{}: {e}", a.report.display()))?;
    let r: Report = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", a.report.display()))?;
    if r.schema_version.split('.').next() != harness::REPORT_SCHEMA_VERSION.split('.').next() {
        return Err(Failure::Other(format!(
            "report schema {} is not compatible with {}",
            r.schema_version,
            harness::REPORT_SCHEMA_VERSION
        )));
    }
    if !a.json.to_stdout() {
        print_report(&r, a.cases);
    }
    a.json.write(&r)?;
    Ok(r.exit_code())
}

fn corpus_build(a: &CorpusBuildArgs) -> Result<i32, Failure> {
    let manifest = a.toolchain.load()?;
    manifest.validate().map_err(|e| e.to_string())?;
    let out = a.out.clone().unwrap_or_else(|| manifest.root.clone());
    let select = |_: &corpus::CorpusCase, cell: Cell| {
        (a.target.is_empty() || a.target.contains(&cell.target))
            && (a.opt.is_empty() || a.opt.contains(&cell.opt))
    };
    let mut failed = false;
    for r in corpus::build_corpus(&manifest, &out, select, a.toolchain.jobs) {
        match r {
            Ok(art) => println!("{}", art.path.display()),
            Err(e) => {
                eprintln!("error: {e}");
                failed = true;
            }
        }
    }
    Ok(if failed { EXIT_ERROR } else { EXIT_OK })
}

fn exec(a: &ExecArgs) -> Result<i32, Failure> {
    let m = read_module(&a.module)?;
    let cfg = InterpConfig {
        fuel: a.fuel,
        seed: a.seed.unwrap_or_else(rand::random),
        ..InterpConfig::default()
    };
    let trace = interp::interpret(&m, &a.entry, &cfg).map_err(|e| e.to_string())?;
    let _ = std::io::stdout().write_all(&trace.stdout);
    let _ = std::io::stdout().flush();
    let _ = std::io::stderr().write_all(&trace.stderr);
    Ok(match trace.status {
        Status::Completed { .. } => EXIT_OK,
        Status::Exited { code } => code,
        Status::Trapped { reason } => {
            eprintln!("wasm trap: {reason}");
            EXIT_TRAP
        }
        Status::FuelExhausted => {
            eprintln!("fuel exhausted after {} instructions", trace.fuel_used);
            EXIT_FUEL
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("wasm-canary").chain(args.iter().copied()))
    }

    #[test]
    fn guard_size_flag() {
        assert!(parse(&["harden", "a.wasm", "-o", "b.wasm", "--guard-size", "12"]).is_ok());
        assert!(parse(&["harden", "a.wasm", "-o", "b.wasm", "--guard-size", "10"]).is_err());
        assert!(parse(&["harden", "a.wasm", "-o", "b.wasm", "--guard-size", "20"]).is_err());
    }

    #[test]
    fn guard_mode_conflicts() {
        let Command::Harden(h) =
            parse(&["harden", "a", "-o", "b", "--guard-mode", "random", "--guard-value", "00aa"])
                .unwrap()
                .command
        else {
            panic!()
        };
        assert!(h.canary.config().is_err());
        let Command::Harden(h) = parse(&["harden", "a", "-o", "b", "--guard-value", "0x00aabbcc"])
            .unwrap()
            .command
        else {
            panic!()
        };
        let cfg = h.canary.config().unwrap();
        assert_eq!(cfg.fixed_value, [0, 0xaa, 0xbb, 0xcc, 0, 0, 0, 0]);
    }

    #[test]
    fn runs_and_timeout_bounds() {
        assert!(parse(&["diff", "--runs", "0"]).is_err());
        assert!(parse(&["diff", "--timeout", "0"]).is_err());
        assert!(parse(&["diff", "--timeout", "-1"]).is_err());
        let Command::Diff(d) = parse(&["diff", "--runs", "3", "--timeout", "1", "--opt", "O0", "--opt", "O1"])
            .unwrap()
            .command
        else {
            panic!()
        };
        assert_eq!(d.runs, Some(3));
        assert_eq!(d.opt, [OptLevel::O0, OptLevel::O1]);
    }

    #[test]
    fn json_flag_forms() {
        let Command::Analyze(a) = parse(&["analyze", "m.wasm", "--json"]).unwrap().command else {
            panic!()
        };
        assert!(a.json.to_stdout());
        let Command::Analyze(a) = parse(&["analyze", "m.wasm", "--json", "out.json"]).unwrap().command else {
            panic!()
        };
        assert_eq!(a.json.json.as_deref(), Some(Path::new("out.json")));
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
