//! Differential execution: run native and wasm builds of each corpus case,
//! classify the pair into a divergence class, then re-run the wasm side
//! after hardening.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canary::{self, CanaryConfig, GuardMode, HardenReport};
use crate::corpus::{
    self, Artifact, Category, Cell, CorpusCase, CorpusError, CorpusManifest, ExpectedOutcome,
    OptLevel, Target,
};
use crate::frame::{self, EscapeFinding};
use crate::wasm::WasmModule;

/// Version of the JSON report layout in `schemas/report.schema.json`.
pub const REPORT_SCHEMA_VERSION: &str = "1.0.0";

/// Environment variable overriding the wasm runtime command template.
pub const ENV_RUNTIME: &str = "WASM_CANARY_RUNTIME";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub name: String,
    /// Substring searched for in stderr.
    pub pattern: String,
}

impl Marker {
    pub fn new(name: &str, pattern: &str) -> Self {
        Marker {
            name: name.into(),
            pattern: pattern.into(),
        }
    }
}

pub const STACK_SMASH: &str = "stack-smash";

pub fn default_markers() -> Vec<Marker> {
    vec![
        Marker::new(STACK_SMASH, "stack smashing detected"),
        Marker::new("sigsegv", "SIGSEGV"),
        Marker::new("unreachable", "unreachable"),
        Marker::new("wasm-trap", "wasm trap"),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RunStatus {
    Exit { code: i32 },
    Signal { name: String },
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub artifact: String,
    pub run: u32,
    pub status: RunStatus,
    pub markers: BTreeSet<String>,
    pub wall_time: f64,
}

fn signal_name(sig: i32) -> String {
    let name = match sig {
        libc::SIGABRT => "SIGABRT",
        libc::SIGSEGV => "SIGSEGV",
        libc::SIGBUS => "SIGBUS",
        libc::SIGILL => "SIGILL",
        libc::SIGFPE => "SIGFPE",
        libc::SIGKILL => "SIGKILL",
        libc::SIGTERM => "SIGTERM",
        libc::SIGTRAP => "SIGTRAP",
        libc::SIGSYS => "SIGSYS",
        _ => return format!("SIG{sig}"),
    };
    name.to_string()
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("runtime `{command}` not found")]
    RuntimeMissing { command: String },
    #[error("cannot start `{command}`: {source}")]
    SpawnFailure {
        command: String,
        source: std::io::Error,
    },
    #[error("bad runtime template `{0}`")]
    Template(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Wasm(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// How to launch an artifact: natively, or through a wasm runtime command
/// template with `{artifact}` and `{args}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Launcher {
    Native,
    Runtime(String),
}

impl Launcher {
    pub fn for_target(target: Target, runtime: &str) -> Self {
        match target {
            Target::Native => Launcher::Native,
            Target::Wasm => Launcher::Runtime(runtime.to_string()),
        }
    }

    fn argv(&self, artifact: &Path, args: &[String]) -> Result<Vec<String>, HarnessError> {
        let path = artifact.display().to_string();
        match self {
            Launcher::Native => Ok(std::iter::once(path).chain(args.iter().cloned()).collect()),
            Launcher::Runtime(t) => {
                let words = shlex::split(t).ok_or_else(|| HarnessError::Template(t.clone()))?;
                if words.is_empty() || !t.contains("{artifact}") {
                    return Err(HarnessError::Template(t.clone()));
                }
                let mut argv = Vec::new();
                for w in words {
                    if w == "{args}" {
                        argv.extend(args.iter().cloned());
                    } else {
                        argv.push(w.replace("{artifact}", &path));
                    }
                }
                Ok(argv)
            }
        }
    }
}

/// Runs an artifact `runs` times, each in a fresh process group and
/// working directory, killing the group on timeout.
pub fn run_artifact(
    artifact: &Path,
    launcher: &Launcher,
    runs: u32,
    timeout: Duration,
    markers: &[Marker],
) -> Result<Vec<RunOutcome>, HarnessError> {
    let artifact = std::path::absolute(artifact).map_err(|e| HarnessError::Io {
        path: artifact.to_path_buf(),
        source: e,
    })?;
    let argv = launcher.argv(&artifact, &[])?;
    let id = artifact.display().to_string();
    (0..runs)
        .map(|run| run_once(&argv, &id, run, timeout, markers))
        .collect()
}

fn run_once(
    argv: &[String],
    id: &str,
    run: u32,
    timeout: Duration,
    markers: &[Marker],
) -> Result<RunOutcome, HarnessError> {
    let cwd = tempfile::Builder::new()
        .prefix("wasm-canary-run-")
        .tempdir()
        .map_err(|e| HarnessError::SpawnFailure {
            command: argv[0].clone(),
            source: e,
        })?;
    let start = Instant::now();
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(cwd.path())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => HarnessError::RuntimeMissing {
                command: argv[0].clone(),
            },
            _ => HarnessError::SpawnFailure {
                command: argv[0].clone(),
                source: e,
            },
        })?;
    let mut pipe = child.stderr.take().expect("stderr is piped");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        buf
    });
    let pgid = child.id() as i32;
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => {
                // SAFETY: as below; reaps stragglers still holding stderr.
                unsafe {
                    libc::killpg(pgid, libc::SIGKILL);
                }
                break Some(s);
            }
            Ok(None) if start.elapsed() >= timeout => {
                // SAFETY: killpg only sends a signal to the group we created.
                unsafe {
                    libc::killpg(pgid, libc::SIGKILL);
                }
                let _ = child.wait();
                break None;
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(1)),
            Err(e) => {
                return Err(HarnessError::SpawnFailure {
                    command: argv[0].clone(),
                    source: e,
                })
            }
        }
    };
    let wall_time = start.elapsed().as_secs_f64();
    let stderr = String::from_utf8_lossy(&reader.join().unwrap_or_default()).into_owned();
    let status = match status {
        None => RunStatus::Timeout,
        Some(s) => match (s.code(), s.signal()) {
            (Some(code), _) => RunStatus::Exit { code },
            (None, Some(sig)) => RunStatus::Signal {
                name: signal_name(sig),
            },
            (None, None) => RunStatus::Exit { code: -1 },
        },
    };
    let mut found: BTreeSet<String> = markers
        .iter()
        .filter(|m| stderr.contains(&m.pattern))
        .map(|m| m.name.clone())
        .collect();
    if status == (RunStatus::Signal { name: "SIGSEGV".into() }) {
        found.insert("sigsegv".into());
    }
    Ok(RunOutcome {
        artifact: id.to_string(),
        run,
        status,
        markers: found,
        wall_time,
    })
}

/// What counts as a crash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CrashPolicy {
    /// Treat a nonzero exit without any marker as a crash.
    pub nonzero_exit_is_crash: bool,
    pub timeout_is_crash: bool,
}

impl CrashPolicy {
    pub fn is_crash(&self, o: &RunOutcome) -> bool {
        match &o.status {
            RunStatus::Signal { .. } => true,
            RunStatus::Timeout => self.timeout_is_crash,
            RunStatus::Exit { code: 0 } => false,
            RunStatus::Exit { .. } => !o.markers.is_empty() || self.nonzero_exit_is_crash,
        }
    }

    pub fn crash_rate(&self, outcomes: &[RunOutcome]) -> f64 {
        if outcomes.is_empty() {
            return 0.0;
        }
        outcomes.iter().filter(|o| self.is_crash(o)).count() as f64 / outcomes.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Class {
    NoCrash,
    BothCrash,
    WasmOnlyCrash,
    NativeOnlyCrash,
}

impl Class {
    pub const ALL: [Class; 4] = [
        Class::NoCrash,
        Class::BothCrash,
        Class::WasmOnlyCrash,
        Class::NativeOnlyCrash,
    ];

    pub fn from_rates(native: f64, wasm: f64) -> Class {
        match (native > 0.0, wasm > 0.0) {
            (false, false) => Class::NoCrash,
            (true, true) => Class::BothCrash,
            (false, true) => Class::WasmOnlyCrash,
            (true, false) => Class::NativeOnlyCrash,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Class::NoCrash => "no-crash",
            Class::BothCrash => "both-crash",
            Class::WasmOnlyCrash => "wasm-only-crash",
            Class::NativeOnlyCrash => "native-only-crash",
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceClass {
    pub case: String,
    pub optimization: OptLevel,
    pub class: Class,
    pub native_crash_rate: f64,
    pub wasm_crash_rate: f64,
}

pub fn classify(
    case: &str,
    optimization: OptLevel,
    native: &[RunOutcome],
    wasm: &[RunOutcome],
    policy: &CrashPolicy,
) -> DivergenceClass {
    let native_crash_rate = policy.crash_rate(native);
    let wasm_crash_rate = policy.crash_rate(wasm);
    DivergenceClass {
        case: case.to_string(),
        optimization,
        class: Class::from_rates(native_crash_rate, wasm_crash_rate),
        native_crash_rate,
        wasm_crash_rate,
    }
}

/// Aggregate view of a list of runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub runs: u32,
    pub crashes: u32,
    pub timeouts: u32,
    pub exit_codes: BTreeMap<String, u32>,
    pub signals: BTreeMap<String, u32>,
    pub markers: BTreeMap<String, u32>,
    pub mean_wall_time: f64,
}

impl OutcomeSummary {
    pub fn of(outcomes: &[RunOutcome], policy: &CrashPolicy) -> Self {
        let mut s = OutcomeSummary {
            runs: outcomes.len() as u32,
            ..Default::default()
        };
        for o in outcomes {
            if policy.is_crash(o) {
                s.crashes += 1;
            }
            match &o.status {
                RunStatus::Exit { code } => *s.exit_codes.entry(code.to_string()).or_default() += 1,
                RunStatus::Signal { name } => *s.signals.entry(name.clone()).or_default() += 1,
                RunStatus::Timeout => s.timeouts += 1,
            }
            for m in &o.markers {
                *s.markers.entry(m.clone()).or_default() += 1;
            }
        }
        if !outcomes.is_empty() {
            s.mean_wall_time = outcomes.iter().map(|o| o.wall_time).sum::<f64>() / outcomes.len() as f64;
        }
        s
    }

    /// Whether the runs satisfy an expectation. `crashes:<m>` accepts a
    /// marker name, a lowercase signal name, or `any`.
    pub fn meets(&self, expected: &ExpectedOutcome) -> bool {
        match expected {
            ExpectedOutcome::Completes => self.crashes == 0,
            ExpectedOutcome::Crashes(m) => {
                self.crashes > 0
                    && (m == "any"
                        || self.markers.contains_key(m)
                        || self.signals.keys().any(|s| s.eq_ignore_ascii_case(m)))
            }
        }
    }

    /// Short description used in expectation checks.
    pub fn observed(&self) -> String {
        if self.crashes == 0 {
            return "completes".into();
        }
        let what: Vec<&str> = self
            .markers
            .keys()
            .map(String::as_str)
            .chain(self.signals.keys().map(String::as_str))
            .collect();
        format!("crashes:{} ({}/{})", what.join("+"), self.crashes, self.runs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityCheck {
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityResult {
    /// Native stderr carries the stack-smash marker.
    pub crash_report: SanityCheck,
    /// A second native compiler also yields a crashing build.
    pub compiler_dependence: SanityCheck,
    /// True when a check failed and the case needs a manual look.
    pub flagged: bool,
}

/// Confirms a native-only crash: the stack-smash marker must accompany
/// every crashing native run; optionally the case is rebuilt with
/// `second_cc` and run again.
pub fn sanity_check(
    manifest: &CorpusManifest,
    case: &CorpusCase,
    opt: OptLevel,
    native: &[RunOutcome],
    second_cc: Option<&str>,
    runner: &RunSettings,
    work_dir: &Path,
) -> SanityResult {
    let crashing: Vec<_> = native.iter().filter(|o| runner.policy.is_crash(o)).collect();
    let marked = crashing.iter().filter(|o| o.markers.contains(STACK_SMASH)).count();
    let crash_report = if crashing.is_empty() {
        SanityCheck {
            status: CheckStatus::Fail,
            detail: "no crashing native run".into(),
        }
    } else if marked == crashing.len() {
        SanityCheck {
            status: CheckStatus::Pass,
            detail: format!("stack-smash marker in {marked}/{} crashing runs", crashing.len()),
        }
    } else {
        SanityCheck {
            status: CheckStatus::Fail,
            detail: format!(
                "stack-smash marker missing in {}/{} crashing runs",
                crashing.len() - marked,
                crashing.len()
            ),
        }
    };

    let compiler_dependence = match second_cc {
        None => SanityCheck {
            status: CheckStatus::Skipped,
            detail: "no second compiler configured".into(),
        },
        Some(template) => {
            let out = work_dir.join("second-cc");
            let cell = Cell::new(Target::Native, opt);
            match corpus::compile_with(manifest, case, cell, template, &out) {
                Err(CorpusError::ToolchainMissing { command }) => SanityCheck {
                    status: CheckStatus::Skipped,
                    detail: format!("second compiler `{command}` is missing"),
                },
                Err(e) => SanityCheck {
                    status: CheckStatus::Skipped,
                    detail: format!("second compiler failed: {e}"),
                },
                Ok(a) => match run_artifact(&a.path, &Launcher::Native, runner.runs, runner.timeout, &runner.markers) {
                    Err(e) => SanityCheck {
                        status: CheckStatus::Skipped,
                        detail: format!("cannot run second build: {e}"),
                    },
                    Ok(runs) => {
                        let s = OutcomeSummary::of(&runs, &runner.policy);
                        SanityCheck {
                            status: if s.crashes > 0 {
                                CheckStatus::Pass
                            } else {
                                CheckStatus::Fail
                            },
                            detail: format!("{}: {}", a.metadata.compiler_version, s.observed()),
                        }
                    }
                },
            }
        }
    };
    let flagged = crash_report.status == CheckStatus::Fail;
    SanityResult {
        crash_report,
        compiler_dependence,
        flagged,
    }
}

#[derive(Debug, Clone)]
pub struct RunSettings {
    pub runs: u32,
    pub timeout: Duration,
    pub markers: Vec<Marker>,
    pub policy: CrashPolicy,
    /// Wasm runtime command template.
    pub runtime: String,
}

#[derive(Debug, Clone)]
pub struct DiffConfig {
    pub run: RunSettings,
    pub optimizations: Vec<OptLevel>,
    pub canary: CanaryConfig,
    /// Compiled and hardened artifacts go here.
    pub work_dir: PathBuf,
    pub jobs: usize,
    pub sanity_checks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationCheck {
    pub cell: String,
    pub phase: Phase,
    pub expected: ExpectedOutcome,
    pub observed: String,
    pub ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PreHardening,
    PostHardening,
}

/// Static analysis summary attached to each case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub sp_global: Option<u32>,
    pub frames: Vec<FrameSize>,
    pub findings: Vec<EscapeFinding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSize {
    pub function: u32,
    pub frame_size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    pub category: Category,
    pub provenance: String,
    pub optimization: OptLevel,
    pub native: OutcomeSummary,
    pub wasm: OutcomeSummary,
    pub hardened_wasm: Option<OutcomeSummary>,
    pub analysis: Option<FrameSummary>,
    pub harden: Option<HardenReport>,
    pub sanity: Option<SanityResult>,
    pub expectations: Vec<ExpectationCheck>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub no_crash: u32,
    pub both_crash: u32,
    pub wasm_only_crash: u32,
    pub native_only_crash: u32,
}

impl ClassCounts {
    pub fn of<'a>(classes: impl IntoIterator<Item = &'a DivergenceClass>) -> Self {
        let mut c = ClassCounts::default();
        for d in classes {
            *c.get_mut(d.class) += 1;
        }
        c
    }

    pub fn get(&self, class: Class) -> u32 {
        match class {
            Class::NoCrash => self.no_crash,
            Class::BothCrash => self.both_crash,
            Class::WasmOnlyCrash => self.wasm_only_crash,
            Class::NativeOnlyCrash => self.native_only_crash,
        }
    }

    fn get_mut(&mut self, class: Class) -> &mut u32 {
        match class {
            Class::NoCrash => &mut self.no_crash,
            Class::BothCrash => &mut self.both_crash,
            Class::WasmOnlyCrash => &mut self.wasm_only_crash,
            Class::NativeOnlyCrash => &mut self.native_only_crash,
        }
    }

    pub fn total(&self) -> u32 {
        Class::ALL.iter().map(|c| self.get(*c)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceStatus {
    /// At least one native-only crash.
    Reproduced,
    /// No native-only crash and the wasm builds carry stack protection.
    ClosedByToolchain,
    /// No native-only crash and no wasm stack protection either.
    NotObserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptSummary {
    pub optimization: OptLevel,
    pub pre_hardening: ClassCounts,
    pub post_hardening: ClassCounts,
    /// Native-only crashes that became both-crash after hardening.
    pub native_only_to_both_crash: u32,
    pub divergence: DivergenceStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolchainInfo {
    pub native_cc: String,
    pub wasm_cc: String,
    pub second_native_cc: Option<String>,
    pub native_compiler_version: Option<String>,
    pub wasm_compiler_version: Option<String>,
    pub runtime: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub runs: u32,
    pub timeout_seconds: f64,
    pub optimizations: Vec<OptLevel>,
    pub guard_size: u32,
    pub guard_mode: GuardMode,
    pub guard_value: String,
    pub stack_align: u32,
    pub crash_policy: CrashPolicy,
    pub markers: Vec<Marker>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub pre_hardening: Vec<DivergenceClass>,
    pub post_hardening: Vec<DivergenceClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub tool_version: String,
    pub generated_at: u64,
    pub toolchain: ToolchainInfo,
    pub config: ReportConfig,
    pub phases: Phases,
    pub cases: Vec<CaseReport>,
    pub summary: Vec<OptSummary>,
    pub errors: Vec<String>,
}

impl Report {
    pub fn expectations_met(&self) -> bool {
        self.cases
            .iter()
            .all(|c| c.expectations.iter().all(|e| e.ok))
    }

    pub fn has_errors(&self) -> bool {
        !self.errors.is_empty() || self.cases.iter().any(|c| !c.errors.is_empty())
    }

    /// 0 when every expectation holds, 1 when one does not, 2 on
    /// infrastructure errors.
    pub fn exit_code(&self) -> i32 {
        if self.has_errors() {
            2
        } else if !self.expectations_met() {
            1
        } else {
            0
        }
    }

    pub fn case(&self, id: &str, opt: OptLevel) -> Option<&CaseReport> {
        self.cases.iter().find(|c| c.id == id && c.optimization == opt)
    }

    pub fn pre(&self, id: &str, opt: OptLevel) -> Option<&DivergenceClass> {
        self.phases
            .pre_hardening
            .iter()
            .find(|d| d.case == id && d.optimization == opt)
    }

    pub fn post(&self, id: &str, opt: OptLevel) -> Option<&DivergenceClass> {
        self.phases
            .post_hardening
            .iter()
            .find(|d| d.case == id && d.optimization == opt)
    }

    /// Table with one row per optimization level, shaped like the usual
    /// no-crash / both / wasm-only / native-only matrix.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<6} {:<6} {:>9} {:>11} {:>11} {:>13}  {}\n",
            "opt", "phase", "No crash", "Both crash", "Wasm crash", "Native crash", "divergence"
        ));
        for o in &self.summary {
            for (phase, c) in [("pre", &o.pre_hardening), ("post", &o.post_hardening)] {
                s.push_str(&format!(
                    "{:<6} {:<6} {:>9} {:>11} {:>11} {:>13}  {}\n",
                    o.optimization.to_string(),
                    phase,
                    c.no_crash,
                    c.both_crash,
                    c.wasm_only_crash,
                    c.native_only_crash,
                    if phase == "pre" {
                        match o.divergence {
                            DivergenceStatus::Reproduced => "reproduced",
                            DivergenceStatus::ClosedByToolchain => "divergence closed by toolchain",
                            DivergenceStatus::NotObserved => "not observed",
                        }
                        .to_string()
                    } else {
                        format!("{} native-only -> both-crash", o.native_only_to_both_crash)
                    }
                ));
            }
        }
        s
    }

    /// Per-case listing of both phases.
    pub fn case_table(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let pre = self.pre(&c.id, c.optimization).map_or("-", |d| d.class.label());
            let post = self.post(&c.id, c.optimization).map_or("-", |d| d.class.label());
            let bad = c.expectations.iter().filter(|e| !e.ok).count();
            s.push_str(&format!(
                "{:<34} {:<3} {:<18} {:<18} {}\n",
                c.id,
                c.optimization.to_string(),
                pre,
                post,
                if !c.errors.is_empty() {
                    "error".to_string()
                } else if bad > 0 {
                    format!("{bad} expectation(s) violated")
                } else {
                    "ok".to_string()
                }
            ));
        }
        s
    }
}

fn has_stack_protector(m: &WasmModule) -> bool {
    m.imports.iter().any(|i| i.field.contains("__stack_chk"))
        || m.function_names().values().any(|n| n.contains("__stack_chk"))
}

/// Per-(case, optimization) state carried between the two phases.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub case: String,
    pub opt: OptLevel,
    pub native: Option<Artifact>,
    pub wasm: Option<Artifact>,
    pub native_runs: Vec<RunOutcome>,
    pub wasm_runs: Vec<RunOutcome>,
    pub pre: Option<DivergenceClass>,
    pub report: CaseReport,
    pub stack_protected: bool,
}

/// Compiles the matrix, runs native and wasm builds, classifies, and runs
/// sanity checks on native-only crashes.
pub fn pre_hardening(manifest: &CorpusManifest, cfg: &DiffConfig) -> Vec<CellRun> {
    let opts = &cfg.optimizations;
    let built = corpus::build_corpus(
        manifest,
        &cfg.work_dir,
        |_, cell| opts.contains(&cell.opt),
        cfg.jobs,
    );
    let mut artifacts: BTreeMap<(String, Cell), Artifact> = BTreeMap::new();
    let mut build_errors: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in built {
        match r {
            Ok(a) => {
                artifacts.insert((a.case.clone(), a.cell), a);
            }
            Err(e) => {
                let key = match &e {
                    CorpusError::CompileFailure { case, .. } => case.clone(),
                    _ => String::new(),
                };
                build_errors.entry(key).or_default().push(e.to_string());
            }
        }
    }
    let global_errors = build_errors.remove("").unwrap_or_default();

    let mut work = Vec::new();
    for case in &manifest.cases {
        for &opt in opts {
            if !case.has_cell(Cell::new(Target::Native, opt)) || !case.has_cell(Cell::new(Target::Wasm, opt)) {
                continue;
            }
            let mut errors = build_errors.get(&case.id).cloned().unwrap_or_default();
            errors.extend(global_errors.iter().cloned());
            work.push((case, opt, errors));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        work.into_par_iter()
            .map(|(case, opt, errors)| {
                let native = artifacts.get(&(case.id.clone(), Cell::new(Target::Native, opt))).cloned();
                let wasm = artifacts.get(&(case.id.clone(), Cell::new(Target::Wasm, opt))).cloned();
                run_pre_cell(manifest, cfg, case, opt, native, wasm, errors)
            })
            .collect()
    })
}

fn run_pre_cell(
    manifest: &CorpusManifest,
    cfg: &DiffConfig,
    case: &CorpusCase,
    opt: OptLevel,
    native: Option<Artifact>,
    wasm: Option<Artifact>,
    mut errors: Vec<String>,
) -> CellRun {
    let r = &cfg.run;
    let mut run = |a: &Option<Artifact>| -> Vec<RunOutcome> {
        let Some(a) = a else { return Vec::new() };
        let launcher = Launcher::for_target(a.cell.target, &r.runtime);
        match run_artifact(&a.path, &launcher, r.runs, r.timeout, &r.markers) {
            Ok(v) => v,
            Err(e) => {
                errors.push(format!("{}: {e}", a.cell));
                Vec::new()
            }
        }
    };
    let native_runs = run(&native);
    let wasm_runs = run(&wasm);
    let pre = (!native_runs.is_empty() && !wasm_runs.is_empty())
        .then(|| classify(&case.id, opt, &native_runs, &wasm_runs, &r.policy));

    let mut analysis = None;
    let mut stack_protected = false;
    if let Some(a) = &wasm {
        match std::fs::read(&a.path)
            .map_err(|e| e.to_string())
            .and_then(|b| WasmModule::decode(&b).map_err(|e| e.to_string()))
        {
            Ok(m) => {
                stack_protected = has_stack_protector(&m);
                match frame::analyze_module(&m) {
                    Ok(an) => {
                        analysis = Some(FrameSummary {
                            sp_global: an.sp_global,
                            frames: an
                                .frames
                                .frames
                                .iter()
                                .map(|f| FrameSize {
                                    function: f.function,
                                    frame_size: f.frame_size,
                                })
                                .collect(),
                            findings: an.escapes.findings,
                        })
                    }
                    Err(e) => errors.push(format!("analysis: {e}")),
                }
            }
            Err(e) => errors.push(format!("{}: {e}", a.path.display())),
        }
    }

    let sanity = match &pre {
        Some(d) if cfg.sanity_checks && d.class == Class::NativeOnlyCrash => Some(sanity_check(
            manifest,
            case,
            opt,
            &native_runs,
            manifest.toolchain.second_native_cc.as_deref(),
            r,
            &cfg.work_dir.join(&case.id),
        )),
        _ => None,
    };

    let native_summary = OutcomeSummary::of(&native_runs, &r.policy);
    let wasm_summary = OutcomeSummary::of(&wasm_runs, &r.policy);
    let mut expectations = Vec::new();
    for (target, summary, runs) in [
        (Target::Native, &native_summary, &native_runs),
        (Target::Wasm, &wasm_summary, &wasm_runs),
    ] {
        let cell = Cell::new(target, opt);
        if let (Some(exp), false) = (case.expected.get(&cell), runs.is_empty()) {
            expectations.push(ExpectationCheck {
                cell: cell.to_string(),
                phase: Phase::PreHardening,
                expected: exp.clone(),
                observed: summary.observed(),
                ok: summary.meets(exp),
            });
        }
    }
    CellRun {
        case: case.id.clone(),
        opt,
        report: CaseReport {
            id: case.id.clone(),
            category: case.category,
            provenance: case.provenance.clone(),
            optimization: opt,
            native: native_summary,
            wasm: wasm_summary,
            hardened_wasm: None,
            analysis,
            harden: None,
            sanity,
            expectations,
            errors,
        },
        native,
        wasm,
        native_runs,
        wasm_runs,
        pre,
        stack_protected,
    }
}

/// Hardens one wasm artifact, writing `hardened.wasm` next to it.
pub fn harden_artifact(
    wasm: &Path,
    cfg: &CanaryConfig,
) -> Result<(PathBuf, HardenReport), HarnessError> {
    let bytes = std::fs::read(wasm).map_err(|e| HarnessError::Io {
        path: wasm.to_path_buf(),
        source: e,
    })?;
    let m = WasmModule::decode(&bytes).map_err(|e| HarnessError::Wasm(e.to_string()))?;
    let an = frame::analyze_module(&m).map_err(|e| HarnessError::Wasm(e.to_string()))?;
    let (h, report) =
        canary::harden(&m, &an.frames, cfg).map_err(|e| HarnessError::Wasm(e.to_string()))?;
    canary::verify_hardening(&m, &h, &report).map_err(|e| HarnessError::Wasm(e.to_string()))?;
    let out = wasm.with_file_name("hardened.wasm");
    let encoded = h.encode().map_err(|e| HarnessError::Wasm(e.to_string()))?;
    write_atomic(&out, &encoded)?;
    Ok((out, report))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    use std::io::Write;
    let err = |e: std::io::Error| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(bytes).map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

/// Re-runs each wasm cell with a hardened module and assembles the report.
pub fn evaluate_hardening(
    manifest: &CorpusManifest,
    cfg: &DiffConfig,
    cells: Vec<CellRun>,
) -> Report {
    let r = &cfg.run;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .expect("thread pool");
    let cells: Vec<(CellRun, Option<DivergenceClass>)> = pool.install(|| {
        cells
            .into_par_iter()
            .map(|mut c| {
                let Some(wasm) = c.wasm.clone() else { return (c, None) };
                let hardened = match harden_artifact(&wasm.path, &cfg.canary) {
                    Ok(h) => h,
                    Err(e) => {
                        c.report.errors.push(format!("harden: {e}"));
                        return (c, None);
                    }
                };
                let (path, hr) = hardened;
                c.report.harden = Some(hr);
                let runs = match run_artifact(&path, &Launcher::Runtime(r.runtime.clone()), r.runs, r.timeout, &r.markers) {
                    Ok(v) => v,
                    Err(e) => {
                        c.report.errors.push(format!("hardened run: {e}"));
                        return (c, None);
                    }
                };
                let summary = OutcomeSummary::of(&runs, &r.policy);
                if let Some(exp) = manifest
                    .case(&c.case)
                    .and_then(|k| k.expected_hardened.get(&c.opt))
                {
                    c.report.expectations.push(ExpectationCheck {
                        cell: Cell::new(Target::Wasm, c.opt).to_string(),
                        phase: Phase::PostHardening,
                        expected: exp.clone(),
                        observed: summary.observed(),
                        ok: summary.meets(exp),
                    });
                }
                c.report.hardened_wasm = Some(summary);
                let post = (!c.native_runs.is_empty())
                    .then(|| classify(&c.case, c.opt, &c.native_runs, &runs, &r.policy));
                (c, post)
            })
            .collect()
    });

    let mut pre_phase = Vec::new();
    let mut post_phase = Vec::new();
    let mut cases = Vec::new();
    let mut protected: BTreeSet<OptLevel> = BTreeSet::new();
    for (c, post) in cells {
        if c.stack_protected {
            protected.insert(c.opt);
        }
        if let Some(p) = c.pre {
            pre_phase.push(p);
        }
        if let Some(p) = post {
            post_phase.push(p);
        }
        cases.push(c.report);
    }

    let summary = cfg
        .optimizations
        .iter()
        .map(|&opt| {
            let pre: Vec<_> = pre_phase.iter().filter(|d| d.optimization == opt).collect();
            let post: Vec<_> = post_phase.iter().filter(|d| d.optimization == opt).collect();
            let pre_counts = ClassCounts::of(pre.iter().copied());
            let transitions = pre
                .iter()
                .filter(|d| d.class == Class::NativeOnlyCrash)
                .filter(|d| {
                    post.iter()
                        .any(|p| p.case == d.case && p.class == Class::BothCrash)
                })
                .count() as u32;
            let divergence = if pre_counts.native_only_crash > 0 {
                DivergenceStatus::Reproduced
            } else if protected.contains(&opt) {
                DivergenceStatus::ClosedByToolchain
            } else {
                DivergenceStatus::NotObserved
            };
            OptSummary {
                optimization: opt,
                pre_hardening: pre_counts,
                post_hardening: ClassCounts::of(post.iter().copied()),
                native_only_to_both_crash: transitions,
                divergence,
            }
        })
        .collect();

    let version_of = |t: &str| {
        shlex::split(t)
            .and_then(|w| w.into_iter().next())
            .and_then(|p| corpus::compiler_version(&p).ok())
    };
    let tc = &manifest.toolchain;
    Report {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        generated_at: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        toolchain: ToolchainInfo {
            native_cc: tc.native_cc.clone(),
            wasm_cc: tc.wasm_cc.clone(),
            second_native_cc: tc.second_native_cc.clone(),
            native_compiler_version: version_of(&tc.native_cc),
            wasm_compiler_version: version_of(&tc.wasm_cc),
            runtime: r.runtime.clone(),
        },
        config: ReportConfig {
            runs: r.runs,
            timeout_seconds: r.timeout.as_secs_f64(),
            optimizations: cfg.optimizations.clone(),
            guard_size: cfg.canary.guard_size,
            guard_mode: cfg.canary.mode,
            guard_value: hex::encode_upper(cfg.canary.fixed_value),
            stack_align: cfg.canary.stack_align,
            crash_policy: r.policy,
            markers: r.markers.clone(),
        },
        phases: Phases {
            pre_hardening: pre_phase,
            post_hardening: post_phase,
        },
        cases,
        summary,
        errors: Vec::new(),
    }
}

/// Both phases end to end.
pub fn run_diff(manifest: &CorpusManifest, cfg: &DiffConfig) -> Report {
    let cells = pre_hardening(manifest, cfg);
    evaluate_hardening(manifest, cfg, cells)
}
