//! Test-case corpus: manifest loading and compilation of the
//! (target, optimization) matrix.
//!
//! The manifest is TOML. See `corpus/manifest.toml` for the bundled one and
//! the README for the schema. Artifacts land in
//! `<out>/<case-id>/<target>-<opt>/` next to a `metadata.json` sidecar.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

/// Environment variables that override the manifest's toolchain templates.
pub const ENV_CC_NATIVE: &str = "WASM_CANARY_CC_NATIVE";
pub const ENV_CC_WASM: &str = "WASM_CANARY_CC_WASM";
pub const ENV_CC_NATIVE_SECOND: &str = "WASM_CANARY_CC_NATIVE_SECOND";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "native-x86-64")]
    Native,
    #[serde(rename = "wasm32-wasi")]
    Wasm,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Native => "native-x86-64",
            Target::Wasm => "wasm32-wasi",
        }
    }

    pub fn artifact_file(self) -> &'static str {
        match self {
            Target::Native => "program",
            Target::Wasm => "module.wasm",
        }
    }
}

impl FromStr for Target {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "native-x86-64" | "native" => Ok(Target::Native),
            "wasm32-wasi" | "wasm" => Ok(Target::Wasm),
            _ => Err(format!("unknown target `{s}` (expected native-x86-64 or wasm32-wasi)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OptLevel {
    O0,
    O1,
    O2,
    O3,
}

impl OptLevel {
    pub const ALL: [OptLevel; 4] = [OptLevel::O0, OptLevel::O1, OptLevel::O2, OptLevel::O3];

    pub fn flag(self) -> &'static str {
        match self {
            OptLevel::O0 => "-O0",
            OptLevel::O1 => "-O1",
            OptLevel::O2 => "-O2",
            OptLevel::O3 => "-O3",
        }
    }
}

impl fmt::Display for OptLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.flag()[1..])
    }
}

impl FromStr for OptLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim_start_matches('-') {
            "O0" => Ok(OptLevel::O0),
            "O1" => Ok(OptLevel::O1),
            "O2" => Ok(OptLevel::O2),
            "O3" => Ok(OptLevel::O3),
            _ => Err(format!("unknown optimization level `{s}` (expected O0..O3)")),
        }
    }
}

/// One (target, optimization) entry of a compile matrix, written
/// `target:opt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Cell {
    pub target: Target,
    pub opt: OptLevel,
}

impl Cell {
    pub fn new(target: Target, opt: OptLevel) -> Self {
        Cell { target, opt }
    }

    /// Directory name under the case directory.
    pub fn dir_name(self) -> String {
        format!("{}-{}", self.target.name(), self.opt)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.target.name(), self.opt)
    }
}

impl FromStr for Cell {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (t, o) = s
            .split_once(':')
            .ok_or_else(|| format!("cell `{s}` must look like `wasm32-wasi:O1`"))?;
        Ok(Cell::new(t.parse()?, o.parse()?))
    }
}

impl TryFrom<String> for Cell {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Cell> for String {
    fn from(c: Cell) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    StackOverflow,
    HeapLabeledStackOverflow,
    Safe,
    OptimizationSensitive,
    VariantConditional,
    VariantCrossFunction,
}

/// `completes` or `crashes:<marker>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExpectedOutcome {
    Completes,
    Crashes(String),
}

impl ExpectedOutcome {
    pub fn is_crash(&self) -> bool {
        matches!(self, ExpectedOutcome::Crashes(_))
    }
}

impl fmt::Display for ExpectedOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpectedOutcome::Completes => f.write_str("completes"),
            ExpectedOutcome::Crashes(m) => write!(f, "crashes:{m}"),
        }
    }
}

impl TryFrom<String> for ExpectedOutcome {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "completes" => Ok(ExpectedOutcome::Completes),
            Some(("crashes", m)) if !m.is_empty() => Ok(ExpectedOutcome::Crashes(m.to_string())),
            _ => Err(format!(
                "outcome `{s}` must be `completes` or `crashes:<marker>`"
            )),
        }
    }
}

impl From<ExpectedOutcome> for String {
    fn from(o: ExpectedOutcome) -> String {
        o.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CorpusCase {
    pub id: String,
    /// C sources, relative to the manifest's directory.
    pub source_files: Vec<PathBuf>,
    pub category: Category,
    pub compile_matrix: Vec<Cell>,
    #[serde(default)]
    pub expected: BTreeMap<Cell, ExpectedOutcome>,
    /// Expected wasm outcome per optimization level after hardening with
    /// default settings.
    #[serde(default)]
    pub expected_hardened: BTreeMap<OptLevel, ExpectedOutcome>,
    /// Which listing or scenario the case reproduces.
    pub provenance: String,
}

impl CorpusCase {
    pub fn has_cell(&self, cell: Cell) -> bool {
        self.compile_matrix.contains(&cell)
    }

    pub fn opt_levels(&self) -> Vec<OptLevel> {
        let mut v: Vec<_> = self.compile_matrix.iter().map(|c| c.opt).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RequiredFlags {
    #[serde(default)]
    pub native: Vec<String>,
    #[serde(default)]
    pub wasm: Vec<String>,
}

/// Compiler command templates. Placeholders: `{opt}` (e.g. `O1`),
/// `{sources}` (expands to one argument per source file) and `{out}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Toolchain {
    pub native_cc: String,
    pub wasm_cc: String,
    /// Alternative native compiler for the compiler-dependence check.
    #[serde(default)]
    pub second_native_cc: Option<String>,
    #[serde(default)]
    pub required_flags: RequiredFlags,
    /// Support sources appended to every case, per target.
    #[serde(default)]
    pub native_support: Vec<PathBuf>,
    #[serde(default)]
    pub wasm_support: Vec<PathBuf>,
}

impl Toolchain {
    pub fn template(&self, target: Target) -> &str {
        match target {
            Target::Native => &self.native_cc,
            Target::Wasm => &self.wasm_cc,
        }
    }

    pub fn support(&self, target: Target) -> &[PathBuf] {
        match target {
            Target::Native => &self.native_support,
            Target::Wasm => &self.wasm_support,
        }
    }

    fn required(&self, target: Target) -> &[String] {
        match target {
            Target::Native => &self.required_flags.native,
            Target::Wasm => &self.required_flags.wasm,
        }
    }

    /// Applies the `WASM_CANARY_CC_*` environment overrides.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENV_CC_NATIVE) {
            self.native_cc = v;
        }
        if let Ok(v) = std::env::var(ENV_CC_WASM) {
            self.wasm_cc = v;
        }
        if let Ok(v) = std::env::var(ENV_CC_NATIVE_SECOND) {
            self.second_native_cc = Some(v);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Defaults {
    pub optimization: OptLevel,
    pub runs_per_case: u32,
    pub timeout_seconds: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            optimization: OptLevel::O1,
            runs_per_case: 100,
            timeout_seconds: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub toolchain: Toolchain,
    #[serde(default)]
    pub defaults: Defaults,
    pub cases: Vec<CorpusCase>,
    /// Directory paths are resolved against (the manifest's directory).
    #[serde(skip)]
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn case(&self, id: &str) -> Option<&CorpusCase> {
        self.cases.iter().find(|c| c.id == id)
    }

    /// Keeps only the named cases; unknown ids are an error.
    pub fn retain_cases(&mut self, ids: &[String]) -> Result<(), CorpusError> {
        for id in ids {
            if self.case(id).is_none() {
                return Err(CorpusError::Schema {
                    path: "cases".into(),
                    message: format!("no case with id `{id}`"),
                });
            }
        }
        self.cases.retain(|c| ids.contains(&c.id));
        Ok(())
    }

    /// Source files of a case for one target, support files included.
    pub fn sources(&self, case: &CorpusCase, target: Target) -> Vec<PathBuf> {
        case.source_files
            .iter()
            .chain(self.toolchain.support(target))
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let schema = |path: String, message: String| Err(CorpusError::Schema { path, message });
        if self.schema_version != MANIFEST_VERSION {
            return schema(
                "schema-version".into(),
                format!("unsupported version {}, expected {MANIFEST_VERSION}", self.schema_version),
            );
        }
        if self.cases.is_empty() {
            return schema("cases".into(), "at least one case is required".into());
        }
        if self.defaults.runs_per_case == 0 {
            return schema("defaults.runs-per-case".into(), "must be at least 1".into());
        }
        if !(self.defaults.timeout_seconds > 0.0) {
            return schema("defaults.timeout-seconds".into(), "must be positive".into());
        }
        let mut seen = BTreeMap::new();
        for (i, c) in self.cases.iter().enumerate() {
            let at = |field: &str| format!("cases[{i}].{field}");
            if let Some(first) = seen.insert(c.id.as_str(), i) {
                return schema(
                    at("id"),
                    format!("duplicate case id `{}` (first used by cases[{first}])", c.id),
                );
            }
            if c.id.is_empty()
                || !c
                    .id
                    .chars()
                    .all(|ch| ch.is_ascii_lowercase() || ch.is_ascii_digit() || ch == '-')
            {
                return schema(at("id"), format!("`{}` must be lowercase kebab-case", c.id));
            }
            if c.source_files.is_empty() {
                return schema(at("source-files"), "at least one source file is required".into());
            }
            for t in [Target::Native, Target::Wasm] {
                if !c.compile_matrix.iter().any(|cell| cell.target == t) {
                    return schema(
                        at("compile-matrix"),
                        format!("needs at least one {} entry", t.name()),
                    );
                }
            }
            for cell in c.expected.keys() {
                if !c.has_cell(*cell) {
                    return schema(
                        format!("cases[{i}].expected.\"{cell}\""),
                        "cell is not in the compile matrix".into(),
                    );
                }
            }
            for opt in c.expected_hardened.keys() {
                if !c.has_cell(Cell::new(Target::Wasm, *opt)) {
                    return schema(
                        format!("cases[{i}].expected-hardened.{opt}"),
                        "no wasm32-wasi cell at this level in the compile matrix".into(),
                    );
                }
            }
        }
        let mut missing: Vec<PathBuf> = Vec::new();
        let support = self.toolchain.native_support.iter().chain(&self.toolchain.wasm_support);
        for p in self.cases.iter().flat_map(|c| &c.source_files).chain(support) {
            if !self.root.join(p).is_file() && !missing.contains(p) {
                missing.push(p.clone());
            }
        }
        if !missing.is_empty() {
            return Err(CorpusError::MissingSource { files: missing });
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("missing source files: {}", .files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingSource { files: Vec<PathBuf> },
    #[error("compiler `{command}` not found")]
    ToolchainMissing { command: String },
    #[error("bad compiler template `{template}`: {message}")]
    Template { template: String, message: String },
    #[error("compiling {case} ({cell}) failed:\n{stderr}")]
    CompileFailure {
        case: String,
        cell: Cell,
        command: Vec<String>,
        stderr: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses and validates a manifest from text; `root` is where relative
/// paths point.
pub fn parse_manifest(text: &str, root: &Path) -> Result<CorpusManifest, CorpusError> {
    let de = toml::Deserializer::new(text);
    let mut m: CorpusManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CorpusError::Schema {
            path: if path == "." { "(root)".into() } else { path },
            message: e.into_inner().message().trim().to_string(),
        }
    })?;
    m.root = root.to_path_buf();
    m.validate()?;
    Ok(m)
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));
    parse_manifest(&text, &root)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMetadata {
    pub case: String,
    pub target: Target,
    pub optimization: OptLevel,
    pub compiler_version: String,
    pub command: Vec<String>,
    /// sha256 of each source, keyed by manifest-relative path.
    pub source_hashes: BTreeMap<String, String>,
    pub artifact_sha256: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub case: String,
    pub cell: Cell,
    pub path: PathBuf,
    pub metadata: ArtifactMetadata,
}

impl Artifact {
    /// Reads a previously built artifact from `<out>/<case>/<cell>/`.
    pub fn locate(out_root: &Path, case: &str, cell: Cell) -> Result<Artifact, CorpusError> {
        let dir = out_root.join(case).join(cell.dir_name());
        let meta_path = dir.join("metadata.json");
        let text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let metadata = serde_json::from_str(&text).map_err(|e| CorpusError::Schema {
            path: meta_path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Artifact {
            case: case.to_string(),
            cell,
            path: dir.join(cell.target.artifact_file()),
            metadata,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Splits a template and substitutes its placeholders.
pub fn expand_template(
    template: &str,
    opt: OptLevel,
    sources: &[PathBuf],
    out: &Path,
) -> Result<Vec<String>, CorpusError> {
    let bad = |message: &str| CorpusError::Template {
        template: template.to_string(),
        message: message.to_string(),
    };
    let words = shlex::split(template).ok_or_else(|| bad("unbalanced quotes"))?;
    if words.is_empty() {
        return Err(bad("empty command"));
    }
    let mut argv = Vec::new();
    for w in words {
        if w == "{sources}" {
            argv.extend(sources.iter().map(|s| s.display().to_string()));
        } else {
            argv.push(
                w.replace("{opt}", &opt.to_string())
                    .replace("{out}", &out.display().to_string()),
            );
        }
    }
    if !template.contains("{sources}") || !template.contains("{out}") {
        return Err(bad("template needs both {sources} and {out}"));
    }
    Ok(argv)
}

/// First line of `<compiler> --version`.
pub fn compiler_version(program: &str) -> Result<String, CorpusError> {
    let out = Command::new(program)
        .arg("--version")
        .output()
        .map_err(|_| CorpusError::ToolchainMissing {
            command: program.to_string(),
        })?;
    Ok(String::from_utf8_lossy(&out.stdout)
        .lines()
        .next()
        .unwrap_or("")
        .trim()
        .to_string())
}

/// Compiles one cell with the manifest's toolchain.
pub fn compile_case(
    manifest: &CorpusManifest,
    case: &CorpusCase,
    cell: Cell,
    out_root: &Path,
) -> Result<Artifact, CorpusError> {
    let template = manifest.toolchain.template(cell.target).to_string();
    compile_with(manifest, case, cell, &template, out_root)
}

/// Compiles one cell with an explicit command template.
pub fn compile_with(
    manifest: &CorpusManifest,
    case: &CorpusCase,
    cell: Cell,
    template: &str,
    out_root: &Path,
) -> Result<Artifact, CorpusError> {
    let case_dir = out_root.join(&case.id);
    std::fs::create_dir_all(&case_dir).map_err(io_err(&case_dir))?;
    let case_dir = case_dir.canonicalize().map_err(io_err(&case_dir))?;
    let tmp = tempfile::Builder::new()
        .prefix(".build-")
        .tempdir_in(&case_dir)
        .map_err(io_err(&case_dir))?;
    let file = cell.target.artifact_file();
    let sources = manifest.sources(case, cell.target);
    let argv = expand_template(template, cell.opt, &sources, &tmp.path().join(file))?;
    for flag in manifest.toolchain.required(cell.target) {
        if !argv.iter().any(|a| a == flag) {
            return Err(CorpusError::Template {
                template: template.to_string(),
                message: format!("required flag `{flag}` is missing"),
            });
        }
    }
    let version = compiler_version(&argv[0])?;
    let output = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(&manifest.root)
        .output()
        .map_err(|_| CorpusError::ToolchainMissing {
            command: argv[0].clone(),
        })?;
    let dest = case_dir.join(cell.dir_name());
    let rel_out = format!("{}/{}/{}", case.id, cell.dir_name(), file);
    let command: Vec<String> = expand_template(template, cell.opt, &sources, Path::new(&rel_out))?;
    if !output.status.success() {
        return Err(CorpusError::CompileFailure {
            case: case.id.clone(),
            cell,
            command,
            stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    let built = tmp.path().join(file);
    let bytes = std::fs::read(&built).map_err(io_err(&built))?;
    let mut source_hashes = BTreeMap::new();
    for s in &sources {
        let p = manifest.root.join(s);
        let data = std::fs::read(&p).map_err(io_err(&p))?;
        source_hashes.insert(s.display().to_string(), sha256_hex(&data));
    }
    let metadata = ArtifactMetadata {
        case: case.id.clone(),
        target: cell.target,
        optimization: cell.opt,
        compiler_version: version,
        command,
        source_hashes,
        artifact_sha256: sha256_hex(&bytes),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let meta_path = tmp.path().join("metadata.json");
    let json = serde_json::to_string_pretty(&metadata).expect("metadata serializes");
    std::fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;

    let staged = tmp.keep();
    if dest.exists() {
        std::fs::remove_dir_all(&dest).map_err(io_err(&dest))?;
    }
    std::fs::rename(&staged, &dest).map_err(io_err(&dest))?;
    Ok(Artifact {
        case: case.id.clone(),
        cell,
        path: dest.join(file),
        metadata,
    })
}

/// Compiles every selected cell of every case on up to `jobs` threads.
pub fn build_corpus(
    manifest: &CorpusManifest,
    out_root: &Path,
    select: impl Fn(&CorpusCase, Cell) -> bool + Sync,
    jobs: usize,
) -> Vec<Result<Artifact, CorpusError>> {
    let work: Vec<(&CorpusCase, Cell)> = manifest
        .cases
        .iter()
        .flat_map(|c| c.compile_matrix.iter().map(move |cell| (c, *cell)))
        .filter(|(c, cell)| select(c, *cell))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| {
        work.par_iter()
            .map(|(c, cell)| compile_case(manifest, c, *cell, out_root))
            .collect()
    })
}
