//! End-to-end orchestration: ingest, build, subset, stats and tokenize.
//!
//! Raw input is a directory tree of `<stem>.dis` listings (`objdump -d -C
//! -M intel`) with optional `<stem>.sym` symbol tables (`objdump -t -C`).
//! `ingest` turns that tree into a store of one JSON file per testcase under
//! `objects/`; `build` accepts either form.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::dataset::{
    self, to_pretty_json, DatasetBundle, DatasetError, DatasetStats, LabelMode, Manifest,
    RunCounters, SplitRatios, Splits,
};
use crate::disasm::{parse_disassembly, parse_symbol_table, ObjectDisassembly};
use crate::extract::{
    parse_testcase_meta, strip_support_stubs, Example, ExclusionList, Extractor, RoleRules,
    TestcaseMeta, DEFAULT_EXCLUSIONS, DEFAULT_ROLE_PATTERNS,
};
use crate::tokenizer::{
    length_stats, train_bpe, BpeModel, LengthStats, TokenizerError, DEFAULT_VOCAB_SIZE,
};
use crate::transform::{RuntimeAllowlist, DEFAULT_ALLOWLIST};

pub const OBJECTS_DIR: &str = "objects";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const BPE_MODEL_FILE: &str = "bpe.model";
pub const LENGTH_STATS_FILE: &str = "length_stats.json";
pub const DEFAULT_TOKEN_CAP: usize = 512;

/// File extensions the toolchain hook treats as linked objects.
const OBJECT_EXTENSIONS: &[&str] = &["o", "out", "elf"];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// Bad flags or unreadable configuration files.
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot read input root {path}: {message}")]
    InputRoot { path: PathBuf, message: String },
    #[error("stage `{stage}` failed for testcase {testcase_id}: {message}")]
    Stage {
        stage: &'static str,
        testcase_id: String,
        message: String,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub input: PathBuf,
    pub output: PathBuf,
    pub with_context: bool,
    pub label_mode: LabelMode,
    pub seed: u64,
    pub role_regexes: Option<PathBuf>,
    pub allowlist: Option<PathBuf>,
    pub exclude_list: Option<PathBuf>,
    pub cwe_filter: BTreeSet<u32>,
    pub ratios: SplitRatios,
    pub vocab_size: usize,
    /// Template run through `sh -c` per object file; `{object}`, `{dis}`,
    /// `{sym}` and `{stem}` are substituted.
    pub toolchain_cmd: Option<String>,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
}

impl PipelineConfig {
    pub fn new(input: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            input: input.into(),
            output: output.into(),
            with_context: true,
            label_mode: LabelMode::Binary,
            seed: 0,
            role_regexes: None,
            allowlist: None,
            exclude_list: None,
            cwe_filter: BTreeSet::new(),
            ratios: SplitRatios::default(),
            vocab_size: DEFAULT_VOCAB_SIZE,
            toolchain_cmd: None,
            workers: 0,
        }
    }
}

/// The textual rule files in effect; recorded verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTexts {
    pub role_regexes: String,
    pub allowlist: String,
    pub exclusions: String,
}

impl RuleTexts {
    pub fn load(config: &PipelineConfig) -> Result<Self, PipelineError> {
        let read = |path: &Option<PathBuf>, default: &str| match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display()))),
            None => Ok(default.to_string()),
        };
        Ok(RuleTexts {
            role_regexes: read(&config.role_regexes, DEFAULT_ROLE_PATTERNS)?,
            allowlist: read(&config.allowlist, DEFAULT_ALLOWLIST)?,
            exclusions: read(&config.exclude_list, DEFAULT_EXCLUSIONS)?,
        })
    }

    pub fn extractor(&self) -> Result<Extractor, PipelineError> {
        let roles = RoleRules::parse(&self.role_regexes)
            .map_err(|e| PipelineError::Config(format!("role regexes: {e}")))?;
        Ok(Extractor::new(
            roles,
            ExclusionList::parse(&self.exclusions),
            RuntimeAllowlist::parse(&self.allowlist),
        ))
    }
}

/// One testcase as stored by `ingest`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredObject {
    pub meta: TestcaseMeta,
    pub object: ObjectDisassembly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestFailure {
    pub file: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub parsed: Vec<String>,
    pub failures: Vec<IngestFailure>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub objects: Vec<StoredObject>,
    pub report: IngestReport,
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .display()
        .to_string()
}

fn run_toolchain(template: &str, object: &Path, work: &Path) -> Result<(PathBuf, PathBuf), String> {
    let stem = object
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dis = work.join(format!("{stem}.dis"));
    let sym = work.join(format!("{stem}.sym"));
    let cmd = template
        .replace("{object}", &object.display().to_string())
        .replace("{dis}", &dis.display().to_string())
        .replace("{sym}", &sym.display().to_string())
        .replace("{stem}", &stem);
    let status = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| format!("toolchain command failed to start: {e}"))?;
    if !status.success() {
        return Err(format!("toolchain command exited with {status}"));
    }
    Ok((dis, sym))
}

fn parse_pair(stem: &str, dis: &Path, sym: Option<&Path>) -> Result<StoredObject, String> {
    let meta = parse_testcase_meta(stem).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(dis).map_err(|e| e.to_string())?;
    let mut object = parse_disassembly(&text, stem).map_err(|e| e.to_string())?;
    if let Some(sym) = sym {
        let text = fs::read_to_string(sym).map_err(|e| e.to_string())?;
        object = object.with_symbol_table(
            parse_symbol_table(&text).map_err(|e| format!("symbol table: {e}"))?,
        );
    }
    Ok(StoredObject { meta, object })
}

/// Walks the raw input tree and parses every testcase it finds. Per-file
/// problems end up in the report; only an unreadable root is an error.
pub fn ingest_tree(config: &PipelineConfig) -> Result<Ingested, PipelineError> {
    let root = &config.input;
    let root_err = |message: String| PipelineError::InputRoot {
        path: root.clone(),
        message,
    };
    fs::read_dir(root).map_err(|e| root_err(e.to_string()))?;

    let mut listings: BTreeMap<String, (PathBuf, Option<PathBuf>)> = BTreeMap::new();
    let mut report = IngestReport::default();
    let mut objects_for_hook = Vec::new();
    let mut symbol_files: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| root_err(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let stem = stem.to_string_lossy().into_owned();
        match ext.to_string_lossy().as_ref() {
            "dis" => {
                if let std::collections::btree_map::Entry::Vacant(slot) =
                    listings.entry(stem.clone())
                {
                    slot.insert((path.to_path_buf(), None));
                } else {
                    report.failures.push(IngestFailure {
                        file: relative(root, path),
                        error: format!("duplicate testcase id `{stem}`"),
                    });
                }
            }
            "sym" => {
                symbol_files
                    .entry(stem)
                    .or_insert_with(|| path.to_path_buf());
            }
            e if OBJECT_EXTENSIONS.contains(&e) && config.toolchain_cmd.is_some() => {
                objects_for_hook.push((stem, path.to_path_buf()));
            }
            _ => {}
        }
    }

    if let Some(template) = &config.toolchain_cmd {
        let work = config.output.join("toolchain");
        fs::create_dir_all(&work).map_err(io_error(&work))?;
        for (stem, object) in objects_for_hook {
            if listings.contains_key(&stem) {
                continue;
            }
            match run_toolchain(template, &object, &work) {
                Ok((dis, sym)) => {
                    if sym.exists() {
                        symbol_files.insert(stem.clone(), sym);
                    }
                    listings.insert(stem, (dis, None));
                }
                Err(error) => report.failures.push(IngestFailure {
                    file: relative(root, &object),
                    error,
                }),
            }
        }
    }
    for (stem, (_, sym)) in listings.iter_mut() {
        *sym = symbol_files.get(stem).cloned();
    }

    let work: Vec<(String, PathBuf, Option<PathBuf>)> = listings
        .into_iter()
        .map(|(stem, (dis, sym))| (stem, dis, sym))
        .collect();
    let results: Vec<Result<StoredObject, IngestFailure>> = with_pool(config.workers, || {
        work.par_iter()
            .map(|(stem, dis, sym)| {
                parse_pair(stem, dis, sym.as_deref()).map_err(|error| IngestFailure {
                    file: relative(root, dis),
                    error,
                })
            })
            .collect()
    })?;

    let mut objects = Vec::new();
    for r in results {
        match r {
            Ok(o) => {
                report.parsed.push(o.object.testcase_id.clone());
                objects.push(o);
            }
            Err(f) => {
                log::warn!("skipping {}: {}", f.file, f.error);
                report.failures.push(f);
            }
        }
    }
    report.failures.sort_by(|a, b| a.file.cmp(&b.file));
    if objects.is_empty() && report.failures.is_empty() {
        let w = format!("no testcases found under {}", root.display());
        log::warn!("{w}");
        report.warnings.push(w);
    }
    Ok(Ingested { objects, report })
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// `ingest`: parse the raw tree and write `objects/<id>.json` plus a report.
pub fn cmd_ingest(config: &PipelineConfig) -> Result<IngestReport, PipelineError> {
    let ingested = ingest_tree(config)?;
    let dir = config.output.join(OBJECTS_DIR);
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    for o in &ingested.objects {
        let path = dir.join(format!("{}.json", o.object.testcase_id));
        fs::write(&path, to_pretty_json(o)).map_err(io_error(&path))?;
    }
    let path = config.output.join(INGEST_REPORT_FILE);
    fs::write(&path, to_pretty_json(&ingested.report)).map_err(io_error(&path))?;
    Ok(ingested.report)
}

/// Reads an ingest store if `input` is one, otherwise ingests the raw tree.
pub fn load_objects(config: &PipelineConfig) -> Result<Ingested, PipelineError> {
    let store = config.input.join(OBJECTS_DIR);
    let report_path = config.input.join(INGEST_REPORT_FILE);
    if !(store.is_dir() && report_path.is_file()) {
        return ingest_tree(config);
    }
    let report: IngestReport = dataset::read_json(&report_path)?;
    let mut objects = Vec::with_capacity(report.parsed.len());
    for id in &report.parsed {
        objects.push(dataset::read_json::<StoredObject>(
            &store.join(format!("{id}.json")),
        )?);
    }
    Ok(Ingested { objects, report })
}

struct TestcaseOutput {
    examples: Vec<Example>,
    dropped_addresses: usize,
}

fn process_testcase(
    stored: &StoredObject,
    extractor: &Extractor,
    seed: u64,
    with_context: bool,
) -> Result<TestcaseOutput, PipelineError> {
    let id = &stored.object.testcase_id;
    let stage = |stage: &'static str| {
        move |e: crate::transform::TransformError| PipelineError::Stage {
            stage,
            testcase_id: id.clone(),
            message: e.to_string(),
        }
    };
    let object = strip_support_stubs(&stored.object, &extractor.stub_names);
    let table = extractor
        .scramble_table(&object, seed)
        .map_err(stage("scramble"))?;
    let emission = extractor
        .emit_examples(&object, &stored.meta, &table, with_context)
        .map_err(stage("render"))?;
    Ok(TestcaseOutput {
        examples: emission.examples,
        dropped_addresses: emission.dropped_addresses,
    })
}

/// Examples of every testcase, in testcase order, plus run counters.
pub fn extract_all(
    objects: &[StoredObject],
    extractor: &Extractor,
    config: &PipelineConfig,
) -> Result<(Vec<Example>, RunCounters), PipelineError> {
    let outputs: Vec<Result<TestcaseOutput, PipelineError>> = with_pool(config.workers, || {
        objects
            .par_iter()
            .map(|o| process_testcase(o, extractor, config.seed, config.with_context))
            .collect()
    })?;
    let mut examples = Vec::new();
    let mut counters = RunCounters::default();
    for out in outputs {
        let out = out?;
        if out.examples.is_empty() {
            counters.empty_testcases += 1;
        }
        counters.dropped_addresses += out.dropped_addresses;
        examples.extend(out.examples);
    }
    Ok((examples, counters))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of the parsed testcases, independent of file layout.
pub fn input_hash(objects: &[StoredObject]) -> String {
    let mut h = Sha256::new();
    for o in objects {
        let json = serde_json::to_vec(o).expect("plain data serializes");
        h.update((json.len() as u64).to_le_bytes());
        h.update(&json);
    }
    hex::encode(h.finalize())
}

fn manifest_for(config: &PipelineConfig, rules: &RuleTexts, objects: &[StoredObject]) -> Manifest {
    let settings = serde_json::json!({
        "with_context": config.with_context,
        "label_mode": config.label_mode,
        "seed": config.seed,
        "cwe_filter": config.cwe_filter,
        "ratios": config.ratios,
        "rules": rules,
    });
    let mut m = Manifest::minimal(config.seed, config.label_mode);
    m.with_context = Some(config.with_context);
    m.config_hash = Some(sha256_hex(settings.to_string().as_bytes()));
    m.input_hash = Some(input_hash(objects));
    m.config = Some(settings);
    m
}

/// Everything between parsed objects and a bundle; no file output.
pub fn build_bundle(
    objects: &[StoredObject],
    failed_testcases: usize,
    config: &PipelineConfig,
    rules: &RuleTexts,
) -> Result<DatasetBundle, PipelineError> {
    config
        .ratios
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let extractor = rules.extractor()?;
    let (mut examples, counters) = extract_all(objects, &extractor, config)?;
    if !config.cwe_filter.is_empty() {
        examples = dataset::filter_subset(examples, &config.cwe_filter);
    }
    let dedup = dataset::deduplicate(examples, config.seed);
    let run = RunCounters {
        dropped_addresses: counters.dropped_addresses,
        empty_testcases: counters.empty_testcases,
        failed_testcases,
        ..RunCounters::from_dedup(&dedup)
    };
    // An empty subset is a warning, not a failed split.
    let splits = if dedup.survivors.is_empty() {
        log::warn!("no examples left to split");
        Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    } else {
        dataset::split(dedup.survivors, config.ratios, config.seed)?
    };
    Ok(DatasetBundle::from_splits(
        splits,
        config.label_mode,
        config.seed,
        run,
    ))
}

/// `build`: the full pipeline, writing splits, stats and manifest.
pub fn cmd_build(config: &PipelineConfig) -> Result<DatasetBundle, PipelineError> {
    let rules = RuleTexts::load(config)?;
    let ingested = load_objects(config)?;
    let bundle = build_bundle(
        &ingested.objects,
        ingested.report.failures.len(),
        config,
        &rules,
    )?;
    let manifest = manifest_for(config, &rules, &ingested.objects);
    dataset::serialize_with_manifest(&bundle, &config.output, &manifest)?;
    Ok(bundle)
}

/// `subset`: `build` restricted to `cwe_set`, filtered before dedup and split.
pub fn cmd_subset(
    config: &PipelineConfig,
    cwe_set: &BTreeSet<u32>,
) -> Result<DatasetBundle, PipelineError> {
    if cwe_set.is_empty() {
        return Err(PipelineError::Config(
            "subset needs at least one --cwe".into(),
        ));
    }
    let mut config = config.clone();
    config.cwe_filter = cwe_set.clone();
    let bundle = cmd_build(&config)?;
    if bundle.stats.examples == 0 {
        log::warn!("no examples match CWE set {cwe_set:?}");
    }
    Ok(bundle)
}

/// Reads `stats.json` from a dataset directory, or the file itself.
pub fn read_stats(path: &Path) -> Result<DatasetStats, PipelineError> {
    let file = if path.is_dir() {
        path.join(dataset::STATS_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(dataset::read_json(&file)?)
}

pub fn render_stats(stats: &DatasetStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "examples        {}", stats.examples);
    let _ = writeln!(out, "cwes            {}", stats.cwe_count());
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<8} {:>8} {:>8} {:>8}",
        "split", "total", "bad", "good"
    );
    for (name, c) in [
        ("train", &stats.splits.train),
        ("valid", &stats.splits.valid),
        ("test", &stats.splits.test),
    ] {
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>8} {:>8}",
            name, c.total, c.positive, c.negative
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<8} {:>8}", "cwe", "examples");
    for (cwe, n) in &stats.per_cwe {
        let _ = writeln!(out, "{:<8} {:>8}", format!("CWE{cwe}"), n);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<8} {:>8}", "flow", "examples");
    for (flow, n) in &stats.per_flow_variant {
        let _ = writeln!(out, "{:<8} {:>8}", format!("{flow:02}"), n);
    }
    let r = &stats.run;
    let _ = writeln!(out);
    let _ = writeln!(out, "before dedup    {}", r.examples_before_dedup);
    let _ = writeln!(
        out,
        "duplicates      {} ({:.2}%)",
        r.duplicates_removed,
        r.duplicate_fraction * 100.0
    );
    let _ = writeln!(out, "label conflicts {}", r.label_conflicts);
    let _ = writeln!(out, "dropped addrs   {}", r.dropped_addresses);
    let _ = writeln!(out, "empty testcases {}", r.empty_testcases);
    let _ = writeln!(out, "failed inputs   {}", r.failed_testcases);
    out
}

/// `stats`: the table for a built dataset.
pub fn cmd_stats(path: &Path) -> Result<String, PipelineError> {
    Ok(render_stats(&read_stats(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLengthStats {
    pub train: LengthStats,
    pub valid: LengthStats,
    pub test: LengthStats,
}

/// `tokenize`: train on the train split of `dataset_dir`, write the model and
/// per-split length statistics to `output`.
pub fn cmd_tokenize(
    dataset_dir: &Path,
    output: &Path,
    vocab_size: usize,
    cap: usize,
) -> Result<(BpeModel, SplitLengthStats), PipelineError> {
    let bundle = dataset::load(dataset_dir)?;
    let corpus: Vec<String> = bundle.train.iter().map(Example::text).collect();
    let model = train_bpe(&corpus, vocab_size)?;
    let stats = SplitLengthStats {
        train: length_stats(&model, &bundle.train, cap),
        valid: length_stats(&model, &bundle.val, cap),
        test: length_stats(&model, &bundle.test, cap),
    };
    fs::create_dir_all(output).map_err(io_error(output))?;
    model.save(&output.join(BPE_MODEL_FILE))?;
    let path = output.join(LENGTH_STATS_FILE);
    fs::write(&path, to_pretty_json(&stats)).map_err(io_error(&path))?;
    Ok((model, stats))
}
