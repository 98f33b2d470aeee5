//! Labels, duplicate elimination, splitting, statistics and dataset files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::extract::{BinaryLabel, Example};
use crate::rng::keyed_rng;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Class name multiclass mode gives to good examples.
pub const NO_WEAKNESS: &str = "no weakness";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("cannot split {0} examples into three non-empty parts")]
    TooFewExamples(usize),
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Binary,
    Multiclass,
}

impl FromStr for LabelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(LabelMode::Binary),
            "multiclass" => Ok(LabelMode::Multiclass),
            other => Err(format!(
                "unknown label mode `{other}` (expected binary or multiclass)"
            )),
        }
    }
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Binary => "binary",
            LabelMode::Multiclass => "multiclass",
        })
    }
}

pub fn assign_label(example: &Example, mode: LabelMode) -> String {
    match (mode, example.label_binary) {
        (LabelMode::Binary, BinaryLabel::Good) => "good".into(),
        (LabelMode::Binary, BinaryLabel::Bad) => "bad".into(),
        (LabelMode::Multiclass, BinaryLabel::Good) => NO_WEAKNESS.into(),
        (LabelMode::Multiclass, BinaryLabel::Bad) => format!("CWE-{}", example.cwe),
    }
}

/// Recovers the binary label from a label string of either mode.
pub fn parse_label(label: &str, mode: LabelMode) -> Option<BinaryLabel> {
    match mode {
        LabelMode::Binary => match label {
            "good" => Some(BinaryLabel::Good),
            "bad" => Some(BinaryLabel::Bad),
            _ => None,
        },
        LabelMode::Multiclass => {
            if label == NO_WEAKNESS {
                Some(BinaryLabel::Good)
            } else {
                label
                    .strip_prefix("CWE-")
                    .and_then(|n| n.parse::<u32>().ok())
                    .map(|_| BinaryLabel::Bad)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dedup {
    pub survivors: Vec<Example>,
    pub removed_count: usize,
    pub conflict_count: usize,
    /// Examples that belonged to a group of two or more.
    pub duplicate_members: usize,
    pub input_count: usize,
}

impl Dedup {
    pub fn duplicate_fraction(&self) -> f64 {
        if self.input_count == 0 {
            0.0
        } else {
            self.duplicate_members as f64 / self.input_count as f64
        }
    }
}

/// Identity of an example's text for duplicate detection.
pub fn dedup_key(example: &Example) -> String {
    let mut key = String::with_capacity(example.focal_text.len() + example.context_text.len() + 1);
    key.push_str(&example.focal_text);
    key.push('\u{1e}');
    key.push_str(&example.context_text);
    key
}

/// Keeps one randomly chosen member of every group of identical texts.
///
/// The choice for a group depends only on the seed and the group's text, so
/// it does not change with input sharding or thread count.
pub fn deduplicate(examples: Vec<Example>, seed: u64) -> Dedup {
    let input_count = examples.len();
    let keys: Vec<String> = examples.iter().map(dedup_key).collect();
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        let g = *group_of.entry(key.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }

    let mut slots: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    let mut survivors = Vec::with_capacity(groups.len());
    let mut conflict_count = 0;
    let mut duplicate_members = 0;
    for members in &groups {
        let chosen = if members.len() == 1 {
            members[0]
        } else {
            duplicate_members += members.len();
            let labels: BTreeSet<String> = members
                .iter()
                .map(|&i| assign_label(slots[i].as_ref().unwrap(), LabelMode::Multiclass))
                .collect();
            if labels.len() > 1 {
                conflict_count += 1;
            }
            let mut rng = keyed_rng(seed, "dedup", keys[members[0]].as_bytes());
            members[rng.gen_range(0..members.len())]
        };
        survivors.push(slots[chosen].take().unwrap());
    }

    Dedup {
        removed_count: input_count - survivors.len(),
        survivors,
        conflict_count,
        duplicate_members,
        input_count,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.val, self.test];
        let ok = parts.iter().all(|r| r.is_finite() && *r >= 0.0)
            && (parts.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(DatasetError::InvalidRatios(parts))
        }
    }

    /// (train, val, test) sizes: floor for val and test, remainder to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let part = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let val = part(self.val);
        let test = part(self.test).min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then contiguous train / val / test slices.
pub fn split<T>(items: Vec<T>, ratios: SplitRatios, seed: u64) -> Result<Splits<T>, DatasetError> {
    ratios.validate()?;
    let n = items.len();
    if n < 3 {
        return Err(DatasetError::TooFewExamples(n));
    }
    let mut items = items;
    items.shuffle(&mut keyed_rng(seed, "split", b""));
    let (n_train, n_val, _) = ratios.sizes(n);
    let mut rest = items.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok(Splits {
        train: items,
        val: rest,
        test,
    })
}

/// Keeps examples of the given CWEs, in input order.
pub fn filter_subset(examples: Vec<Example>, cwe_set: &BTreeSet<u32>) -> Vec<Example> {
    let kept: Vec<Example> = examples
        .into_iter()
        .filter(|e| cwe_set.contains(&e.cwe))
        .collect();
    if kept.is_empty() {
        log::warn!("CWE subset {cwe_set:?} selects no examples");
    }
    kept
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub total: usize,
    pub positive: usize,
    pub negative: usize,
}

impl SplitCounts {
    fn tally(examples: &[Example]) -> Self {
        let positive = examples
            .iter()
            .filter(|e| e.label_binary == BinaryLabel::Bad)
            .count();
        SplitCounts {
            total: examples.len(),
            positive,
            negative: examples.len() - positive,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub train: SplitCounts,
    pub valid: SplitCounts,
    pub test: SplitCounts,
}

/// Run-level counters that do not follow from the final splits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunCounters {
    pub examples_before_dedup: usize,
    pub duplicate_fraction: f64,
    pub duplicates_removed: usize,
    pub label_conflicts: usize,
    pub dropped_addresses: usize,
    pub empty_testcases: usize,
    pub failed_testcases: usize,
}

impl RunCounters {
    pub fn from_dedup(d: &Dedup) -> Self {
        RunCounters {
            examples_before_dedup: d.input_count,
            duplicate_fraction: d.duplicate_fraction(),
            duplicates_removed: d.removed_count,
            label_conflicts: d.conflict_count,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub examples: usize,
    pub per_cwe: BTreeMap<u32, usize>,
    pub per_flow_variant: BTreeMap<u32, usize>,
    pub splits: SplitStats,
    pub run: RunCounters,
}

impl DatasetStats {
    pub fn cwe_count(&self) -> usize {
        self.per_cwe.len()
    }
}

pub fn compute_stats(splits: &Splits<Example>, run: RunCounters) -> DatasetStats {
    let mut per_cwe = BTreeMap::new();
    let mut per_flow_variant = BTreeMap::new();
    for e in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        *per_cwe.entry(e.cwe).or_insert(0) += 1;
        *per_flow_variant.entry(e.flow_variant).or_insert(0) += 1;
    }
    DatasetStats {
        examples: splits.train.len() + splits.val.len() + splits.test.len(),
        per_cwe,
        per_flow_variant,
        splits: SplitStats {
            train: SplitCounts::tally(&splits.train),
            valid: SplitCounts::tally(&splits.val),
            test: SplitCounts::tally(&splits.test),
        },
        run,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub seed: u64,
    pub label_mode: LabelMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_context: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Manifest {
    pub fn minimal(seed: u64, label_mode: LabelMode) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            label_mode,
            with_context: None,
            config_hash: None,
            input_hash: None,
            config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub label_mode: LabelMode,
    pub seed: u64,
    pub stats: DatasetStats,
}

impl DatasetBundle {
    pub fn from_splits(
        splits: Splits<Example>,
        label_mode: LabelMode,
        seed: u64,
        run: RunCounters,
    ) -> Self {
        let stats = compute_stats(&splits, run);
        DatasetBundle {
            train: splits.train,
            val: splits.val,
            test: splits.test,
            label_mode,
            seed,
            stats,
        }
    }

    pub fn parts(&self) -> [(&'static str, &'static str, &[Example]); 3] {
        [
            ("train", TRAIN_FILE, &self.train),
            ("valid", VALID_FILE, &self.val),
            ("test", TEST_FILE, &self.test),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: String,
    label: String,
    cwe: u32,
    flow_variant: u32,
    testcase_id: String,
    split: String,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(contents).map_err(io_err(path))
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Writes the split files, `stats.json` and a manifest carrying seed and
/// label mode.
pub fn serialize(bundle: &DatasetBundle, dir: &Path) -> Result<(), DatasetError> {
    serialize_with_manifest(
        bundle,
        dir,
        &Manifest::minimal(bundle.seed, bundle.label_mode),
    )
}

pub fn serialize_with_manifest(
    bundle: &DatasetBundle,
    dir: &Path,
    manifest: &Manifest,
) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (split, file, examples) in bundle.parts() {
        let mut out = String::new();
        for e in examples {
            let record = Record {
                text: e.text(),
                label: assign_label(e, bundle.label_mode),
                cwe: e.cwe,
                flow_variant: e.flow_variant,
                testcase_id: e.testcase_id.clone(),
                split: split.to_string(),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        write_file(&dir.join(file), out.as_bytes())?;
    }
    write_file(
        &dir.join(STATS_FILE),
        to_pretty_json(&bundle.stats).as_bytes(),
    )?;
    write_file(
        &dir.join(MANIFEST_FILE),
        to_pretty_json(manifest).as_bytes(),
    )?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads one split file.
pub fn load_split(path: &Path, split: &str, mode: LabelMode) -> Result<Vec<Example>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let r: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if r.split != split {
            return Err(bad(format!("record belongs to split `{}`", r.split)));
        }
        let label_binary = parse_label(&r.label, mode)
            .ok_or_else(|| bad(format!("unknown {mode} label `{}`", r.label)))?;
        let (focal_text, context_text) = Example::split_text(&r.text);
        out.push(Example {
            focal_text,
            context_text,
            label_binary,
            cwe: r.cwe,
            flow_variant: r.flow_variant,
            testcase_id: r.testcase_id,
        });
    }
    Ok(out)
}

pub fn load(dir: &Path) -> Result<DatasetBundle, DatasetError> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    let stats: DatasetStats = read_json(&dir.join(STATS_FILE))?;
    let mode = manifest.label_mode;
    Ok(DatasetBundle {
        train: load_split(&dir.join(TRAIN_FILE), "train", mode)?,
        val: load_split(&dir.join(VALID_FILE), "valid", mode)?,
        test: load_split(&dir.join(TEST_FILE), "test", mode)?,
        label_mode: mode,
        seed: manifest.seed,
        stats,
    })
}
