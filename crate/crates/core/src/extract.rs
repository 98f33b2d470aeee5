//! Function roles, context construction and example emission.
//!
//! Roles follow the Juliet naming conventions. Only primary bad and secondary
//! good functions become examples; primary good functions are classified so
//! that context filtering can see them, but never emitted.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::disasm::{unqualified_name, FunctionDisassembly, ObjectDisassembly};
use crate::transform::{
    render_function, LocalityClassifier, RuntimeAllowlist, ScrambleTable, TransformError,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("role pattern file line {line}: {reason}")]
    RolePattern { line: usize, reason: String },
    #[error("`{0}` does not follow the CWE<id>_<name>__<variant>_<flow> naming convention")]
    Filename(String),
    #[error("`{filename}`: CWE-{cwe} is not a Juliet weakness class")]
    UnknownCwe { filename: String, cwe: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    PrimaryGood,
    SecondaryGood,
    PrimaryBad,
    Support,
}

impl Role {
    pub fn is_good(self) -> bool {
        matches!(self, Role::PrimaryGood | Role::SecondaryGood)
    }

    /// Roles that become dataset examples.
    pub fn is_emitted(self) -> bool {
        matches!(self, Role::SecondaryGood | Role::PrimaryBad)
    }

    fn from_key(key: &str) -> Option<Role> {
        match key {
            "primary_bad" => Some(Role::PrimaryBad),
            "primary_good" => Some(Role::PrimaryGood),
            "secondary_good" => Some(Role::SecondaryGood),
            "support" => Some(Role::Support),
            _ => None,
        }
    }
}

pub const DEFAULT_ROLE_PATTERNS: &str = include_str!("../resources/role_regexes.txt");
pub const DEFAULT_EXCLUSIONS: &str = include_str!("../resources/exclusions.txt");

/// Ordered role patterns; the first matching pattern decides.
#[derive(Debug, Clone)]
pub struct RoleRules {
    rules: Vec<(Role, Regex)>,
}

impl Default for RoleRules {
    fn default() -> Self {
        Self::parse(DEFAULT_ROLE_PATTERNS).expect("built-in role patterns are valid")
    }
}

impl RoleRules {
    /// Lines of `ROLE REGEX`; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ExtractError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| ExtractError::RolePattern {
                line: i + 1,
                reason,
            };
            let (key, pattern) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| err("expected `ROLE REGEX`".into()))?;
            let role = Role::from_key(key).ok_or_else(|| err(format!("unknown role `{key}`")))?;
            let re = Regex::new(pattern.trim()).map_err(|e| err(e.to_string()))?;
            rules.push((role, re));
        }
        Ok(RoleRules { rules })
    }

    pub fn load(path: &Path) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        Ok(Self::parse(&std::fs::read_to_string(path)?)?)
    }

    pub fn classify(&self, name: &str) -> Role {
        let name = unqualified_name(name);
        self.rules
            .iter()
            .find(|(_, re)| re.is_match(name))
            .map_or(Role::Support, |(role, _)| *role)
    }
}

/// Role under the built-in patterns.
pub fn classify_role(name: &str) -> Role {
    static RULES: OnceLock<RoleRules> = OnceLock::new();
    RULES.get_or_init(RoleRules::default).classify(name)
}

/// Functions that never appear as context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExclusionList {
    names: BTreeSet<String>,
}

impl Default for ExclusionList {
    fn default() -> Self {
        Self::parse(DEFAULT_EXCLUSIONS)
    }
}

impl ExclusionList {
    pub fn parse(text: &str) -> Self {
        let names = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        ExclusionList { names }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(unqualified_name(name))
    }

    pub fn to_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }
}

/// `good1`..`good9` and `bad1`..`bad9`, the empty support-file functions.
pub fn default_stub_names() -> BTreeSet<String> {
    (1..=9)
        .flat_map(|i| [format!("good{i}"), format!("bad{i}")])
        .collect()
}

const EMPTY_BODY: &[&str] = &[
    "endbr64",
    "push rbp",
    "mov rbp,rsp",
    "nop",
    "pop rbp",
    "leave",
    "ret",
];

fn has_empty_body(func: &FunctionDisassembly) -> bool {
    func.instructions.iter().all(|insn| {
        let text = if insn.operands.is_empty() {
            insn.mnemonic.clone()
        } else {
            format!("{} {}", insn.mnemonic, insn.operands.join(","))
        };
        insn.annotation.is_none() && EMPTY_BODY.contains(&text.as_str())
    })
}

/// Removes the empty support stubs linked into every testcase.
///
/// A stub is a function whose name is in `stub_names` and whose body does
/// nothing. Testcases may define their own non-empty `good1` next to the stub;
/// that one stays and takes back its plain name.
pub fn strip_support_stubs(
    object: &ObjectDisassembly,
    stub_names: &BTreeSet<String>,
) -> ObjectDisassembly {
    let mut out = object.clone();
    out.functions
        .retain(|f| !(stub_names.contains(unqualified_name(&f.name)) && has_empty_body(f)));

    let taken: HashSet<String> = out.functions.iter().map(|f| f.name.clone()).collect();
    let renames: BTreeMap<String, String> = out
        .functions
        .iter()
        .filter_map(|f| {
            let base = unqualified_name(&f.name);
            (base != f.name && !taken.contains(base)).then(|| (f.name.clone(), base.to_string()))
        })
        .collect();
    if !renames.is_empty() {
        for f in &mut out.functions {
            if let Some(base) = renames.get(&f.name) {
                f.name = base.clone();
            }
            for insn in &mut f.instructions {
                for r in insn.annotation.iter_mut().chain(insn.target.iter_mut()) {
                    if let Some(base) = renames.get(&r.symbol) {
                        r.symbol = base.clone();
                    }
                }
            }
        }
    }
    for f in &mut out.functions {
        f.refresh_callees();
    }
    out
}

pub type RoleMap = BTreeMap<String, Role>;

pub fn role_map(object: &ObjectDisassembly, rules: &RoleRules) -> RoleMap {
    object
        .functions
        .iter()
        .map(|f| (f.name.clone(), rules.classify(&f.name)))
        .collect()
}

/// Functions reachable from `focal`, depth-first preorder, each at most once.
///
/// Excluded functions and functions of the opposite label are not traversed,
/// so whatever only they reach is left out as well.
pub fn build_context<'a>(
    focal: &FunctionDisassembly,
    object: &'a ObjectDisassembly,
    roles: &RoleMap,
    exclusions: &ExclusionList,
) -> Vec<&'a FunctionDisassembly> {
    let index = object.function_index();
    let focal_role = roles.get(&focal.name).copied().unwrap_or(Role::Support);
    let blocked = |name: &str| {
        let role = roles.get(name).copied().unwrap_or(Role::Support);
        match focal_role {
            Role::PrimaryGood | Role::SecondaryGood => role == Role::PrimaryBad,
            Role::PrimaryBad => role.is_good(),
            Role::Support => false,
        }
    };

    let mut visited: HashSet<&str> = HashSet::new();
    visited.insert(focal.name.as_str());
    let mut out = Vec::new();
    let mut stack: Vec<(&[String], usize)> = vec![(&focal.callees, 0)];
    while let Some((callees, pos)) = stack.pop() {
        let Some(name) = callees.get(pos) else {
            continue;
        };
        stack.push((callees, pos + 1));
        let Some(&func) = index.get(name.as_str()) else {
            continue;
        };
        if visited.contains(name.as_str()) || exclusions.contains(name) || blocked(name) {
            continue;
        }
        visited.insert(func.name.as_str());
        out.push(func);
        stack.push((&func.callees, 0));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Good,
    Bad,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub focal_text: String,
    pub context_text: String,
    pub label_binary: BinaryLabel,
    pub cwe: u32,
    pub flow_variant: u32,
    pub testcase_id: String,
}

impl Example {
    /// Focal text, then the context on the following lines when present.
    pub fn text(&self) -> String {
        if self.context_text.is_empty() {
            self.focal_text.clone()
        } else {
            format!("{}\n{}", self.focal_text, self.context_text)
        }
    }

    /// Inverse of [`Example::text`]: context starts at the second header line.
    pub fn split_text(text: &str) -> (String, String) {
        match text.find("\n!") {
            Some(pos) => (text[..pos].to_string(), text[pos + 1..].to_string()),
            None => (text.to_string(), String::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestcaseMeta {
    pub cwe: u32,
    pub flow_variant: u32,
    pub testcase_id: String,
}

/// Weakness classes of the Juliet C/C++ 1.3 suite.
pub const JULIET_CWES: &[u32] = &[
    15, 23, 36, 78, 90, 114, 121, 122, 123, 124, 126, 127, 134, 176, 188, 190, 191, 194, 195, 196,
    197, 222, 223, 226, 242, 244, 247, 252, 253, 256, 259, 272, 273, 284, 319, 321, 325, 327, 328,
    338, 364, 366, 367, 369, 377, 390, 391, 396, 397, 398, 400, 401, 404, 415, 416, 426, 427, 440,
    457, 459, 464, 467, 468, 469, 475, 476, 478, 479, 480, 481, 482, 483, 484, 500, 506, 510, 511,
    526, 534, 535, 546, 561, 562, 563, 570, 571, 587, 588, 590, 591, 605, 606, 615, 617, 620, 665,
    666, 667, 672, 674, 675, 676, 680, 681, 685, 688, 690, 758, 761, 762, 773, 775, 780, 785, 789,
    832, 835, 843,
];

fn meta_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^CWE(\d+)_[A-Za-z0-9_]*?__[A-Za-z0-9_]*_(\d{2})(?:[a-z]|_bad|_good[A-Za-z0-9]*)?$",
        )
        .unwrap()
    })
}

/// Reads CWE and flow variant from a Juliet file name (directories and
/// extensions are ignored).
pub fn parse_testcase_meta(filename: &str) -> Result<TestcaseMeta, ExtractError> {
    let base = Path::new(filename)
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or(filename);
    let stem = base.split('.').next().unwrap_or(base);
    let caps = meta_re()
        .captures(stem)
        .ok_or_else(|| ExtractError::Filename(filename.to_string()))?;
    let cwe: u32 = caps[1]
        .parse()
        .map_err(|_| ExtractError::Filename(filename.to_string()))?;
    let flow_variant: u32 = caps[2]
        .parse()
        .map_err(|_| ExtractError::Filename(filename.to_string()))?;
    if !JULIET_CWES.contains(&cwe) {
        return Err(ExtractError::UnknownCwe {
            filename: filename.to_string(),
            cwe,
        });
    }
    if flow_variant == 0 {
        return Err(ExtractError::Filename(filename.to_string()));
    }
    Ok(TestcaseMeta {
        cwe,
        flow_variant,
        testcase_id: stem.to_string(),
    })
}

/// What one example will contain, by original function name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePlan {
    pub focal: String,
    pub role: Role,
    pub context: Vec<String>,
}

/// Shared, read-only configuration for turning objects into examples.
#[derive(Debug, Clone, Default)]
pub struct Extractor {
    pub roles: RoleRules,
    pub exclusions: ExclusionList,
    pub allowlist: RuntimeAllowlist,
    pub stub_names: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub examples: Vec<Example>,
    pub dropped_addresses: usize,
}

impl Extractor {
    pub fn new(roles: RoleRules, exclusions: ExclusionList, allowlist: RuntimeAllowlist) -> Self {
        Extractor {
            roles,
            exclusions,
            allowlist,
            stub_names: default_stub_names(),
        }
    }

    pub fn with_defaults() -> Self {
        Self::new(
            RoleRules::default(),
            ExclusionList::default(),
            RuntimeAllowlist::default(),
        )
    }

    pub fn locality<'a>(&'a self, object: &'a ObjectDisassembly) -> LocalityClassifier<'a> {
        LocalityClassifier::new(&object.symbols, &self.allowlist)
    }

    /// Function names and referenced symbols that must be scrambled.
    pub fn local_symbols(&self, object: &ObjectDisassembly) -> BTreeSet<String> {
        let locality = self.locality(object);
        let mut out = BTreeSet::new();
        for f in &object.functions {
            if locality.is_local(&f.name) {
                out.insert(f.name.clone());
            }
            for insn in &f.instructions {
                for r in insn.symbol_refs() {
                    if locality.is_local(&r.symbol) {
                        out.insert(r.symbol.clone());
                    }
                }
            }
        }
        out
    }

    /// Global names of the object; scrambled names must avoid them.
    pub fn global_symbols(&self, object: &ObjectDisassembly) -> BTreeSet<String> {
        let locality = self.locality(object);
        object
            .symbols
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .filter(|n| !locality.is_local(n))
            .collect()
    }

    pub fn scramble_table(
        &self,
        object: &ObjectDisassembly,
        seed: u64,
    ) -> Result<ScrambleTable, TransformError> {
        ScrambleTable::build_avoiding(
            &self.local_symbols(object),
            &self.global_symbols(object),
            &object.testcase_id,
            seed,
        )
    }

    pub fn plan_examples(
        &self,
        object: &ObjectDisassembly,
        with_context: bool,
    ) -> Vec<ExamplePlan> {
        let roles = role_map(object, &self.roles);
        object
            .functions
            .iter()
            .filter_map(|f| {
                let role = roles[&f.name];
                if !role.is_emitted() {
                    return None;
                }
                let context = if with_context {
                    build_context(f, object, &roles, &self.exclusions)
                        .into_iter()
                        .map(|c| c.name.clone())
                        .collect()
                } else {
                    Vec::new()
                };
                Some(ExamplePlan {
                    focal: f.name.clone(),
                    role,
                    context,
                })
            })
            .collect()
    }

    /// One example per emitted-role function of an already stub-stripped object.
    pub fn emit_examples(
        &self,
        object: &ObjectDisassembly,
        meta: &TestcaseMeta,
        table: &ScrambleTable,
        with_context: bool,
    ) -> Result<Emission, TransformError> {
        let locality = self.locality(object);
        let index = object.function_index();
        let mut examples = Vec::new();
        let mut dropped = 0;
        for plan in self.plan_examples(object, with_context) {
            let focal = render_function(index[plan.focal.as_str()], table, &locality)?;
            dropped += focal.dropped_addresses;
            let mut context = Vec::with_capacity(plan.context.len());
            for name in &plan.context {
                let r = render_function(index[name.as_str()], table, &locality)?;
                dropped += r.dropped_addresses;
                context.push(r.to_text());
            }
            examples.push(Example {
                focal_text: focal.to_text(),
                context_text: context.join("\n"),
                label_binary: if plan.role == Role::PrimaryBad {
                    BinaryLabel::Bad
                } else {
                    BinaryLabel::Good
                },
                cwe: meta.cwe,
                flow_variant: meta.flow_variant,
                testcase_id: meta.testcase_id.clone(),
            });
        }
        Ok(Emission {
            examples,
            dropped_addresses: dropped,
        })
    }
}
