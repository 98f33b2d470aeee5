//! Symbol scrambling, operand rewriting and function rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::disasm::{
    split_symbolic_target, FunctionDisassembly, Instruction, SymbolRef, SymbolTable,
};
use crate::rng::keyed_rng;

/// Number of distinct `lcN` names available to one testcase.
pub const SCRAMBLE_CAPACITY: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransformError {
    #[error("testcase `{testcase_id}` has {locals} local symbols, more than the {SCRAMBLE_CAPACITY} scramble slots")]
    Capacity { testcase_id: String, locals: usize },
    #[error("testcase `{testcase_id}`: local symbol `{symbol}` has no scrambled name")]
    Unmapped { testcase_id: String, symbol: String },
    #[error("invalid scramble mapping for `{testcase_id}`: {reason}")]
    InvalidMapping { testcase_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Locality {
    Local,
    Global,
}

/// Names that stay readable in the output even when defined locally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeAllowlist {
    names: BTreeSet<String>,
}

pub const DEFAULT_ALLOWLIST: &str = include_str!("../resources/runtime_allowlist.txt");

impl Default for RuntimeAllowlist {
    fn default() -> Self {
        Self::parse(DEFAULT_ALLOWLIST)
    }
}

impl RuntimeAllowlist {
    /// One name per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Self {
        let names = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        RuntimeAllowlist { names }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }
}

pub fn classify_locality(
    symbol: &str,
    symtab: &SymbolTable,
    allowlist: &RuntimeAllowlist,
) -> Locality {
    if symtab.is_undefined(symbol) || allowlist.contains(symbol) {
        Locality::Global
    } else {
        Locality::Local
    }
}

/// Locality rule bound to one testcase's symbol table.
#[derive(Debug, Clone, Copy)]
pub struct LocalityClassifier<'a> {
    pub symtab: &'a SymbolTable,
    pub allowlist: &'a RuntimeAllowlist,
}

impl<'a> LocalityClassifier<'a> {
    pub fn new(symtab: &'a SymbolTable, allowlist: &'a RuntimeAllowlist) -> Self {
        LocalityClassifier { symtab, allowlist }
    }

    pub fn classify(&self, symbol: &str) -> Locality {
        classify_locality(symbol, self.symtab, self.allowlist)
    }

    pub fn is_local(&self, symbol: &str) -> bool {
        self.classify(symbol) == Locality::Local
    }
}

/// Per-testcase bijection from local symbols to `lcN` names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrambleTable {
    testcase_id: String,
    mapping: BTreeMap<String, u16>,
}

fn anon_name(index: u16) -> String {
    format!("lc{index}")
}

impl ScrambleTable {
    pub fn empty(testcase_id: &str) -> Self {
        ScrambleTable {
            testcase_id: testcase_id.to_string(),
            mapping: BTreeMap::new(),
        }
    }

    /// Draws distinct random slots for `locals`, skipping names listed in
    /// `reserved` and names already used by one of the locals themselves.
    pub fn build_avoiding(
        locals: &BTreeSet<String>,
        reserved: &BTreeSet<String>,
        testcase_id: &str,
        seed: u64,
    ) -> Result<Self, TransformError> {
        let capacity_error = || TransformError::Capacity {
            testcase_id: testcase_id.to_string(),
            locals: locals.len(),
        };
        if locals.len() > SCRAMBLE_CAPACITY {
            return Err(capacity_error());
        }
        let mut slots: Vec<u16> = (0..SCRAMBLE_CAPACITY as u16).collect();
        slots.shuffle(&mut keyed_rng(seed, "scramble", testcase_id.as_bytes()));

        let mut next = slots.into_iter();
        let mut mapping = BTreeMap::new();
        for local in locals {
            let slot = next
                .by_ref()
                .find(|&s| {
                    let name = anon_name(s);
                    !reserved.contains(&name) && !locals.contains(&name)
                })
                .ok_or_else(capacity_error)?;
            mapping.insert(local.clone(), slot);
        }
        Ok(ScrambleTable {
            testcase_id: testcase_id.to_string(),
            mapping,
        })
    }

    /// A fixed table, e.g. to reproduce a known rendering.
    pub fn from_pairs<I, S>(testcase_id: &str, pairs: I) -> Result<Self, TransformError>
    where
        I: IntoIterator<Item = (S, u16)>,
        S: Into<String>,
    {
        let invalid = |reason: String| TransformError::InvalidMapping {
            testcase_id: testcase_id.to_string(),
            reason,
        };
        let mut mapping = BTreeMap::new();
        let mut used = BTreeSet::new();
        for (name, slot) in pairs {
            let name = name.into();
            if slot as usize >= SCRAMBLE_CAPACITY {
                return Err(invalid(format!("slot {slot} out of range")));
            }
            if !used.insert(slot) {
                return Err(invalid(format!("slot {slot} assigned twice")));
            }
            if mapping.insert(name.clone(), slot).is_some() {
                return Err(invalid(format!("`{name}` listed twice")));
            }
        }
        Ok(ScrambleTable {
            testcase_id: testcase_id.to_string(),
            mapping,
        })
    }

    pub fn testcase_id(&self) -> &str {
        &self.testcase_id
    }

    pub fn get(&self, symbol: &str) -> Option<String> {
        self.mapping.get(symbol).map(|&s| anon_name(s))
    }

    pub fn original_of(&self, anon: &str) -> Option<&str> {
        let slot: u16 = anon.strip_prefix("lc")?.parse().ok()?;
        self.mapping
            .iter()
            .find(|(_, &s)| s == slot)
            .map(|(name, _)| name.as_str())
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, String)> {
        self.mapping
            .iter()
            .map(|(k, &v)| (k.as_str(), anon_name(v)))
    }
}

pub fn build_scramble_table(
    locals: &BTreeSet<String>,
    testcase_id: &str,
    seed: u64,
) -> Result<ScrambleTable, TransformError> {
    ScrambleTable::build_avoiding(locals, &BTreeSet::new(), testcase_id, seed)
}

/// One rendered instruction plus the number of raw addresses it lost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedLine {
    pub text: String,
    pub dropped_addresses: usize,
}

fn render_symbol(
    r: &SymbolRef,
    table: &ScrambleTable,
    locality: &LocalityClassifier<'_>,
) -> Result<String, TransformError> {
    let name = if locality.is_local(&r.symbol) {
        table
            .get(&r.symbol)
            .ok_or_else(|| TransformError::Unmapped {
                testcase_id: table.testcase_id.clone(),
                symbol: r.symbol.clone(),
            })?
    } else {
        r.symbol.clone()
    };
    Ok(if r.offset == 0 {
        name
    } else {
        format!("{name}+{:#x}", r.offset)
    })
}

fn is_branch(mnemonic: &str) -> bool {
    mnemonic == "call"
        || mnemonic.starts_with('j')
        || mnemonic.starts_with("loop")
        || mnemonic == "xbegin"
}

fn is_memory_address(op: &str) -> bool {
    op.contains("rip+") || op.contains("rip-") || op.contains("[rip]") || op.contains("ds:0x")
}

fn is_bare_address(op: &str) -> bool {
    !op.is_empty() && op.chars().all(|c| c.is_ascii_hexdigit())
}

pub fn normalize_instruction(
    insn: &Instruction,
    table: &ScrambleTable,
    locality: &LocalityClassifier<'_>,
) -> Result<NormalizedLine, TransformError> {
    let comment = insn
        .annotation
        .as_ref()
        .filter(|a| insn.target.as_ref() != Some(*a));

    let mut dropped = 0;
    let mut operands = Vec::with_capacity(insn.operands.len());
    for op in &insn.operands {
        if split_symbolic_target(op).is_some() {
            match &insn.target {
                Some(t) => operands.push(render_symbol(t, table, locality)?),
                None => dropped += 1,
            }
        } else if is_memory_address(op) {
            match comment {
                Some(a) => operands.push(render_symbol(a, table, locality)?),
                None => dropped += 1,
            }
        } else if is_branch(&insn.mnemonic) && is_bare_address(op) {
            dropped += 1;
        } else {
            operands.push(op.clone());
        }
    }

    let mut text = String::new();
    for p in &insn.prefixes {
        text.push_str(p);
        text.push(' ');
    }
    text.push_str(&insn.mnemonic);
    if !operands.is_empty() {
        text.push(' ');
        text.push_str(&operands.join(","));
    }
    Ok(NormalizedLine {
        text,
        dropped_addresses: dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedFunction {
    pub header: String,
    pub lines: Vec<String>,
    pub dropped_addresses: usize,
}

impl RenderedFunction {
    pub fn to_text(&self) -> String {
        let mut out = self.header.clone();
        for l in &self.lines {
            out.push('\n');
            out.push_str(l);
        }
        out
    }
}

impl fmt::Display for RenderedFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

pub fn render_function(
    func: &FunctionDisassembly,
    table: &ScrambleTable,
    locality: &LocalityClassifier<'_>,
) -> Result<RenderedFunction, TransformError> {
    let name = render_symbol(&SymbolRef::new(func.name.clone(), 0), table, locality)?;
    let mut lines = Vec::with_capacity(func.instructions.len());
    let mut dropped = 0;
    for insn in &func.instructions {
        let line = normalize_instruction(insn, table, locality)?;
        dropped += line.dropped_addresses;
        lines.push(line.text);
    }
    Ok(RenderedFunction {
        header: format!("!{name}:"),
        lines,
        dropped_addresses: dropped,
    })
}
