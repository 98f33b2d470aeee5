//! Object model for objdump-style Intel-syntax listings and symbol tables.
//!
//! The listing grammar is the one `objdump -d -C -M intel` prints: function
//! headers `ADDR <name>:`, instruction lines `ADDR:\tBYTES\tMNEMONIC OPERANDS`,
//! with an optional trailing `# ADDR <sym+0xOFF>` comment. Only functions in
//! `.text` are kept; `.plt` stubs are recorded as imports in the symbol table.

use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("line {line}: malformed function header `{text}`")]
    MalformedHeader { line: usize, text: String },
    #[error("line {line}: instruction outside any function")]
    OrphanInstruction { line: usize },
    #[error("line {line}: malformed instruction line `{text}`")]
    MalformedInstruction { line: usize, text: String },
    #[error("line {line}: unrecognized line `{text}`")]
    Unrecognized { line: usize, text: String },
    #[error("line {line}: address {address:#x} does not follow the previous instruction of `{function}`")]
    NonMonotonic {
        line: usize,
        address: u64,
        function: String,
    },
    #[error("line {line}: malformed symbol row `{text}`")]
    MalformedSymbol { line: usize, text: String },
    #[error("symbol `{name}` is listed both as defined and as undefined")]
    ConflictingSymbol { name: String },
}

/// A symbol plus byte offset, as objdump prints it inside `<...>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolRef {
    pub symbol: String,
    pub offset: u64,
    /// Address printed in front of the `<...>` annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<u64>,
}

impl SymbolRef {
    pub fn new(symbol: impl Into<String>, offset: u64) -> Self {
        SymbolRef {
            symbol: symbol.into(),
            offset,
            address: None,
        }
    }

    /// Parses the inside of an objdump `<...>` annotation, e.g. `printf@plt`
    /// or `_IO_stdin_used+0x6e`. Version and `@plt` suffixes are dropped.
    pub fn parse_annotation(inner: &str, address: Option<u64>) -> Option<Self> {
        let inner = inner.trim();
        let (name, offset) = match inner.rfind("+0x") {
            Some(pos) if pos > 0 => match u64::from_str_radix(&inner[pos + 3..], 16) {
                Ok(off) => (&inner[..pos], off),
                Err(_) => (inner, 0),
            },
            _ => (inner, 0),
        };
        let name = strip_version_suffix(name);
        if name.is_empty() {
            return None;
        }
        Some(SymbolRef {
            symbol: name.to_string(),
            offset,
            address,
        })
    }

    /// Address of the symbol itself (annotation address minus offset).
    pub fn base_address(&self) -> Option<u64> {
        self.address.and_then(|a| a.checked_sub(self.offset))
    }
}

/// Drops `@plt`, `@GLIBC_2.2.5`, `@@GLIBC_2.34` style suffixes.
pub fn strip_version_suffix(name: &str) -> &str {
    match name.find('@') {
        Some(pos) if pos > 0 => &name[..pos],
        _ => name,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prefixes: Vec<String>,
    pub mnemonic: String,
    pub operands: Vec<String>,
    /// Effective symbolic annotation of the line. A trailing address comment
    /// takes precedence over an inline `<sym>` operand suffix.
    pub annotation: Option<SymbolRef>,
    /// Symbol of the `ADDR <sym>` operand (call/jump target), if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<SymbolRef>,
}

impl Instruction {
    /// Annotation and target symbols, without repeats.
    pub fn symbol_refs(&self) -> impl Iterator<Item = &SymbolRef> {
        let second = match (&self.annotation, &self.target) {
            (Some(a), Some(t)) if a.symbol == t.symbol => None,
            (_, t) => t.as_ref(),
        };
        self.annotation.iter().chain(second)
    }

    /// Index of the operand written as `ADDR <sym>`.
    pub fn target_operand(&self) -> Option<usize> {
        self.operands
            .iter()
            .position(|op| split_symbolic_target(op).is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDisassembly {
    pub name: String,
    pub section: String,
    pub start_address: u64,
    pub instructions: Vec<Instruction>,
    pub callees: Vec<String>,
}

impl FunctionDisassembly {
    pub fn new(name: impl Into<String>, section: impl Into<String>, start_address: u64) -> Self {
        FunctionDisassembly {
            name: name.into(),
            section: section.into(),
            start_address,
            instructions: Vec::new(),
            callees: Vec::new(),
        }
    }

    /// Recomputes `callees` from the instruction stream.
    pub fn refresh_callees(&mut self) {
        self.callees = extract_callees(self);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolEntry {
    pub name: String,
    pub defined: bool,
    pub section: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<SymbolEntry>", into = "Vec<SymbolEntry>")]
pub struct SymbolTable {
    entries: Vec<SymbolEntry>,
    index: HashMap<String, usize>,
}

impl From<Vec<SymbolEntry>> for SymbolTable {
    fn from(entries: Vec<SymbolEntry>) -> Self {
        let mut table = SymbolTable::default();
        for e in entries {
            if !table.index.contains_key(&e.name) {
                table.index.insert(e.name.clone(), table.entries.len());
                table.entries.push(e);
            }
        }
        table
    }
}

impl From<SymbolTable> for Vec<SymbolEntry> {
    fn from(t: SymbolTable) -> Self {
        t.entries
    }
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[SymbolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&SymbolEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn is_undefined(&self, name: &str) -> bool {
        self.get(name).is_some_and(|e| !e.defined)
    }

    /// Adds an entry. Repeats with the same definedness are ignored; a repeat
    /// that flips definedness is an error.
    pub fn insert(&mut self, entry: SymbolEntry) -> Result<(), ParseError> {
        if let Some(&i) = self.index.get(&entry.name) {
            if self.entries[i].defined != entry.defined {
                return Err(ParseError::ConflictingSymbol { name: entry.name });
            }
            return Ok(());
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    /// Adds every entry of `other` whose name is not present yet.
    pub fn merge_missing(&mut self, other: &SymbolTable) {
        for e in &other.entries {
            if !self.index.contains_key(&e.name) {
                self.index.insert(e.name.clone(), self.entries.len());
                self.entries.push(e.clone());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectDisassembly {
    pub testcase_id: String,
    pub functions: Vec<FunctionDisassembly>,
    pub symbols: SymbolTable,
}

impl ObjectDisassembly {
    pub fn function(&self, name: &str) -> Option<&FunctionDisassembly> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_index(&self) -> HashMap<&str, &FunctionDisassembly> {
        self.functions
            .iter()
            .map(|f| (f.name.as_str(), f))
            .collect()
    }

    /// Replaces header-derived symbol information with a parsed symbol table,
    /// keeping header-derived entries the table does not list.
    pub fn with_symbol_table(mut self, table: SymbolTable) -> Self {
        let mut merged = table;
        merged.merge_missing(&self.symbols);
        self.symbols = merged;
        self
    }
}

/// Name given to the second and later `.text` functions sharing a name, e.g.
/// a testcase's static `good1` next to the support file's `good1` stub.
pub fn qualified_name(name: &str, address: u64) -> String {
    format!("{name}@{address:#x}")
}

/// Inverse of [`qualified_name`]; returns the name unchanged otherwise.
pub fn unqualified_name(name: &str) -> &str {
    match name.rfind("@0x") {
        Some(pos)
            if pos > 0
                && name[pos + 3..].chars().all(|c| c.is_ascii_hexdigit())
                && name.len() > pos + 3 =>
        {
            &name[..pos]
        }
        _ => name,
    }
}

const PREFIXES: &[&str] = &[
    "rep", "repe", "repz", "repne", "repnz", "lock", "bnd", "notrack", "data16", "data32",
    "addr16", "addr32", "xacquire", "xrelease", "cs", "ds", "es", "fs", "gs", "ss", "rex", "rex.W",
    "rex.R", "rex.X", "rex.B", "rex.WR", "rex.WB", "rex.WX", "rex.RB", "rex.RX", "rex.XB",
    "rex.WRB", "rex.WRX", "rex.WXB", "rex.RXB", "rex.WRXB",
];

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([0-9a-f]+) <(.+)>:$").unwrap())
}

fn insn_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*([0-9a-f]+):\t(.*)$").unwrap())
}

fn bytes_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([0-9a-f]{2} ?)+\s*$").unwrap())
}

fn comment_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:0x)?([0-9a-f]+)(?:\s+<(.+)>)?$").unwrap())
}

fn target_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([0-9a-f]+) <(.+)>$").unwrap())
}

fn section_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^Disassembly of section (\S+):$").unwrap())
}

/// Splits `1136 <goodB2GSink>` into its address and annotation text.
pub fn split_symbolic_target(operand: &str) -> Option<(u64, &str)> {
    let caps = target_re().captures(operand)?;
    let addr = u64::from_str_radix(caps.get(1)?.as_str(), 16).ok()?;
    Some((addr, caps.get(2)?.as_str()))
}

/// Splits an operand list on commas that are not nested inside
/// brackets, angle brackets or parentheses.
pub fn split_operands(text: &str) -> Vec<String> {
    let text = text.trim();
    if text.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '[' | '<' | '(' => depth += 1,
            ']' | '>' | ')' => depth = (depth - 1).max(0),
            ',' if depth == 0 => {
                out.push(text[start..i].trim().to_string());
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(text[start..].trim().to_string());
    out
}

/// Parses a single instruction line. `Ok(None)` marks lines that carry no
/// instruction: byte-continuation lines and `(bad)` decodes.
pub fn parse_instruction_line(
    line: &str,
    line_no: usize,
) -> Result<Option<Instruction>, ParseError> {
    let malformed = || ParseError::MalformedInstruction {
        line: line_no,
        text: line.to_string(),
    };
    let caps = insn_re().captures(line).ok_or_else(malformed)?;
    let address = u64::from_str_radix(&caps[1], 16).map_err(|_| malformed())?;
    let rest = caps.get(2).map_or("", |m| m.as_str());
    let (bytes, asm) = match rest.split_once('\t') {
        Some((b, a)) => (b, a),
        None => (rest, ""),
    };
    if !bytes_re().is_match(bytes) {
        return Err(malformed());
    }
    let asm = asm.trim();
    if asm.is_empty() || asm.starts_with("(bad)") {
        return Ok(None);
    }

    let (code, comment) = match asm.split_once('#') {
        Some((c, m)) => (c.trim_end(), Some(m.trim())),
        None => (asm, None),
    };

    let mut prefixes = Vec::new();
    let mut rest = code.trim();
    let mnemonic = loop {
        let (tok, tail) = match rest.split_once(char::is_whitespace) {
            Some((t, tail)) => (t, tail.trim_start()),
            None => (rest, ""),
        };
        if tok.is_empty() {
            return Err(malformed());
        }
        if !tail.is_empty() && PREFIXES.contains(&tok) {
            prefixes.push(tok.to_string());
            rest = tail;
            continue;
        }
        rest = tail;
        break tok.to_string();
    };
    let operands = split_operands(rest);

    let target = operands.iter().find_map(|op| {
        let (addr, inner) = split_symbolic_target(op)?;
        SymbolRef::parse_annotation(inner, Some(addr))
    });
    let from_comment = comment.and_then(|c| {
        let caps = comment_re().captures(c)?;
        let addr = u64::from_str_radix(&caps[1], 16).ok();
        SymbolRef::parse_annotation(caps.get(2)?.as_str(), addr)
    });
    let annotation = from_comment.or_else(|| target.clone());

    Ok(Some(Instruction {
        address,
        prefixes,
        mnemonic,
        operands,
        annotation,
        target,
    }))
}

enum Cursor {
    Outside,
    Skipping,
    Inside(usize),
}

fn is_import_section(section: &str) -> bool {
    section.starts_with(".plt")
}

/// Parses a full disassembly listing into per-function instruction streams.
pub fn parse_disassembly(text: &str, testcase_id: &str) -> Result<ObjectDisassembly, ParseError> {
    let mut functions: Vec<FunctionDisassembly> = Vec::new();
    let mut symbols = SymbolTable::new();
    let mut names: HashSet<String> = HashSet::new();
    let mut section = ".text".to_string();
    let mut cursor = Cursor::Outside;
    let mut has_duplicates = false;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end();

        if insn_re().is_match(line) {
            match cursor {
                Cursor::Outside => return Err(ParseError::OrphanInstruction { line: line_no }),
                Cursor::Skipping => continue,
                Cursor::Inside(idx) => {
                    if let Some(insn) = parse_instruction_line(line, line_no)? {
                        let func = &mut functions[idx];
                        if let Some(prev) = func.instructions.last() {
                            if insn.address <= prev.address {
                                return Err(ParseError::NonMonotonic {
                                    line: line_no,
                                    address: insn.address,
                                    function: func.name.clone(),
                                });
                            }
                        }
                        func.instructions.push(insn);
                    }
                }
            }
            continue;
        }

        if let Some(caps) = header_re().captures(line) {
            let address =
                u64::from_str_radix(&caps[1], 16).map_err(|_| ParseError::MalformedHeader {
                    line: line_no,
                    text: line.to_string(),
                })?;
            let name = caps[2].to_string();

            if is_import_section(&section) {
                if name.starts_with('.') {
                    cursor = Cursor::Skipping;
                    continue;
                }
                let _ = symbols.insert(SymbolEntry {
                    name: strip_version_suffix(&name).to_string(),
                    defined: false,
                    section: None,
                });
                cursor = Cursor::Skipping;
                continue;
            }
            if section != ".text" {
                let _ = symbols.insert(SymbolEntry {
                    name,
                    defined: true,
                    section: Some(section.clone()),
                });
                cursor = Cursor::Skipping;
                continue;
            }

            // Alias: a second label on an address whose function is still empty.
            if let Cursor::Inside(idx) = cursor {
                let current = &functions[idx];
                if current.start_address == address && current.instructions.is_empty() {
                    let _ = symbols.insert(SymbolEntry {
                        name,
                        defined: true,
                        section: Some(section.clone()),
                    });
                    continue;
                }
            }

            let name = if names.contains(&name) {
                has_duplicates = true;
                qualified_name(&name, address)
            } else {
                let _ = symbols.insert(SymbolEntry {
                    name: name.clone(),
                    defined: true,
                    section: Some(section.clone()),
                });
                name
            };
            names.insert(name.clone());
            functions.push(FunctionDisassembly::new(name, section.clone(), address));
            cursor = Cursor::Inside(functions.len() - 1);
            continue;
        }

        if line.trim().is_empty() || line.trim() == "..." {
            continue;
        }
        if let Some(caps) = section_re().captures(line) {
            section = caps[1].to_string();
            cursor = Cursor::Outside;
            continue;
        }
        if line.contains("file format ") {
            continue;
        }
        let looks_like_header = line.split_once(" <").is_some_and(|(addr, _)| {
            !addr.is_empty() && addr.chars().all(|c| c.is_ascii_hexdigit())
        });
        if looks_like_header {
            return Err(ParseError::MalformedHeader {
                line: line_no,
                text: line.to_string(),
            });
        }
        return Err(ParseError::Unrecognized {
            line: line_no,
            text: line.to_string(),
        });
    }

    if has_duplicates {
        resolve_duplicate_targets(&mut functions);
    }
    for f in &mut functions {
        f.refresh_callees();
    }

    Ok(ObjectDisassembly {
        testcase_id: testcase_id.to_string(),
        functions,
        symbols,
    })
}

/// Points references at the right function when several `.text` functions
/// share a name, using the address objdump printed next to the reference.
fn resolve_duplicate_targets(functions: &mut [FunctionDisassembly]) {
    let by_address: HashMap<u64, String> = functions
        .iter()
        .map(|f| (f.start_address, f.name.clone()))
        .collect();
    let fix = |r: &mut SymbolRef| {
        if let Some(name) = r.base_address().and_then(|a| by_address.get(&a)) {
            if *name != r.symbol && unqualified_name(name) == r.symbol {
                r.symbol = name.clone();
            }
        }
    };
    for f in functions.iter_mut() {
        for insn in &mut f.instructions {
            if let Some(a) = insn.annotation.as_mut() {
                fix(a);
            }
            if let Some(t) = insn.target.as_mut() {
                fix(t);
            }
        }
    }
}

/// Distinct symbols a function references, in first-occurrence order,
/// without the function itself.
pub fn extract_callees(func: &FunctionDisassembly) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for insn in &func.instructions {
        for r in insn.symbol_refs() {
            if r.symbol != func.name && seen.insert(r.symbol.as_str()) {
                out.push(r.symbol.clone());
            }
        }
    }
    out
}

const FLAG_CHARS: &str = "lgu!wCWIiDdFfO";

fn is_flag_token(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| FLAG_CHARS.contains(c))
}

fn version_token_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\(?[A-Za-z]+_[0-9][0-9.]*\)?|Base|\(Base\))$").unwrap())
}

/// Parses `objdump -t` style rows: `VALUE FLAGS SECTION SIZE NAME`.
pub fn parse_symbol_table(text: &str) -> Result<SymbolTable, ParseError> {
    let mut table = SymbolTable::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty()
            || line.ends_with("SYMBOL TABLE:")
            || line.contains("file format ")
            || line == "no symbols"
        {
            continue;
        }
        let malformed = || ParseError::MalformedSymbol {
            line: line_no,
            text: line.to_string(),
        };

        let mut spans = token_spans(line);
        let (_, value) = spans.next().ok_or_else(malformed)?;
        if !value.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(malformed());
        }
        let section = loop {
            let (_, tok) = spans.next().ok_or_else(malformed)?;
            if !is_flag_token(tok) {
                break tok;
            }
        };
        let (size_end, size) = spans.next().ok_or_else(malformed)?;
        if !size.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(malformed());
        }
        let mut name = line[size_end..].trim();
        if let Some((first, rest)) = name.split_once(char::is_whitespace) {
            if version_token_re().is_match(first) {
                name = rest.trim_start();
            }
        }
        if let Some(rest) = name.strip_prefix(".hidden ") {
            name = rest.trim_start();
        }
        let name = strip_version_suffix(name);
        if name.is_empty() {
            continue;
        }
        let defined = section != "*UND*";
        table.insert(SymbolEntry {
            name: name.to_string(),
            defined,
            section: defined.then(|| section.to_string()),
        })?;
    }
    Ok(table)
}

/// Whitespace-separated tokens paired with the byte offset just past each.
fn token_spans(line: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut pos = 0;
    std::iter::from_fn(move || {
        let rest = &line[pos..];
        let start = pos + (rest.len() - rest.trim_start().len());
        if start >= line.len() {
            return None;
        }
        let tail = &line[start..];
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        pos = start + len;
        Some((pos, &line[start..pos]))
    })
}
