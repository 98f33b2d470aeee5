//! Synthetic objdump output for integration tests.
//!
//! A tiny assembler lays out functions at concrete addresses and prints them
//! the way `objdump -d -C -M intel` and `objdump -t -C` do for a GCC-linked
//! Juliet testcase: crt boilerplate, a `.plt`, the testcase functions and the
//! shared `io.c` support code including its eighteen empty stubs.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub enum Op {
    /// `mnemonic operands`, printed with objdump's column padding.
    Plain(String),
    /// Printed verbatim after the byte column (prefixed mnemonics etc).
    Raw(String, usize),
    /// Direct call; imports are written as `name@plt`.
    Call(String),
    /// Direct jump to the op at `index` of the same function.
    Jump(&'static str, usize),
    /// rip-relative memory operand with an address comment. `{}` in the
    /// template is replaced by `[rip+0x..]`.
    Mem {
        mnemonic: &'static str,
        template: String,
        symbol: String,
        offset: u64,
    },
    /// Instruction long enough for objdump to wrap its byte column.
    Wide(String),
}

pub fn plain(s: &str) -> Op {
    Op::Plain(s.to_string())
}

pub fn call(s: &str) -> Op {
    Op::Call(s.to_string())
}

pub fn lea(reg: &str, symbol: &str, offset: u64) -> Op {
    Op::Mem {
        mnemonic: "lea",
        template: format!("{reg},{{}}"),
        symbol: symbol.to_string(),
        offset,
    }
}

pub fn load(dst: &str, width: &str, symbol: &str, offset: u64) -> Op {
    Op::Mem {
        mnemonic: "mov",
        template: format!("{dst},{width} PTR {{}}"),
        symbol: symbol.to_string(),
        offset,
    }
}

#[derive(Debug, Clone)]
pub struct Func {
    pub name: String,
    pub global: bool,
    pub ops: Vec<Op>,
    /// Support-file stub; calls by name prefer a same-named testcase function.
    pub stub: bool,
}

impl Func {
    pub fn new(name: &str, global: bool, ops: Vec<Op>) -> Self {
        Func {
            name: name.to_string(),
            global,
            ops,
            stub: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataSym {
    pub name: String,
    pub section: &'static str,
    pub address: u64,
    pub size: u64,
    pub flags: &'static str,
}

#[derive(Debug, Clone)]
pub struct Object {
    pub stem: String,
    pub functions: Vec<Func>,
    pub imports: Vec<String>,
    pub data: Vec<DataSym>,
}

const PLT_BASE: u64 = 0x1020;
const RODATA_BASE: u64 = 0x2000;
const DATA_BASE: u64 = 0x4000;

/// GOT slots of imports, as printed in `.plt` and indirect-call comments.
fn got_address(i: usize) -> u64 {
    0x3fd0 + 8 * i as u64
}

fn known_bytes(asm: &str) -> Option<&'static [u8]> {
    Some(match asm {
        "push rbp" => &[0x55],
        "pop rbp" => &[0x5d],
        "ret" => &[0xc3],
        "leave" => &[0xc9],
        "nop" => &[0x90],
        "endbr64" => &[0xf3, 0x0f, 0x1e, 0xfa],
        "mov rbp,rsp" => &[0x48, 0x89, 0xe5],
        "sub rsp,0x10" => &[0x48, 0x83, 0xec, 0x10],
        "mov eax,0x0" => &[0xb8, 0x00, 0x00, 0x00, 0x00],
        "mov edi,eax" => &[0x89, 0xc7],
        "mov esi,eax" => &[0x89, 0xc6],
        _ => return None,
    })
}

fn filler_bytes(text: &str, len: usize) -> Vec<u8> {
    text.bytes().cycle().take(len).collect()
}

fn op_len(op: &Op) -> usize {
    match op {
        Op::Plain(s) => known_bytes(s).map_or(3 + s.len() % 4, <[u8]>::len),
        Op::Raw(_, n) => *n,
        Op::Call(_) => 5,
        Op::Jump(..) => 2,
        Op::Mem { mnemonic, .. } => {
            if *mnemonic == "call" {
                6
            } else {
                7
            }
        }
        Op::Wide(_) => 10,
    }
}

fn byte_column(bytes: &[u8]) -> String {
    let mut s: String = bytes.iter().map(|b| format!("{b:02x} ")).collect();
    while s.len() < 21 {
        s.push(' ');
    }
    s
}

fn asm_column(text: &str) -> String {
    match text.split_once(' ') {
        Some((m, rest)) => format!("{m:<6} {rest}"),
        None => format!("{text:<6} "),
    }
}

fn insn_line(out: &mut String, address: u64, bytes: &[u8], asm: &str) {
    let (head, tail) = bytes.split_at(bytes.len().min(7));
    let _ = writeln!(out, "{address:>8x}:\t{}\t{asm}", byte_column(head));
    if !tail.is_empty() {
        let _ = writeln!(
            out,
            "{:>8x}:\t{}",
            address + 7,
            byte_column(tail).trim_end_matches(' ').to_string() + " "
        );
    }
}

fn symbolize(target: u64, base: u64, name: &str) -> String {
    if target == base {
        name.to_string()
    } else {
        format!("{name}+{:#x}", target - base)
    }
}

struct Layout {
    func_addr: BTreeMap<String, u64>,
    data_addr: BTreeMap<String, u64>,
    text_start: u64,
}

impl Object {
    fn plt_address(&self, name: &str) -> Option<u64> {
        self.imports
            .iter()
            .position(|i| i == name)
            .map(|i| PLT_BASE + 0x10 + 0x10 * i as u64)
    }

    fn layout(&self) -> (Layout, Vec<Vec<u64>>) {
        let text_start = (PLT_BASE + 0x10 + 0x10 * self.imports.len() as u64 + 0xf) & !0xf;
        let mut func_addr = BTreeMap::new();
        let mut op_addrs = Vec::new();
        let mut addr = text_start;
        for f in &self.functions {
            if f.stub {
                func_addr.entry(f.name.clone()).or_insert(addr);
            } else {
                func_addr.insert(f.name.clone(), addr);
            }
            let mut addrs = Vec::with_capacity(f.ops.len() + 1);
            for op in &f.ops {
                addrs.push(addr);
                addr += op_len(op) as u64;
            }
            addrs.push(addr);
            op_addrs.push(addrs);
        }
        let data_addr = self
            .data
            .iter()
            .map(|d| (data_lookup_name(d), d.address))
            .collect();
        (
            Layout {
                func_addr,
                data_addr,
                text_start,
            },
            op_addrs,
        )
    }

    /// Target of a call by name: a `.text` function with that name, or the
    /// import stub.
    fn call_target(&self, layout: &Layout, name: &str) -> (u64, String) {
        if let Some(&a) = layout.func_addr.get(name) {
            return (a, name.to_string());
        }
        let a = self
            .plt_address(name)
            .unwrap_or_else(|| panic!("{}: call to unknown function {name}", self.stem));
        (a, format!("{name}@plt"))
    }

    fn mem_target(&self, layout: &Layout, symbol: &str, offset: u64) -> u64 {
        if let Some(&a) = layout.data_addr.get(symbol) {
            return a + offset;
        }
        if let Some(&a) = layout.func_addr.get(symbol) {
            return a + offset;
        }
        if let Some((base, _)) = symbol.split_once('@') {
            let slot = self
                .imports
                .iter()
                .position(|n| n == base)
                .unwrap_or(self.imports.len());
            return got_address(slot) + offset;
        }
        panic!("{}: unknown data symbol {symbol}", self.stem)
    }

    pub fn disassembly(&self) -> String {
        let (layout, op_addrs) = self.layout();
        let mut out = String::new();
        let _ = writeln!(out, "\n{}.o:     file format elf64-x86-64\n\n", self.stem);
        let _ = writeln!(out, "Disassembly of section .init:\n");
        let _ = writeln!(out, "0000000000001000 <_init>:");
        insn_line(
            &mut out,
            0x1000,
            &[0xf3, 0x0f, 0x1e, 0xfa],
            &asm_column("endbr64"),
        );
        insn_line(
            &mut out,
            0x1004,
            &[0x48, 0x83, 0xec, 0x08],
            &asm_column("sub rsp,0x8"),
        );
        insn_line(
            &mut out,
            0x1008,
            &[0x48, 0x83, 0xc4, 0x08],
            &asm_column("add rsp,0x8"),
        );
        insn_line(&mut out, 0x100c, &[0xc3], &asm_column("ret"));

        let _ = writeln!(out, "\nDisassembly of section .plt:\n");
        let _ = writeln!(out, "{PLT_BASE:016x} <.plt>:");
        insn_line(
            &mut out,
            PLT_BASE,
            &[0xff, 0x35, 0x9a, 0x2f, 0x00, 0x00],
            "push   QWORD PTR [rip+0x2f9a]        # 3fc0 <_GLOBAL_OFFSET_TABLE_+0x8>",
        );
        insn_line(
            &mut out,
            PLT_BASE + 6,
            &[0xf2, 0xff, 0x25, 0x9b, 0x2f, 0x00, 0x00],
            "bnd jmp QWORD PTR [rip+0x2f9b]        # 3fc8 <_GLOBAL_OFFSET_TABLE_+0x10>",
        );
        insn_line(
            &mut out,
            PLT_BASE + 13,
            &[0x0f, 0x1f, 0x00],
            &asm_column("nop DWORD PTR [rax]"),
        );
        for (i, name) in self.imports.iter().enumerate() {
            let a = PLT_BASE + 0x10 + 0x10 * i as u64;
            let version = if name.starts_with("__stack") {
                "GLIBC_2.4"
            } else {
                "GLIBC_2.2.5"
            };
            let _ = writeln!(out, "\n{a:016x} <{name}@plt>:");
            insn_line(
                &mut out,
                a,
                &[0xff, 0x25, 0x9a, 0x2f, 0x00, 0x00],
                &format!(
                    "jmp    QWORD PTR [rip+{:#x}]        # {:x} <{name}@{version}>",
                    got_address(i) - (a + 6),
                    got_address(i)
                ),
            );
            insn_line(
                &mut out,
                a + 6,
                &[0x68, i as u8, 0, 0, 0],
                &format!("push   {i:#x}"),
            );
            insn_line(
                &mut out,
                a + 11,
                &[0xe9, 0xe0, 0xff, 0xff, 0xff],
                &format!("jmp    {PLT_BASE:x} <.plt>"),
            );
        }

        let _ = writeln!(out, "\nDisassembly of section .text:");
        for (f, addrs) in self.functions.iter().zip(&op_addrs) {
            let start = addrs[0];
            let _ = writeln!(out, "\n{start:016x} <{}>:", f.name);
            for (i, op) in f.ops.iter().enumerate() {
                let a = addrs[i];
                let next = addrs[i + 1];
                match op {
                    Op::Plain(s) => {
                        let bytes = known_bytes(s)
                            .map_or_else(|| filler_bytes(s, op_len(op)), <[u8]>::to_vec);
                        insn_line(&mut out, a, &bytes, &asm_column(s));
                    }
                    Op::Raw(s, n) => insn_line(&mut out, a, &filler_bytes(s, *n), s),
                    Op::Wide(s) => insn_line(&mut out, a, &filler_bytes(s, 10), &asm_column(s)),
                    Op::Call(name) => {
                        let (target, label) = self.call_target(&layout, name);
                        let rel = (target as i64 - next as i64) as i32;
                        let mut bytes = vec![0xe8];
                        bytes.extend_from_slice(&rel.to_le_bytes());
                        insn_line(&mut out, a, &bytes, &format!("call   {target:x} <{label}>"));
                    }
                    Op::Jump(mnemonic, index) => {
                        let target = addrs[*index];
                        let rel = (target as i64 - next as i64) as i8;
                        insn_line(
                            &mut out,
                            a,
                            &[0x7e, rel as u8],
                            &format!(
                                "{mnemonic:<6} {target:x} <{}>",
                                symbolize(target, start, &f.name)
                            ),
                        );
                    }
                    Op::Mem {
                        mnemonic,
                        template,
                        symbol,
                        offset,
                    } => {
                        let target = self.mem_target(&layout, symbol, *offset);
                        let disp = target - next;
                        let operand = template.replace("{}", &format!("[rip+{disp:#x}]"));
                        let label = if *offset == 0 {
                            symbol.clone()
                        } else {
                            format!("{symbol}+{offset:#x}")
                        };
                        let mut bytes = vec![0x48, 0x8d, 0x05];
                        bytes.extend_from_slice(&(disp as u32).to_le_bytes());
                        bytes.truncate(op_len(op));
                        insn_line(
                            &mut out,
                            a,
                            &bytes,
                            &format!("{mnemonic:<6} {operand}        # {target:x} <{label}>"),
                        );
                    }
                }
            }
        }
        let end = op_addrs
            .last()
            .and_then(|a| a.last())
            .copied()
            .unwrap_or(layout.text_start);
        let fini = (end + 3) & !3;
        let _ = writeln!(out, "\nDisassembly of section .fini:\n");
        let _ = writeln!(out, "{fini:016x} <_fini>:");
        insn_line(
            &mut out,
            fini,
            &[0xf3, 0x0f, 0x1e, 0xfa],
            &asm_column("endbr64"),
        );
        insn_line(
            &mut out,
            fini + 4,
            &[0x48, 0x83, 0xec, 0x08],
            &asm_column("sub rsp,0x8"),
        );
        insn_line(
            &mut out,
            fini + 8,
            &[0x48, 0x83, 0xc4, 0x08],
            &asm_column("add rsp,0x8"),
        );
        insn_line(&mut out, fini + 12, &[0xc3], &asm_column("ret"));
        out
    }

    pub fn symbol_table(&self) -> String {
        let (_, op_addrs) = self.layout();
        let mut out = String::new();
        let _ = writeln!(out, "\n{}.o:     file format elf64-x86-64\n", self.stem);
        let _ = writeln!(out, "SYMBOL TABLE:");
        let row =
            |out: &mut String, value: u64, flags: &str, section: &str, size: u64, name: &str| {
                let _ = writeln!(
                    out,
                    "{value:016x} {flags:<7} {section}\t{size:016x}              {name}"
                );
            };
        row(&mut out, 0, "l    df", "*ABS*", 0, "Scrt1.o");
        row(&mut out, 0, "l    df", "*ABS*", 0, "crtstuff.c");
        row(
            &mut out,
            0,
            "l    df",
            "*ABS*",
            0,
            &format!("{}.c", self.stem),
        );
        row(&mut out, 0, "l    df", "*ABS*", 0, "io.c");
        for d in &self.data {
            row(&mut out, d.address, d.flags, d.section, d.size, &d.name);
        }
        for (f, addrs) in self.functions.iter().zip(&op_addrs) {
            let flags = if f.global { "g     F" } else { "l     F" };
            let size = addrs.last().unwrap() - addrs[0];
            row(&mut out, addrs[0], flags, ".text", size, &f.name);
        }
        for name in &self.imports {
            let version = if name.starts_with("__stack") {
                "GLIBC_2.4"
            } else {
                "GLIBC_2.2.5"
            };
            row(
                &mut out,
                0,
                "      F",
                "*UND*",
                0,
                &format!("{name}@{version}"),
            );
        }
        row(
            &mut out,
            0,
            "      F",
            "*UND*",
            0,
            "__libc_start_main@GLIBC_2.34",
        );
        row(&mut out, 0, " w", "*UND*", 0, "_ITM_deregisterTMCloneTable");
        row(&mut out, 0, " w", "*UND*", 0, "__gmon_start__");
        row(&mut out, 0, " w", "*UND*", 0, "_ITM_registerTMCloneTable");
        row(
            &mut out,
            0,
            " w    F",
            "*UND*",
            0,
            "__cxa_finalize@GLIBC_2.2.5",
        );
        row(&mut out, 0x1000, "g     F", ".init", 0, ".hidden _init");
        out
    }
}

fn prologue(frame: bool) -> Vec<Op> {
    let mut v = vec![plain("endbr64"), plain("push rbp"), plain("mov rbp,rsp")];
    if frame {
        v.push(plain("sub rsp,0x10"));
    }
    v
}

fn with_body(frame: bool, body: Vec<Op>) -> Vec<Op> {
    let mut v = prologue(frame);
    v.extend(body);
    if frame {
        v.push(plain("leave"));
    } else {
        v.push(plain("pop rbp"));
    }
    v.push(plain("ret"));
    v
}

/// Offsets of string literals in `.rodata`, relative to `_IO_stdin_used`.
pub mod strings {
    pub const INT_FMT: u64 = 0x6e;
    pub const LONG_FMT: u64 = 0x71;
    pub const NEWLINE_FMT: u64 = 0x4;
    pub const HELLO: u64 = 0x8;
    pub const TOO_LARGE: u64 = 0x10;
    pub const CALLING_GOOD: u64 = 0x40;
    pub const CALLING_BAD: u64 = 0x58;
}

fn crt_functions() -> Vec<Func> {
    vec![
        Func::new(
            "_start",
            true,
            vec![
                plain("endbr64"),
                plain("xor ebp,ebp"),
                plain("mov r9,rdx"),
                plain("pop rsi"),
                plain("mov rdx,rsp"),
                plain("and rsp,0xfffffffffffffff0"),
                plain("push rax"),
                plain("push rsp"),
                plain("xor r8d,r8d"),
                plain("xor ecx,ecx"),
                lea("rdi", "main", 0),
                Op::Mem {
                    mnemonic: "call",
                    template: "QWORD PTR {}".into(),
                    symbol: "__libc_start_main@GLIBC_2.34".into(),
                    offset: 0,
                },
                plain("hlt"),
                Op::Raw("cs nop WORD PTR [rax+rax*1+0x0]".into(), 10),
            ],
        ),
        Func::new(
            "deregister_tm_clones",
            false,
            vec![
                lea("rdi", "__TMC_END__", 0),
                lea("rax", "__TMC_END__", 0),
                plain("cmp rax,rdi"),
                Op::Jump("je", 6),
                plain("test rax,rax"),
                Op::Jump("je", 6),
                plain("ret"),
            ],
        ),
        Func::new(
            "register_tm_clones",
            false,
            vec![
                lea("rdi", "__TMC_END__", 0),
                lea("rsi", "__TMC_END__", 0),
                plain("sub rsi,rdi"),
                plain("sar rsi,0x3"),
                Op::Jump("je", 5),
                plain("ret"),
            ],
        ),
        Func::new(
            "__do_global_dtors_aux",
            false,
            vec![
                plain("endbr64"),
                Op::Mem {
                    mnemonic: "cmp",
                    template: "BYTE PTR {},0x0".into(),
                    symbol: "completed.0".into(),
                    offset: 0,
                },
                Op::Jump("jne", 5),
                plain("push rbp"),
                call("deregister_tm_clones"),
                plain("ret"),
            ],
        ),
        Func::new(
            "frame_dummy",
            false,
            vec![plain("endbr64"), Op::Jump("jmp", 0)],
        ),
    ]
}

fn io_functions(order_seed: u64) -> Vec<Func> {
    let print_line = Func::new(
        "printLine",
        true,
        with_body(
            true,
            vec![
                plain("mov QWORD PTR [rbp-0x8],rdi"),
                plain("cmp QWORD PTR [rbp-0x8],0x0"),
                Op::Jump("je", 10),
                plain("mov rax,QWORD PTR [rbp-0x8]"),
                plain("mov rdi,rax"),
                call("puts"),
            ],
        ),
    );
    let print_int_line = Func::new(
        "printIntLine",
        true,
        with_body(
            true,
            vec![
                plain("mov DWORD PTR [rbp-0x4],edi"),
                plain("mov eax,DWORD PTR [rbp-0x4]"),
                plain("mov esi,eax"),
                lea("rdi", "_IO_stdin_used", strings::INT_FMT),
                plain("mov eax,0x0"),
                call("printf"),
                plain("nop"),
            ],
        ),
    );
    let print_long_line = Func::new(
        "printLongLine",
        true,
        with_body(
            true,
            vec![
                plain("mov QWORD PTR [rbp-0x8],rdi"),
                plain("mov rax,QWORD PTR [rbp-0x8]"),
                plain("mov rsi,rax"),
                lea("rdi", "_IO_stdin_used", strings::LONG_FMT),
                plain("mov eax,0x0"),
                call("printf"),
                plain("nop"),
            ],
        ),
    );
    let mut v = vec![print_line, print_int_line, print_long_line];
    let stubs = stub_functions();
    if order_seed.is_multiple_of(2) {
        v.extend(stubs);
    } else {
        let mut s = stubs;
        s.extend(v);
        v = s;
    }
    v
}

/// The eighteen empty `good1..9` / `bad1..9` functions of the support file.
pub fn stub_functions() -> Vec<Func> {
    (1..=9)
        .flat_map(|i| [format!("good{i}"), format!("bad{i}")])
        .map(|n| Func {
            stub: true,
            ..Func::new(&n, true, with_body(false, vec![plain("nop")]))
        })
        .collect()
}

fn main_function(good: &str, bad: &str) -> Func {
    Func::new(
        "main",
        true,
        with_body(
            true,
            vec![
                plain("mov DWORD PTR [rbp-0x4],edi"),
                plain("mov QWORD PTR [rbp-0x10],rsi"),
                plain("mov edi,0x0"),
                call("time"),
                plain("mov edi,eax"),
                call("srand"),
                lea("rdi", "_IO_stdin_used", strings::CALLING_GOOD),
                call("printLine"),
                call(good),
                lea("rdi", "_IO_stdin_used", strings::CALLING_BAD),
                call("printLine"),
                call(bad),
                plain("mov eax,0x0"),
            ],
        ),
    )
}

fn standard_data(extra: &[(&str, &'static str, u64)]) -> Vec<DataSym> {
    let mut v = vec![
        DataSym {
            name: "_IO_stdin_used".into(),
            section: ".rodata",
            address: RODATA_BASE,
            size: 4,
            flags: "g     O",
        },
        DataSym {
            name: ".hidden __dso_handle".into(),
            section: ".data",
            address: DATA_BASE + 0x8,
            size: 0,
            flags: "g     O",
        },
        DataSym {
            name: ".hidden __TMC_END__".into(),
            section: ".data",
            address: DATA_BASE + 0x10,
            size: 0,
            flags: "g     O",
        },
        DataSym {
            name: "completed.0".into(),
            section: ".bss",
            address: DATA_BASE + 0x20,
            size: 1,
            flags: "l     O",
        },
        DataSym {
            name: "globalTrue".into(),
            section: ".data",
            address: DATA_BASE + 0x30,
            size: 4,
            flags: "g     O",
        },
        DataSym {
            name: "globalFive".into(),
            section: ".data",
            address: DATA_BASE + 0x34,
            size: 4,
            flags: "g     O",
        },
    ];
    for (i, (name, flags, size)) in extra.iter().enumerate() {
        v.push(DataSym {
            name: name.to_string(),
            section: ".data",
            address: DATA_BASE + 0x40 + 0x10 * i as u64,
            size: *size,
            flags,
        });
    }
    v
}

/// Name instructions refer to; the table may prefix `.hidden`.
fn data_lookup_name(d: &DataSym) -> String {
    d.name.trim_start_matches(".hidden ").to_string()
}

fn assemble(
    stem: &str,
    mut testcase: Vec<Func>,
    good: &str,
    bad: &str,
    io_first: bool,
    imports: &[&str],
) -> Object {
    let mut functions = crt_functions();
    let io = io_functions(if io_first { 1 } else { 0 });
    if io_first {
        functions.extend(io);
        functions.append(&mut testcase);
    } else {
        functions.append(&mut testcase);
        functions.extend(io);
    }
    functions.push(main_function(good, bad));
    let mut all_imports: Vec<String> = ["puts", "printf", "time", "srand"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in imports {
        if !all_imports.iter().any(|x| x == i) {
            all_imports.push(i.to_string());
        }
    }
    Object {
        stem: stem.to_string(),
        functions,
        imports: all_imports,
        data: standard_data(&[]),
    }
}

// ---------------------------------------------------------------------------
// The checked-in twelve-testcase corpus
// ---------------------------------------------------------------------------

const INT_MIN: &str = "0x80000000";

fn underflow_compute(source: Vec<Op>, sink: &str) -> Vec<Op> {
    let mut v = source;
    v.extend([
        plain("mov eax,DWORD PTR [rbp-0x8]"),
        plain("sub eax,0x1"),
        plain("mov DWORD PTR [rbp-0x4],eax"),
        plain("mov eax,DWORD PTR [rbp-0x4]"),
        plain("mov edi,eax"),
        call(sink),
        plain("nop"),
    ]);
    v
}

/// `if (data > MIN) { result = data - 1; printIntLine(result); } else printLine(...)`
fn underflow_b2g(source: Vec<Op>, min: &str) -> Vec<Op> {
    let mut v = source;
    let base = prologue(true).len() + v.len();
    v.extend([
        plain(&format!("cmp DWORD PTR [rbp-0x8],{min}")),
        Op::Jump("jle", base + 9),
        plain("mov eax,DWORD PTR [rbp-0x8]"),
        plain("sub eax,0x1"),
        plain("mov DWORD PTR [rbp-0x4],eax"),
        plain("mov eax,DWORD PTR [rbp-0x4]"),
        plain("mov edi,eax"),
        call("printIntLine"),
        Op::Jump("jmp", base + 11),
        lea("rdi", "_IO_stdin_used", strings::TOO_LARGE),
        call("printLine"),
        plain("nop"),
    ]);
    v
}

fn cwe191_01(stem: &str, store: &str, min: &str, io_first: bool) -> Object {
    let bad_name = format!("{stem}_bad");
    let good_name = format!("{stem}_good");
    let set = |v: &str| vec![plain(&format!("{store} PTR [rbp-0x8],{v}"))];
    let tc = vec![
        Func::new(
            &bad_name,
            true,
            with_body(true, underflow_compute(set(min), "printIntLine")),
        ),
        Func::new(
            "goodG2B",
            false,
            with_body(true, underflow_compute(set("0xfffffffe"), "printIntLine")),
        ),
        Func::new(
            "goodB2G",
            false,
            with_body(true, underflow_b2g(set(min), min)),
        ),
        Func::new(
            &good_name,
            true,
            with_body(false, vec![call("goodG2B"), call("goodB2G"), plain("nop")]),
        ),
    ];
    assemble(stem, tc, &good_name, &bad_name, io_first, &[])
}

fn cwe191_42(stem: &str) -> Object {
    let bad_name = format!("{stem}_bad");
    let good_name = format!("{stem}_good");
    let source = |value: &str, message: Option<u64>| {
        let mut body = vec![plain("mov DWORD PTR [rbp-0x4],edi")];
        if let Some(m) = message {
            body.push(lea("rdi", "_IO_stdin_used", m));
            body.push(call("printLine"));
        }
        body.push(plain(&format!("mov DWORD PTR [rbp-0x4],{value}")));
        body.push(plain("mov eax,DWORD PTR [rbp-0x4]"));
        with_body(true, body)
    };
    let from = |src: &str| {
        vec![
            plain("mov DWORD PTR [rbp-0x8],0x0"),
            plain("mov eax,DWORD PTR [rbp-0x8]"),
            plain("mov edi,eax"),
            call(src),
            plain("mov DWORD PTR [rbp-0x8],eax"),
        ]
    };
    let tc = vec![
        Func::new("badSource", false, source(INT_MIN, Some(strings::HELLO))),
        Func::new(
            &bad_name,
            true,
            with_body(true, underflow_compute(from("badSource"), "printIntLine")),
        ),
        Func::new(
            "goodG2BSource",
            false,
            source("0xfffffffe", Some(strings::HELLO)),
        ),
        Func::new(
            "goodG2B",
            false,
            with_body(
                true,
                underflow_compute(from("goodG2BSource"), "printIntLine"),
            ),
        ),
        Func::new("goodB2GSource", false, source(INT_MIN, None)),
        Func::new(
            "goodB2G",
            false,
            with_body(true, underflow_b2g(from("goodB2GSource"), INT_MIN)),
        ),
        Func::new(
            &good_name,
            true,
            with_body(false, vec![call("goodG2B"), call("goodB2G"), plain("nop")]),
        ),
    ];
    assemble(stem, tc, &good_name, &bad_name, false, &[])
}

fn overflow_body(elem: &str, count_bad: u32, count_good: u32, bad: bool) -> Vec<Op> {
    let n = if bad { count_bad } else { count_good };
    with_body(
        true,
        vec![
            Op::Raw("mov    rax,QWORD PTR fs:0x28".into(), 9),
            plain("mov QWORD PTR [rbp-0x8],rax"),
            plain("xor eax,eax"),
            plain(&format!("lea rax,[rbp-{:#x}]", 0x40 + n)),
            plain("mov QWORD PTR [rbp-0x58],rax"),
            plain(&format!("mov edx,{:#x}", 0x64)),
            plain("mov esi,0x0"),
            plain("mov rdi,rax"),
            call("memset"),
            plain(&format!("mov {elem} PTR [rbp-0x4],0x0")),
            Op::Wide("movabs rax,0x4141414141414141".into()),
            plain("mov rax,QWORD PTR [rbp-0x58]"),
            plain("mov rdi,rax"),
            call("printLine"),
            plain("nop"),
            plain("mov rax,QWORD PTR [rbp-0x8]"),
            Op::Raw("sub    rax,QWORD PTR fs:0x28".into(), 9),
            Op::Jump("je", 23),
            call("__stack_chk_fail"),
        ],
    )
}

fn cwe121_01(stem: &str, elem: &str, io_first: bool) -> Object {
    let bad_name = format!("{stem}_bad");
    let good_name = format!("{stem}_good");
    let tc = vec![
        Func::new(&bad_name, true, overflow_body(elem, 0x32, 0x64, true)),
        Func::new("goodG2B", false, overflow_body(elem, 0x32, 0x64, false)),
        Func::new(
            &good_name,
            true,
            with_body(false, vec![call("goodG2B"), plain("nop")]),
        ),
    ];
    assemble(
        stem,
        tc,
        &good_name,
        &bad_name,
        io_first,
        &["memset", "__stack_chk_fail"],
    )
}

fn cwe121_62(stem: &str) -> Object {
    let ns = stem.to_string();
    let q = |f: &str| format!("{ns}::{f}");
    let source = |size: u32| {
        with_body(
            true,
            vec![
                plain("mov QWORD PTR [rbp-0x8],rdi"),
                plain(&format!("lea rax,[rbp-{size:#x}]")),
                plain("mov rdx,QWORD PTR [rbp-0x8]"),
                plain("mov QWORD PTR [rdx],rax"),
                plain("nop"),
            ],
        )
    };
    let user = |src: &str| {
        with_body(
            true,
            vec![
                plain("lea rax,[rbp-0x10]"),
                plain("mov rdi,rax"),
                call(src),
                plain("mov rax,QWORD PTR [rbp-0x10]"),
                plain("mov edx,0x64"),
                plain("mov rdi,rax"),
                call("memcpy"),
                plain("mov rax,QWORD PTR [rbp-0x10]"),
                plain("mov rdi,rax"),
                call("printLine"),
                plain("nop"),
            ],
        )
    };
    let bad_src = q("badSource(char*&)");
    let good_src = q("goodG2BSource(char*&)");
    let tc = vec![
        Func::new(&q("bad()"), true, user(&bad_src)),
        Func::new(&bad_src, true, source(0x32)),
        Func::new(&q("goodG2B()"), false, user(&good_src)),
        Func::new(
            &q("good()"),
            true,
            with_body(false, vec![call(&q("goodG2B()")), plain("nop")]),
        ),
        Func::new(&good_src, true, source(0x64)),
    ];
    assemble(stem, tc, &q("good()"), &q("bad()"), false, &["memcpy"])
}

fn cwe546(stem: &str, message: u64, io_first: bool) -> Object {
    let bad_name = format!("{stem}_bad");
    let good_name = format!("{stem}_good");
    let body = || {
        with_body(
            false,
            vec![
                lea("rdi", "_IO_stdin_used", message),
                call("printLine"),
                plain("nop"),
            ],
        )
    };
    let tc = vec![
        Func::new(&bad_name, true, body()),
        Func::new("good1", false, body()),
        Func::new(
            &good_name,
            true,
            with_body(false, vec![call("good1"), plain("nop")]),
        ),
    ];
    assemble(stem, tc, &good_name, &bad_name, io_first, &[])
}

pub const MINI_JULIET_DIR: &str = "mini_juliet";

/// The twelve testcases of the checked-in corpus.
pub fn mini_juliet() -> Vec<Object> {
    vec![
        cwe191_01(
            "CWE191_Integer_Underflow__int_min_sub_01",
            "mov DWORD",
            INT_MIN,
            false,
        ),
        cwe191_01(
            "CWE191_Integer_Underflow__short_min_sub_01",
            "mov WORD",
            "0x8000",
            true,
        ),
        cwe191_42("CWE191_Integer_Underflow__int_min_sub_42"),
        cwe121_01(
            "CWE121_Stack_Based_Buffer_Overflow__CWE805_char_declare_loop_01",
            "BYTE",
            false,
        ),
        cwe121_01(
            "CWE121_Stack_Based_Buffer_Overflow__CWE805_int_declare_loop_01",
            "DWORD",
            true,
        ),
        cwe121_01(
            "CWE121_Stack_Based_Buffer_Overflow__CWE805_int64_t_declare_loop_01",
            "QWORD",
            false,
        ),
        cwe121_01(
            "CWE121_Stack_Based_Buffer_Overflow__CWE805_short_declare_loop_01",
            "WORD",
            true,
        ),
        cwe121_62("CWE121_Stack_Based_Buffer_Overflow__CWE805_char_declare_memcpy_62"),
        cwe546("CWE546_Suspicious_Comment__BUG_01", strings::HELLO, false),
        cwe546(
            "CWE546_Suspicious_Comment__FIXME_01",
            strings::HELLO + 0x8,
            true,
        ),
        cwe546(
            "CWE546_Suspicious_Comment__HACK_01",
            strings::HELLO + 0x10,
            false,
        ),
        cwe546(
            "CWE546_Suspicious_Comment__TODO_01",
            strings::HELLO + 0x18,
            true,
        ),
    ]
}

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
}

pub fn mini_juliet_dir() -> PathBuf {
    fixtures_dir().join(MINI_JULIET_DIR)
}

/// Writes `<stem>.dis` and `<stem>.sym` for each object into `dir`.
pub fn write_objects(objects: &[Object], dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for o in objects {
        std::fs::write(dir.join(format!("{}.dis", o.stem)), o.disassembly())?;
        std::fs::write(dir.join(format!("{}.sym", o.stem)), o.symbol_table())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Randomized testcases for the leakage property
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RandomCase {
    pub object: Object,
    /// Names of bad/good function pairs whose bodies are identical.
    pub twins: Vec<(String, String)>,
}

const TWIN_CWES: &[u32] = &[546, 561, 563, 570, 571];

/// A Juliet-shaped testcase with random helpers, data and call structure.
pub fn random_case(seed: u64, index: usize) -> RandomCase {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let cwes = [
        121u32, 122, 190, 191, 369, 401, 415, 476, 546, 561, 563, 570, 571, 690, 789,
    ];
    let cwe = *cwes.choose(&mut rng).unwrap();
    let flow = *[
        1u32, 2, 3, 9, 12, 21, 31, 41, 42, 44, 45, 51, 52, 53, 54, 61, 62, 63, 64, 65, 66, 67, 68,
        72, 81, 82, 84,
    ]
    .choose(&mut rng)
    .unwrap();
    let cpp = rng.gen_bool(0.3);
    let stem = format!("CWE{cwe}_Synthetic_Weakness__rand{index}_type_{flow:02}");
    let qual = |f: &str| {
        if cpp {
            format!("{stem}::{f}")
        } else {
            format!("{stem}_{f}")
        }
    };
    let statics = |f: &str| {
        if cpp {
            format!("{stem}::{f}()")
        } else {
            f.to_string()
        }
    };

    let helpers_bad: Vec<String> = (0..rng.gen_range(0..4))
        .map(|i| statics(["badSource", "badSink", "badVaSink", "badStatic"][i % 4]))
        .collect();
    let helpers_good: Vec<String> = (0..rng.gen_range(1..6))
        .map(|i| {
            statics(
                [
                    "goodG2B",
                    "goodB2G",
                    "goodG2BSink",
                    "goodB2GSource",
                    "good1",
                    "goodStatic",
                ][i % 6],
            )
        })
        .collect();
    let globals_extra: Vec<(String, &'static str, u64)> = (0..rng.gen_range(0..3))
        .map(|i| {
            let name = ["badGlobal", "goodGlobal", "CWE_goodB2GData"][i].to_string();
            (
                name,
                if rng.gen_bool(0.5) {
                    "g     O"
                } else {
                    "l     O"
                },
                8,
            )
        })
        .collect();

    let pick_data = |rng: &mut ChaCha8Rng| -> (String, u64) {
        if !globals_extra.is_empty() && rng.gen_bool(0.5) {
            (
                globals_extra[rng.gen_range(0..globals_extra.len())]
                    .0
                    .clone(),
                0,
            )
        } else if rng.gen_bool(0.5) {
            ("globalFive".into(), 0)
        } else {
            ("_IO_stdin_used".into(), rng.gen_range(1..0x80))
        }
    };
    let body = |rng: &mut ChaCha8Rng, callees: &[String]| -> Vec<Op> {
        let mut ops = Vec::new();
        let n = rng.gen_range(1..8);
        for _ in 0..n {
            match rng.gen_range(0..6) {
                0 if !callees.is_empty() => {
                    ops.push(call(&callees[rng.gen_range(0..callees.len())]))
                }
                1 => {
                    let (sym, off) = pick_data(rng);
                    ops.push(lea("rdi", &sym, off));
                }
                2 => {
                    let (sym, off) = pick_data(rng);
                    ops.push(load("eax", "DWORD", &sym, off));
                }
                3 => ops.push(call(
                    ["printf", "puts", "malloc", "free"][rng.gen_range(0..4)],
                )),
                4 => ops.push(call(
                    ["printLine", "printIntLine", "printLongLine"][rng.gen_range(0..3)],
                )),
                _ => ops.push(plain(&format!(
                    "mov DWORD PTR [rbp-{:#x}],{:#x}",
                    4 * rng.gen_range(1..8),
                    rng.gen_range(0..300)
                ))),
            }
        }
        if rng.gen_bool(0.3) && ops.len() > 1 {
            let target = prologue(true).len() + rng.gen_range(0..ops.len());
            ops.push(Op::Jump("jmp", target));
        }
        ops.push(plain("nop"));
        with_body(true, ops)
    };

    let mut tc = Vec::new();
    let mut names_bad = helpers_bad.clone();
    names_bad.dedup();
    let mut names_good = helpers_good.clone();
    names_good.sort();
    names_good.dedup();
    for (i, h) in names_bad.iter().enumerate() {
        let callees: Vec<String> = names_bad[i + 1..].to_vec();
        tc.push(Func::new(h, rng.gen_bool(0.3), body(&mut rng, &callees)));
    }
    for (i, h) in names_good.iter().enumerate() {
        let callees: Vec<String> = names_good[i + 1..].to_vec();
        tc.push(Func::new(h, rng.gen_bool(0.3), body(&mut rng, &callees)));
    }
    let bad_name = qual(if cpp { "bad()" } else { "bad" });
    let good_name = qual(if cpp { "good()" } else { "good" });
    let mut twins = Vec::new();
    if TWIN_CWES.contains(&cwe) || rng.gen_bool(0.2) {
        let twin_body = body(&mut rng, &[]);
        let twin = statics("goodTwin");
        tc.push(Func::new(&bad_name, true, twin_body.clone()));
        tc.push(Func::new(&twin, false, twin_body));
        twins.push((bad_name.clone(), twin));
    } else {
        tc.push(Func::new(&bad_name, true, body(&mut rng, &names_bad)));
    }
    let mut good_calls: Vec<Op> = names_good.iter().map(|n| call(n)).collect();
    if let Some((_, twin)) = twins.first() {
        good_calls.push(call(twin));
    }
    good_calls.push(plain("nop"));
    tc.push(Func::new(&good_name, true, with_body(false, good_calls)));
    tc.shuffle(&mut rng);

    let mut object = assemble(
        &stem,
        tc,
        &good_name,
        &bad_name,
        rng.gen_bool(0.5),
        &["malloc", "free"],
    );
    let extra: Vec<(&str, &'static str, u64)> = globals_extra
        .iter()
        .map(|(n, f, s)| (n.as_str(), *f, *s))
        .collect();
    object.data = standard_data(&extra);
    RandomCase { object, twins }
}
