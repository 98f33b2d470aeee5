//! Building blocks for turning objdump listings of Juliet-style testcases
//! into a function-level vulnerability dataset.

pub mod dataset;
pub mod disasm;
pub mod extract;
pub mod pipeline;
mod rng;
pub mod tokenizer;
pub mod transform;

pub use dataset::{DatasetBundle, DatasetStats, LabelMode, Manifest, SplitRatios, Splits};
pub use disasm::{
    parse_disassembly, parse_symbol_table, FunctionDisassembly, Instruction, ObjectDisassembly,
    SymbolTable,
};
pub use extract::{BinaryLabel, Example, Extractor, Role, TestcaseMeta};
pub use rng::keyed_rng;
pub use tokenizer::{train_bpe, BpeModel, LengthStats};
pub use transform::{render_function, RuntimeAllowlist, ScrambleTable};
