use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use romeo_core::pipeline::{self, PipelineConfig, PipelineError, DEFAULT_TOKEN_CAP};
use romeo_core::tokenizer::DEFAULT_VOCAB_SIZE;
use romeo_core::LabelMode;

const EXIT_FATAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "romeo",
    version,
    about = "Build function-level vulnerability datasets from objdump listings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse listings into a per-testcase object store.
    Ingest(Common),
    /// Run the full pipeline and write train/valid/test splits.
    Build(Common),
    /// Like build, restricted to the given CWEs before dedup and split.
    Subset(Common),
    /// Print the statistics table of a built dataset.
    Stats {
        /// Dataset directory or stats.json file.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train BPE on the train split and report token lengths per split.
    Tokenize {
        /// Built dataset directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
        vocab_size: usize,
        /// Length above which an example counts as over the model's limit.
        #[arg(long, default_value_t = DEFAULT_TOKEN_CAP)]
        token_cap: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Raw tree of `<stem>.dis`/`<stem>.sym` listings, or an ingest store.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, env = "ROMEO_SEED", default_value_t = 0)]
    seed: u64,
    /// Attach same-role callee context to each focal function (default).
    #[arg(long, overrides_with = "no_context")]
    context: bool,
    #[arg(long, overrides_with = "context")]
    no_context: bool,
    #[arg(long, default_value_t = LabelMode::Binary)]
    label_mode: LabelMode,
    /// CWE numbers to keep; repeatable or comma separated.
    #[arg(long, value_delimiter = ',')]
    cwe: Vec<u32>,
    #[arg(long)]
    role_regexes: Option<PathBuf>,
    #[arg(long)]
    allowlist: Option<PathBuf>,
    #[arg(long)]
    exclude_list: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    /// Shell template run per object file; `{object}`, `{dis}`, `{sym}`, `{stem}` are substituted.
    #[arg(long)]
    toolchain_cmd: Option<String>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl Common {
    fn config(&self) -> PipelineConfig {
        let mut c = PipelineConfig::new(&self.input, &self.output);
        c.with_context = !self.no_context;
        c.label_mode = self.label_mode;
        c.seed = self.seed;
        c.role_regexes = self.role_regexes.clone();
        c.allowlist = self.allowlist.clone();
        c.exclude_list = self.exclude_list.clone();
        c.cwe_filter = self.cwe.iter().copied().collect();
        c.vocab_size = self.vocab_size;
        c.toolchain_cmd = self.toolchain_cmd.clone();
        c.workers = self.workers;
        c
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Ingest(common) => {
            let report = pipeline::cmd_ingest(&common.config())?;
            println!(
                "parsed {}, failed {}, warnings {}",
                report.parsed.len(),
                report.failures.len(),
                report.warnings.len()
            );
            for f in &report.failures {
                println!("failed {}: {}", f.file, f.error);
            }
        }
        Command::Build(common) => {
            let bundle = pipeline::cmd_build(&common.config())?;
            print!("{}", pipeline::render_stats(&bundle.stats));
        }
        Command::Subset(common) => {
            let cwes: BTreeSet<u32> = common.cwe.iter().copied().collect();
            let bundle = pipeline::cmd_subset(&common.config(), &cwes)?;
            print!("{}", pipeline::render_stats(&bundle.stats));
        }
        Command::Stats { input } => print!("{}", pipeline::cmd_stats(&input)?),
        Command::Tokenize {
            input,
            output,
            vocab_size,
            token_cap,
        } => {
            let (model, stats) = pipeline::cmd_tokenize(&input, &output, vocab_size, token_cap)?;
            println!(
                "vocab {} ({} merges)",
                model.vocab_size(),
                model.merges().len()
            );
            println!(
                "{:<8} {:>8} {:>10} {:>8} {:>10}",
                "split", "examples", "mean", "max", "over cap"
            );
            for (name, s) in [
                ("train", &stats.train),
                ("valid", &stats.valid),
                ("test", &stats.test),
            ] {
                println!(
                    "{:<8} {:>8} {:>10.1} {:>8} {:>9.2}%",
                    name,
                    s.examples,
                    s.mean_tokens,
                    s.max_tokens,
                    s.over_cap_fraction * 100.0
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_FATAL
            })
        }
    }
}
