use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use arclite::bench::{run_case, CSV_HEADER};
use arclite::membench::{run_membench, MembenchConfig, MIN_BUFFER_BYTES};
use arclite::memory::{NumaMode, NUMA_MODE_ENV};
use arclite::model::{parse_token_list, toy_model, EngineConfig, Model, ModelConfig, ToyWeights, WeightFile};
use arclite::numa::parse_cpulist;
use arclite::scheduler::SyncMode;

#[derive(Parser)]
#[command(name = "arclite", version, about = "NUMA-aware CPU inference for decoder-only transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Greedy generation from a token-id prompt.
    Generate(GenerateArgs),
    /// Prefill/decode throughput as CSV, mean over repeated runs.
    Bench(BenchArgs),
    /// Memory bandwidth between every pair of NUMA nodes.
    Membench(MembenchArgs),
    /// Convert the matrices of a weight file to Q4B.
    Quantize(QuantizeArgs),
    /// Print weight-file header metadata.
    Inspect(InspectArgs),
    /// Write a seeded toy model.
    MakeToy(MakeToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum NumaArg {
    Real,
    Emulated,
}

impl From<NumaArg> for NumaMode {
    fn from(v: NumaArg) -> Self {
        match v {
            NumaArg::Real => NumaMode::Real,
            NumaArg::Emulated => NumaMode::Emulated,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SyncArg {
    A,
    B,
}

impl From<SyncArg> for SyncMode {
    fn from(v: SyncArg) -> Self {
        match v {
            SyncArg::A => SyncMode::A,
            SyncArg::B => SyncMode::B,
        }
    }
}

#[derive(Args)]
struct PlacementArgs {
    /// Memory placement; the ARCLITE_NUMA_MODE environment variable overrides it.
    #[arg(long, value_enum, default_value = "emulated")]
    numa: NumaArg,
    /// Number of NUMA nodes to use.
    #[arg(long, default_value_t = 1)]
    nodes: usize,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated token ids, or @FILE.
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    n_gen: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    input: PromptArgs,
    #[command(flatten)]
    placement: PlacementArgs,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Tensor-parallel lanes (1 disables).
    #[arg(long, default_value_t = 1)]
    tp: usize,
    #[arg(long, value_enum, default_value = "a")]
    sync_mode: SyncArg,
    /// Cores to pin worker threads to, e.g. 0-3,8.
    #[arg(long)]
    bind_cores: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    input: PromptArgs,
    #[command(flatten)]
    placement: PlacementArgs,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    tp: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "a")]
    sync_mode: Vec<SyncArg>,
    #[arg(long, default_value_t = 3)]
    runs: usize,
}

#[derive(Args)]
struct MembenchArgs {
    #[arg(long, default_value_t = MIN_BUFFER_BYTES >> 20)]
    buffer_mib: usize,
    #[arg(long, default_value_t = 3)]
    passes: usize,
    /// Reader threads per node (default: all of the node's CPUs).
    #[arg(long)]
    threads_per_node: Option<usize>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyKind {
    Integer,
    Random,
}

#[derive(Args)]
struct MakeToyArgs {
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    weights: ToyKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
}

fn numa_mode(p: &PlacementArgs) -> NumaMode {
    let mode = NumaMode::from_env_or(p.numa.into());
    if std::env::var_os(NUMA_MODE_ENV).is_some() {
        log::info!("{NUMA_MODE_ENV} selects {} mode", mode.as_str());
    }
    mode
}

fn read_prompt(arg: &str) -> Result<Vec<u32>> {
    let text = match arg.strip_prefix('@') {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading prompt file {path}"))?,
        None => arg.to_string(),
    };
    let ids = parse_token_list(&text).map_err(anyhow::Error::msg)?;
    if ids.is_empty() {
        bail!("prompt is empty");
    }
    Ok(ids)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let prompt = read_prompt(&a.input.prompt)?;
    let bind_cores = match &a.bind_cores {
        Some(list) => Some(parse_cpulist(list).with_context(|| format!("invalid core list `{list}`"))?),
        None => None,
    };
    let engine = EngineConfig {
        numa_mode: numa_mode(&a.placement),
        nodes: a.placement.nodes,
        threads: a.threads,
        tp: a.tp,
        sync: a.sync_mode.into(),
        bind_cores,
        check_locality: false,
    };
    let mut model = Model::load(&a.input.model, engine)?;
    let g = model.generate_timed(&prompt, a.input.n_gen)?;
    let ids: Vec<String> = g.tokens.iter().map(u32::to_string).collect();
    println!("{}", ids.join(","));
    let tps = if g.decode_steps == 0 {
        0.0
    } else {
        g.decode_steps as f64 / g.decode.as_secs_f64()
    };
    eprintln!(
        "prefill: {} tokens in {:.3?}; decode: {tps:.2} tokens/s",
        prompt.len(),
        g.prefill
    );
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let prompt = read_prompt(&a.input.prompt)?;
    let wf = WeightFile::load(&a.input.model)?;
    let mode = numa_mode(&a.placement);
    eprintln!("note: prefill is token-at-a-time; prefill_tps is not comparable with batched prefill engines");
    println!("{CSV_HEADER}");
    for &threads in &a.threads {
        for &tp in &a.tp {
            for &sync in &a.sync_mode {
                let engine = EngineConfig {
                    numa_mode: mode,
                    nodes: a.placement.nodes,
                    threads,
                    tp,
                    sync: sync.into(),
                    bind_cores: None,
                    check_locality: false,
                };
                let row = run_case(&wf, engine, &prompt, a.input.n_gen, a.runs)?;
                println!("{}", row.csv());
            }
        }
    }
    Ok(())
}

fn membench(a: MembenchArgs) -> Result<()> {
    let cfg = MembenchConfig {
        buffer_bytes: a.buffer_mib << 20,
        passes: a.passes,
        threads_per_node: a.threads_per_node,
    };
    print!("{}", run_membench(&cfg)?.render());
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let wf = WeightFile::load(&a.model)?;
    let q = wf.quantize()?;
    q.save(&a.output)?;
    let (before, after): (usize, usize) = (
        wf.tensors.iter().map(|t| t.data.len()).sum(),
        q.tensors.iter().map(|t| t.data.len()).sum(),
    );
    eprintln!("wrote {} ({before} -> {after} bytes of tensor data)", a.output.display());
    Ok(())
}

fn make_toy(a: MakeToyArgs) -> Result<()> {
    let mut cfg = ModelConfig::toy();
    if let Some(l) = a.layers {
        cfg.n_layers = l;
    }
    if let Some(s) = a.max_seq {
        cfg.max_seq = s;
    }
    cfg.validate()?;
    let kind = match a.weights {
        ToyKind::Integer => ToyWeights::Integer,
        ToyKind::Random => ToyWeights::Random,
    };
    toy_model(&cfg, kind, a.seed).save(&a.output)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Bench(a) => bench(a),
        Command::Membench(a) => membench(a),
        Command::Quantize(a) => quantize(a),
        Command::Inspect(a) => {
            print!("{}", WeightFile::load(&a.model)?.describe());
            Ok(())
        }
        Command::MakeToy(a) => make_toy(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
