use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use postlink::passes::{BlockAlgorithm, FunctionAlgorithm, IcpOptions, PipelineConfig, SplitMode};
use postlink::workload::Shape;

#[derive(Debug, Parser)]
#[command(name = "postlink", version, about = "Profile-driven code layout on a text program model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the layout pipeline and write the optimized model, plan and pass log.
    Optimize(OptimizeArgs),
    /// Run two pass configurations on the same inputs and report both.
    Compare(CompareArgs),
    /// Generate a synthetic model and a trace for it.
    Gen(GenArgs),
    /// Write a heat map of executed code.
    Heatmap(HeatmapArgs),
    /// Print profile and layout statistics for a model and trace.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Lbr,
    Samples,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// Program model file.
    pub model: PathBuf,
    /// Trace files; their stacks and samples are concatenated.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
}

/// Pass selection. Single-dash spellings such as `-reorder-blocks=ph` are
/// accepted as well.
#[derive(Debug, Clone, Parser)]
#[command(no_binary_name = true)]
pub struct PassArgs {
    #[arg(long, default_value = "lbr", value_enum)]
    pub mode: Mode,
    #[arg(long, default_value = "none", value_parser = parse_blocks)]
    pub reorder_blocks: BlockAlgorithm,
    #[arg(long, default_value = "none", value_parser = parse_functions)]
    pub reorder_functions: FunctionAlgorithm,
    /// none, cold or aggressive; bare flag means cold.
    #[arg(long, default_value = "none", num_args = 0..=1, default_missing_value = "cold", value_parser = parse_split)]
    pub split_functions: SplitMode,
    #[arg(long, default_value = "0", num_args = 0..=1, default_missing_value = "1", value_parser = parse_switch)]
    pub icf: bool,
    /// Enables indirect call promotion at this share of a site's calls.
    #[arg(long)]
    pub icp_threshold: Option<f64>,
    #[arg(long)]
    pub strip_nops: bool,
    #[arg(long)]
    pub eliminate_unreachable: bool,
    #[arg(long, value_parser = parse_hex)]
    pub hot_base: Option<u64>,
    #[arg(long, value_parser = parse_hex)]
    pub cold_base: Option<u64>,
}

impl PassArgs {
    pub fn pipeline_config(&self) -> PipelineConfig {
        let layout = self.reorder_blocks != BlockAlgorithm::None || self.split_functions != SplitMode::None;
        let assign = layout
            || self.reorder_functions != FunctionAlgorithm::None
            || self.hot_base.is_some()
            || self.cold_base.is_some();
        PipelineConfig {
            strip_nops: self.strip_nops,
            icf: self.icf,
            icp: self.icp_threshold.map(|threshold| IcpOptions {
                threshold,
                ..IcpOptions::default()
            }),
            reorder_blocks: self.reorder_blocks,
            split: self.split_functions,
            uce: self.eliminate_unreachable,
            fixup: layout,
            reorder_functions: self.reorder_functions,
            assign_addresses: assign,
            hot_base: self.hot_base,
            cold_base: self.cold_base,
            ..PipelineConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub passes: PassArgs,
    /// Directory for optimized.txt, plan.txt, passes.log and dyno.txt.
    #[arg(short, long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Also write before/after branch statistics.
    #[arg(long)]
    pub dyno_stats: bool,
    #[arg(long)]
    pub emit_profile: Option<PathBuf>,
    /// CSV heat map of the optimized layout; needs branch stacks.
    #[arg(long)]
    pub heatmap_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Pass flags of the first run, as one string.
    #[arg(long, allow_hyphen_values = true, default_value = "")]
    pub a: String,
    #[arg(long, allow_hyphen_values = true, default_value = "")]
    pub b: String,
    #[arg(long, default_value = "A")]
    pub name_a: String,
    #[arg(long, default_value = "B")]
    pub name_b: String,
    /// Split each run's gain into function and block ordering.
    #[arg(long)]
    pub breakdown: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub functions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub hot_fraction: f64,
    /// diamond, loop, correlated or mixed.
    #[arg(long, default_value = "mixed")]
    pub shape: Shape,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub stacks: usize,
    /// Chance per executed instruction of an IP sample.
    #[arg(long, default_value_t = 0.01)]
    pub sample_rate: f64,
    #[arg(short, long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Layout plan to map the trace onto; defaults to the model's own layout.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Also write a binary graymap.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, default_value = "lbr", value_enum)]
    pub mode: Mode,
}

fn parse_blocks(s: &str) -> Result<BlockAlgorithm, String> {
    s.parse().map_err(|e: postlink::PassError| e.to_string())
}

fn parse_functions(s: &str) -> Result<FunctionAlgorithm, String> {
    s.parse().map_err(|e: postlink::PassError| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitMode, String> {
    s.parse().map_err(|e: postlink::PassError| e.to_string())
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(format!("expected 0 or 1, got `{other}`")),
    }
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let digits = s.strip_prefix("0x").ok_or_else(|| format!("expected 0x<hex>, got `{s}`"))?;
    u64::from_str_radix(digits, 16).map_err(|e| e.to_string())
}

/// Rewrites `-long-flag` to `--long-flag`; short flags and values are kept.
pub fn normalize(arg: &str) -> String {
    let bytes = arg.as_bytes();
    let long_single = bytes.len() > 2 && bytes[0] == b'-' && bytes[1].is_ascii_alphabetic();
    let name_len = arg.find('=').unwrap_or(arg.len());
    if long_single && name_len > 2 {
        format!("-{arg}")
    } else {
        arg.to_string()
    }
}

/// Parses a whitespace-separated flag string such as `-reorder-blocks=ph -icf`.
pub fn parse_pass_string(s: &str) -> Result<PassArgs, clap::Error> {
    PassArgs::try_parse_from(s.split_whitespace().map(normalize))
}
