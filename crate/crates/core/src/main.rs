use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use llmcd::error::{Error, Result};
use llmcd::report::{self, write_atomic};
use llmcd::search::{self, Axes, SearchSpec};
use llmcd::strategy::{Recompute, TpComm, TpOverlap, ZeroStage};
use llmcd::sweep::{self, Ablation, SweepSpec};
use llmcd::{ModelSpec, Precision, Strategy, SystemSpec};

#[derive(Parser)]
#[command(
    name = "llmcd",
    version,
    about = "Step-time, memory and MFU estimates for LLM training"
)]
struct Cli {
    /// Worker threads; LLMCD_THREADS takes precedence when set.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate one strategy.
    Estimate(EstimateArgs),
    /// Rank every valid strategy for a GPU count.
    Search(SearchArgs),
    /// Run a sweep file.
    Sweep(SweepArgs),
    /// Slowdown from removing an optimization, per GPU count of a baseline CSV.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct Context {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    system: PathBuf,
    #[arg(long)]
    batch: u64,
    /// Defaults to the model's sequence length.
    #[arg(long)]
    seq: Option<u64>,
}

#[derive(Args)]
struct StrategyArgs {
    /// Strategy JSON; overrides the individual flags.
    #[arg(long)]
    strategy: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    tp: u64,
    #[arg(long, default_value_t = 1)]
    pp: u64,
    #[arg(long, default_value_t = 1)]
    dp: u64,
    #[arg(long, default_value_t = 1)]
    ep: u64,
    /// Defaults to tp.
    #[arg(long)]
    es: Option<u64>,
    /// Defaults to tp*dp/(ep*es).
    #[arg(long)]
    dp_exp: Option<u64>,
    #[arg(long, default_value_t = 1)]
    microbatch: u64,
    #[arg(long, default_value_t = 1)]
    interleave: u64,
    #[arg(long, value_enum, default_value = "none")]
    recompute: RecomputeArg,
    #[arg(long, value_enum, default_value = "z0")]
    zero: ZeroArg,
    #[arg(long, value_enum, default_value = "allreduce")]
    tp_comm: TpCommArg,
    #[arg(long)]
    tp_overlap: bool,
    #[arg(long)]
    dp_overlap: bool,
    #[arg(long)]
    no_fused: bool,
    #[arg(long)]
    offload_weights: bool,
    #[arg(long)]
    offload_acts: bool,
    #[arg(long)]
    offload_opt: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecomputeArg {
    None,
    AttnOnly,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZeroArg {
    Z0,
    Z1,
    Z2,
}

#[derive(Clone, Copy, ValueEnum)]
enum TpCommArg {
    Allreduce,
    RsAg,
    P2pRsAg,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    ctx: Context,
    #[command(flatten)]
    strategy: StrategyArgs,
    /// Checked against tp*pp*dp when given.
    #[arg(long)]
    gpus: Option<u64>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    ctx: Context,
    #[arg(long)]
    gpus: u64,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every evaluated strategy with its rejection reason.
    #[arg(long)]
    all_out: Option<PathBuf>,
    /// Restrict to tp = es and ep = number of experts.
    #[arg(long)]
    nemo: bool,
    /// Exclude TP and DP overlap.
    #[arg(long)]
    no_overlap: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep JSON file.
    sweep: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    NoOverlap,
    SwCollectives,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    ctx: Context,
    #[arg(long, value_enum)]
    flag: AblationArg,
    /// CSV with GPU counts in axis_value and best step_s per row.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("LLMCD_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                Error::Range(format!(
                    "LLMCD_THREADS must be a positive integer, got {v:?}"
                ))
            }),
        Err(_) => Ok(flag),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(ctx: &Context) -> Result<(ModelSpec, SystemSpec, u64)> {
    let model = ModelSpec::load(&ctx.model)?;
    let sys = SystemSpec::load(&ctx.system)?;
    let seq = ctx.seq.unwrap_or(model.seq_len);
    Ok((model, sys, seq))
}

fn build_strategy(a: &StrategyArgs) -> Result<Strategy> {
    if let Some(p) = &a.strategy {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
        return serde_json::from_str(&text).map_err(|source| Error::Json {
            path: p.clone(),
            source,
        });
    }
    let es = a.es.unwrap_or(a.tp);
    let dp_exp = match a.dp_exp {
        Some(d) => d,
        None => {
            let domain = a.tp * a.dp;
            let expert = a.ep * es;
            if expert == 0 || !domain.is_multiple_of(expert) {
                return Err(Error::InvalidStrategy(
                    llmcd::strategy::Constraint::ExpertDomain,
                ));
            }
            domain / expert
        }
    };
    Ok(Strategy {
        tp: a.tp,
        pp: a.pp,
        dp: a.dp,
        ep: a.ep,
        es,
        dp_exp,
        microbatch: a.microbatch,
        interleave: a.interleave,
        recompute: match a.recompute {
            RecomputeArg::None => Recompute::None,
            RecomputeArg::AttnOnly => Recompute::AttnOnly,
            RecomputeArg::Full => Recompute::Full,
        },
        zero: match a.zero {
            ZeroArg::Z0 => ZeroStage::Z0,
            ZeroArg::Z1 => ZeroStage::Z1,
            ZeroArg::Z2 => ZeroStage::Z2,
        },
        tp_comm: match a.tp_comm {
            TpCommArg::Allreduce => TpComm::Allreduce,
            TpCommArg::RsAg => TpComm::RsAg,
            TpCommArg::P2pRsAg => TpComm::P2pRsAg,
        },
        tp_overlap: if a.tp_overlap {
            TpOverlap::Ring
        } else {
            TpOverlap::None
        },
        dp_overlap: a.dp_overlap,
        fused_activation: !a.no_fused,
        offload_weights: a.offload_weights,
        offload_acts: a.offload_acts,
        offload_opt: a.offload_opt,
    })
}

fn run_estimate(a: &EstimateArgs) -> Result<()> {
    let (model, sys, seq) = load(&a.ctx)?;
    let s = build_strategy(&a.strategy)?;
    s.validate(&model, a.ctx.batch, a.gpus)
        .map_err(Error::InvalidStrategy)?;
    let e = llmcd::estimate(&model, &sys, &s, a.ctx.batch, seq)?;
    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&e).expect("estimate serializes") + "\n",
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(Vec::new());
            w.write_record(report::HEADER)?;
            w.write_record(report::row("", &e))?;
            String::from_utf8(
                w.into_inner()
                    .map_err(|e| Error::Csv(e.into_error().into()))?,
            )
            .expect("utf-8")
        }
    };
    emit(a.out.as_deref(), &text)
}

fn run_search(a: &SearchArgs, threads: Option<usize>) -> Result<()> {
    let (model, sys, seq) = load(&a.ctx)?;
    let spec = SearchSpec {
        model: &model,
        sys: &sys,
        total_gpus: a.gpus,
        batch: a.ctx.batch,
        seq,
        precision: Precision::Fp8,
        axes: Axes {
            allow_overlap: !a.no_overlap,
        },
    };
    let nemo = search::nemo_default(&model);
    let filter: Option<search::Filter> = if a.nemo { Some(&nemo) } else { None };
    let result = search::search(&spec, a.top_n, filter, threads)?;
    if let Some(p) = &a.all_out {
        let all = search::evaluate_all(&spec, filter, threads)?;
        write_atomic(p, report::outcomes_csv(&all)?.as_bytes())?;
    }
    let text = match a.format {
        Format::Csv => report::search_csv(&result)?,
        Format::Json => {
            let v = json!({
                "best": result.top.first(),
                "stats": result.stats,
                "evaluated": result.evaluated,
                "feasible": result.feasible,
                "rejected": result.rejected.iter().map(|(c, n)| (format!("{c:?}"), n)).collect::<std::collections::BTreeMap<_, _>>(),
                "infeasible": result.infeasible,
            });
            serde_json::to_string_pretty(&v).expect("json") + "\n"
        }
    };
    emit(a.out.as_deref(), &text)
}

fn run_sweep(a: &SweepArgs, threads: Option<usize>) -> Result<()> {
    let (spec, base) = SweepSpec::load(&a.sweep)?;
    let model = sweep::resolve_model(&spec.model, &base)?;
    let sys = sweep::resolve_system(&spec.system, &base)?;
    let points = sweep::run_sweep(&spec, &model, &sys, threads)?;
    emit(a.out.as_deref(), &sweep::sweep_csv(&points)?)
}

fn run_ablate(a: &AblateArgs, threads: Option<usize>) -> Result<()> {
    let (model, sys, seq) = load(&a.ctx)?;
    let baseline = sweep::read_baseline(&a.baseline)?;
    let flag = match a.flag {
        AblationArg::NoOverlap => Ablation::NoOverlap,
        AblationArg::SwCollectives => Ablation::SwCollectives,
    };
    let rows = sweep::ablate(&model, &sys, a.ctx.batch, seq, flag, &baseline, threads)?;
    emit(a.out.as_deref(), &sweep::ablation_csv(&rows)?)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Json { .. } | Error::Csv(_) => 2,
        Error::Infeasible(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || -> Result<()> {
        let threads = threads(cli.threads)?;
        match &cli.command {
            Command::Estimate(a) => run_estimate(a),
            Command::Search(a) => run_search(a, threads),
            Command::Sweep(a) => run_sweep(a, threads),
            Command::Ablate(a) => run_ablate(a, threads),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut diag = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::Infeasible(v) = &e {
                diag["violation"] = serde_json::to_value(v).expect("violation serializes");
            }
            eprintln!("{diag}");
            ExitCode::from(exit_code(&e))
        }
    }
}
