use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use uninas_core::archspace::{family, space_size, ArchitectureSpec, ModelId, ReferenceBase, ARITIES, DECISION_NAMES};
use uninas_core::archspace::{CHANNEL_MULTS, NUM_STAGES, REPEAT_DELTAS};
use uninas_core::cost::{arch_cost, CostReport};
use uninas_core::dsm::DsmKind;
use uninas_core::gops::{GopKind, EXPANSIONS};
use uninas_core::search::{
    export_topk, run_search, ControllerConfig, Evaluator, ProxyConfig, ProxyEvaluator, RankedArchitecture,
    RewardConfig, SearchConfig, SurrogateEvaluator,
};
use uninas_core::selftest::{run_selftest, SelftestOptions};

#[derive(Debug, Parser)]
#[command(name = "uninas", version, about = "Unified conv/attention/MLP architecture search")]
struct Cli {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Table, global = true)]
    format: Format,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvaluatorKind {
    Surrogate,
    Proxy,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the size and decision domains of the search space.
    SpaceInfo,
    /// Analytical MACs and parameters of an architecture.
    Cost {
        /// Architecture JSON file.
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        arch: Option<PathBuf>,
        /// Bundled family member, b0..b6.
        #[arg(long)]
        model: Option<String>,
        /// Override the input resolution.
        #[arg(long)]
        input: Option<usize>,
    },
    /// Run the controller-driven search.
    Search {
        #[arg(long, value_enum, default_value_t = EvaluatorKind::Surrogate)]
        evaluator: EvaluatorKind,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 550e6)]
        target_flops: f64,
        #[arg(long, default_value_t = 0.07)]
        alpha: f64,
        /// Directory for history.csv and the top-k JSON files.
        #[arg(long, default_value = "search_out")]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Evaluation threads; defaults to all cores.
        #[arg(long)]
        workers: Option<usize>,
        /// Training epochs per architecture for the proxy evaluator.
        #[arg(long, default_value_t = 5)]
        proxy_epochs: usize,
        /// Record evaluation wall time (history then differs between runs).
        #[arg(long)]
        record_wall_time: bool,
    },
    /// Run the built-in consistency checks.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

enum Failure {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::User(e)
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::SpaceInfo => space_info(cli.format),
        Command::Cost { arch, model, input } => cost(cli.format, arch.as_deref(), model.as_deref(), input),
        Command::Search {
            evaluator,
            samples,
            target_flops,
            alpha,
            out,
            topk,
            workers,
            proxy_epochs,
            record_wall_time,
        } => {
            let cfg = SearchConfig {
                num_samples: samples,
                topk,
                proxy_epochs,
                seed: cli.seed,
                workers,
                record_wall_time,
            };
            search(cli.format, evaluator, target_flops, alpha, &out, &cfg)
        }
        Command::Selftest { inject_fault } => selftest(
            cli.format,
            &SelftestOptions {
                seed: cli.seed,
                inject_fault,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serialises"));
}

fn space_info(format: Format) -> CliResult {
    let size = space_size(NUM_STAGES);
    let domains: Vec<Vec<String>> = vec![
        GopKind::ALL.iter().map(|g| g.to_string()).collect(),
        DsmKind::ALL.iter().map(|d| d.to_string()).collect(),
        EXPANSIONS.iter().map(|e| e.to_string()).collect(),
        CHANNEL_MULTS.iter().map(|c| c.to_string()).collect(),
        REPEAT_DELTAS.iter().map(|r| format!("{r:+}")).collect(),
    ];
    match format {
        Format::Json => {
            let per_stage: u64 = size.per_stage.clone().try_into().map_err(|e| anyhow!("{e}"))?;
            let total: u64 = size.total.clone().try_into().map_err(|e| anyhow!("{e}"))?;
            let decisions: Vec<_> = DECISION_NAMES
                .iter()
                .zip(&domains)
                .map(|(name, values)| json!({ "name": name, "values": values }))
                .collect();
            print_json(&json!({
                "stages": NUM_STAGES,
                "per_stage": per_stage,
                "total": total,
                "decisions": decisions,
            }));
        }
        Format::Table => {
            println!("stages          {NUM_STAGES}");
            println!("per-stage size  {}", size.per_stage);
            println!("total size      {}", size.total);
            println!();
            for ((name, arity), values) in DECISION_NAMES.iter().zip(ARITIES).zip(&domains) {
                println!("{name:<14}  {arity}  {}", values.join(" "));
            }
        }
    }
    Ok(())
}

fn load_spec(arch: Option<&Path>, model: Option<&str>) -> anyhow::Result<ArchitectureSpec> {
    match (arch, model) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ArchitectureSpec::from_json(&text).with_context(|| format!("in {}", path.display()))
        }
        (None, Some(m)) => Ok(family(m.parse::<ModelId>()?)),
        (None, None) => Err(anyhow!("one of --arch or --model is required")),
    }
}

fn cost(format: Format, arch: Option<&Path>, model: Option<&str>, input: Option<usize>) -> CliResult {
    let mut spec = load_spec(arch, model)?;
    if let Some(n) = input {
        spec = spec.with_input_size(n).map_err(anyhow::Error::from)?;
    }
    let report = arch_cost(&spec);
    match format {
        Format::Json => print_json(&serde_json::to_value(&report).expect("report serialises")),
        Format::Table => print_cost_table(&spec, &report),
    }
    Ok(())
}

fn mega(x: u64) -> String {
    format!("{:.3}", x as f64 / 1e6)
}

fn print_cost_table(spec: &ArchitectureSpec, report: &CostReport) {
    println!("input {}x{}", report.input_size, report.input_size);
    println!("{:<10} {:<8} {:>6} {:>8} {:>12} {:>12}", "component", "gop", "width", "repeats", "MMACs", "Mparams");
    println!("{:<10} {:<8} {:>6} {:>8} {:>12} {:>12}", "stem", "", "", "", mega(report.stem_macs), mega(report.stem_params));
    for (i, st) in spec.stages.iter().enumerate() {
        if i > 0 {
            let (m, p) = (report.per_boundary_dsm_macs[i - 1], report.per_boundary_dsm_params[i - 1]);
            let name = format!("dsm{i}");
            println!("{:<10} {:<8} {:>6} {:>8} {:>12} {:>12}", name, st.dsm.to_string(), "", "", mega(m), mega(p));
        }
        let name = format!("stage{i}");
        let (m, p) = (report.per_stage_macs[i], report.per_stage_params[i]);
        println!(
            "{:<10} {:<8} {:>6} {:>8} {:>12} {:>12}",
            name,
            st.gop.to_string(),
            st.channels,
            st.repeats,
            mega(m),
            mega(p)
        );
    }
    println!("{:<10} {:<8} {:>6} {:>8} {:>12} {:>12}", "head", "", "", "", mega(report.head_macs), mega(report.head_params));
    println!("{:<10} {:<8} {:>6} {:>8} {:>12} {:>12}", "total", "", "", "", mega(report.total_macs), mega(report.total_params));
}

fn search(
    format: Format,
    kind: EvaluatorKind,
    target_flops: f64,
    alpha: f64,
    out: &Path,
    cfg: &SearchConfig,
) -> CliResult {
    let reward_cfg = RewardConfig::new(target_flops, alpha).map_err(|e| anyhow!(e))?;
    cfg.validate().map_err(|e| anyhow!(e))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let evaluator: Box<dyn Evaluator> = match kind {
        EvaluatorKind::Surrogate => Box::new(SurrogateEvaluator::default()),
        EvaluatorKind::Proxy => Box::new(ProxyEvaluator::new(ProxyConfig {
            epochs: cfg.proxy_epochs,
            ..ProxyConfig::default()
        })),
    };
    let history_path = out.join("history.csv");
    let outcome = run_search(
        &ReferenceBase::bundled(),
        evaluator.as_ref(),
        &reward_cfg,
        &ControllerConfig::default(),
        cfg,
        Some(&history_path),
    )
    .map_err(|e| anyhow!(e).context("search failed"))?;
    let paths = export_topk(&outcome.topk, out).map_err(|e| anyhow!(e).context("writing results"))?;
    match format {
        Format::Json => {
            let top: Vec<_> = outcome.topk.iter().map(|r| serde_json::to_value(r).expect("serialises")).collect();
            print_json(&json!({
                "samples": outcome.history.len(),
                "history": history_path,
                "topk": top,
                "files": paths,
            }));
        }
        Format::Table => print_topk(&outcome.topk, outcome.history.len(), &history_path),
    }
    Ok(())
}

fn print_topk(topk: &[RankedArchitecture], samples: usize, history: &Path) {
    println!("{samples} architectures evaluated, history in {}", history.display());
    println!("{:>4} {:>6} {:>10} {:>9} {:>9}  tokens", "rank", "index", "MMACs", "accuracy", "reward");
    for r in topk {
        println!(
            "{:>4} {:>6} {:>10} {:>9.4} {:>9.5}  {}",
            r.rank,
            r.index,
            mega(r.macs),
            r.accuracy,
            r.reward,
            r.tokens
        );
    }
}

fn selftest(format: Format, opts: &SelftestOptions) -> CliResult {
    let results = run_selftest(opts);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    match format {
        Format::Json => print_json(&json!({ "passed": failed.is_empty(), "checks": results })),
        Format::Table => {
            for r in &results {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!("{:<20} {:<5} {:>7} ms  {}", r.name, status, r.millis, r.detail);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Internal(anyhow!("failing checks: {}", failed.join(", "))))
    }
}
