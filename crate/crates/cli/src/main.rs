mod search;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dfprune::bundle::{load_evalset, load_model, save_model};
use dfprune::env::{
    apply_strategy, flops_ratio, model_signature, observe_layer, param_ratio, Strategy, DEFAULT_SEARCH_EPISODES,
    DEFAULT_WARMUP,
};
use dfprune::nn::accuracy_with_workers;
use dfprune::nn::{LayerNode, ModelGraph};
use dfprune::plan::build_prunable_plan;
use dfprune::pruner::BudgetMode;
use dfprune::similarity::{LayerState, StateConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dfprune", version, about = "Data-free structured pruning of CNN bundles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the state features of every prunable layer.
    Analyze(AnalyzeArgs),
    /// Search for a per-layer pruning strategy under a parameter budget.
    Search(SearchArgs),
    /// Report accuracy, MACs and parameters of a model bundle.
    Eval(EvalArgs),
    /// Replay a saved strategy and write the pruned bundle.
    Apply(ApplyArgs),
    /// Compare layer shapes and sizes of two bundles.
    Diff(DiffArgs),
}

#[derive(Args, Clone)]
struct StateArgs {
    /// DBSCAN neighbourhood radius (inclusive).
    #[arg(long, default_value_t = 0.3)]
    dbscan_eps: f64,
    /// DBSCAN core-point threshold; defaults to max(2, ceil(0.05 N)).
    #[arg(long)]
    min_pts: Option<usize>,
    /// Threshold t for the P(B < t) feature.
    #[arg(long, default_value_t = 0.1)]
    bias_threshold: f64,
}

impl StateArgs {
    fn config(&self) -> StateConfig {
        StateConfig {
            eps: self.dbscan_eps,
            min_pts: self.min_pts,
            bias_threshold: self.bias_threshold,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON report path.
    #[arg(long, default_value = "analysis.json")]
    out: PathBuf,
    #[command(flatten)]
    state: StateArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BudgetArg {
    Exact,
    LowerBound,
}

impl From<BudgetArg> for BudgetMode {
    fn from(b: BudgetArg) -> Self {
        match b {
            BudgetArg::Exact => BudgetMode::Exact,
            BudgetArg::LowerBound => BudgetMode::LowerBound,
        }
    }
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    evalset: PathBuf,
    /// Run directory for checkpoints, the episode log and the best model.
    #[arg(long)]
    out: PathBuf,
    /// One of: random, sac, uniform, uniform-recon.
    #[arg(long, default_value = "sac")]
    policy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Threads used to evaluate the reward.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Continue the run checkpointed in --out.
    #[arg(long)]
    resume: bool,
    /// Target fraction of parameters to keep.
    #[arg(long, default_value_t = 0.5)]
    p_r: f64,
    #[arg(long, default_value_t = 0.2)]
    p_min: f64,
    #[arg(long, default_value_t = 1.0)]
    p_max: f64,
    #[arg(long, value_enum, default_value_t = BudgetArg::Exact)]
    budget_mode: BudgetArg,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    /// Episodes after warm-up.
    #[arg(long, default_value_t = DEFAULT_SEARCH_EPISODES)]
    episodes: usize,
    #[command(flatten)]
    state: StateArgs,
    /// Evaluation images used for the reward.
    #[arg(long, default_value_t = 1000)]
    reward_subset: usize,
    /// Fixed lambda for the uniform-recon policy.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Episodes between checkpoints; 0 checkpoints only at the end.
    #[arg(long, default_value_t = 50)]
    checkpoint_every: usize,
    /// Episodes between progress lines; 0 is silent.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    evalset: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    strategy: PathBuf,
    /// Directory for the pruned bundle.
    #[arg(long)]
    out: PathBuf,
    /// Also report accuracy of the pruned model on this set.
    #[arg(long)]
    evalset: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct DiffArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    pruned: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Search(a) => search::run(a),
        Command::Eval(a) => eval(a),
        Command::Apply(a) => apply(a),
        Command::Diff(a) => diff(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn model(path: &Path) -> Result<ModelGraph> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct AnalyzedLayer {
    name: String,
    index: usize,
    state: LayerState,
    normalized: Vec<f64>,
}

#[derive(Serialize)]
struct AnalysisReport {
    model_signature: String,
    config: StateConfig,
    layers: Vec<AnalyzedLayer>,
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let graph = model(&args.model)?;
    let plan = build_prunable_plan(&graph);
    let config = args.state.config();
    let mut layers = Vec::new();
    if plan.is_empty() {
        eprintln!("warning: model has no prunable layers");
    } else {
        println!(
            "{:>3}  {:<16} {:<6} {:>6} {:>6} {:>10} {:>8} {:>6} {:>8} {:>8}",
            "#", "name", "type", "n_prev", "n", "B_mean", "P(B<t)", "C_num", "C_noise", "C_score"
        );
    }
    for position in 0..plan.len() {
        let (_, state) = observe_layer(&graph, &plan, position, &config)?;
        let index = plan.entries[position].layer;
        let name = graph.layers()[index].name.clone();
        println!(
            "{:>3}  {:<16} {:<6} {:>6} {:>6} {:>10.4} {:>8.4} {:>6} {:>8.4} {:>8.4}",
            state.layer,
            name,
            format!("{:?}", state.layer_type).to_lowercase(),
            state.n_prev,
            state.n,
            state.b_mean,
            state.p_b_lt_t,
            state.c_num,
            state.c_noise,
            state.c_score
        );
        layers.push(AnalyzedLayer {
            name,
            index,
            normalized: state.normalized(plan.len()).to_vec(),
            state,
        });
    }
    write_json(
        &args.out,
        &AnalysisReport {
            model_signature: model_signature(&graph),
            config,
            layers,
        },
    )
}

fn eval(args: EvalArgs) -> Result<()> {
    let graph = model(&args.model)?;
    let set = load_evalset(&args.evalset).with_context(|| format!("loading evalset {}", args.evalset.display()))?;
    set.check_model(&graph)?;
    let acc = accuracy_with_workers(&graph, &set.images, &set.labels, args.workers)?;
    println!(
        "accuracy {acc:.4} ({}/{})  params {}  macs {}",
        (acc * set.len() as f64).round() as usize,
        set.len(),
        graph.param_count(),
        graph.macs()
    );
    Ok(())
}

fn apply(args: ApplyArgs) -> Result<()> {
    let graph = model(&args.model)?;
    let text =
        fs::read_to_string(&args.strategy).with_context(|| format!("reading strategy {}", args.strategy.display()))?;
    let strategy: Strategy = serde_json::from_str(&text).context("parsing strategy")?;
    let pruned = apply_strategy(&graph, &strategy)?;
    save_model(&pruned, &args.out)?;
    println!(
        "wrote {}  param ratio {:.4}  flops ratio {:.4}",
        args.out.display(),
        param_ratio(&graph, &pruned),
        flops_ratio(&graph, &pruned)
    );
    if let Some(path) = args.evalset {
        let set = load_evalset(&path).with_context(|| format!("loading evalset {}", path.display()))?;
        set.check_model(&pruned)?;
        let acc = accuracy_with_workers(&pruned, &set.images, &set.labels, args.workers)?;
        println!("accuracy {acc:.4}");
    }
    Ok(())
}

fn dims(node: &LayerNode) -> Option<Vec<usize>> {
    match node {
        LayerNode::Conv(c) => Some(c.weights.dims().to_vec()),
        LayerNode::Linear(l) => Some(vec![l.weights.out_features(), l.weights.in_features()]),
        _ => None,
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        1.0
    } else {
        a / b
    }
}

fn diff(args: DiffArgs) -> Result<()> {
    let a = model(&args.original)?;
    let b = model(&args.pruned)?;
    if a.layers().len() != b.layers().len() {
        bail!("models have {} and {} layers", a.layers().len(), b.layers().len());
    }
    println!(
        "{:<16} {:<8} {:>18} {:>18} {:>10} {:>10}",
        "layer", "kind", "original", "pruned", "params", "pruned"
    );
    for (x, y) in a.layers().iter().zip(b.layers()) {
        if x.name != y.name || x.node.kind() != y.node.kind() {
            bail!(
                "layer `{}` ({}) does not line up with `{}` ({})",
                x.name,
                x.node.kind(),
                y.name,
                y.node.kind()
            );
        }
        let (Some(dx), Some(dy)) = (dims(&x.node), dims(&y.node)) else {
            continue;
        };
        let mark = if dx == dy { "" } else { " *" };
        println!(
            "{:<16} {:<8} {:>18} {:>18} {:>10} {:>10}{mark}",
            x.name,
            x.node.kind(),
            format!("{dx:?}"),
            format!("{dy:?}"),
            x.node.param_count(),
            y.node.param_count()
        );
    }
    println!(
        "params {} -> {} (ratio {:.4})  macs {} -> {} (ratio {:.4})",
        a.param_count(),
        b.param_count(),
        ratio(b.param_count() as f64, a.param_count() as f64),
        a.macs(),
        b.macs(),
        ratio(b.macs() as f64, a.macs() as f64)
    );
    Ok(())
}
