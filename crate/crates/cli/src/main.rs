use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cib_causal::{
    build_training_graph, check_eq1_random, parse_edge_list, verify_eq1_derivation_on, verify_intractability_structure,
    CausalError, EQ1_TOL,
};
use cib_core::data::{gen_confounded, ConfoundedSpec, DatasetBundle};
use cib_core::exec::ExecPolicy;
use cib_core::kvfile;
use cib_core::model::{ExperimentConfig, ModelKind};
use cib_core::nn::Checkpoint;
use cib_core::trainer::{self, evaluate, sweep, sweep_csv, write_atomic, AnyModel, EvalMode};
use cib_core::Error;

#[derive(Parser)]
#[command(name = "cib", version, about = "Causal-invariant Bayesian networks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic confounded dataset bundle.
    GenData {
        /// Spec file (`key = value` lines); defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override a spec key, e.g. `--set train_size=2000`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one model and write metrics, checkpoints and the resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test_iid")]
        split: String,
        /// Normalise with the batch statistics of the evaluated split.
        #[arg(long)]
        ood_batchstats: bool,
        /// Evaluation seed; defaults to the training seed in the checkpoint.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a grid of context and weight sample counts.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Context sample counts (N).
        #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
        contexts: Vec<usize>,
        /// Weight sample counts (M).
        #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
        weights: Vec<usize>,
        /// Number of seeds, counting up from the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Worker threads; 1 runs the cells in order on one thread.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Directory for sweep.csv and the resolved config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check the do-calculus derivation, the frontdoor structure and the
    /// factorisation against exact interventional inference.
    VerifyCausal {
        /// Edge-list graph to run the derivation on instead of the training graph.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Number of random discrete models for the factorisation check.
        #[arg(long, default_value_t = 20)]
        models: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Override a config key, e.g. `--set beta=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Cib,
    Point,
    Ct,
}

enum Failure {
    /// Bad flags, files or values.
    Usage(String),
    /// A verification step did not hold.
    Verification(String),
    Diverged(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Diverged(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Verification(m) | Failure::Diverged(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Diverged(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

impl From<CausalError> for Failure {
    fn from(e: CausalError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn split_override(s: &str) -> Result<(&str, &str), Failure> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {s:?}")))
}

fn load_bundle(path: &Path) -> Result<DatasetBundle, Failure> {
    DatasetBundle::load(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Config file, then `--set` overrides, then the dedicated flags.
fn resolve_config(run: &RunArgs, model: Option<ModelArg>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &run.config {
        for (k, v) in kvfile::parse(&read_text(path)?).map_err(Error::from)? {
            cfg.set(&k, &v).map_err(Error::from)?;
        }
    }
    for o in &run.overrides {
        let (k, v) = split_override(o)?;
        cfg.set(k, v).map_err(Error::from)?;
    }
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = run.epochs {
        cfg.epochs = epochs;
    }
    if let Some(m) = model {
        cfg.model = match m {
            ModelArg::Cib => ModelKind::Cib,
            ModelArg::Point => ModelKind::Point,
            ModelArg::Ct => ModelKind::Ct,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(spec: Option<&Path>, out: &Path, seed: u64, overrides: &[String]) -> CmdResult {
    let mut text = match spec {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    for o in overrides {
        let (k, v) = split_override(o)?;
        text.push_str(&format!("\n{k} = {v}"));
    }
    let spec = ConfoundedSpec::from_kv_text(&text)?;
    let bundle = gen_confounded(&spec, seed)?;
    bundle.save(out)?;
    println!(
        "train={} val_iid={} test_iid={} val_ood={} test_ood={}",
        bundle.train.len(),
        bundle.val_iid.len(),
        bundle.test_iid.len(),
        bundle.val_ood.len(),
        bundle.test_ood.len()
    );
    Ok(())
}

fn train(run: &RunArgs, out_dir: &Path, model: Option<ModelArg>) -> CmdResult {
    let cfg = resolve_config(run, model)?;
    let bundle = load_bundle(&run.data)?;
    let out = trainer::train(&cfg, &bundle)?;
    trainer::write_run(out_dir, &cfg, &out)?;
    print!("{}", out.metrics.summary());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: &str, batchstats: bool, seed: Option<u64>) -> CmdResult {
    let ckpt = Checkpoint::load(ckpt).map_err(|e| Failure::Usage(format!("{}: {e}", ckpt.display())))?;
    let (model, cfg) = AnyModel::from_checkpoint(&ckpt)?;
    let bundle = load_bundle(data)?;
    if model.input() != bundle.input_shape() || model.classes() != bundle.classes() {
        return Err(Failure::Usage(format!(
            "shape mismatch: checkpoint expects input {:?} with {} classes, data has {:?} with {} classes",
            model.input(),
            model.classes(),
            bundle.input_shape(),
            bundle.classes()
        )));
    }
    let mode = if batchstats { EvalMode::Ood } else { EvalMode::Iid };
    let res = evaluate(&model, bundle.split(split)?, &bundle.train.inputs, mode, &cfg, seed.unwrap_or(cfg.seed))?;
    let stats = if batchstats { "batch" } else { "running" };
    println!("model={} split={split} stats={stats} loss={}", model.kind().as_str(), res.loss);
    println!("accuracy={}", res.accuracy);
    Ok(())
}

fn run_sweep(run: &RunArgs, ns: &[usize], ms: &[usize], seeds: u64, jobs: usize, out_dir: Option<&Path>) -> CmdResult {
    let cfg = resolve_config(run, None)?;
    if jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let bundle = load_bundle(&run.data)?;
    let seeds: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
    let cells = in_pool(jobs, || {
        let policy = if jobs > 1 { ExecPolicy::Parallel } else { ExecPolicy::Sequential };
        sweep(&cfg, &bundle, ns, ms, &seeds, policy)
    })??;
    let csv = sweep_csv(&cells);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(Error::from)?;
        write_atomic(&dir.join("sweep.csv"), csv.as_bytes())?;
        write_atomic(&dir.join(trainer::CONFIG_FILE), cfg.to_kv_text().as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

#[cfg(feature = "parallel")]
fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
fn in_pool<T: Send>(_jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, Failure> {
    Ok(f())
}

fn verify_causal(graph: Option<&Path>, models: usize, seed: u64) -> CmdResult {
    let g = match graph {
        Some(p) => parse_edge_list(&read_text(p)?)?,
        None => build_training_graph(),
    };
    let mut failures = Vec::new();

    let derivation = verify_eq1_derivation_on(&g)?;
    println!("# derivation");
    print!("{}", derivation.to_text());
    for (i, s) in derivation.steps.iter().enumerate() {
        if !s.passed {
            failures.push(format!("derivation step {} (rule {}: {})", i + 1, s.rule, s.statement));
        }
    }

    let structure = verify_intractability_structure();
    println!("# structure");
    print!("{}", structure.to_text());
    failures.extend(structure.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()));

    let agreements = check_eq1_random(models, 3, seed)?;
    println!("# factorisation vs intervention (tolerance {EQ1_TOL:e})");
    for a in &agreements {
        println!("model seed {} max_abs_diff {:e} {}", a.seed, a.max_abs_diff, if a.passed() { "PASS" } else { "FAIL" });
        if !a.passed() {
            failures.push(format!("factorisation on model seed {}", a.seed));
        }
    }
    let agreed = agreements.iter().filter(|a| a.passed()).count();

    print!("{}{}", derivation.to_kv(), structure.to_kv());
    println!("factorisation.passed={agreed}/{}", agreements.len());
    if failures.is_empty() {
        println!("verified=true");
        Ok(())
    } else {
        println!("verified=false");
        Err(Failure::Verification(format!("failed: {}", failures.join("; "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { spec, out, seed, overrides } => gen_data(spec.as_deref(), out, *seed, overrides),
        Command::Train { run, out_dir, model } => train(run, out_dir, *model),
        Command::Eval { checkpoint, data, split, ood_batchstats, seed } => {
            eval(checkpoint, data, split, *ood_batchstats, *seed)
        }
        Command::Sweep { run, contexts, weights, seeds, jobs, out_dir } => {
            run_sweep(run, contexts, weights, *seeds, *jobs, out_dir.as_deref())
        }
        Command::VerifyCausal { graph, models, seed } => verify_causal(graph.as_deref(), *models, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
