//! `insure`: generate synthetic data, train, evaluate and run the
//! ablation and region-III suites.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage,
//! configuration or missing-file errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use insure_core::config::{mode_str, RunConfig};
use insure_core::eval::{self, EvalError};
use insure_core::gradcheck::{check_objective, ObjectiveCheck};
use insure_core::grad::GradCheckFailure;
use insure_core::losses::{DgMode, LossWeights};
use insure_core::model::{load_checkpoint, save_checkpoint, Checkpoint, MaskMode};
use insure_core::report::{self, FileDigest, Manifest};
use insure_core::synth::{self, load_dataset, save_dataset, SynthDataset};
use insure_core::trainer::{self, TrainError};

#[derive(Parser)]
#[command(name = "insure", version, about = "Mask-based feature disentanglement lab on synthetic multi-domain data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenData),
    /// Train one model and write checkpoint, metrics CSV and manifest.
    Train(Train),
    /// Held-out accuracy and mask recovery of a checkpoint.
    Eval(Eval),
    /// All eight objective variants, leave-one-domain-out.
    Ablate(Suite),
    /// Label versus domain purification on a dataset with region III.
    Region3(Suite),
    /// Finite-difference check of the full objective on a micro-batch.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration file (`insure-config v1`); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `data_seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    MultiDg,
    SingleDg,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Hard,
    Soft,
}

impl From<MaskArg> for MaskMode {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Hard => MaskMode::Hard,
            MaskArg::Soft => MaskMode::Soft,
        }
    }
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Domain left out of training; all domains are used when absent.
    #[arg(long)]
    holdout_domain: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the training `seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Domain to score on; defaults to the checkpoint's held-out domain, else all data.
    #[arg(long)]
    holdout_domain: Option<usize>,
    #[arg(long, value_enum, default_value = "hard")]
    mask_mode: MaskArg,
    /// Score the raw parameters instead of the moving average.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct Suite {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// First seed; the suite uses as many consecutive seeds as `seeds` lists.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Gradcheck {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug)]
enum CliError {
    /// Usage, configuration or missing input: exit 2.
    Usage(String),
    /// Verification or run failure: exit 1.
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl ToString) -> CliError {
    CliError::Usage(msg.to_string())
}

fn failed(msg: impl ToString) -> CliError {
    CliError::Failed(msg.to_string())
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Train(t) => train_error(t),
        EvalError::Model(_) | EvalError::Grad(_) => failed(e),
        _ => usage(e),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) => usage(e),
        _ => failed(e),
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<RunConfig> {
    match &arg.config {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display()))),
    }
}

fn load_data(path: &Path) -> CliResult<SynthDataset> {
    load_dataset(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn digest(path: &Path) -> CliResult<FileDigest> {
    FileDigest::of(path).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn save_manifest(m: &Manifest, path: &Path) -> CliResult {
    m.save(path).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn gen_data(args: GenData) -> CliResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.data_seed = s;
    }
    let ds = synth::generate(&cfg.region, cfg.n_domains, cfg.n_classes, cfg.n_per_domain, cfg.data_seed).map_err(usage)?;
    save_dataset(&ds, &args.out).map_err(|e| usage(format!("{}: {e}", args.out.display())))?;
    println!(
        "wrote {} ({} samples, {} dims, {} domains, {} classes)",
        args.out.display(),
        ds.len(),
        ds.dims,
        ds.n_domains,
        ds.n_classes
    );
    match &ds.region_of_dim {
        Some(map) => {
            for region in [synth::Region::I, synth::Region::II, synth::Region::III, synth::Region::IV] {
                let dims: Vec<String> = map
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| **r == region)
                    .map(|(i, _)| i.to_string())
                    .collect();
                println!("region {:<3} {:>2} dims: {}", region.as_str(), dims.len(), dims.join(","));
            }
        }
        None => println!("mixed features: no per-dim region map"),
    }
    Ok(())
}

fn train(args: Train) -> CliResult {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    match args.mode {
        Some(ModeArg::SingleDg) => cfg.use_single_dg(),
        Some(ModeArg::MultiDg) => cfg.train.mode = DgMode::Multi,
        None => {}
    }
    cfg.validate().map_err(usage)?;
    let data = load_data(&args.data)?;
    let (train_set, test_set) = match args.holdout_domain {
        Some(d) => {
            let (tr, te) = data.split_leave_one_out(d).map_err(usage)?;
            (tr, Some(te))
        }
        None => (data, None),
    };
    if cfg.train.mode == DgMode::Multi && train_set.n_domains < 2 {
        return Err(usage(format!(
            "multi-dg training needs at least 2 training domains, have {}; use --mode single-dg",
            train_set.n_domains
        )));
    }
    create_dir(&args.out_dir)?;
    let mc = trainer::model_config_for(&train_set, cfg.probe, &cfg.hidden, cfg.train.mode);
    let ckpt_path = args.out_dir.join("checkpoint.txt");
    let mut meta = BTreeMap::new();
    if let Some(d) = args.holdout_domain {
        meta.insert("holdout_domain".to_string(), d.to_string());
    }
    meta.insert("mode".to_string(), mode_str(cfg.train.mode).to_string());
    meta.insert("seed".to_string(), cfg.train.seed.to_string());

    let run = match trainer::train(&cfg.train, &mc, &train_set) {
        Ok(run) => run,
        Err(TrainError::NonFinite { step, term, last_good }) => {
            meta.insert("aborted_at_step".to_string(), step.to_string());
            let ckpt = Checkpoint {
                config_hash: cfg.hash(),
                raw: *last_good,
                sma: None,
                meta,
            };
            save_checkpoint(&ckpt, &ckpt_path).map_err(failed)?;
            return Err(failed(format!(
                "non-finite {term} at step {step}; last good parameters saved to {}",
                ckpt_path.display()
            )));
        }
        Err(e) => return Err(train_error(e)),
    };

    let ckpt = Checkpoint {
        config_hash: cfg.hash(),
        raw: run.raw.clone(),
        sma: run.sma.clone(),
        meta,
    };
    save_checkpoint(&ckpt, &ckpt_path).map_err(failed)?;
    let metrics_path = args.out_dir.join("metrics.csv");
    write(&metrics_path, &report::metrics_csv(&run.metrics))?;

    let params = run.inference_params();
    let mut manifest = Manifest::new("train", &cfg);
    manifest.arg("data", args.data.display());
    if let Some(d) = args.holdout_domain {
        manifest.arg("holdout_domain", d);
    }
    manifest.inputs.push(digest(&args.data)?);
    manifest.outputs.push(digest(&ckpt_path)?);
    manifest.outputs.push(digest(&metrics_path)?);
    save_manifest(&manifest, &args.out_dir.join("manifest.json"))?;

    let last = run.metrics.steps.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
    println!("trained {} steps, final loss {last:.6}, mask on {}/{}", cfg.train.steps, params.mask_on_count(), params.config.feature_dim);
    if let Some(te) = &test_set {
        let acc = eval::accuracy(params, te, cfg.infer_mask).map_err(eval_error)?;
        println!("held-out domain {} accuracy {acc:.4}", args.holdout_domain.unwrap_or_default());
    }
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "null".into())
}

fn evaluate(args: Eval) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(|e| usage(format!("{}: {e}", args.checkpoint.display())))?;
    let data = load_data(&args.data)?;
    let params = if args.raw { &ckpt.raw } else { ckpt.inference_params() };
    if params.config.input_dim != data.dims {
        return Err(usage(format!(
            "checkpoint expects {} input dims, dataset has {}",
            params.config.input_dim, data.dims
        )));
    }
    let holdout = match args.holdout_domain {
        Some(d) => Some(d),
        None => match ckpt.meta.get("holdout_domain") {
            Some(v) => Some(v.parse().map_err(|_| usage(format!("bad holdout_domain {v:?} in checkpoint")))?),
            None => None,
        },
    };
    let test_set = match holdout {
        Some(d) => data.split_leave_one_out(d).map_err(usage)?.1,
        None => data,
    };
    let mode = MaskMode::from(args.mask_mode);
    let acc = eval::accuracy(params, &test_set, mode).map_err(eval_error)?;
    match holdout {
        Some(d) => println!("accuracy (domain {d}, {} mask): {acc:.4}", mode.as_str()),
        None => println!("accuracy (all domains, {} mask): {acc:.4}", mode.as_str()),
    }
    println!("mask on: {}/{}", params.mask_on_count(), params.config.feature_dim);
    match eval::mask_recovery(params, test_set.region_of_dim.as_deref()) {
        Ok(r) => println!(
            "mask recovery vs III+IV: precision {} recall {} f1 {}",
            fmt_opt(r.precision),
            fmt_opt(r.recall),
            fmt_opt(r.f1)
        ),
        Err(e) => println!("mask recovery: unavailable ({e})"),
    }
    Ok(())
}

fn suite_setup(args: &Suite) -> CliResult<(RunConfig, SynthDataset)> {
    let mut cfg = load_config(&args.config)?;
    if let Some(first) = args.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (first..first + n).collect();
    }
    if args.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let data = load_data(&args.data)?;
    create_dir(&args.out_dir)?;
    Ok((cfg, data))
}

fn finish_suite(command: &str, args: &Suite, cfg: &RunConfig, outputs: &[PathBuf]) -> CliResult {
    let mut manifest = Manifest::new(command, cfg);
    manifest.arg("data", args.data.display());
    manifest.arg("jobs", args.jobs);
    manifest.inputs.push(digest(&args.data)?);
    for p in outputs {
        manifest.outputs.push(digest(p)?);
    }
    save_manifest(&manifest, &args.out_dir.join("manifest.json"))?;
    println!("wrote {}", args.out_dir.display());
    Ok(())
}

fn ablate(args: Suite) -> CliResult {
    let (cfg, data) = suite_setup(&args)?;
    let rep = eval::run_ablation(&data, &cfg.suite(args.jobs)).map_err(eval_error)?;
    println!("{:<12} {:>8} {:>8}", "variant", "mean", "std");
    for row in &rep.rows {
        println!("{:<12} {:>8.4} {:>8.4}", row.variant, row.mean, row.std);
    }
    let files = [
        ("ablation.csv", report::ablation_csv(&rep)),
        ("seed_stats.csv", report::seed_stats_csv(&rep)),
        ("runs.csv", report::runs_csv(&rep)),
    ];
    let mut outputs = Vec::new();
    for (name, body) in files {
        let p = args.out_dir.join(name);
        write(&p, &body)?;
        outputs.push(p);
    }
    finish_suite("ablate", &args, &cfg, &outputs)
}

fn region3(args: Suite) -> CliResult {
    let (cfg, data) = suite_setup(&args)?;
    let rep = eval::region3_experiment(&data, &cfg.suite(args.jobs)).map_err(eval_error)?;
    for row in &rep.rows {
        println!(
            "{:<36} accuracy {:.4} ± {:.4}  recall III {}  recall IV {}",
            row.variant,
            row.accuracy,
            row.std,
            fmt_opt(row.recall_iii),
            fmt_opt(row.recall_iv)
        );
    }
    let files = [
        ("region3.csv", report::region3_csv(&rep)),
        ("seed_stats.csv", report::seed_stats_csv(&rep.suite)),
        ("runs.csv", report::runs_csv(&rep.suite)),
    ];
    let mut outputs = Vec::new();
    for (name, body) in files {
        let p = args.out_dir.join(name);
        write(&p, &body)?;
        outputs.push(p);
    }
    finish_suite("region3", &args, &cfg, &outputs)
}

fn gradcheck(args: Gradcheck) -> CliResult {
    let cfg = load_config(&args.config)?;
    let defaults = ObjectiveCheck::default();
    let n_domains = match cfg.train.mode {
        DgMode::Multi => defaults.n_domains,
        DgMode::Single => 1,
    };
    let check = ObjectiveCheck {
        n_domains,
        n_classes: cfg.n_classes,
        weights: LossWeights {
            eps_ib: defaults.weights.eps_ib,
            ..cfg.train.weights
        },
        terms: cfg.train.terms,
        mode: cfg.train.mode,
        seed: args.seed,
        tol: args.tol,
        ..defaults
    };
    let rep = check_objective(&check).map_err(failed)?;
    println!(
        "checked {} coordinates, max relative error {:.3e} (tol {:.1e})",
        rep.coordinates, rep.max_rel_error, rep.tol
    );
    match rep.failure {
        None => {
            println!("gradcheck passed");
            Ok(())
        }
        Some(GradCheckFailure::Mismatch { leaf, index, analytic, numeric, rel_error }) => Err(failed(format!(
            "gradcheck failed at leaf {leaf} coordinate {index}: analytic {analytic:.6e}, numeric {numeric:.6e}, relative error {rel_error:.3e}"
        ))),
        Some(GradCheckFailure::NonFinite { leaf, index }) => {
            Err(failed(format!("gradcheck failed at leaf {leaf} coordinate {index}: non-finite gradient")))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Region3(a) => region3(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
