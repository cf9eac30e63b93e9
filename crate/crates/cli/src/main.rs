//! `poster`: data generation, training, evaluation, ablation grids, gradient
//! checks, parameter accounting and relevance maps.

mod ablate;
mod config;
mod error;
mod seeds;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use poster_core::attention::Stream;
use poster_core::checkpoint;
use poster_core::data::{gen_clusters, gen_xor, FeatureDataset, FeatureProvider};
use poster_core::gradcheck::GradCheckConfig;
use poster_core::model::{count_params, estimate_flops, Model, Variant};
use poster_core::relevance::{capture_attention, render_pgm, scores_csv, stream_relevance, Layout};
use poster_core::training::{argmax, evaluate, model_gradcheck, train_loop};

use crate::ablate::Grid;
use crate::config::{ConfigBuilder, Preset, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "poster", version, about = "Two-stream pyramid cross-fusion transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic feature dataset.
    GenData(GenDataArgs),
    /// Train a model and optionally evaluate it on held-out data.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run an ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
    /// Print parameter and FLOP counts.
    Params(ParamsArgs),
    /// Render per-stream relevance maps for one sample.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    /// Gaussian clusters around per-class prototypes.
    Clusters,
    /// Label is the XOR of one bit per stream.
    Xor,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long, default_value_t = 8)]
    p: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Number of classes (must be 2 for xor).
    #[arg(long)]
    classes: Option<usize>,
    /// Samples in the main file.
    #[arg(long)]
    count: usize,
    /// Samples in a held-out file drawn from the same generator.
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Held-out file; defaults to `<out stem>.test.pfer`.
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base defaults before the config file is applied.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Override one config key, e.g. `--set depth=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn builder(&self) -> Result<ConfigBuilder> {
        ConfigBuilder::new(self.preset).file(self.config.as_deref())?.sets(&self.sets)
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run config; defaults to the `config.json` written next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    grid: Grid,
    /// Replicates per grid cell.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Entries checked per tensor; 0 checks every entry.
    #[arg(long, default_value_t = 16)]
    max_entries: usize,
    /// Samples in the probe batch.
    #[arg(long, default_value_t = 3)]
    samples: usize,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Target class; defaults to the predicted class.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pixels per patch cell.
    #[arg(long, default_value_t = 16)]
    scale: usize,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let total = a.count + a.test_count.unwrap_or(0);
    let classes = match (a.task, a.classes) {
        (Task::Xor, None | Some(2)) => 2,
        (Task::Xor, Some(n)) => return Err(CliError::Usage(format!("xor has 2 classes, got --classes {n}"))),
        (Task::Clusters, n) => n.unwrap_or(7),
    };
    if total == 0 || !total.is_multiple_of(classes) {
        return Err(CliError::Usage(format!(
            "total sample count {total} must be a positive multiple of {classes} classes"
        )));
    }
    let per_class = total / classes;
    let ds = match a.task {
        Task::Clusters => gen_clusters(a.p, a.d, classes, per_class, a.sigma, a.seed)?,
        Task::Xor => gen_xor(a.p, a.d, per_class, a.sigma, a.seed)?,
    };
    match a.test_count.filter(|&n| n > 0) {
        None => {
            ds.write(&a.out)?;
            println!("wrote {} samples to {}", ds.len(), a.out.display());
        }
        Some(_) => {
            let (train, test) = ds.split(a.count as f64 / total as f64, seeds::derive(a.seed, "split", 0))?;
            let test_out = a.test_out.unwrap_or_else(|| a.out.with_extension("test.pfer"));
            train.write(&a.out)?;
            test.write(&test_out)?;
            println!("wrote {} samples to {}", train.len(), a.out.display());
            println!("wrote {} samples to {}", test.len(), test_out.display());
        }
    }
    Ok(())
}

/// Loads training data and, if given, test data; otherwise splits the training file.
fn load_splits(cfg: &RunConfig, train: FeatureDataset) -> Result<(FeatureDataset, FeatureDataset)> {
    match &cfg.test_data {
        Some(p) => Ok((train, FeatureDataset::read(p)?)),
        None => Ok(train.split(cfg.train_fraction, seeds::derive(cfg.seed, "split", 0))?),
    }
}

/// Resolves the config with data-derived shapes and returns it with the training data.
fn resolve_with_data(builder: ConfigBuilder) -> Result<(RunConfig, FeatureDataset)> {
    let data = builder
        .get_path("data")
        .ok_or_else(|| CliError::Usage("no training data: pass --data or set `data`".into()))?;
    let ds = FeatureDataset::read(&data)?;
    let cfg = builder.shape_from(&ds.meta()).build()?;
    Ok((cfg, ds))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `out`".into()))
}

fn train(a: TrainArgs) -> Result<()> {
    let builder = a
        .config
        .builder()?
        .set("variant", a.variant)
        .set("data", a.data)
        .set("test_data", a.test_data)
        .set("out", a.out);
    let (cfg, ds) = resolve_with_data(builder)?;
    let out = out_dir(&cfg)?;
    cfg.echo(&out)?;
    let mut model = Model::new(cfg.model())?;
    let log = train_loop(&mut model, &cfg.train(), &ds, Some(&out.join("checkpoints")))?;
    write(&out.join("log.csv"), log.to_csv()?)?;
    let last = log.rows.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {} for {} steps, final loss {last:.6}", cfg.variant, cfg.steps);
    if let Some(test) = &cfg.test_data {
        let test = FeatureDataset::read(test)?;
        let report = evaluate(&model, &test, cfg.eval_batch_size)?;
        report.write(out.join("eval"))?;
        println!(
            "test accuracy {:.4}, mean class accuracy {:.4}",
            report.accuracy, report.mean_class_accuracy
        );
    }
    Ok(())
}

/// Finds the run config for a checkpoint: explicit, else `config.json` in
/// the checkpoint's directory or its parent.
fn checkpoint_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .ancestors()
            .skip(1)
            .take(2)
            .map(|d| d.join("config.json"))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                CliError::Usage(format!("no config.json near {}; pass --config", checkpoint.display()))
            })?,
    };
    ConfigBuilder::new(Preset::Desk).file(Some(&path))?.build()
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<(RunConfig, Model)> {
    let cfg = checkpoint_config(checkpoint, config)?;
    let model = Model::from_params(cfg.model(), checkpoint::load(checkpoint)?)?;
    Ok((cfg, model))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, model) = load_model(&a.checkpoint, a.config.as_deref())?;
    let ds = FeatureDataset::read(&a.data)?;
    let report = evaluate(&model, &ds, cfg.eval_batch_size)?;
    report.write(&a.out)?;
    println!(
        "accuracy {:.4}, mean class accuracy {:.4}",
        report.accuracy, report.mean_class_accuracy
    );
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let builder = a
        .config
        .builder()?
        .set("data", a.data)
        .set("test_data", a.test_data)
        .set("out", a.out);
    let (cfg, ds) = resolve_with_data(builder)?;
    let out = out_dir(&cfg)?;
    let cells = ablate::cells(a.grid, &cfg)?;
    let (train, test) = load_splits(&cfg, ds)?;
    cfg.echo(&out)?;
    let outcome = ablate::run(&cells, a.seeds, &train, &test);
    write(&out.join("ablate.csv"), ablate::to_csv(&outcome.rows, &ablate::ROW_HEADER)?)?;
    write(&out.join("summary.csv"), ablate::to_csv(&outcome.summary, &ablate::SUMMARY_HEADER)?)?;
    write(&out.join("failures.csv"), ablate::to_csv(&outcome.failures, &ablate::FAILURE_HEADER)?)?;
    println!("{:<22} {:>5} {:>17} {:>17} {:>10}", "variant", "runs", "acc", "mean acc", "params");
    for s in &outcome.summary {
        println!(
            "{:<22} {:>5} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>10}",
            s.variant, s.runs, s.acc_mean, s.acc_std, s.mean_acc_mean, s.mean_acc_std, s.params
        );
    }
    for f in &outcome.failures {
        eprintln!("failed: {} seed {}: {}", f.variant, f.seed, f.error);
    }
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} grid run(s) failed", outcome.failures.len())))
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = a.config.builder()?.build()?;
    let mc = cfg.model();
    let ds = gen_clusters(
        mc.patches,
        mc.base_dim,
        mc.num_classes,
        a.samples.div_ceil(mc.num_classes).max(1),
        1.0,
        seeds::derive(cfg.seed, "gradcheck", 0),
    )?;
    let batch = ds.batch(&(0..a.samples.clamp(1, ds.len())).collect::<Vec<_>>())?;
    let model = Model::new(mc)?;
    let gc = GradCheckConfig {
        h: a.h,
        tol: a.tol,
        max_entries: (a.max_entries > 0).then_some(a.max_entries),
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let report = model_gradcheck(&model, &batch, cfg.label_smoothing, &gc)?;
    let checked: usize = report.params.iter().map(|p| p.checked).sum();
    let worst = report.worst();
    println!(
        "checked {checked} entries in {} tensors; worst relative error {:.3e} ({})",
        report.params.len(),
        report.max_rel_error(),
        worst.map_or("-", |p| p.name.as_str())
    );
    if report.passed() {
        println!("PASS (tol {:e})", a.tol);
        Ok(())
    } else {
        println!("FAIL (tol {:e})", a.tol);
        Err(CliError::Failed(format!(
            "gradient check failed: {:.3e} >= {:e}",
            report.max_rel_error(),
            a.tol
        )))
    }
}

fn params(a: ParamsArgs) -> Result<()> {
    let cfg = a.config.builder()?.build()?;
    let mc = cfg.model();
    let counts = count_params(&mc)?;
    let flops = estimate_flops(&mc)?;
    println!("variant {}", mc.variant);
    for (name, n) in counts.rows() {
        println!("params.{name} {n}");
    }
    for (name, n) in [
        ("projections", flops.projections),
        ("attention_linear", flops.attention_linear),
        ("attention_mixing", flops.attention_mixing),
        ("mlp", flops.mlp),
        ("head", flops.head),
        ("blocks_total", flops.blocks()),
        ("total", flops.total()),
    ] {
        println!("macs.{name} {n}");
    }
    Ok(())
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let (cfg, model) = load_model(&a.checkpoint, a.config.as_deref())?;
    if matches!(cfg.variant, Variant::ImageOnly | Variant::LandmarkOnly) {
        return Err(CliError::Usage(format!(
            "{} has a single stream; per-stream maps need a two-stream variant",
            cfg.variant
        )));
    }
    let ds = FeatureDataset::read(&a.data)?;
    let (xi, xl, label) = ds.sample(a.sample)?;
    let class = match a.class {
        Some(c) => c,
        None => {
            let shape = |t: &poster_core::Tensor| {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                t.clone().reshape(s)
            };
            argmax(model.logits(&shape(&xi)?, &shape(&xl)?)?.data())
        }
    };
    let trace = capture_attention(&model, &xi, &xl, class)?;
    let layout = Layout::square(cfg.patches)?;
    let maps = [Stream::Image, Stream::Landmark]
        .into_iter()
        .map(|s| stream_relevance(&model, &trace, s))
        .collect::<poster_core::Result<Vec<_>>>()?;
    for rel in maps {
        let stem = format!("relevance_{}", rel.stream.as_str());
        write(&a.out.join(format!("{stem}.pgm")), render_pgm(&rel.scores, &layout, a.scale)?)?;
        write(&a.out.join(format!("{stem}.csv")), scores_csv(&rel.scores, &layout)?)?;
        println!("wrote {stem}.pgm and {stem}.csv");
    }
    println!("sample {} (label {label}), target class {class}", a.sample);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
        Command::Visualize(a) => visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Every variant's message already includes its cause.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
