//! `probtrans` command-line driver.

mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use probtrans::checkpoint::Container;
use probtrans::config::{ModelKind, RunConfig};
use probtrans::eval::{metrics_csv, metrics_table, run_inference, Method, MetricReport, CSV_HEADER};
use probtrans::synthdata::{
    build_task, generate_splits, load_dataset, load_task, save_dataset, save_task, Dataset, SynthTask,
};
use probtrans::trainer::{load_model, Trainer};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "probtrans", version, about = "Probabilistic transformer on synthetic sequence tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a task and write it with its train/val/test splits.
    GenData(GenDataArgs),
    /// Train a prob or vanilla model on a generated data directory.
    Train(TrainArgs),
    /// Score a checkpoint with one or more inference methods.
    Eval(EvalArgs),
    /// Train and score one prob model per prob-block setting.
    Ablate(AblateArgs),
    /// Merge training logs into a long-format CSV.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size task and model.
    Paper,
    /// Small task and two-block model that train in minutes on a CPU.
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct GenDataArgs {
    /// Run config (JSON); defaults to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "paper", conflicts_with = "config")]
    preset: Preset,
    /// Task seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Training flags that override the config file.
#[derive(Args, Clone, Default)]
struct TrainOverrides {
    /// Training seed (initialization, batches, dropout, latent noise).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial reconstruction target.
    #[arg(long)]
    kappa_init: Option<f64>,
    /// Keep kappa fixed at its initial value.
    #[arg(long)]
    no_kappa_annealing: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Run config; defaults to the config.json of the data directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<KindArg>,
    /// Blocks carrying a prob layer: middle, all, none, or a list like 2,3.
    #[arg(long)]
    prob_blocks: Option<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Continue from the checkpoint in the output directory if present.
    #[arg(long)]
    resume: bool,
    /// Output directory for config.json, log.csv and checkpoint.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Prob,
    Vanilla,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// prob_sample, mc_dropout, softmax_sample or oracle; repeat or comma-separate.
    /// Defaults to prob_sample for prob models, otherwise both baselines.
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
    #[arg(long, default_value_t = 50)]
    realizations: usize,
    /// Sampling seeds 0..n; the CSV gets one row per seed plus mean and std.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Score only the first n samples (0 = all).
    #[arg(long, default_value_t = 0)]
    samples: usize,
    /// Use the final weights instead of the best-validation snapshot.
    #[arg(long)]
    latest: bool,
    /// Output directory for metrics.csv; without it the CSV goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// One setting per flag: middle, all, none, or a list like 2,3.
    #[arg(long = "prob-blocks", default_values_t = ["middle".to_string(), "all".to_string()])]
    settings: Vec<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long, default_value_t = 50)]
    realizations: usize,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (with log.csv and config.json) or log files.
    #[arg(long, num_args = 1..)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Task and splits as written by gen-data.
struct DataDir {
    task: SynthTask,
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

impl DataDir {
    fn load(dir: &Path) -> Result<Self> {
        let task = load_task(&dir.join("task.json")).with_context(|| format!("loading task from {}", dir.display()))?;
        let split = |name: &str| -> Result<Dataset> {
            let path = dir.join(format!("{name}.tsv"));
            let d = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
            d.check_task(&task).with_context(|| format!("checking {}", path.display()))?;
            Ok(d)
        };
        Ok(Self { train: split("train")?, val: split("val")?, test: split("test")?, task })
    }

    fn split(&self, which: Split, samples: usize) -> Dataset {
        let d = match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        if samples == 0 { d.clone() } else { d.truncated(samples) }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Resolve a prob-block setting for a model with `n_blocks` blocks.
fn parse_prob_blocks(spec: &str, n_blocks: usize) -> Result<Vec<usize>> {
    Ok(match spec.trim() {
        "middle" => vec![n_blocks / 2 + 1],
        "all" => (1..=n_blocks).collect(),
        "none" => Vec::new(),
        list => {
            let mut v = list
                .split(',')
                .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad prob-block index {s:?}")))
                .collect::<Result<Vec<_>>>()?;
            v.sort_unstable();
            v.dedup();
            if let Some(&b) = v.iter().find(|&&b| b == 0 || b > n_blocks) {
                bail!("prob block {b} outside 1..={n_blocks}");
            }
            v
        }
    })
}

fn base_config(config: Option<&Path>, data: &Path) -> Result<RunConfig> {
    let path = config.map(Path::to_path_buf).unwrap_or_else(|| data.join("config.json"));
    RunConfig::load(&path).with_context(|| format!("loading config {}", path.display()))
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.optim.epochs = e;
    }
    if let Some(s) = o.steps_per_epoch {
        cfg.optim.steps_per_epoch = s;
    }
    if let Some(b) = o.batch_size {
        cfg.train.batch_size = b;
    }
    let kappa_flags = o.kappa_init.is_some() || o.no_kappa_annealing;
    if cfg.train.model == ModelKind::Vanilla && kappa_flags {
        warn!("vanilla models have no kappa; ignoring --kappa-init and --no-kappa-annealing");
        return;
    }
    if let Some(k) = o.kappa_init {
        cfg.train.kappa_init = k;
    }
    if o.no_kappa_annealing {
        cfg.train.kappa_annealing = false;
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => match args.preset {
            Preset::Paper => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    if let Some(s) = args.seed {
        cfg.task.seed = s;
    }
    cfg.validate()?;
    let task = build_task(&cfg.task)?;
    let splits = generate_splits(&task);
    create_dir(&args.out)?;
    save_task(&task, &args.out.join("task.json"))?;
    for (name, d) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        save_dataset(d, &args.out.join(format!("{name}.tsv")))?;
    }
    cfg.save(&args.out.join("config.json"))?;
    println!("{}", task.hash());
    Ok(())
}

/// Train `cfg` into `out`, checkpointing after every epoch.
fn run_training(cfg: &RunConfig, data: &DataDir, out: &Path, resume: bool) -> Result<()> {
    create_dir(out)?;
    cfg.save(&out.join("config.json"))?;
    let ckpt = out.join("checkpoint.bin");
    let mut trainer = if resume && ckpt.is_file() {
        let c = Container::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let t = Trainer::resume(cfg, &data.task, &data.train, &data.val, &c)?;
        info!("resuming at step {}", t.state().step);
        t
    } else {
        Trainer::new(cfg, &data.task, &data.train, &data.val)?
    };
    let per_epoch = cfg.optim.steps_per_epoch as u64;
    while !trainer.is_done() {
        let next = (trainer.state().step / per_epoch + 1) * per_epoch;
        trainer.run_until(next)?;
        if let Some(row) = trainer.state().log.last() {
            info!(
                "epoch {} l_rec {:.4} kl {:.4} lambda {:.4} kappa {:.4} val_kl {:.4}",
                row.epoch, row.l_rec_mean, row.d_kl_mean, row.lambda, row.kappa, row.val_metric
            );
        }
        write(&out.join("log.csv"), &trainer.log_csv())?;
        trainer.checkpoint().save(&ckpt)?;
    }
    write(&out.join("log.csv"), &trainer.log_csv())?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let data = DataDir::load(&args.data)?;
    let mut cfg = base_config(args.config.as_deref(), &args.data)?;
    if let Some(k) = args.model {
        cfg.train.model = match k {
            KindArg::Prob => ModelKind::Prob,
            KindArg::Vanilla => ModelKind::Vanilla,
        };
    }
    if let Some(spec) = &args.prob_blocks {
        cfg.model.prob_blocks = parse_prob_blocks(spec, cfg.model.n_blocks)?;
    }
    apply_overrides(&mut cfg, &args.overrides);
    cfg.validate()?;
    run_training(&cfg, &data, &args.out, args.resume)
}

type Results = Vec<(Method, Vec<(u64, MetricReport)>)>;

/// Sampling settings shared by eval and ablate.
#[derive(Clone, Copy)]
struct Scoring {
    realizations: usize,
    seeds: u64,
    split: Split,
    samples: usize,
    latest: bool,
}

fn score(ckpt: &Path, data: &DataDir, methods: &[Method], s: Scoring) -> Result<Results> {
    let c = Container::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (cfg, model) = load_model(&c, s.latest)?;
    if cfg.task != data.task.spec {
        bail!("checkpoint was trained on a different task than {}", data.task.hash());
    }
    let methods = if methods.is_empty() {
        if model.config().n_prob() > 0 {
            vec![Method::ProbSample]
        } else {
            vec![Method::McDropout, Method::SoftmaxSample]
        }
    } else {
        methods.to_vec()
    };
    let set = data.split(s.split, s.samples);
    let mut results = Vec::new();
    for m in methods {
        let mut runs = Vec::new();
        for seed in 0..s.seeds {
            let e = run_inference(&model, &data.task, &set, m, s.realizations, seed)?;
            runs.push((seed, MetricReport::compute(&e)?));
        }
        results.push((m, runs));
    }
    Ok(results)
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    methods: Vec<&'static str>,
    realizations: usize,
    seeds: u64,
    split: &'static str,
    samples: usize,
    latest: bool,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let methods = args.method.iter().map(|m| m.parse::<Method>()).collect::<Result<Vec<_>, _>>()?;
    let data = DataDir::load(&args.data)?;
    let scoring = Scoring {
        realizations: args.realizations,
        seeds: args.seeds,
        split: args.split,
        samples: args.samples,
        latest: args.latest,
    };
    let results = score(&args.checkpoint, &data, &methods, scoring)?;
    let csv = metrics_csv(&results);
    match &args.out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("metrics.csv"), &csv)?;
            let settings = EvalSettings {
                checkpoint: &args.checkpoint,
                data: &args.data,
                methods: results.iter().map(|r| r.0.name()).collect(),
                realizations: args.realizations,
                seeds: args.seeds,
                split: split_name(args.split),
                samples: args.samples,
                latest: args.latest,
            };
            write(&dir.join("eval.json"), &(serde_json::to_string_pretty(&settings)? + "\n"))?;
            print!("{}", metrics_table(&results));
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn setting_label(spec: &str) -> String {
    match spec.trim() {
        s @ ("middle" | "all" | "none") => s.to_string(),
        list => format!("blocks-{}", list.split(',').map(str::trim).collect::<Vec<_>>().join("-")),
    }
}

fn ablate(args: AblateArgs) -> Result<()> {
    if args.settings.is_empty() {
        bail!("give at least one --prob-blocks setting");
    }
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let scoring = Scoring {
        realizations: args.realizations,
        seeds: args.seeds,
        split: args.split,
        samples: args.samples,
        latest: false,
    };
    let data = DataDir::load(&args.data)?;
    let mut base = base_config(args.config.as_deref(), &args.data)?;
    base.train.model = ModelKind::Prob;
    apply_overrides(&mut base, &args.overrides);
    create_dir(&args.out)?;
    base.save(&args.out.join("config.json"))?;
    let mut combined = format!("prob_blocks,{CSV_HEADER}\n");
    for spec in &args.settings {
        let mut cfg = base.clone();
        cfg.model.prob_blocks = parse_prob_blocks(spec, cfg.model.n_blocks)?;
        cfg.validate()?;
        let label = setting_label(spec);
        let dir = args.out.join(&label);
        info!("setting {label}: prob blocks {:?}", cfg.model.prob_blocks);
        run_training(&cfg, &data, &dir, false)?;
        let methods = if cfg.model.prob_blocks.is_empty() { vec![Method::SoftmaxSample] } else { vec![Method::ProbSample] };
        let results = score(&dir.join("checkpoint.bin"), &data, &methods, scoring)?;
        let csv = metrics_csv(&results);
        write(&dir.join("metrics.csv"), &csv)?;
        for line in csv.lines().skip(1) {
            let _ = writeln!(combined, "{label},{line}");
        }
        print!("{label}\n{}", metrics_table(&results));
    }
    write(&args.out.join("ablation.csv"), &combined)
}

fn report(args: ReportArgs) -> Result<()> {
    let sources = args.logs.iter().map(|p| report::LogSource::read(p)).collect::<Result<Vec<_>>>()?;
    let csv = report::merge(&sources)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(&args.out, &csv)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PROBTRANS_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
