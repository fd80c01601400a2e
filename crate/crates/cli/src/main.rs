use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cromo_core::confusion::{
    cifar100_confusion, emit_curves, read_curves_csv, run_confusion_experiment, toy_confusion,
    ConfusionConfig, ConfusionMode, Learner,
};
use cromo_core::eval::{
    compute_la_wp_tp, confusion_csv, dataset_features, evaluate_linear, format_table, knn_predict,
    per_task_knn_matrix, transfer_accuracy, write_text, MetricsReport, TableRow,
};
use cromo_core::experiment::{run_experiment, write_report, ExperimentReport};
use cromo_core::losses::SslKind;
use cromo_core::models::{build_trinet, load_checkpoint, TriNet};
use cromo_core::plot::plot_loss_curves;
use cromo_core::sweep::{run_sweep, sweep_csv, write_sweep, SweepAxis};
use cromo_core::trainer::{
    checkpoint_path, load_experiment_data, read_metrics_log, RunOptions, CONFIG_SNAPSHOT,
    METRICS_LOG,
};
use cromo_core::{preset_names, ExperimentConfig};

/// Continual self-supervised learning experiments.
#[derive(Parser)]
#[command(name = "cromo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task of a config and evaluate the final model.
    Train(TrainArgs),
    /// Evaluate a finished run directory.
    Eval(EvalArgs),
    /// Train one run per value of a single config field.
    Sweep(SweepArgs),
    /// Task-confusion study: schedules x learners, train-set LA/WP/TP curves.
    Confusion(ConfusionArgs),
    /// Render plots from a run directory or a curves file.
    Plot(PlotArgs),
    /// List the built-in preset names.
    Presets,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file or preset name (see `cromo presets`).
    #[arg(short, long)]
    config: String,
    /// `key=value` replacement, e.g. `trainer.seed=7`. Repeatable.
    #[arg(short = 'o', long = "override")]
    overrides: Vec<String>,
    /// Root directory for run outputs.
    #[arg(long)]
    output_root: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::resolve(&self.config, &self.overrides)?;
        if let Some(root) = &self.output_root {
            cfg.output_root = root.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue an interrupted run in the same directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many tasks.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Linear,
    Knn,
    Transfer,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run_dir: PathBuf,
    /// Checkpoint to evaluate; defaults to the run's last task.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "linear")]
    mode: EvalMode,
    /// Neighbours for k-NN; defaults to the config's value.
    #[arg(long)]
    k: Option<usize>,
    /// Target dataset for transfer mode.
    #[arg(long, default_value = "cifar10")]
    target: String,
    /// Directory holding the target dataset.
    #[arg(long)]
    target_root: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    axis: String,
    /// Comma-separated values, e.g. `25,50,75,100`.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfusionPreset {
    Toy,
    Cifar100,
}

#[derive(Args)]
struct ConfusionArgs {
    /// TOML confusion config; learner and mode are set per cell.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    preset: ConfusionPreset,
    /// Objective for the self-supervised learner of the cifar100 preset.
    #[arg(long, default_value = "simclr")]
    ssl: String,
    #[arg(long, value_delimiter = ',', default_value = "ssl,supervised")]
    learners: Vec<String>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "cil_minibatch,dil_minibatch,single_pool"
    )]
    modes: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    output_root: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Plot the loss terms of this run's metrics.log.
    #[arg(long, required_unless_present = "curves")]
    run_dir: Option<PathBuf>,
    /// Re-render confusion plots from a curves.csv.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Output directory; defaults to the input's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_summary(report: &ExperimentReport) {
    let row = TableRow {
        method: report.strategy.clone(),
        ssl: report.ssl.clone(),
        report: report.metrics.clone(),
    };
    print!("{}", format_table(&[row]));
    if let Some(k) = report.metrics.knn_accuracy {
        println!("k-NN accuracy: {:.2}", 100.0 * k);
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    if args.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let dir = cfg.run_dir();
    println!("run {} -> {}", cfg.hash(), dir.display());
    let opts = RunOptions {
        run_dir: Some(dir.clone()),
        resume: args.resume,
        stop_after: args.stop_after,
        ..RunOptions::default()
    };
    if let Some(n) = args.stop_after.filter(|&n| n < cfg.data.num_tasks) {
        let (data, seq) = load_experiment_data(&cfg)?;
        cromo_core::trainer::run_continual(&cfg, &data, &seq, &opts)?;
        println!("stopped after {n} task(s); continue with --resume");
        return Ok(());
    }
    let out = run_experiment(&cfg, &opts)?;
    print_summary(&out.report);
    Ok(())
}

fn load_net(
    cfg: &ExperimentConfig,
    geom: cromo_core::data::ImageGeom,
    path: &Path,
) -> Result<TriNet> {
    let mut net = build_trinet(&cfg.model, geom, cfg.trainer.seed)?;
    let (hash, _) = load_checkpoint(&mut net, path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    if hash != cfg.hash() {
        log::warn!(
            "{} was written by config {hash}, evaluating under {}",
            path.display(),
            cfg.hash()
        );
    }
    Ok(net)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.run_dir.join(CONFIG_SNAPSHOT), &[])?;
    let (data, seq) = load_experiment_data(&cfg)?;
    let last = checkpoint_path(&args.run_dir, seq.len() - 1);
    let ckpt = args.checkpoint.clone().unwrap_or(last);
    let net = load_net(&cfg, data.train.geom, &ckpt)?;
    let policy = cfg.data.augmentation_policy();
    let map = seq.class_task_map();
    let (ev, seed) = (&cfg.eval, cfg.trainer.seed);
    let report = |metrics: MetricsReport| ExperimentReport {
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        strategy: cfg.trainer.strategy.name().into(),
        ssl: cfg.loss.kind.name().into(),
        seed,
        metrics,
    };
    match args.mode {
        EvalMode::Linear => {
            let m = evaluate_linear(&net, &data, &map, &policy, &ev.probe, ev.chunk, seed)?;
            write_text(
                &args.run_dir.join("confusion_matrix.csv"),
                &confusion_csv(&m),
            )?;
            let r = report(m);
            write_report(&args.run_dir.join("eval_linear.json"), &r)?;
            print_summary(&r);
        }
        EvalMode::Knn => {
            let k = args.k.unwrap_or(ev.knn_k);
            let ftr = dataset_features(&net, &data.train, &policy, ev.chunk, seed)?;
            let fte = dataset_features(&net, &data.test, &policy, ev.chunk, seed)?;
            let preds = knn_predict(&ftr, data.train.labels(), &fte, k, data.train.class_count)?;
            let mut m = compute_la_wp_tp(&preds, data.test.labels(), &map)?;
            m.knn_accuracy = Some(m.la);
            let r = report(m);
            write_report(&args.run_dir.join("eval_knn.json"), &r)?;
            print_summary(&r);
            let paths: Vec<PathBuf> = (0..seq.len())
                .map(|t| checkpoint_path(&args.run_dir, t))
                .collect();
            if args.checkpoint.is_none() && paths.iter().all(|p| p.exists()) {
                let nets = paths
                    .iter()
                    .map(|p| load_net(&cfg, data.train.geom, p))
                    .collect::<Result<Vec<_>>>()?;
                let tm = per_task_knn_matrix(
                    &nets,
                    &data.train,
                    &data.test,
                    &map,
                    &policy,
                    k,
                    ev.chunk,
                    seed,
                )?;
                write_text(&args.run_dir.join("knn_task_matrix.csv"), &tm.to_csv())?;
                let f: Vec<String> = tm
                    .forgetting()
                    .iter()
                    .map(|v| format!("{:.2}", 100.0 * v))
                    .collect();
                println!("per-task forgetting: {}", f.join(" "));
            }
        }
        EvalMode::Transfer => {
            let root = args
                .target_root
                .clone()
                .unwrap_or_else(|| cfg.data.root.clone());
            let target = cromo_core::data::load_dataset(&args.target, &root, &cfg.data.synthetic)?;
            let probe = cromo_core::config::ProbeConfig::transfer();
            let acc = transfer_accuracy(&net, &target, &policy, &probe, ev.chunk, seed)?;
            let record = serde_json::json!({ "target": args.target, "accuracy": acc, "config_hash": cfg.hash() });
            write_text(
                &args
                    .run_dir
                    .join(format!("eval_transfer_{}.json", args.target)),
                &(serde_json::to_string_pretty(&record)? + "\n"),
            )?;
            println!("transfer accuracy on {}: {:.2}", args.target, 100.0 * acc);
        }
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let base = args.config.load()?;
    let axis: SweepAxis = args.axis.parse()?;
    let cells = run_sweep(&base, axis, &args.values)?;
    let out = base.output_root.join("sweeps").join(format!(
        "{}-{}-{}",
        base.name,
        axis.name(),
        &base.hash()[..12]
    ));
    write_sweep(&out, axis, &cells)?;
    print!("{}", sweep_csv(axis, &cells));
    println!("sweep table: {}", out.display());
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    if failed == cells.len() {
        bail!("every sweep cell failed");
    }
    if failed > 0 {
        log::warn!("{failed} of {} sweep cells failed", cells.len());
    }
    Ok(())
}

fn confusion(args: &ConfusionArgs) -> Result<()> {
    let base = match &args.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(ConfusionConfig::from_toml_str(&text)?)
        }
        None => None,
    };
    let kind: SslKind = args.ssl.parse()?;
    let mut cells = Vec::new();
    for l in &args.learners {
        let learner: Learner = l.parse()?;
        for m in &args.modes {
            let mode: ConfusionMode = m.parse()?;
            let mut cfg = match (&base, args.preset) {
                (Some(b), _) => ConfusionConfig {
                    learner,
                    mode,
                    ..b.clone()
                },
                (None, ConfusionPreset::Toy) => toy_confusion(learner, mode),
                (None, ConfusionPreset::Cifar100) => cifar100_confusion(learner, kind, mode),
            };
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(n) = args.iterations {
                cfg.iterations = n;
                cfg.probe_every = cfg.probe_every.min(n);
            }
            if let Some(r) = &args.output_root {
                cfg.output_root = r.clone();
            }
            cfg.validate()?;
            cells.push(cfg);
        }
    }
    let out = ConfusionConfig::grid_dir(&cells)?;
    let mut records = Vec::new();
    for cfg in &cells {
        log::info!(
            "confusion cell {} / {}",
            cfg.learner_name(),
            cfg.mode.name()
        );
        let recs = run_confusion_experiment(cfg)?;
        if let Some(r) = recs.last() {
            println!(
                "{:<12} {:<14} LA {:6.2}  WP {:6.2}  TP {:6.2}",
                r.learner,
                r.mode,
                100.0 * r.la,
                100.0 * r.wp,
                100.0 * r.tp
            );
        }
        records.extend(recs);
    }
    emit_curves(&records, &out)?;
    println!("curves: {}", out.display());
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<()> {
    if let Some(csv) = &args.curves {
        let records = read_curves_csv(csv)?;
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
        for p in emit_curves(&records, &out)? {
            println!("{}", p.display());
        }
    }
    if let Some(dir) = &args.run_dir {
        let records = read_metrics_log(&dir.join(METRICS_LOG))?;
        let out = args.out.clone().unwrap_or_else(|| dir.clone());
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("losses.png");
        plot_loss_curves(&records, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .filter_map(|e| e.downcast_ref::<cromo_core::Error>())
        .any(cromo_core::Error::is_validation);
    if validation {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Confusion(a) => confusion(a),
        Command::Plot(a) => plot(a),
        Command::Presets => {
            for n in preset_names() {
                println!("{n}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
