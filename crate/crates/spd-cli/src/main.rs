//! `spd` command line: synthetic data generation, training, evaluation,
//! the variant ablation grid, and rendered reports.

mod config;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spd_core::io::load_split;
use spd_core::metrics::{
    annotated_points, euclidean_distance_sum, gps_sum, uniform_gps_k, ConfusionAccumulator,
    MetricReport,
};
use spd_core::trainer::{run_ablation, Trainer};

#[derive(Parser)]
#[command(name = "spd", about = "Desk-scale multi-task human parsing", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic split and print its manifest path.
    Synth(SynthArgs),
    /// Train a model variant; writes a checkpoint and the training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split; writes report files.
    Eval(EvalArgs),
    /// Train and evaluate every variant across the configured seeds.
    Ablate(AblateArgs),
    /// Render overlays and plots for a checkpoint on a split.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples to generate.
    #[arg(long)]
    count: usize,
    /// Base seed for the split.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training-split manifest (overrides the config file).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Variant name: SPD, SP, SD, or S (overrides the config file).
    #[arg(long)]
    variant: Option<String>,
    /// Checkpoint output path (default: <out>/checkpoint.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation-split manifest (overrides the config file).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory for report files; stdout only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Run configuration file (provides manifests, seeds, iterations).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single seed overriding the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to render from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split manifest (overrides the config file).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for overlays and plots.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn core<T>(r: spd_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn load_config(path: &Option<PathBuf>) -> Result<config::RunConfigFile, String> {
    match path {
        Some(p) => config::load(p),
        None => Ok(config::RunConfigFile::default()),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), String> {
    let cfg = load_config(&args.config)?;
    if args.count == 0 {
        return Err("--count must be at least 1".into());
    }
    let seed = args.seed.or(cfg.model.seed).unwrap_or(42);
    let out = args
        .out
        .or(cfg.paths.out_dir)
        .ok_or("synth needs --out or paths.out_dir")?;
    let manifest = core(spd_core::synth::generate_split(args.count, seed, &out))?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), String> {
    let cfg = load_config(&args.config)?;
    let mc = cfg.model_config(args.seed, args.variant.as_deref())?;
    let manifest = args
        .manifest
        .or_else(|| cfg.paths.train_manifest.clone())
        .ok_or("train needs --manifest or paths.train_manifest")?;
    let out = args
        .out
        .or_else(|| cfg.paths.out_dir.clone())
        .ok_or("train needs --out or paths.out_dir")?;
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let data = core(load_split(&manifest))?;
    let mut trainer = core(Trainer::new(&mc, cfg.train_settings()))?;
    println!(
        "variant {} with {} trainable parameters",
        mc.variant.name(),
        trainer.param_count()
    );
    core(trainer.train(&data, cfg.iterations()))?;
    let ckpt = args
        .checkpoint
        .unwrap_or_else(|| out.join("checkpoint.ckpt"));
    core(trainer.save_checkpoint(&ckpt))?;
    let log_path = out.join("train_log.txt");
    std::fs::write(&log_path, trainer.training_log())
        .map_err(|e| format!("{}: {e}", log_path.display()))?;
    if let Some(last) = trainer.loss_history.last() {
        println!("{}", last.log_line(trainer.iteration - 1));
    }
    println!("checkpoint: {}", ckpt.display());
    println!("log: {}", log_path.display());
    Ok(())
}

/// Debug-mode report: every target scored against itself.
fn self_eval_report(manifest: &Path) -> Result<MetricReport, String> {
    let m = core(spd_core::io::read_manifest(manifest))?;
    let data = core(load_split(manifest))?;
    if data.is_empty() {
        return Err("cannot evaluate an empty dataset".into());
    }
    let mut acc = ConfusionAccumulator::new(m.num_classes);
    let mut med = (0.0, 0usize);
    let mut gps = (0.0, 0usize);
    let k = uniform_gps_k(m.num_parts);
    for s in &data {
        core(acc.accumulate(&s.mask, &s.mask))?;
        let (d, c) = core(euclidean_distance_sum(&s.skeleton, &s.skeleton))?;
        med.0 += d;
        med.1 += c;
        if let Some(dp) = &s.densepose {
            let points = annotated_points(dp);
            if !points.is_empty() {
                let (g, c) = core(gps_sum(dp, dp, &points, &k))?;
                gps.0 += g;
                gps.1 += c;
            }
        }
    }
    let med = (med.1 > 0).then(|| med.0 / med.1 as f64);
    let gps = (gps.1 > 0).then(|| gps.0 / gps.1 as f64);
    core(MetricReport::from_confusion(&acc, med, gps))
}

fn cmd_eval(args: EvalArgs) -> Result<(), String> {
    let cfg = load_config(&args.config)?;
    let manifest = args
        .manifest
        .or_else(|| cfg.paths.eval_manifest.clone())
        .ok_or("eval needs --manifest or paths.eval_manifest")?;
    let report = if cfg.trainer.self_eval == Some(true) {
        self_eval_report(&manifest)?
    } else {
        let ckpt = args.checkpoint.ok_or("eval needs --checkpoint")?;
        let trainer = core(Trainer::load_checkpoint(&ckpt))?;
        let data = core(load_split(&manifest))?;
        core(trainer.evaluate(&data))?
    };
    print!("{}", report.to_text());
    if let Some(out) = args.out.or(cfg.paths.out_dir) {
        std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
        let txt = out.join("report.txt");
        std::fs::write(&txt, report.to_text()).map_err(|e| format!("{}: {e}", txt.display()))?;
        let kv = out.join("report.kv");
        std::fs::write(&kv, report.to_kv()).map_err(|e| format!("{}: {e}", kv.display()))?;
        println!("report: {} and {}", txt.display(), kv.display());
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), String> {
    let cfg = config::load(&args.config)?;
    let mc = cfg.model_config(None, None)?;
    let train_manifest = cfg
        .paths
        .train_manifest
        .clone()
        .ok_or("ablate needs paths.train_manifest in the config")?;
    let eval_manifest = cfg
        .paths
        .eval_manifest
        .clone()
        .ok_or("ablate needs paths.eval_manifest in the config")?;
    let out = args
        .out
        .or_else(|| cfg.paths.out_dir.clone())
        .ok_or("ablate needs --out or paths.out_dir")?;
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let train_set = core(load_split(&train_manifest))?;
    let eval_set = core(load_split(&eval_manifest))?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => cfg.seeds(),
    };
    let table = core(run_ablation(
        &mc,
        &train_set,
        &eval_set,
        &seeds,
        cfg.train_settings(),
        cfg.iterations(),
    ))?;
    print!("{}", table.to_text());
    let txt = out.join("ablation.txt");
    std::fs::write(&txt, table.to_text()).map_err(|e| format!("{}: {e}", txt.display()))?;
    let kv = out.join("ablation.kv");
    std::fs::write(&kv, table.to_kv()).map_err(|e| format!("{}: {e}", kv.display()))?;
    println!("table: {} and {}", txt.display(), kv.display());
    let failed: Vec<String> = table
        .cells
        .iter()
        .filter(|c| c.report.is_err())
        .map(|c| format!("{} seed {}", c.variant.name(), c.seed))
        .collect();
    if !failed.is_empty() {
        return Err(format!("{} cell(s) failed: {}", failed.len(), failed.join(", ")));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), String> {
    let cfg = load_config(&args.config)?;
    let manifest = args
        .manifest
        .or_else(|| cfg.paths.eval_manifest.clone())
        .ok_or("report needs --manifest or paths.eval_manifest")?;
    let out = args
        .out
        .or_else(|| cfg.paths.out_dir.clone())
        .ok_or("report needs --out or paths.out_dir")?;
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let mut trainer = core(Trainer::load_checkpoint(&args.checkpoint))?;
    let data = core(load_split(&manifest))?;
    let preds = core(render::predictions(
        &trainer.model,
        &mut trainer.store,
        &data,
    ))?;
    let mut written = 0usize;
    for (sample, pred) in data.iter().zip(&preds) {
        let id = &sample.sample_id;
        let jobs: [(String, render::Canvas); 5] = [
            (
                format!("{id}_input.png"),
                render::Canvas::from_image(&sample.image, render::OVERLAY_SCALE),
            ),
            (
                format!("{id}_target_mask.png"),
                render::mask_overlay(&sample.image, &sample.mask),
            ),
            (
                format!("{id}_pred_mask.png"),
                render::mask_overlay(&sample.image, &pred.mask),
            ),
            (
                format!("{id}_skeleton.png"),
                render::skeleton_overlay(&sample.image, &sample.skeleton, pred.skeleton.as_ref()),
            ),
            (
                format!("{id}_parts.png"),
                render::parts_overlay(
                    &sample.image,
                    pred.parts
                        .as_ref()
                        .or_else(|| sample.densepose.as_ref().map(|d| &d.part_index))
                        .unwrap_or(&ndarray::Array2::zeros((
                            sample.height(),
                            sample.width(),
                        ))),
                ),
            ),
        ];
        for (name, canvas) in jobs {
            core(canvas.save(&out.join(name)))?;
            written += 1;
        }
    }
    core(render::loss_curve(
        &trainer.loss_history,
        &out.join("loss_curve.png"),
    ))?;
    let report = core(trainer.evaluate(&data))?;
    core(render::iou_bars(
        &report.per_class,
        trainer.config().num_classes,
        &out.join("per_class_iou.png"),
    ))?;
    written += 2;
    println!("wrote {written} files to {}", out.display());
    Ok(())
}
