//! Command-line front end for the multi-instance registration library.
//!
//! Subcommands:
//! - `generate`: synthesize a scene (model PLY, scene PLY, ground-truth JSON)
//!   from a scene-spec JSON document;
//! - `register`: run the full pipeline on a model/scene pair and emit poses;
//! - `eval`: score a poses file against ground truth;
//! - `bench`: run a benchmark sweep and emit its CSV table;
//! - `selftest`: run the built-in oracle checks.

mod selftest;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use multireg::attention::{random_weight_set, WeightSet};
use multireg::harness::ply::{read_ply, write_ply};
use multireg::harness::scene::load_model;
use multireg::harness::weights_io::load_weights;
use multireg::harness::{
    evaluate, generate_scene, oracle_features, poses_from_json, poses_to_json, prepare_cloud,
    run_bench, run_prepared, BenchSweep, GroundTruth, MetricsReport, PipelineConfig, PoseRecord,
    SceneSpec,
};
use multireg::preprocess::PointCloud;

#[derive(Parser)]
#[command(
    name = "multireg",
    version,
    about = "Multi-instance point-cloud registration toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene from a scene-spec JSON document.
    Generate(GenerateArgs),
    /// Register a model cloud against a scene cloud and emit poses.
    Register(RegisterArgs),
    /// Score a predicted-poses file against ground truth.
    Eval(EvalArgs),
    /// Run a benchmark sweep and emit its CSV table.
    Bench(BenchArgs),
    /// Run the built-in oracle checks and report PASS/FAIL per check.
    Selftest,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene-spec JSON file. Fields (all optional): model_source,
    /// instance_range, noise_sigma, occlusion, background_points, seed.
    #[arg(long)]
    spec: PathBuf,
    /// Directory receiving model.ply, scene.ply and gt.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Write binary little-endian PLY instead of ASCII.
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct RegisterArgs {
    /// Model point cloud (PLY).
    #[arg(long)]
    model: PathBuf,
    /// Scene point cloud (PLY).
    #[arg(long)]
    scene: PathBuf,
    /// Pipeline configuration JSON; defaults to the "synthetic" preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Transformer weight manifest (JSON with a sibling .blob file).
    #[arg(long, conflicts_with = "random_weights")]
    weights: Option<PathBuf>,
    /// Use seeded random transformer weights instead of a weights file.
    #[arg(long)]
    random_weights: bool,
    /// Seed for --random-weights and the feature provider.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ground-truth JSON; drives the oracle feature provider and metrics.
    #[arg(long)]
    gt: PathBuf,
    /// Oracle feature quality in [0, 1]: the expected fraction of correct
    /// mutual-top-1 matches the features induce.
    #[arg(long, default_value_t = 1.0)]
    inlier_rate: f64,
    /// Drive the attention mask from ground truth instead of the learned
    /// update.
    #[arg(long)]
    gt_aligned_mask: bool,
    /// Poses JSON output path; stdout when omitted.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Full report JSON (poses, per-instance correspondences, metrics).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted poses JSON.
    #[arg(long)]
    poses: PathBuf,
    /// Ground-truth JSON.
    #[arg(long)]
    gt: PathBuf,
    /// Model source: a PLY path or a procedural id like "torus:300".
    #[arg(long)]
    model: PathBuf,
    /// Pipeline configuration JSON carrying the success thresholds.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Score with the symmetric (nearest-point distance) success criterion.
    #[arg(long)]
    symmetric: bool,
    /// Output format: "json" (full report) or "csv" (fixed columns
    /// mr,mp,mf,instances,predictions,successes).
    #[arg(long, default_value = "json")]
    format: String,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Sweep JSON (model_source, instance_range, noise, occlusion,
    /// inlier_rate, scenes, seed, ...); defaults apply when omitted.
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Pipeline configuration JSON; defaults to the "synthetic" preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Transformer weight manifest (JSON with a sibling .blob file).
    #[arg(long, conflicts_with = "random_weights")]
    weights: Option<PathBuf>,
    /// Use seeded random transformer weights instead of a weights file.
    #[arg(long)]
    random_weights: bool,
    /// Seed for --random-weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Register(args) => cmd_register(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Selftest => selftest::run(),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::synthetic()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let config = PipelineConfig::from_json(&text)
                .with_context(|| format!("parsing config {}", p.display()))?;
            Ok(config)
        }
    }
}

fn load_gt(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading ground truth {}", path.display()))?;
    let file: multireg::harness::scene::GroundTruthFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing ground truth {}", path.display()))?;
    let gt = GroundTruth::from_file(&file)
        .with_context(|| format!("validating ground truth {}", path.display()))?;
    Ok(gt)
}

/// Resolves the weight source shared by `register` and `bench`.
fn resolve_weights(
    weights: Option<&Path>,
    random_weights: bool,
    seed: u64,
    config: &PipelineConfig,
) -> Result<WeightSet> {
    match (weights, random_weights) {
        (Some(path), false) => {
            load_weights(path).with_context(|| format!("loading weights {}", path.display()))
        }
        (None, true) => {
            let t = &config.transformer;
            random_weight_set(
                t.backbone_dim,
                t.feature_dim,
                config.encoding.dim,
                t.heads,
                t.iterations,
                seed,
            )
            .context("building random weights")
        }
        (None, false) => bail!("provide --weights FILE or --random-weights"),
        (Some(_), true) => unreachable!("clap rejects the combination"),
    }
}

fn write_or_print(out: Option<&Path>, content: &str, what: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {what} to {}", path.display());
            Ok(())
        }
        None => {
            // A downstream pipe (e.g. `| head`) may close stdout early; treat
            // that as a normal end of output rather than an error.
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            let result = stdout
                .write_all(content.as_bytes())
                .and_then(|()| stdout.write_all(b"\n"));
            match result {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                other => other.context("writing to stdout"),
            }
        }
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading scene spec {}", args.spec.display()))?;
    let spec: SceneSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing scene spec {}", args.spec.display()))?;
    let (model, scene, gt) = generate_scene(&spec).context("generating scene")?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let model_path = args.out_dir.join("model.ply");
    let scene_path = args.out_dir.join("scene.ply");
    let gt_path = args.out_dir.join("gt.json");
    write_ply(&model_path, &model, args.binary).context("writing model PLY")?;
    write_ply(&scene_path, &scene, args.binary).context("writing scene PLY")?;
    let gt_json = serde_json::to_string_pretty(&gt.to_file()).context("encoding ground truth")?;
    fs::write(&gt_path, gt_json).with_context(|| format!("writing {}", gt_path.display()))?;

    println!(
        "wrote {} ({} points), {} ({} points, {} instances), {}",
        model_path.display(),
        model.points.len(),
        scene_path.display(),
        scene.points.len(),
        gt.poses.len(),
        gt_path.display()
    );
    Ok(())
}

fn cmd_register(args: &RegisterArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let weights = resolve_weights(
        args.weights.as_deref(),
        args.random_weights,
        args.seed,
        &config,
    )?;
    let model =
        read_ply(&args.model).with_context(|| format!("reading model {}", args.model.display()))?;
    let scene =
        read_ply(&args.scene).with_context(|| format!("reading scene {}", args.scene.display()))?;
    let gt = load_gt(&args.gt)?;
    if gt.labels.len() != scene.points.len() {
        bail!(
            "ground truth covers {} points but the scene has {}",
            gt.labels.len(),
            scene.points.len()
        );
    }

    let start = std::time::Instant::now();
    let prepared_model = prepare_cloud(&model, &config).context("preprocessing model")?;
    let prepared_scene = prepare_cloud(&scene, &config).context("preprocessing scene")?;
    let features = oracle_features(
        &gt,
        &prepared_model.graph,
        &prepared_scene.graph,
        model.points.len(),
        args.inlier_rate,
        config.transformer.backbone_dim,
        args.seed,
    )
    .context("building oracle features")?;
    let mut report = run_prepared(
        &prepared_model,
        &prepared_scene,
        &features,
        &weights,
        Some(&gt),
        args.gt_aligned_mask,
        &config,
    )
    .context("running pipeline")?;
    let elapsed = start.elapsed().as_secs_f64();
    report.runtime_seconds = elapsed;
    if let Some(m) = report.metrics.as_mut() {
        m.runtime_seconds = elapsed;
    }

    let records: Vec<PoseRecord> = report
        .hypotheses
        .iter()
        .map(PoseRecord::from_hypothesis)
        .collect();
    write_or_print(args.poses.as_deref(), &poses_to_json(&records), "poses")?;

    if let Some(report_path) = &args.report {
        let instances: Vec<serde_json::Value> = report
            .hypotheses
            .iter()
            .map(|h| {
                serde_json::json!({
                    "pose": PoseRecord::from_hypothesis(h),
                    "correspondences": h
                        .correspondences
                        .iter()
                        .map(|c| serde_json::json!([c.p_index, c.q_index, c.weight]))
                        .collect::<Vec<_>>(),
                })
            })
            .collect();
        let doc = serde_json::json!({
            "instances": instances,
            "global_correspondence_count": report.correspondences.len(),
            "metrics": report.metrics,
            "runtime_seconds": report.runtime_seconds,
        });
        fs::write(report_path, serde_json::to_string_pretty(&doc)?)
            .with_context(|| format!("writing {}", report_path.display()))?;
        eprintln!("wrote report to {}", report_path.display());
    }

    if let Some(metrics) = &report.metrics {
        eprintln!(
            "registered {} instance(s) in {:.2}s: MR {:.4} MP {:.4} MF {:.4} IR {:.4} mIoU {:.4}",
            report.hypotheses.len(),
            elapsed,
            metrics.mean_recall,
            metrics.mean_precision,
            metrics.mean_f1,
            metrics.inlier_ratio,
            metrics.mask_miou
        );
    } else {
        eprintln!(
            "registered {} instance(s) in {elapsed:.2}s",
            report.hypotheses.len()
        );
    }
    Ok(())
}

fn load_model_source(path: &Path) -> Result<PointCloud> {
    let text = path.to_string_lossy();
    if text.ends_with(".ply") {
        read_ply(path).with_context(|| format!("reading model {}", path.display()))
    } else {
        let points = load_model(&text).with_context(|| format!("loading model source {text}"))?;
        Ok(PointCloud::new(points))
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let poses_text = fs::read_to_string(&args.poses)
        .with_context(|| format!("reading poses {}", args.poses.display()))?;
    let records = poses_from_json(&poses_text)
        .with_context(|| format!("parsing poses {}", args.poses.display()))?;
    let predictions = records
        .iter()
        .map(|r| r.to_pose())
        .collect::<Result<Vec<_>, _>>()
        .context("decoding poses")?;
    let gt = load_gt(&args.gt)?;
    let model = load_model_source(&args.model)?;
    let symmetric = args.symmetric || config.evaluation.symmetric;
    let metrics = evaluate(
        &predictions,
        &gt.poses,
        &model.points,
        &config.thresholds(),
        symmetric,
    );

    let content = match args.format.as_str() {
        "json" => serde_json::to_string_pretty(&metrics).context("encoding metrics")?,
        "csv" => metrics_csv(&metrics, gt.poses.len(), predictions.len()),
        other => bail!("unknown format {other:?}; use \"json\" or \"csv\""),
    };
    write_or_print(args.out.as_deref(), &content, "metrics")?;
    Ok(())
}

/// Fixed columns: mr,mp,mf,instances,predictions,successes.
fn metrics_csv(metrics: &MetricsReport, instances: usize, predictions: usize) -> String {
    let successes = metrics.per_instance.iter().filter(|i| i.successful).count();
    format!(
        "mr,mp,mf,instances,predictions,successes\n{:.6},{:.6},{:.6},{instances},{predictions},{successes}",
        metrics.mean_recall, metrics.mean_precision, metrics.mean_f1
    )
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let sweep = match &args.sweep {
        None => BenchSweep::default(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading sweep {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing sweep {}", path.display()))?
        }
    };
    let weights = resolve_weights(
        args.weights.as_deref(),
        args.random_weights,
        args.seed,
        &config,
    )?;
    let csv = run_bench(&config, &sweep, &weights).context("running benchmark sweep")?;
    write_or_print(args.out.as_deref(), csv.trim_end(), "benchmark CSV")?;
    Ok(())
}
