//! `road`: generate scenes, pretrain the teacher, train, evaluate and run the
//! ablation suites.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use road_core::ablation::{Experiment, ExperimentSetup, Suite};
use road_core::checkpoint::Checkpoint;
use road_core::config::{Overrides, RunConfig};
use road_core::dataset::{generate_dataset, Dataset, LabelPurpose, MANIFEST_FILE, SOURCE_TRAIN, TARGET_TRAIN, TARGET_VAL};
use road_core::eval::{evaluate_model, render_tables, Inference};
use road_core::losses::make_partition;
use road_core::model::TeacherModel;
use road_core::pretrain::{load_teacher, pretrain_teacher, target_corpus, teacher_checkpoint};
use road_core::train::{load_student, parse_grid, Init, MetricsLog, TrainData, TrainInputs, Trainer, Variant};
use road_core::RoadError;

const RUN_DIR_ENV: &str = "ROAD_RUN_DIR";
const TEACHER_FILE: &str = "teacher.road";
const CHECKPOINT_FILE: &str = "checkpoint.road";

#[derive(Parser)]
#[command(name = "road", version, about = "Synthetic-to-real segmentation with reality-oriented adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the source-train, target-train and target-val splits to disk.
    Generate(Common),
    /// Pretrain and freeze the real-style teacher.
    PretrainTeacher(Common),
    /// Train one variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled split.
    Eval(EvalArgs),
    /// Run an ablation suite over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $ROAD_RUN_DIR/<command>, else runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct Knobs {
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Region grid as HxW, e.g. 3x3.
    #[arg(long, value_parser = parse_grid_arg)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    knobs: Knobs,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    dataset: PathBuf,
    /// Teacher written by `pretrain-teacher`; pretrained in-process when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = TARGET_VAL)]
    split: String,
    /// Also report IoU per region of this grid.
    #[arg(long, value_parser = parse_grid_arg)]
    grid: Option<(usize, usize)>,
    /// Tile size HxW for tiled inference instead of one full-image pass.
    #[arg(long, value_parser = parse_grid_arg)]
    tile: Option<(usize, usize)>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse_suite)]
    suite: Suite,
    /// Number of seeds; seeds are 0..N.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Independent runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Dataset directory; rendered in memory from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
}

fn parse_grid_arg(s: &str) -> std::result::Result<(usize, usize), String> {
    parse_grid(s).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: RoadError| e.to_string())
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: RoadError| e.to_string())
}

/// Failures that are the caller's fault; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some() || c.downcast_ref::<RoadError>().is_some_and(RoadError::is_config)
    })
}

fn resolve(common: &Common, overrides: Overrides) -> Result<RunConfig> {
    let mut rc = RunConfig::load_or_default(common.config.as_deref())?;
    rc.apply(&Overrides { seed: common.seed, out_dir: common.out.clone(), ..overrides })?;
    Ok(rc)
}

fn out_dir(rc: &RunConfig, command: &str) -> PathBuf {
    let root = std::env::var_os(RUN_DIR_ENV).map(PathBuf::from);
    rc.output_dir(root.as_deref())
        .unwrap_or_else(|| root.unwrap_or_else(|| PathBuf::from("runs")).join(command))
}

fn require_parent(dir: &Path) -> Result<()> {
    match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(UsageError(format!("parent of output directory {} does not exist", dir.display())).into())
        }
        _ => Ok(()),
    }
}

fn cmd_generate(common: Common) -> Result<()> {
    let rc = resolve(&common, Overrides::default())?;
    let out = out_dir(&rc, "generate");
    require_parent(&out)?;
    rc.write_resolved(&out)?;
    let manifest = generate_dataset(&out, &rc.dataset_spec())?;
    let dataset = Dataset::open(&out)?;
    dataset.validate()?;
    eprintln!("{} scenes", manifest.total_scenes());
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}

fn pretrain(rc: &RunConfig, out: &Path) -> Result<TeacherModel<f32>> {
    let (corpus, held) = target_corpus(&rc.scene, &rc.pretrain)?;
    let outcome = pretrain_teacher(&corpus, &held, &rc.model, rc.scene.num_classes, &rc.pretrain)?;
    teacher_checkpoint(&outcome.teacher).save(&out.join(TEACHER_FILE))?;
    let report = serde_json::json!({
        "epoch_losses": outcome.epoch_losses,
        "held_out_accuracy": outcome.held_out_accuracy,
        "checksum": outcome.teacher.checksum(),
    });
    let path = out.join("pretrain.json");
    fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    eprintln!(
        "teacher: proxy accuracy {:.3}, final epoch loss {:.4}",
        outcome.held_out_accuracy,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(outcome.teacher)
}

fn cmd_pretrain(common: Common) -> Result<()> {
    let rc = resolve(&common, Overrides::default())?;
    let out = out_dir(&rc, "pretrain-teacher");
    require_parent(&out)?;
    rc.write_resolved(&out)?;
    pretrain(&rc, &out)?;
    println!("{}", out.join(TEACHER_FILE).display());
    Ok(())
}

fn knob_overrides(k: &Knobs) -> Overrides {
    Overrides {
        variant: k.variant.map(|v| v.name().to_string()),
        grid: k.grid.map(|(h, w)| format!("{h}x{w}")),
        lambda1: k.lambda1,
        lambda2: k.lambda2,
        iterations: k.iters,
        ..Overrides::default()
    }
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    if !path.join(MANIFEST_FILE).is_file() {
        return Err(UsageError(format!("{} is not a dataset directory (no {MANIFEST_FILE})", path.display())).into());
    }
    Ok(Dataset::open(path)?)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let rc = resolve(&args.common, knob_overrides(&args.knobs))?;
    let out = out_dir(&rc, "train");
    require_parent(&out)?;
    rc.write_resolved(&out)?;

    let dataset = open_dataset(&args.dataset)?;
    let data = TrainData::load(&dataset)?;
    let val = dataset.load_scenes(TARGET_VAL, LabelPurpose::Evaluation)?;
    let teacher = match &args.teacher {
        Some(p) => load_teacher(&Checkpoint::load(p)?, &rc.model)?,
        None => pretrain(&rc, &out)?,
    };
    let inputs = TrainInputs {
        data: &data,
        init: Init::Pretrained(teacher.backbone()),
        teacher: rc.train.variant.uses_teacher().then_some(&teacher),
        val: Some(&val),
        num_classes: rc.scene.num_classes,
    };
    let mut trainer = if args.resume {
        let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE))?;
        let log = MetricsLog::read(&out)?;
        Trainer::resume(rc.train.clone(), inputs, &ck)?.with_log(log)
    } else {
        Trainer::new(rc.train.clone(), inputs)?
    };
    trainer = trainer.with_run_dir(&out);
    let from = trainer.iteration();
    trainer.run()?;
    trainer.log().write(&out)?;
    trainer.checkpoint().save(&out.join(CHECKPOINT_FILE))?;

    let eval = evaluate_model(trainer.student(), &val, None, Inference::Full)?;
    let path = out.join("eval.json");
    fs::write(&path, serde_json::to_string_pretty(&eval)?).with_context(|| format!("writing {}", path.display()))?;
    eprintln!(
        "{}: iterations {from}..{}, target-val mIoU {:.4}",
        rc.train.variant,
        trainer.iteration(),
        eval.report.mean_iou
    );
    println!("{}", out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let config_path = args
        .common
        .config
        .clone()
        .or_else(|| args.checkpoint.parent().map(|p| p.join("config.toml")).filter(|p| p.is_file()));
    let common = Common { config: config_path, ..args.common.clone() };
    let rc = resolve(&common, Overrides::default())?;
    let out = out_dir(&rc, "eval");
    require_parent(&out)?;
    rc.write_resolved(&out)?;

    if args.split == SOURCE_TRAIN || args.split == TARGET_TRAIN || args.split == TARGET_VAL {
        let dataset = open_dataset(&args.dataset)?;
        let scenes = dataset.load_scenes(&args.split, LabelPurpose::Evaluation)?;
        let ck = Checkpoint::load(&args.checkpoint)?;
        let student = load_student(&ck, &rc.model, rc.scene.num_classes)?;
        let partition = match (args.grid, scenes.first()) {
            (Some((h, w)), Some(s)) => Some(make_partition(h, w, (s.image.height, s.image.width))?),
            _ => None,
        };
        let inference = args.tile.map_or(Inference::Full, |(height, width)| Inference::Tiled { height, width });
        let eval = evaluate_model(&student, &scenes, partition.as_ref(), inference)?;
        let path = out.join("eval.json");
        fs::write(&path, serde_json::to_string_pretty(&eval)?).with_context(|| format!("writing {}", path.display()))?;
        eprintln!("{}: mIoU {:.4} over {} scenes", args.split, eval.report.mean_iou, scenes.len());
        println!("{}", path.display());
        Ok(())
    } else {
        Err(UsageError(format!("unknown split {:?}", args.split)).into())
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(UsageError("--seeds must be at least 1".into()).into());
    }
    let overrides =
        Overrides { lambda1: args.lambda1, lambda2: args.lambda2, iterations: args.iters, ..Overrides::default() };
    let rc = resolve(&args.common, overrides)?;
    let out = out_dir(&rc, "ablate");
    require_parent(&out)?;
    rc.write_resolved(&out)?;

    let setup = ExperimentSetup::from_run_config(&rc);
    let experiment = match &args.dataset {
        Some(p) => {
            let dataset = open_dataset(p)?;
            let data = TrainData::load(&dataset)?;
            let val = dataset.load_scenes(TARGET_VAL, LabelPurpose::Evaluation)?;
            Experiment::with_data(setup, data, val)
        }
        None => Experiment::new(setup)?,
    };
    let experiment = experiment
        .with_cache_dir(out.join("runs"))
        .on_run(|r| eprintln!("{:>8} seed {:<3} mIoU {:.4}", r.label, r.seed, r.miou));
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let result = experiment.run_suite(args.suite, &seeds, args.jobs)?;
    for cell in &result.summary {
        eprintln!(
            "{:>8}: median {:.4} (min {:.4}, max {:.4}, {} runs)",
            cell.label, cell.median, cell.min, cell.max, cell.runs
        );
    }
    for path in render_tables(&out, &[result])? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::PretrainTeacher(c) => cmd_pretrain(c),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
