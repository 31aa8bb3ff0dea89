use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use partafford::data::{generate_dataset, read_sample, Category, Dataset, DatasetSpec, GenConfig, SplitTag};
use partafford::export::{attention_grids, cuboid_mesh, encode_grid, label_color, parts_mesh};
use partafford::model::Bottleneck;
use partafford::repro::{run_recipe, Recipe, RecipeEvent, BUILTIN};
use partafford::train::{eval_noise, evaluate, resume, train, Checkpoint, TrainConfig, TrainEvent, LAST_CHECKPOINT};

const MANIFEST: &str = "run-manifest.json";

#[derive(Parser)]
#[command(name = "partafford", version, about = "Part-level affordance discovery on voxel grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a 7:1:2 split.
    GenData {
        #[arg(long)]
        category: Category,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Grid resolution.
        #[arg(long, default_value_t = 32)]
        res: usize,
        /// Generation ranges (TOML); overrides --res.
        #[arg(long)]
        gen_config: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes the config, metric history and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint: mean IoU (%), MSE and AP (%).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitTag,
        /// Report directory; defaults to `eval-<split>` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Export parts, cuboids or attention maps of one sample.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A sample file (`.pavs`).
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        what: VizKind,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// List or run experiment recipes.
    Recipe {
        #[command(subcommand)]
        action: RecipeAction,
    },
}

#[derive(Subcommand)]
enum RecipeAction {
    List,
    /// Run a built-in recipe by name, or a recipe file.
    Run {
        recipe: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum VizKind {
    Parts,
    Cuboids,
    Attention,
}

/// Written before any work so a run can be repeated from it.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    artifacts: Vec<String>,
    tool_version: &'static str,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<partafford::Error> for Failure {
    fn from(e: partafford::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Outcome {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

fn args() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn gen_data(
    category: Category,
    count: usize,
    seed: u64,
    out: &Path,
    res: usize,
    gen_config: Option<&Path>,
    force: bool,
) -> Outcome {
    let non_empty = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if non_empty && !force {
        return Err(Failure::Usage(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let gen = match gen_config {
        Some(p) => {
            require(p, "generation config")?;
            GenConfig::from_toml(&fs::read_to_string(p)?)?
        }
        None => GenConfig::with_res(res),
    };
    let spec = DatasetSpec {
        category,
        count,
        seed,
        split: None,
        gen,
    };
    if non_empty {
        fs::remove_dir_all(out)?;
    }
    write_manifest(
        out,
        &RunManifest {
            command: "gen-data",
            args: args(),
            config: serde_json::to_value(&spec)?,
            seed: Some(seed),
            artifacts: vec!["manifest.jsonl".into(), "gen.toml".into(), "samples/".into()],
            tool_version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    let records = generate_dataset(&spec, out)?;
    let count_of = |t: SplitTag| records.iter().filter(|r| r.split == t).count();
    println!(
        "{} {category} objects in {} (train {}, val {}, test {})",
        records.len(),
        out.display(),
        count_of(SplitTag::Train),
        count_of(SplitTag::Val),
        count_of(SplitTag::Test)
    );
    Ok(())
}

fn print_event(e: &TrainEvent) {
    match e {
        TrainEvent::Record(r) if r.split == "train" => {
            let l = r.loss.unwrap_or_default();
            println!(
                "epoch {:>3} stage {} step {:>6}  loss {:.4} (recon {:.4} pred {:.4} cuboid {:.4} scale {:.3})",
                r.epoch, r.stage, r.step, l.total, l.recon, l.pred, l.cuboid, l.scale
            );
        }
        TrainEvent::Record(r) => {
            let ap = r.ap.map_or("n/a".to_string(), |a| format!("{:.1}", 100.0 * a));
            println!(
                "epoch {:>3} {}  mean IoU {:.1}  MSE {:.4}  AP {ap}",
                r.epoch,
                r.split,
                100.0 * r.mean_iou.unwrap_or(0.0),
                r.mse.unwrap_or(0.0)
            );
        }
        TrainEvent::Clipped { .. } | TrainEvent::Saved(_) => {}
    }
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, resume_run: bool) -> Outcome {
    require(data, "dataset")?;
    let mut events = |e: &TrainEvent| print_event(e);
    if resume_run {
        let last = out.join(LAST_CHECKPOINT);
        require(&last, "checkpoint")?;
        let ckpt = Checkpoint::load(&last)?;
        write_manifest(
            out,
            &RunManifest {
                command: "train --resume",
                args: args(),
                config: serde_json::to_value(&ckpt.train)?,
                seed: ckpt.train.as_ref().map(|t| t.seed),
                artifacts: artifacts_of_training(),
                tool_version: env!("CARGO_PKG_VERSION"),
            },
        )?;
        let data = Dataset::load(data)?;
        resume(ckpt, &data, Some(out), &mut events)?;
        return Ok(());
    }
    let cfg = match config {
        Some(p) => {
            require(p, "config")?;
            TrainConfig::from_toml(&fs::read_to_string(p)?)?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    write_manifest(
        out,
        &RunManifest {
            command: "train",
            args: args(),
            config: serde_json::to_value(&cfg)?,
            seed: Some(cfg.seed),
            artifacts: artifacts_of_training(),
            tool_version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    let data = Dataset::load(data)?;
    let outcome = train(&cfg, &data, Some(out), &mut events)?;
    println!(
        "finished at epoch {} after {} steps; checkpoints in {}",
        outcome.last.progress.epoch,
        outcome.last.progress.step,
        out.display()
    );
    Ok(())
}

fn artifacts_of_training() -> Vec<String> {
    ["train.toml", "history.jsonl", "last.ckpt", "best.ckpt", "checkpoints/"]
        .map(String::from)
        .to_vec()
}

fn eval_cmd(checkpoint: &Path, data: &Path, split: SplitTag, out: Option<&Path>, noise_seed: u64) -> Outcome {
    require(checkpoint, "checkpoint")?;
    require(data, "dataset")?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{split}")),
    };
    write_manifest(
        &out,
        &RunManifest {
            command: "eval",
            args: args(),
            config: serde_json::json!({
                "checkpoint": checkpoint,
                "data": data,
                "split": split,
                "noise_seed": noise_seed,
            }),
            seed: Some(noise_seed),
            artifacts: vec!["report.json".into()],
            tool_version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(data)?;
    let samples = data.split(split);
    let with_affordances = ckpt.train.as_ref().is_none_or(|t| t.mode.predicts_affordances());
    let report = evaluate(&ckpt.model, &samples, data.category(), with_affordances, noise_seed)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("split      {split} ({} samples)", report.samples);
    println!("mean IoU   {:.2} %", 100.0 * report.mean_iou);
    println!("MSE        {:.5}", report.mse);
    match report.ap {
        Some(ap) => println!("AP         {:.2} %", 100.0 * ap),
        None => println!("AP         n/a"),
    }
    Ok(())
}

fn viz_cmd(checkpoint: &Path, sample: &Path, out: &Path, what: VizKind, noise_seed: u64) -> Outcome {
    require(checkpoint, "checkpoint")?;
    require(sample, "sample")?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let sample = read_sample(sample)?;
    let model = &ckpt.model;
    if sample.res != model.config.res {
        return Err(Failure::Usage(format!(
            "sample resolution {} does not match the model's {}",
            sample.res, model.config.res
        )));
    }
    if matches!(what, VizKind::Attention) && model.config.bottleneck == Bottleneck::SlotMlp {
        return Err(Failure::Usage("this model has no slot attention to visualize".into()));
    }
    let t = model.config.iters;
    let artifacts: Vec<String> = match what {
        VizKind::Parts => vec!["parts.ply".into()],
        VizKind::Cuboids => (0..model.config.slots).map(|m| format!("cuboid-{m}.ply")).collect(),
        VizKind::Attention => (0..t).map(|i| format!("attention-iter{}.pavg", i + 1)).collect(),
    };
    write_manifest(
        out,
        &RunManifest {
            command: "viz",
            args: args(),
            config: serde_json::json!({
                "checkpoint": checkpoint,
                "sample": sample.id,
                "what": what,
                "noise_seed": noise_seed,
            }),
            seed: Some(noise_seed),
            artifacts: artifacts.clone(),
            tool_version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    let noise = eval_noise(model, noise_seed, 0);
    let pred = model.predict(&sample.occupancy_values(), noise.as_ref())?;
    let category = ckpt.train.as_ref().map_or(sample.category, |t| t.category);
    match what {
        VizKind::Parts => {
            let mesh = parts_mesh(&pred, category, sample.res)?;
            fs::write(out.join(&artifacts[0]), mesh.to_ply())?;
        }
        VizKind::Cuboids => {
            for ((cub, &class), name) in pred.cuboids.iter().zip(&pred.slot_classes()).zip(&artifacts) {
                let label = if class == 0 { 0 } else { category.label_of_class(class) };
                fs::write(out.join(name), cuboid_mesh(cub, label_color(label)).to_ply())?;
            }
        }
        VizKind::Attention => {
            let grids = attention_grids(&pred, model.config.token_res(), sample.res)?;
            for (grid, name) in grids.iter().zip(&artifacts) {
                fs::write(out.join(name), encode_grid(grid, sample.res, pred.slots)?)?;
            }
        }
    }
    println!("wrote {} file(s) to {}", artifacts.len(), out.display());
    Ok(())
}

fn recipe_cmd(action: RecipeAction) -> Outcome {
    match action {
        RecipeAction::List => {
            for (name, _) in BUILTIN {
                let r = Recipe::builtin(name)?;
                let tag = r.criterion.map_or(String::new(), |c| format!(" [criterion {c}]"));
                println!("{name:<20}{tag:<16} {:>6.0} min  {}", r.budget_minutes, r.description);
            }
            Ok(())
        }
        RecipeAction::Run { recipe, out } => {
            let r = if recipe.ends_with(".toml") {
                require(Path::new(&recipe), "recipe")?;
                Recipe::from_toml(&fs::read_to_string(&recipe)?)?
            } else {
                Recipe::builtin(&recipe).map_err(|e| Failure::Usage(e.to_string()))?
            };
            write_manifest(
                &out,
                &RunManifest {
                    command: "recipe run",
                    args: args(),
                    config: serde_json::to_value(&r)?,
                    seed: None,
                    artifacts: vec!["recipe.toml".into(), "data/".into(), "runs/".into(), "report.json".into()],
                    tool_version: env!("CARGO_PKG_VERSION"),
                },
            )?;
            let report = run_recipe(&r, &out, &mut |e| match e {
                RecipeEvent::RunStarted { run, seed } => println!("run {run} seed {seed}"),
                RecipeEvent::Train(e) => print_event(e),
                RecipeEvent::RunFinished { run, seed, metrics } => {
                    println!("run {run} seed {seed} done: {metrics:?}")
                }
            })?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("recipe {} missed its bounds", r.name)))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            category,
            count,
            seed,
            out,
            res,
            gen_config,
            force,
        } => gen_data(category, count, seed, &out, res, gen_config.as_deref(), force),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train_cmd(config.as_deref(), &data, &out, resume),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            noise_seed,
        } => eval_cmd(&checkpoint, &data, split, out.as_deref(), noise_seed),
        Command::Viz {
            checkpoint,
            sample,
            out,
            what,
            noise_seed,
        } => viz_cmd(&checkpoint, &sample, &out, what, noise_seed),
        Command::Recipe { action } => recipe_cmd(action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
