use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gradprune_core::distillation::{teacher_distribution_stats, TeacherHandle, DEFAULT_TEMPERATURES};
use gradprune_core::harness::{
    default_model_for, emit_schedule, run_to_dir, set_field, sweep, teacher_stats_csv, HarnessError,
    RunSetup, StudentInit, SweepSpec,
};
use gradprune_core::models::{
    generate_task, train_teacher, Checkpoint, ModelConfig, SyntheticTask, TeacherTraining,
};
use gradprune_core::recipes::{audit_recipe, bundled, parse_recipe, Recipe, BUNDLED};

#[derive(Parser)]
#[command(name = "gradprune", version, about = "Gradual magnitude pruning with distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TaskArgs {
    /// Task field override, e.g. `--task train_size=256`. Repeatable.
    #[arg(long = "task", value_name = "KEY=VALUE")]
    task: Vec<String>,
}

#[derive(Args)]
struct RecipeArgs {
    /// Bundled recipe name or path to a recipe JSON file.
    #[arg(long)]
    recipe: String,
    /// Recipe field override by dotted path, e.g. `--set kd.hardness=0.6`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct StudentArgs {
    /// Checkpoint to start from (parameters and masks).
    #[arg(long, conflicts_with = "model")]
    init: Option<PathBuf>,
    /// Model config JSON for a freshly initialised student.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Teacher checkpoint, required when the recipe distills.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dense teacher on the synthetic task.
    TrainTeacher {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one recipe with one seed.
    Run {
        #[command(flatten)]
        recipe: RecipeArgs,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        student: StudentArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vary one recipe field across values and seeds.
    Sweep {
        #[command(flatten)]
        recipe: RecipeArgs,
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        student: StudentArgs,
        /// Dotted recipe path to vary.
        #[arg(long)]
        field: String,
        /// JSON array of values.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds; defaults to the recipe's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Worker threads; 1 keeps the run order fixed.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the per-step learning rate and sparsity target as CSV.
    EmitSchedule {
        #[command(flatten)]
        recipe: RecipeArgs,
        #[arg(long)]
        steps_per_epoch: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Teacher max-probability and entropy per validation sample and temperature.
    TeacherStats {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, value_delimiter = ',')]
        temperatures: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a recipe and, for bundled names, audit it against reference constants.
    ValidateRecipe {
        #[command(flatten)]
        recipe: RecipeArgs,
    },
    /// List bundled recipe names.
    ListRecipes,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn split_pair(raw: &str) -> Result<(&str, &str)> {
    raw.split_once('=')
        .with_context(|| format!("expected KEY=VALUE, got `{raw}`"))
}

fn load_task(args: &TaskArgs) -> Result<SyntheticTask> {
    let mut doc = serde_json::to_value(SyntheticTask::default())?;
    for raw in &args.task {
        let (k, v) = split_pair(raw)?;
        let obj = doc.as_object_mut().expect("task is an object");
        if !obj.contains_key(k) {
            bail!("unknown task field `{k}`");
        }
        obj.insert(k.to_string(), parse_value(v));
    }
    let task: SyntheticTask = serde_json::from_value(doc).context("invalid task")?;
    task.validate()?;
    Ok(task)
}

fn load_recipe(args: &RecipeArgs) -> Result<Recipe> {
    let mut recipe = if BUNDLED.iter().any(|(n, _)| *n == args.recipe.trim_end_matches(".json"))
        && !Path::new(&args.recipe).exists()
    {
        bundled(&args.recipe)?
    } else {
        let text = fs::read_to_string(&args.recipe)
            .with_context(|| format!("reading recipe {}", args.recipe))?;
        parse_recipe(&text)?
    };
    for raw in &args.set {
        let (k, v) = split_pair(raw)?;
        recipe = set_field(&recipe, k, parse_value(v))?;
    }
    Ok(recipe)
}

fn load_model(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ModelConfig = serde_json::from_str(&text).context("invalid model config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_student(args: &StudentArgs, recipe: &Recipe, task: &SyntheticTask) -> Result<StudentInit> {
    let init = args.init.clone().or_else(|| recipe.mask_source.as_ref().map(PathBuf::from));
    Ok(match (init, &args.model) {
        (Some(dir), _) => StudentInit::Checkpoint(Box::new(
            Checkpoint::load(&dir).with_context(|| format!("loading {}", dir.display()))?,
        )),
        (None, Some(path)) => StudentInit::Scratch(load_model(path)?),
        (None, None) => StudentInit::Scratch(default_model_for(task)),
    })
}

fn load_teacher(path: &Option<PathBuf>) -> Result<Option<TeacherHandle>> {
    path.as_ref()
        .map(|p| TeacherHandle::load(p).with_context(|| format!("loading teacher {}", p.display())))
        .transpose()
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher {
            task,
            model,
            epochs,
            batch_size,
            lr,
            seed,
            out,
        } => {
            let task = load_task(&task)?;
            let cfg = match model {
                Some(p) => load_model(&p)?,
                None => default_model_for(&task),
            };
            let training = TeacherTraining {
                epochs,
                batch_size,
                lr,
                weight_decay: 0.0,
                seed,
            };
            let ckpt = train_teacher(&task, &cfg, &training)?;
            ckpt.save(&out)?;
            println!(
                "{}",
                json!({ "out": out, "validation_accuracy": ckpt.metadata.validation_accuracy })
            );
        }
        Command::Run {
            recipe,
            task,
            student,
            seed,
            out,
        } => {
            let recipe = load_recipe(&recipe)?;
            let task = load_task(&task)?;
            let setup = RunSetup {
                student: load_student(&student, &recipe, &task)?,
                recipe,
                task,
                seed,
            };
            let teacher = load_teacher(&student.teacher)?;
            let outcome = run_to_dir(&setup, teacher.as_ref(), &out)?;
            println!("{}", serde_json::to_string(&outcome.metrics.summary)?);
        }
        Command::Sweep {
            recipe,
            task,
            student,
            field,
            values,
            seeds,
            threads,
            out,
        } => {
            let base = load_recipe(&recipe)?;
            let task = load_task(&task)?;
            let values: Vec<Value> =
                serde_json::from_str(&values).context("--values must be a JSON array")?;
            let spec = SweepSpec {
                student: load_student(&student, &base, &task)?,
                seeds: if seeds.is_empty() { base.seeds.clone() } else { seeds },
                base,
                field,
                values,
                task,
            };
            let teacher = load_teacher(&student.teacher)?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build()?;
            let table = pool.install(|| sweep(&spec, teacher.as_ref(), Some(&out)))?;
            print!("{}", table.to_csv());
        }
        Command::EmitSchedule {
            recipe,
            steps_per_epoch,
            out,
        } => {
            let recipe = load_recipe(&recipe)?;
            write_or_print(&out, &emit_schedule(&recipe, steps_per_epoch)?)?;
        }
        Command::TeacherStats {
            teacher,
            task,
            temperatures,
            out,
        } => {
            let teacher = TeacherHandle::load(&teacher)?;
            let task = load_task(&task)?;
            let (_, val) = generate_task(&task)?;
            let temps = if temperatures.is_empty() {
                DEFAULT_TEMPERATURES.to_vec()
            } else {
                temperatures
            };
            let rows = teacher_distribution_stats(&teacher, &val, &temps)?;
            write_or_print(&out, &teacher_stats_csv(&rows))?;
        }
        Command::ValidateRecipe { recipe } => {
            let parsed = load_recipe(&recipe)?;
            let report = audit_recipe(&parsed);
            let is_bundled = BUNDLED.iter().any(|(n, _)| *n == parsed.name);
            println!(
                "{}",
                json!({
                    "recipe": parsed.name,
                    "hash": parsed.hash(),
                    "valid": true,
                    "audited": is_bundled,
                    "diffs": if is_bundled {
                        report.diffs.iter().map(ToString::to_string).collect::<Vec<_>>()
                    } else {
                        Vec::new()
                    },
                })
            );
            if is_bundled && !report.is_clean() {
                bail!("recipe `{}` differs from the reference constants", parsed.name);
            }
        }
        Command::ListRecipes => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = match err.downcast_ref::<HarnessError>() {
                Some(h) => h.record(),
                None => json!({ "error": "failed", "message": format!("{err:#}") }),
            };
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
