//! The `meat` command line: train, evaluate, run whole plans, inspect mask
//! files and report on finished runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 training diverged, 4 incomplete run directory.

pub mod inspect;
pub mod output;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use meat_core::continual::{
    base_model, evaluate, prepare_data, run_experiment, task_seed, train_base, train_task, ExperimentPlan, MaskStore,
    Method, Metrics, Observer, Record,
};
use meat_core::meat::{mask_file_bytes, TaskMaskSet};
use meat_core::vit::ViTModel;
use meat_core::Error;

use output::{write_file, StagedDir};

pub const MODEL_FILE: &str = "model.meatvit";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PLAN_FILE: &str = "plan.toml";

pub fn mask_file_name(task_id: u32) -> String {
    format!("task-{task_id}.meatmsk")
}

pub fn seed_dir(seed: u64) -> String {
    format!("seed-{seed}")
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{} already exists; pass --force to replace it", .0.display())]
    Exists(PathBuf),
    #[error("incomplete run, missing: {}", .0.join(", "))]
    Incomplete(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::Divergence { .. }) => 3,
            CliError::Incomplete(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridFormat {
    Text,
    Pgm,
}

#[derive(Debug, Parser)]
#[command(name = "meat", version, about = "Per-task token and FFN masks over a frozen Vision Transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the backbone and task-0 head on the base task, then freeze it
    TrainBase {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run seed; defaults to the first of train.seeds
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Learn masks and a head for one new task over a frozen checkpoint
    TrainTask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Test accuracy of the base task and every task with a mask file
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Directory holding task-<id>.meatmsk files; defaults to the model's directory
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Only this task
        #[arg(long)]
        task: Option<u32>,
    },
    /// Run a whole plan: every seed, method and task order
    RunPlan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace train.seeds with this single seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Show a layer's token mask as a grid and every layer's activation ratios
    InspectMasks {
        mask_file: PathBuf,
        /// Plan whose [model] the masks must match
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = GridFormat::Text)]
        format: GridFormat,
        /// Write the grid to this file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a finished run directory
    Report { run_dir: PathBuf },
}

fn load_plan(path: &Path) -> Result<ExperimentPlan, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(ExperimentPlan::from_toml_str(&text, dir).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?)
}

fn first_seed(plan: &ExperimentPlan, seed: Option<u64>) -> u64 {
    seed.unwrap_or(plan.train.seeds[0])
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::TrainBase { config, out, seed, force } => cmd_train_base(&config, &out, seed, force, stdout),
        Command::TrainTask {
            config,
            model,
            task,
            out,
            seed,
            force,
        } => cmd_train_task(&config, &model, task, &out, seed, force, stdout),
        Command::Eval {
            config,
            model,
            masks,
            task,
        } => cmd_eval(&config, &model, masks.as_deref(), task, stdout),
        Command::RunPlan { config, out, seed, force } => cmd_run_plan(&config, &out, seed, force, stdout),
        Command::InspectMasks {
            mask_file,
            config,
            layer,
            format,
            out,
        } => cmd_inspect_masks(&mask_file, &config, layer, format, out.as_deref(), stdout),
        Command::Report { run_dir } => cmd_report(&run_dir, stdout),
    }
}

fn cmd_train_base(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    force: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let plan = load_plan(config)?;
    let seed = first_seed(&plan, seed);
    if out.join(MODEL_FILE).exists() && !force {
        return Err(CliError::Exists(out.join(MODEL_FILE)));
    }
    let data = prepare_data(&plan)?;
    let mut spec = plan.base.clone();
    spec.seed = task_seed(seed, spec.seed);
    let mut model = base_model(&plan, seed)?;
    let report = train_base(&mut model, &spec, &data.get(0)?.train)?;
    let acc = evaluate(&model, 0, &MaskStore::new(), &data.get(0)?.test)?;
    let path = write_file(out, MODEL_FILE, &model.to_bytes(), force)?;
    writeln!(stdout, "wrote {}", path.display())?;
    writeln!(
        stdout,
        "base task: final train loss {:.4}, test accuracy {:.4}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        acc
    )?;
    Ok(())
}

fn cmd_train_task(
    config: &Path,
    model_path: &Path,
    task: u32,
    out: &Path,
    seed: Option<u64>,
    force: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let plan = load_plan(config)?;
    let seed = first_seed(&plan, seed);
    let name = mask_file_name(task);
    if out.join(&name).exists() && !force {
        return Err(CliError::Exists(out.join(&name)));
    }
    let model = ViTModel::load(model_path)?;
    if model.config() != &plan.model {
        return Err(Error::Config("checkpoint architecture differs from the plan's [model]".into()).into());
    }
    let mut spec = plan.task(task)?.clone();
    spec.seed = task_seed(seed, spec.seed);
    let data = prepare_data(&plan)?;
    let td = data.get(task)?;
    let outcome = train_task(&model, &spec, &plan.meat, &td.train)?;
    let mut store = MaskStore::new();
    let bytes = outcome.masks.to_bytes();
    store.insert(outcome.masks)?;
    let acc = evaluate(&model, task, &store, &td.test)?;
    let path = write_file(out, &name, &bytes, force)?;
    writeln!(stdout, "wrote {} ({} bytes)", path.display(), bytes.len())?;
    writeln!(stdout, "task {task}: test accuracy {acc:.4}")?;
    Ok(())
}

fn cmd_eval(
    config: &Path,
    model_path: &Path,
    masks: Option<&Path>,
    task: Option<u32>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let plan = load_plan(config)?;
    let model = ViTModel::load(model_path)?;
    let dir = masks.unwrap_or_else(|| model_path.parent().unwrap_or(Path::new(".")));
    let mut store = MaskStore::new();
    for spec in &plan.tasks {
        let path = dir.join(mask_file_name(spec.task_id));
        if path.exists() {
            store.insert(TaskMaskSet::load(&path, model.config())?)?;
        }
    }
    let data = prepare_data(&plan)?;
    let ids: Vec<u32> = match task {
        Some(t) => vec![t],
        None => std::iter::once(0).chain(store.iter().map(|s| s.task_id)).collect(),
    };
    for id in ids {
        let acc = evaluate(&model, id, &store, &data.get(id)?.test)?;
        writeln!(stdout, "task {id}: accuracy {acc:.4}")?;
    }
    Ok(())
}

/// Files a finished run directory must contain.
fn expected_artifacts(plan: &ExperimentPlan) -> Vec<String> {
    let mut files = vec![PLAN_FILE.to_string(), METRICS_FILE.to_string(), SUMMARY_FILE.to_string()];
    for &seed in &plan.train.seeds {
        files.push(format!("{}/{MODEL_FILE}", seed_dir(seed)));
        if plan.train.methods.contains(&Method::Meat) {
            for t in &plan.tasks {
                files.push(format!("{}/{}", seed_dir(seed), mask_file_name(t.task_id)));
            }
        }
    }
    files
}

struct RunWriter<'a> {
    dir: &'a Path,
    metrics: Metrics,
}

impl RunWriter<'_> {
    fn flush_metrics(&self) -> Result<(), Error> {
        fs::write(self.dir.join(METRICS_FILE), self.metrics.to_csv())?;
        Ok(())
    }
}

impl Observer for RunWriter<'_> {
    fn base_trained(&mut self, seed: u64, model: &ViTModel) -> meat_core::Result<()> {
        let dir = self.dir.join(seed_dir(seed));
        fs::create_dir_all(&dir)?;
        model.save(dir.join(MODEL_FILE))
    }

    fn mask_set(&mut self, seed: u64, _order: usize, set: &TaskMaskSet) -> meat_core::Result<()> {
        let path = self.dir.join(seed_dir(seed)).join(mask_file_name(set.task_id));
        let bytes = set.to_bytes();
        if path.exists() {
            if fs::read(&path)? != bytes {
                return Err(Error::Contract(format!(
                    "task {} produced different masks under another task order",
                    set.task_id
                )));
            }
            return Ok(());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    fn record(&mut self, record: &Record) -> meat_core::Result<()> {
        self.metrics.records.push(record.clone());
        self.flush_metrics()
    }
}

fn cmd_run_plan(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    force: bool,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let mut plan = load_plan(config)?;
    if let Some(s) = seed {
        plan.train.seeds = vec![s];
    }
    let staged = StagedDir::create(out, force)?;
    fs::copy(config, staged.path().join(PLAN_FILE))?;
    fs::write(staged.path().join(MANIFEST_FILE), expected_artifacts(&plan).join("\n") + "\n")?;
    let mut writer = RunWriter {
        dir: staged.path(),
        metrics: Metrics {
            backbone_bytes: meat_core::meat::backbone_bytes(&plan.model),
            records: Vec::new(),
        },
    };
    let result = run_experiment(&plan, &mut writer);
    writer.flush_metrics()?;
    let metrics = match result {
        Ok(m) => m,
        Err(e) => {
            // keep what finished so far; the missing summary marks the run incomplete
            staged.commit()?;
            return Err(e.into());
        }
    };
    let summary = metrics.summary_text();
    fs::write(staged.path().join(SUMMARY_FILE), &summary)?;
    let dir = staged.commit()?;
    write!(stdout, "{summary}")?;
    writeln!(stdout, "run written to {}", dir.display())?;
    Ok(())
}

fn cmd_inspect_masks(
    mask_file: &Path,
    config: &Path,
    layer: usize,
    format: GridFormat,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let plan = load_plan(config)?;
    let set = TaskMaskSet::load(mask_file, &plan.model)?;
    let side = plan.model.image_size / plan.model.patch_size;
    let grid = inspect::token_grid(&set, layer, side)?;
    let rendered = match format {
        GridFormat::Text => inspect::to_text(&grid).into_bytes(),
        GridFormat::Pgm => inspect::to_pgm(&grid),
    };
    match out {
        Some(path) => {
            fs::write(path, &rendered)?;
            writeln!(stdout, "layer {layer} token mask written to {}", path.display())?;
        }
        None if format == GridFormat::Pgm => {
            stdout.write_all(&rendered)?;
            eprint!("{}", inspect::ratio_table(&set));
            return Ok(());
        }
        None => {
            writeln!(stdout, "layer {layer} token mask ({side}×{side}, 1 = active)")?;
            stdout.write_all(&rendered)?;
        }
    }
    write!(stdout, "{}", inspect::ratio_table(&set))?;
    Ok(())
}

fn cmd_report(run_dir: &Path, stdout: &mut dyn Write) -> Result<(), CliError> {
    let manifest = fs::read_to_string(run_dir.join(MANIFEST_FILE))
        .map_err(|_| CliError::Incomplete(vec![MANIFEST_FILE.to_string()]))?;
    let missing: Vec<String> = manifest
        .lines()
        .filter(|l| !l.is_empty() && !run_dir.join(l).exists())
        .map(str::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Incomplete(missing));
    }
    let metrics = Metrics::from_csv(&fs::read_to_string(run_dir.join(METRICS_FILE))?)?;
    let plan = load_plan(&run_dir.join(PLAN_FILE))?;
    write!(stdout, "{}", metrics.summary_text())?;
    let mut checked = BTreeSet::new();
    for line in manifest.lines().filter(|l| l.ends_with(".meatmsk")) {
        let set = TaskMaskSet::load(run_dir.join(line), &plan.model)?;
        let actual = fs::metadata(run_dir.join(line))?.len() as usize;
        let predicted = mask_file_bytes(&plan.model, set.head.num_classes());
        if actual != predicted {
            return Err(Error::Contract(format!("{line}: {actual} bytes, predicted {predicted}")).into());
        }
        checked.insert(line.to_string());
    }
    writeln!(stdout, "mask files matching predicted sizes: {}", checked.len())?;
    Ok(())
}
