use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use crate::data::{generate_task, load_raw_dataset, Dataset, FamilyKind, ShiftParams, Split, TaskFamily};
use crate::error::{Error, Result};
use crate::meat::MeatHyper;
use crate::vit::ViTConfig;

/// Base learning rate for new classifiers, per 1024 examples per batch.
pub const HEAD_LR_BASE: f64 = 5e-4;
/// Base learning rate for mask logits, per 1024 examples per batch.
pub const MASK_LR_BASE: f64 = 0.1;
/// Base learning rate for backbone weights (base task and Individual).
pub const BACKBONE_LR_BASE: f64 = 5e-4;

/// `batch / 1024 · base`
pub fn scaled_lr(batch_size: usize, base: f64) -> f64 {
    batch_size as f64 / 1024.0 * base
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Meat,
    ClassifierOnly,
    Individual,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Meat => "meat",
            Method::ClassifierOnly => "classifier-only",
            Method::Individual => "individual",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meat" => Ok(Method::Meat),
            "classifier-only" => Ok(Method::ClassifierOnly),
            "individual" => Ok(Method::Individual),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

/// Starting point of each Individual model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndividualInit {
    /// A full copy of the trained base model.
    Base,
    /// Freshly initialized weights.
    #[default]
    Scratch,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Generated {
        family: TaskFamily,
        n_train: usize,
        n_test: usize,
    },
    /// `MEATDAT1` files, resized to the model's image size on load.
    Files { train: PathBuf, test: PathBuf },
}

/// One task of an experiment, with effective (already scaled) learning rates.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: u32,
    pub data: DataSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub head_lr: f64,
    pub mask_lr: f64,
    pub backbone_lr: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let id = self.task_id;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!("task {id}: epochs and batch_size must be positive")));
        }
        for (name, lr) in [("head_lr", self.head_lr), ("mask_lr", self.mask_lr), ("backbone_lr", self.backbone_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("task {id}: {name} must be positive, got {lr}")));
            }
        }
        if let DataSource::Generated { family, .. } = &self.data {
            family.validate()?;
        }
        Ok(())
    }

    /// Train and test sets at the model's image size and channel count.
    pub fn load_data(&self, config: &ViTConfig) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.data {
            DataSource::Generated { family, n_train, n_test } => generate_task(family, *n_train, *n_test)?,
            DataSource::Files { train, test } => (load_raw_dataset(train)?, load_raw_dataset(test)?.with_split(Split::Test)),
        };
        let mut out = Vec::with_capacity(2);
        for d in [train, test] {
            if d.image_shape()[0] != config.channels {
                return Err(Error::Config(format!(
                    "task {}: data has {} channels, model expects {}",
                    self.task_id,
                    d.image_shape()[0],
                    config.channels
                )));
            }
            let [_, h, w] = d.image_shape();
            out.push(if h == config.image_size && w == config.image_size {
                d
            } else {
                d.resize_nearest(config.image_size)?
            });
        }
        let test = out.pop().unwrap();
        let train = out.pop().unwrap();
        if train.num_classes() != test.num_classes() {
            return Err(Error::Config(format!("task {}: train and test class counts differ", self.task_id)));
        }
        Ok((train, test))
    }
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_head_base() -> f64 {
    HEAD_LR_BASE
}
fn default_mask_base() -> f64 {
    MASK_LR_BASE
}
fn default_backbone_base() -> f64 {
    BACKBONE_LR_BASE
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_methods() -> Vec<Method> {
    vec![Method::Meat]
}

/// The `[train]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Epochs for the base task; defaults to `epochs`.
    #[serde(default)]
    pub base_epochs: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_head_base")]
    pub head_lr_base: f64,
    #[serde(default = "default_mask_base")]
    pub mask_lr_base: f64,
    #[serde(default = "default_backbone_base")]
    pub backbone_lr_base: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Orders of the new tasks; empty means the listed order only.
    #[serde(default)]
    pub orders: Vec<Vec<u32>>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub individual_init: IndividualInit,
}

impl Default for TrainSettings {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

/// One `[[tasks]]` entry.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    task_id: u32,
    seed: Option<u64>,
    kind: Option<FamilyKind>,
    num_classes: Option<usize>,
    family_seed: Option<u64>,
    #[serde(default)]
    shift: ShiftParams,
    n_train: Option<usize>,
    n_test: Option<usize>,
    train_file: Option<PathBuf>,
    test_file: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    head_lr: Option<f64>,
    mask_lr: Option<f64>,
    backbone_lr: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    model: ViTConfig,
    #[serde(default)]
    meat: MeatHyper,
    #[serde(default)]
    train: TrainSettings,
    tasks: Vec<RawTask>,
}

/// A validated experiment: base task, new tasks, orders, methods and seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub model: ViTConfig,
    pub meat: MeatHyper,
    pub train: TrainSettings,
    pub base: TaskSpec,
    pub tasks: Vec<TaskSpec>,
}

fn required<T>(value: Option<T>, index: usize, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing key tasks[{index}].{key}")))
}

impl RawTask {
    fn into_spec(self, index: usize, model: &ViTConfig, train: &TrainSettings, base_dir: &Path) -> Result<TaskSpec> {
        let data = match (self.train_file, self.test_file) {
            (Some(tr), Some(te)) => DataSource::Files {
                train: base_dir.join(tr),
                test: base_dir.join(te),
            },
            (Some(_), None) => return Err(Error::Config(format!("missing key tasks[{index}].test_file"))),
            (None, Some(_)) => return Err(Error::Config(format!("missing key tasks[{index}].train_file"))),
            (None, None) => DataSource::Generated {
                family: TaskFamily {
                    kind: required(self.kind, index, "kind")?,
                    num_classes: required(self.num_classes, index, "num_classes")?,
                    image_size: model.image_size,
                    channels: model.channels,
                    shift: self.shift,
                    seed: self.family_seed.unwrap_or(self.task_id as u64),
                },
                n_train: required(self.n_train, index, "n_train")?,
                n_test: required(self.n_test, index, "n_test")?,
            },
        };
        let base_epochs = if self.task_id == 0 { train.base_epochs } else { None };
        let batch_size = self.batch_size.unwrap_or(train.batch_size);
        Ok(TaskSpec {
            task_id: self.task_id,
            data,
            epochs: self.epochs.or(base_epochs).unwrap_or(train.epochs),
            batch_size,
            optimizer: train.optimizer,
            head_lr: self.head_lr.unwrap_or(scaled_lr(batch_size, train.head_lr_base)),
            mask_lr: self.mask_lr.unwrap_or(scaled_lr(batch_size, train.mask_lr_base)),
            backbone_lr: self.backbone_lr.unwrap_or(scaled_lr(batch_size, train.backbone_lr_base)),
            seed: self.seed.unwrap_or(self.task_id as u64),
        })
    }
}

impl ExperimentPlan {
    /// Parses a TOML plan; relative data paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawPlan = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        raw.model.validate()?;
        raw.meat.validate()?;
        let mut specs = raw
            .tasks
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.into_spec(i, &raw.model, &raw.train, base_dir))
            .collect::<Result<Vec<_>>>()?;
        if specs.is_empty() || specs[0].task_id != 0 {
            return Err(Error::Config("tasks[0] must be the base task with task_id = 0".into()));
        }
        let base = specs.remove(0);
        let plan = Self {
            model: raw.model,
            meat: raw.meat,
            train: raw.train,
            base,
            tasks: specs,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.meat.validate()?;
        self.base.validate()?;
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if t.task_id == 0 {
                return Err(Error::Config("task_id 0 is reserved for the base task".into()));
            }
            if !ids.insert(t.task_id) {
                return Err(Error::Config(format!("duplicate task_id {}", t.task_id)));
            }
        }
        for (i, order) in self.train.orders.iter().enumerate() {
            let set: BTreeSet<u32> = order.iter().copied().collect();
            if order.len() != ids.len() || set != ids {
                return Err(Error::Config(format!(
                    "train.orders[{i}] = {order:?} is not a permutation of the new task ids {ids:?}"
                )));
            }
        }
        if self.train.seeds.is_empty() {
            return Err(Error::Config("train.seeds must not be empty".into()));
        }
        if self.train.methods.is_empty() {
            return Err(Error::Config("train.methods must not be empty".into()));
        }
        Ok(())
    }

    /// Task orders to run; the listed order when none are configured.
    pub fn orders(&self) -> Vec<Vec<u32>> {
        if self.train.orders.is_empty() {
            vec![self.tasks.iter().map(|t| t.task_id).collect()]
        } else {
            self.train.orders.clone()
        }
    }

    pub fn task(&self, task_id: u32) -> Result<&TaskSpec> {
        if task_id == 0 {
            return Ok(&self.base);
        }
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::Lookup(format!("task {task_id} is not in the plan")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAN: &str = r#"
[model]
image_size = 16
patch_size = 8
channels = 3
embed_dim = 8
heads = 2
layers = 1
ffn_hidden = 16

[train]
batch_size = 64
orders = [[2, 1], [1, 2]]

[[tasks]]
task_id = 0
kind = "oriented-bars"
num_classes = 4
n_train = 8
n_test = 4

[[tasks]]
task_id = 1
kind = "color-grid"
num_classes = 2
n_train = 4
n_test = 2
seed = 11
shift = { palette = "warm" }

[[tasks]]
task_id = 2
kind = "textured-patches"
num_classes = 2
n_train = 4
n_test = 2
epochs = 3
"#;

    fn parse(text: &str) -> Result<ExperimentPlan> {
        ExperimentPlan::from_toml_str(text, Path::new("."))
    }

    #[test]
    fn learning_rate_rule_and_defaults() {
        let p = parse(PLAN).unwrap();
        assert_eq!(p.meat, MeatHyper::default());
        assert_eq!(p.tasks[0].head_lr, 3.125e-5);
        assert_eq!(p.tasks[0].mask_lr, 6.25e-3);
        assert_eq!(p.tasks[0].epochs, 30);
        assert_eq!(p.tasks[1].epochs, 3);
        assert_eq!(p.tasks[0].seed, 11);
        assert_eq!(p.tasks[1].seed, 2);
        assert_eq!(p.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(p.orders(), vec![vec![2, 1], vec![1, 2]]);
        assert_eq!(p.task(2).unwrap().task_id, 2);
        assert!(matches!(p.task(5), Err(Error::Lookup(_))));
    }

    #[test]
    fn missing_key_is_named() {
        let text = PLAN.replace("embed_dim = 8\n", "");
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("embed_dim"), "{err}");
        let text = PLAN.replacen("n_test = 2\nseed = 11", "seed = 11", 1);
        let err = parse(&text).unwrap_err().to_string();
        assert!(err.contains("tasks[1].n_test"), "{err}");
    }

    #[test]
    fn invalid_plans_rejected() {
        let bad_order = PLAN.replace("[[2, 1], [1, 2]]", "[[2, 2]]");
        assert!(matches!(parse(&bad_order), Err(Error::Config(_))));
        let dup = PLAN.replace("task_id = 2", "task_id = 1");
        assert!(matches!(parse(&dup), Err(Error::Config(_))));
        let no_base = PLAN.replacen("task_id = 0", "task_id = 7", 1);
        assert!(matches!(parse(&no_base), Err(Error::Config(_))));
        let unknown = PLAN.replace("[train]", "[train]\nlearning_rate = 1.0");
        assert!(parse(&unknown).unwrap_err().to_string().contains("learning_rate"));
        let lambda = PLAN.replace("[train]", "[meat]\nlambda = 1.5\n\n[train]");
        assert!(parse(&lambda).is_err());
    }

    #[test]
    fn generated_data_loads() {
        let p = parse(PLAN).unwrap();
        let (train, test) = p.base.load_data(&p.model).unwrap();
        assert_eq!((train.len(), test.len()), (8, 4));
        assert_eq!(test.split(), Split::Test);
    }
}
