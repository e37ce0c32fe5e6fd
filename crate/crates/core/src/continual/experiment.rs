use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::plan::{ExperimentPlan, Method};
use super::train::{
    accuracy, baseline_classifier_only, baseline_individual, classifier_logits, model_logits, task_logits,
    train_base, train_task, MaskStore,
};
use crate::autograd::Tensor;
use crate::data::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::meat::{backbone_bytes, TaskMaskSet};
use crate::seed::mix;
use crate::vit::{Head, ViTModel};

const MODEL_STREAM: u64 = 0xba5e;

/// Train and test sets of one task.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Every task's data, normalized with statistics of the base training set.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub stats: NormStats,
    pub tasks: BTreeMap<u32, TaskData>,
}

impl PreparedData {
    pub fn get(&self, task_id: u32) -> Result<&TaskData> {
        self.tasks
            .get(&task_id)
            .ok_or_else(|| Error::Lookup(format!("no data for task {task_id}")))
    }
}

pub fn prepare_data(plan: &ExperimentPlan) -> Result<PreparedData> {
    let mut tasks = BTreeMap::new();
    for spec in std::iter::once(&plan.base).chain(&plan.tasks) {
        let (train, test) = spec.load_data(&plan.model)?;
        tasks.insert(spec.task_id, TaskData { train, test });
    }
    let stats = NormStats::from_dataset(&tasks[&0].train)?;
    for d in tasks.values_mut() {
        d.train.normalize(&stats)?;
        d.test.normalize(&stats)?;
    }
    Ok(PreparedData { stats, tasks })
}

/// Seed a task actually trains with in run `run_seed`. Independent of the
/// position of the task in any order.
pub fn task_seed(run_seed: u64, task_seed: u64) -> u64 {
    mix(run_seed, task_seed)
}

/// Initial weights of the base model in run `run_seed`.
pub fn base_model(plan: &ExperimentPlan, run_seed: u64) -> Result<ViTModel> {
    ViTModel::new(plan.model, mix(run_seed, MODEL_STREAM))
}

/// One row of the metrics table. Stage 0 rows describe the base task right
/// after base training.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub method: Method,
    pub seed: u64,
    pub order: usize,
    pub stage: usize,
    pub task_id: u32,
    /// Test accuracy of `task_id` right after it was learned.
    pub accuracy: f64,
    /// Base-task test accuracy after this stage.
    pub base_accuracy: f64,
    /// Largest accuracy drop of any earlier task since it was learned.
    pub forgetting: f64,
    /// Every earlier task's test logits are bit-identical to when it was learned.
    pub logits_identical: bool,
    pub token_activation: Vec<f64>,
    pub ffn1_activation: Vec<f64>,
    pub ffn2_activation: Vec<f64>,
    /// Bytes stored for this task alone.
    pub task_bytes: usize,
    /// Backbone plus everything stored for the tasks learned so far.
    pub stored_bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    method: Method,
    seed: u64,
    order: usize,
    stage: usize,
    task_id: u32,
    accuracy: f64,
    base_accuracy: f64,
    forgetting: f64,
    logits_identical: bool,
    token_activation: String,
    ffn1_activation: String,
    ffn2_activation: String,
    task_bytes: usize,
    stored_bytes: usize,
    backbone_bytes: usize,
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn split(text: &str) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|v| v.parse().map_err(|_| Error::Config(format!("bad activation list {text:?}"))))
        .collect()
}

/// Mean and standard deviation of one method on one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSummary {
    pub method: Method,
    pub task_id: u32,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Everything an experiment measured.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub backbone_bytes: usize,
    pub records: Vec<Record>,
}

/// Column order of [`Metrics::to_csv`].
pub const CSV_HEADER: &str = "method,seed,order,stage,task_id,accuracy,base_accuracy,forgetting,logits_identical,\
token_activation,ffn1_activation,ffn2_activation,task_bytes,stored_bytes,backbone_bytes";

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Metrics {
    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.records.iter().map(|r| r.method).collect();
        m.sort();
        m.dedup();
        m
    }

    /// Mean test accuracy over every new-task record of `method`.
    pub fn mean_accuracy(&self, method: Method) -> Option<f64> {
        let acc: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.method == method && r.stage > 0)
            .map(|r| r.accuracy)
            .collect();
        (!acc.is_empty()).then(|| mean_std(&acc).0)
    }

    pub fn task_summaries(&self) -> Vec<TaskSummary> {
        let mut groups: BTreeMap<(Method, u32), Vec<f64>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.stage > 0) {
            groups.entry((r.method, r.task_id)).or_default().push(r.accuracy);
        }
        groups
            .into_iter()
            .map(|((method, task_id), acc)| {
                let (mean, std) = mean_std(&acc);
                TaskSummary {
                    method,
                    task_id,
                    mean,
                    std,
                    runs: acc.len(),
                }
            })
            .collect()
    }

    /// Largest base-task accuracy drop of `method` between base training and
    /// any later stage.
    pub fn base_forgetting(&self, method: Method) -> f64 {
        let mut start: BTreeMap<(u64, usize), f64> = BTreeMap::new();
        let mut worst: f64 = 0.0;
        for r in self.records.iter().filter(|r| r.method == method) {
            if r.stage == 0 {
                start.insert((r.seed, r.order), r.base_accuracy);
            } else if let Some(s) = start.get(&(r.seed, r.order)) {
                worst = worst.max(s - r.base_accuracy);
            }
        }
        worst
    }

    /// Largest storage of `method` relative to one backbone.
    pub fn multiplier(&self, method: Method) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.stored_bytes)
            .max()
            .map(|b| b as f64 / self.backbone_bytes as f64)
    }

    pub fn all_logits_identical(&self) -> bool {
        self.records.iter().all(|r| r.logits_identical)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(CsvRow {
                method: r.method,
                seed: r.seed,
                order: r.order,
                stage: r.stage,
                task_id: r.task_id,
                accuracy: r.accuracy,
                base_accuracy: r.base_accuracy,
                forgetting: r.forgetting,
                logits_identical: r.logits_identical,
                token_activation: join(&r.token_activation),
                ffn1_activation: join(&r.ffn1_activation),
                ffn2_activation: join(&r.ffn2_activation),
                task_bytes: r.task_bytes,
                stored_bytes: r.stored_bytes,
                backbone_bytes: self.backbone_bytes,
            })
            .expect("writing to memory");
        }
        let body = String::from_utf8(w.into_inner().expect("writing to memory")).unwrap();
        if self.records.is_empty() {
            format!("{CSV_HEADER}\n")
        } else {
            body
        }
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Config(format!("metrics table: {e}")))?;
        if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::Config("metrics table has an unexpected header".into()));
        }
        let mut metrics = Metrics::default();
        for row in reader.deserialize::<CsvRow>() {
            let row = row.map_err(|e| Error::Config(format!("metrics table: {e}")))?;
            metrics.backbone_bytes = row.backbone_bytes;
            metrics.records.push(Record {
                method: row.method,
                seed: row.seed,
                order: row.order,
                stage: row.stage,
                task_id: row.task_id,
                accuracy: row.accuracy,
                base_accuracy: row.base_accuracy,
                forgetting: row.forgetting,
                logits_identical: row.logits_identical,
                token_activation: split(&row.token_activation)?,
                ffn1_activation: split(&row.ffn1_activation)?,
                ffn2_activation: split(&row.ffn2_activation)?,
                task_bytes: row.task_bytes,
                stored_bytes: row.stored_bytes,
            });
        }
        Ok(metrics)
    }

    /// Human-readable report: per-task accuracy, base-task forgetting and
    /// storage multipliers.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>5} {:>18} {:>5}", "method", "task", "accuracy", "runs");
        for s in self.task_summaries() {
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>9.4} ± {:<6.4} {:>5}",
                s.method.to_string(),
                s.task_id,
                s.mean,
                s.std,
                s.runs
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<16} {:>10} {:>12} {:>12} {:>10}", "method", "mean acc", "base (Δ)", "model size", "times");
        for m in self.methods() {
            let base: Vec<f64> = self
                .records
                .iter()
                .filter(|r| r.method == m && r.stage == 0)
                .map(|r| r.base_accuracy)
                .collect();
            let base = if base.is_empty() { f64::NAN } else { mean_std(&base).0 };
            let size = self.records.iter().filter(|r| r.method == m).map(|r| r.stored_bytes).max().unwrap_or(0);
            let _ = writeln!(
                out,
                "{:<16} {:>10.4} {:>5.4} ({:.2}) {:>12} {:>9.2}x",
                m.to_string(),
                self.mean_accuracy(m).unwrap_or(f64::NAN),
                base,
                -self.base_forgetting(m) * 100.0 + 0.0,
                size,
                self.multiplier(m).unwrap_or(f64::NAN)
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "earlier-task logits bit-identical after every stage: {}",
            if self.all_logits_identical() { "yes" } else { "no" }
        );
        out
    }
}

/// Receives artifacts and rows as soon as they exist, so a failing run
/// still leaves its finished parts behind.
pub trait Observer {
    fn base_trained(&mut self, _seed: u64, _model: &ViTModel) -> Result<()> {
        Ok(())
    }

    fn mask_set(&mut self, _seed: u64, _order: usize, _set: &TaskMaskSet) -> Result<()> {
        Ok(())
    }

    fn record(&mut self, _record: &Record) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

fn bit_identical(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// What one method keeps for each learned task.
enum Learned {
    Masks(MaskStore),
    Heads(BTreeMap<u32, Head>),
    Models(BTreeMap<u32, ViTModel>),
}

impl Learned {
    fn logits(&self, base: &ViTModel, task_id: u32, data: &Dataset) -> Result<Tensor> {
        match self {
            Learned::Masks(store) => task_logits(base, task_id, store, data),
            _ if task_id == 0 => task_logits(base, 0, &MaskStore::new(), data),
            Learned::Heads(heads) => classifier_logits(base, &heads[&task_id], data),
            Learned::Models(models) => model_logits(&models[&task_id], task_id, data),
        }
    }
}

/// Runs base training once per seed, then every method over every order.
pub fn run_experiment(plan: &ExperimentPlan, observer: &mut dyn Observer) -> Result<Metrics> {
    plan.validate()?;
    let data = prepare_data(plan)?;
    let backbone = backbone_bytes(&plan.model);
    let mut metrics = Metrics {
        backbone_bytes: backbone,
        records: Vec::new(),
    };
    let base_data = data.get(0)?;
    for &seed in &plan.train.seeds {
        let mut base_spec = plan.base.clone();
        base_spec.seed = task_seed(seed, plan.base.seed);
        let mut model = base_model(plan, seed)?;
        train_base(&mut model, &base_spec, &base_data.train)?;
        let checksum = model.backbone_checksum();
        observer.base_trained(seed, &model)?;
        let base_logits = task_logits(&model, 0, &MaskStore::new(), &base_data.test)?;
        let base_acc = accuracy(&base_logits, base_data.test.labels());
        log::info!("seed {seed}: base task test accuracy {base_acc:.4}");

        for &method in &plan.train.methods {
            for (oi, order) in plan.orders().iter().enumerate() {
                let start = Record {
                    method,
                    seed,
                    order: oi,
                    stage: 0,
                    task_id: 0,
                    accuracy: base_acc,
                    base_accuracy: base_acc,
                    forgetting: 0.0,
                    logits_identical: true,
                    token_activation: Vec::new(),
                    ffn1_activation: Vec::new(),
                    ffn2_activation: Vec::new(),
                    task_bytes: 0,
                    stored_bytes: backbone,
                };
                observer.record(&start)?;
                metrics.records.push(start);

                let mut learned = match method {
                    Method::Meat => Learned::Masks(MaskStore::new()),
                    Method::ClassifierOnly => Learned::Heads(BTreeMap::new()),
                    Method::Individual => Learned::Models(BTreeMap::new()),
                };
                let mut history: Vec<(u32, Tensor, f64)> = vec![(0, base_logits.clone(), base_acc)];
                let mut stored = backbone;
                for (stage, &tid) in order.iter().enumerate() {
                    let mut spec = plan.task(tid)?.clone();
                    spec.seed = task_seed(seed, spec.seed);
                    let td = data.get(tid)?;
                    let mut ratios = None;
                    let task_bytes = match &mut learned {
                        Learned::Masks(store) => {
                            let outcome = train_task(&model, &spec, &plan.meat, &td.train)?;
                            observer.mask_set(seed, oi, &outcome.masks)?;
                            let bytes = outcome.masks.to_bytes().len();
                            ratios = Some(outcome.masks.activation_ratios());
                            store.insert(outcome.masks)?;
                            bytes
                        }
                        Learned::Heads(heads) => {
                            let (head, _) = baseline_classifier_only(&model, &spec, &td.train)?;
                            let bytes = 8 * head.num_params();
                            heads.insert(tid, head);
                            bytes
                        }
                        Learned::Models(models) => {
                            let (m, _) = baseline_individual(&model, &spec, &td.train, plan.train.individual_init)?;
                            let bytes = m.backbone().param_bytes() + 8 * m.head(tid)?.num_params();
                            models.insert(tid, m);
                            bytes
                        }
                    };
                    stored += task_bytes;
                    if model.backbone_checksum() != checksum {
                        return Err(Error::Contract("backbone changed after freezing".into()));
                    }
                    let logits = learned.logits(&model, tid, &td.test)?;
                    let acc = accuracy(&logits, td.test.labels());
                    let mut identical = true;
                    let mut forgetting: f64 = 0.0;
                    let mut base_now = base_acc;
                    for (eid, old, old_acc) in &history {
                        let test = &data.get(*eid)?.test;
                        let now = learned.logits(&model, *eid, test)?;
                        identical &= bit_identical(&now, old);
                        let now_acc = accuracy(&now, test.labels());
                        forgetting = forgetting.max(old_acc - now_acc);
                        if *eid == 0 {
                            base_now = now_acc;
                        }
                    }
                    history.push((tid, logits, acc));
                    let ratios = ratios.unwrap_or(crate::meat::ActivationRatios {
                        tokens: Vec::new(),
                        ffn1: Vec::new(),
                        ffn2: Vec::new(),
                    });
                    let record = Record {
                        method,
                        seed,
                        order: oi,
                        stage: stage + 1,
                        task_id: tid,
                        accuracy: acc,
                        base_accuracy: base_now,
                        forgetting,
                        logits_identical: identical,
                        token_activation: ratios.tokens,
                        ffn1_activation: ratios.ffn1,
                        ffn2_activation: ratios.ffn2,
                        task_bytes,
                        stored_bytes: stored,
                    };
                    log::info!("seed {seed} {method} order {oi} task {tid}: accuracy {acc:.4}");
                    observer.record(&record)?;
                    metrics.records.push(record);
                }
            }
        }
    }
    Ok(metrics)
}
