use std::collections::BTreeMap;

use super::optim::Optimizer;
use super::plan::{IndividualInit, TaskSpec};
use crate::autograd::{Graph, Tensor, Var};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::meat::{binarize, total_loss, GumbelSampler, MaskParams, MeatHyper, TaskMaskSet};
use crate::seed::mix;
use crate::vit::{patchify, Head, Masks, ViTModel};

const SHUFFLE_STREAM: u64 = 0x5f;
const HEAD_STREAM: u64 = 0x4ead;
const MASK_INIT_STREAM: u64 = 0x3a5c;
const GUMBEL_STREAM: u64 = 0x6b;
const MODEL_STREAM: u64 = 0x1417;
const EVAL_CHUNK: usize = 64;

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Result of training one new task with masks.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub masks: TaskMaskSet,
    /// Final mask logits before binarization.
    pub params: MaskParams,
    pub report: TrainReport,
}

/// Binarized mask sets keyed by task id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskStore {
    sets: BTreeMap<u32, TaskMaskSet>,
}

impl MaskStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a set; task ids are never reused.
    pub fn insert(&mut self, set: TaskMaskSet) -> Result<()> {
        if set.task_id == 0 {
            return Err(Error::Contract("task 0 uses the standard pattern and has no mask set".into()));
        }
        if self.sets.contains_key(&set.task_id) {
            return Err(Error::Contract(format!("task {} already has a mask set", set.task_id)));
        }
        self.sets.insert(set.task_id, set);
        Ok(())
    }

    pub fn get(&self, task_id: u32) -> Result<&TaskMaskSet> {
        self.sets
            .get(&task_id)
            .ok_or_else(|| Error::Lookup(format!("no mask set for task {task_id}")))
    }

    pub fn contains(&self, task_id: u32) -> bool {
        self.sets.contains_key(&task_id)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TaskMaskSet> {
        self.sets.values()
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    mix(mix(seed, SHUFFLE_STREAM), epoch as u64)
}

fn grads_of(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| match g.grad(v) {
            Some(d) => d.to_vec(),
            None => vec![0.0; g.value(v).numel()],
        })
        .collect()
}

fn refs(grads: &[Vec<f64>]) -> Vec<&[f64]> {
    grads.iter().map(Vec::as_slice).collect()
}

fn check_loss(g: &Graph, loss: Var, step: usize) -> Result<f64> {
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    Ok(value)
}

/// Non-finite parameters after an update mean the run diverged at `step`.
fn check_params<'a>(tensors: impl IntoIterator<Item = &'a Tensor>, step: usize, loss: f64) -> Result<()> {
    for t in tensors {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
    }
    Ok(())
}

/// A numeric-domain failure inside a training forward pass means the
/// parameters already blew up.
fn as_divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NumericDomain { .. } => Error::Divergence { step, loss: f64::NAN },
        e => e,
    }
}

fn check_data(model: &ViTModel, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if data.image_shape() != expect {
        return Err(Error::shape("dataset images", &data.image_shape(), &expect));
    }
    if data.is_empty() {
        return Err(Error::Contract("training data is empty".into()));
    }
    Ok(())
}

/// Trains every backbone weight and `head` with cross-entropy under the
/// standard (all-ones) pattern.
fn train_full(model: &mut ViTModel, head: &mut Head, spec: &TaskSpec, train: &Dataset) -> Result<TrainReport> {
    check_data(model, train)?;
    let cfg = *model.config();
    let mut bb_opt = Optimizer::new(spec.optimizer, spec.backbone_lr);
    let mut head_opt = Optimizer::new(spec.optimizer, spec.head_lr);
    let mut report = TrainReport::default();
    for epoch in 0..spec.epochs {
        let mut total = 0.0;
        let batches = batch_iter(train, spec.batch_size, shuffle_seed(spec.seed, epoch), true)?;
        let count = batches.len();
        for batch in batches {
            let mut g = Graph::new();
            let bb = model.backbone().bind(&mut g, true);
            let p = g.constant(&patchify(&cfg, &batch.images)?);
            let feats = model
                .encode(&mut g, &bb, p, batch.labels.len(), Masks::Standard, None)
                .map_err(as_divergence(report.steps))?;
            let hv = head.bind(&mut g, true);
            let logits = ViTModel::apply_head(&mut g, hv, feats)?;
            let loss = g.cross_entropy(logits, &batch.labels).map_err(as_divergence(report.steps))?;
            let value = check_loss(&g, loss, report.steps)?;
            total += value;
            g.backward(loss)?;
            let bg = grads_of(&g, &bb.vars());
            let hg = grads_of(&g, &[hv.0, hv.1]);
            bb_opt.step(model.backbone_mut()?.tensors_mut(), &refs(&bg));
            head_opt.step(vec![&mut head.weight, &mut head.bias], &refs(&hg));
            let named = model.backbone().named();
            check_params(named.iter().map(|(_, t)| *t).chain([&head.weight, &head.bias]), report.steps, value)?;
            report.steps += 1;
        }
        let mean = total / count as f64;
        log::debug!("task {} epoch {epoch}: loss {mean:.5}", spec.task_id);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Trains backbone and task-0 head on the base task, then freezes the
/// backbone.
pub fn train_base(model: &mut ViTModel, spec: &TaskSpec, train: &Dataset) -> Result<TrainReport> {
    if model.is_frozen() {
        return Err(Error::Contract("train_base needs an unfrozen model".into()));
    }
    if spec.task_id != 0 {
        return Err(Error::Contract(format!("the base task has id 0, got {}", spec.task_id)));
    }
    let mut head = Head::new(model.config().embed_dim, train.num_classes(), mix(spec.seed, HEAD_STREAM));
    let report = train_full(model, &mut head, spec, train)?;
    model.set_head(0, head)?;
    model.freeze();
    log::info!(
        "base task trained: {} steps, final loss {:.4}",
        report.steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(report)
}

/// Learns masks and a new head for `spec.task_id` on top of the frozen
/// backbone. The backbone is only read.
pub fn train_task(model: &ViTModel, spec: &TaskSpec, hyper: &MeatHyper, train: &Dataset) -> Result<TaskOutcome> {
    if spec.task_id == 0 {
        return Err(Error::Contract("task 0 keeps the standard token interaction; it has no masks".into()));
    }
    if !model.is_frozen() {
        return Err(Error::Contract("masks are trained over a frozen backbone".into()));
    }
    hyper.validate()?;
    check_data(model, train)?;
    let cfg = *model.config();
    let mut params = MaskParams::init(&cfg, hyper.gamma, hyper.tau, mix(spec.seed, MASK_INIT_STREAM))?;
    let mut head = Head::new(cfg.embed_dim, train.num_classes(), mix(spec.seed, HEAD_STREAM));
    let mut sampler = GumbelSampler::new(mix(spec.seed, GUMBEL_STREAM));
    let mut mask_opt = Optimizer::new(spec.optimizer, spec.mask_lr);
    let mut head_opt = Optimizer::new(spec.optimizer, spec.head_lr);
    let objective = hyper.objective();
    let mut report = TrainReport::default();
    for epoch in 0..spec.epochs {
        params.set_tau(hyper.tau_at(epoch, spec.epochs))?;
        let mut total = 0.0;
        let batches = batch_iter(train, spec.batch_size, shuffle_seed(spec.seed, epoch), true)?;
        let count = batches.len();
        for batch in batches {
            let mut g = Graph::new();
            let relaxed = params.relax(&mut g, &mut sampler)?;
            let bb = model.backbone().bind(&mut g, false);
            let p = g.constant(&patchify(&cfg, &batch.images)?);
            let feats = model
                .encode(&mut g, &bb, p, batch.labels.len(), Masks::Vars(&relaxed.layers), None)
                .map_err(as_divergence(report.steps))?;
            let hv = head.bind(&mut g, true);
            let logits = ViTModel::apply_head(&mut g, hv, feats)?;
            let loss = total_loss(&mut g, logits, &batch.labels, &relaxed.token_masks(), objective)
                .map_err(as_divergence(report.steps))?;
            let value = check_loss(&g, loss, report.steps)?;
            total += value;
            g.backward(loss)?;
            let logit_vars: Vec<Var> = relaxed.logits.iter().flatten().copied().collect();
            let mg = grads_of(&g, &logit_vars);
            let hg = grads_of(&g, &[hv.0, hv.1]);
            mask_opt.step(params.tensors_mut(), &refs(&mg));
            head_opt.step(vec![&mut head.weight, &mut head.bias], &refs(&hg));
            if !params.all_finite() {
                return Err(Error::Divergence { step: report.steps, loss: value });
            }
            check_params([&head.weight, &head.bias], report.steps, value)?;
            report.steps += 1;
        }
        let mean = total / count as f64;
        log::debug!("task {} epoch {epoch}: loss {mean:.5}", spec.task_id);
        report.epoch_losses.push(mean);
    }
    let masks = TaskMaskSet::new(&cfg, spec.task_id, binarize(&params), head, spec.seed, spec.epochs as u32)?;
    log::info!(
        "task {} trained: token activation {:?}",
        spec.task_id,
        masks.activation_ratios().tokens
    );
    Ok(TaskOutcome { masks, params, report })
}

/// Trains only a new linear head over frozen standard-pattern features.
pub fn baseline_classifier_only(model: &ViTModel, spec: &TaskSpec, train: &Dataset) -> Result<(Head, TrainReport)> {
    if !model.is_frozen() {
        return Err(Error::Contract("the classifier baseline needs a frozen backbone".into()));
    }
    check_data(model, train)?;
    let d = model.config().embed_dim;
    let all: Vec<usize> = (0..train.len()).collect();
    let mut features = Vec::with_capacity(train.len() * d);
    for chunk in all.chunks(EVAL_CHUNK) {
        let (images, _) = train.gather(chunk);
        features.extend_from_slice(model.features(&images, Masks::Standard)?.data());
    }
    let mut head = Head::new(d, train.num_classes(), mix(spec.seed, HEAD_STREAM));
    let mut opt = Optimizer::new(spec.optimizer, spec.head_lr);
    let mut report = TrainReport::default();
    for epoch in 0..spec.epochs {
        let mut total = 0.0;
        let batches = batch_iter(train, spec.batch_size, shuffle_seed(spec.seed, epoch), true)?;
        let count = batches.len();
        for batch in batches {
            let mut rows = Vec::with_capacity(batch.indices.len() * d);
            for &i in &batch.indices {
                rows.extend_from_slice(&features[i * d..(i + 1) * d]);
            }
            let mut g = Graph::new();
            let x = g.constant(&Tensor::new(&[batch.indices.len(), d], rows)?);
            let hv = head.bind(&mut g, true);
            let logits = ViTModel::apply_head(&mut g, hv, x)?;
            let loss = g.cross_entropy(logits, &batch.labels)?;
            let value = check_loss(&g, loss, report.steps)?;
            total += value;
            g.backward(loss)?;
            let hg = grads_of(&g, &[hv.0, hv.1]);
            opt.step(vec![&mut head.weight, &mut head.bias], &refs(&hg));
            check_params([&head.weight, &head.bias], report.steps, value)?;
            report.steps += 1;
        }
        report.epoch_losses.push(total / count as f64);
    }
    Ok((head, report))
}

/// Trains a separate full model for one task, starting from a copy of the
/// base model or from fresh weights. The returned model is frozen and holds
/// only this task's head.
pub fn baseline_individual(
    base: &ViTModel,
    spec: &TaskSpec,
    train: &Dataset,
    init: IndividualInit,
) -> Result<(ViTModel, TrainReport)> {
    let cfg = *base.config();
    let mut model = match init {
        IndividualInit::Base => ViTModel::from_parts(cfg, base.backbone().clone(), BTreeMap::new(), false),
        IndividualInit::Scratch => ViTModel::new(cfg, mix(spec.seed, MODEL_STREAM))?,
    };
    let mut head = Head::new(cfg.embed_dim, train.num_classes(), mix(spec.seed, HEAD_STREAM));
    let report = train_full(&mut model, &mut head, spec, train)?;
    model.set_head(spec.task_id, head)?;
    model.freeze();
    Ok((model, report))
}

fn chunked_logits(data: &Dataset, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    let mut classes = 0;
    for chunk in all.chunks(EVAL_CHUNK) {
        let (images, _) = data.gather(chunk);
        let logits = f(&images)?;
        classes = logits.shape()[1];
        out.extend_from_slice(logits.data());
    }
    Tensor::new(&[data.len(), classes], out)
}

/// `features · W + b` for a stored head.
pub fn head_logits(head: &Head, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(features);
    let hv = head.bind(&mut g, false);
    let y = ViTModel::apply_head(&mut g, hv, x)?;
    Ok(g.value(y).clone())
}

/// Per-example logits `[N, C]` for a task under its hard masks (task 0:
/// standard pattern and the model's own head). Never samples noise.
pub fn task_logits(model: &ViTModel, task_id: u32, store: &MaskStore, data: &Dataset) -> Result<Tensor> {
    if task_id == 0 {
        return chunked_logits(data, |x| model.logits(x, 0, Masks::Standard));
    }
    let set = store.get(task_id)?;
    if set.config_digest != model.config().digest() {
        return Err(Error::Contract(format!("mask set for task {task_id} belongs to a different backbone config")));
    }
    let views = set.layer_views(model.config())?;
    chunked_logits(data, |x| head_logits(&set.head, &model.features(x, Masks::Values(&views))?))
}

/// Logits of a stand-alone head over standard-pattern features.
pub fn classifier_logits(model: &ViTModel, head: &Head, data: &Dataset) -> Result<Tensor> {
    chunked_logits(data, |x| head_logits(head, &model.features(x, Masks::Standard)?))
}

/// Logits of a model's own head for `task_id` under the standard pattern.
pub fn model_logits(model: &ViTModel, task_id: u32, data: &Dataset) -> Result<Tensor> {
    chunked_logits(data, |x| model.logits(x, task_id, Masks::Standard))
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let c = logits.shape()[1];
    let hits = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy of a task under hard masks.
pub fn evaluate(model: &ViTModel, task_id: u32, store: &MaskStore, data: &Dataset) -> Result<f64> {
    Ok(accuracy(&task_logits(model, task_id, store, data)?, data.labels()))
}
