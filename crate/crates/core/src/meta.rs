//! First-order MAML pre-training over source subjects with validation-based
//! early stopping.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::backbones::{argmax_rows, build, ModelParams, ModelSpec};
use crate::data::SubjectDataset;
use crate::error::{Error, Result};
use crate::objectives::{ClassCenters, Reduction, DEFAULT_CENTER_LR, DEFAULT_CENTER_WEIGHT};
use crate::optim::{sgd_step, AdamConfig, OptimState};
use crate::rng::{derive_seed, rng};
use crate::tensor::Tensor;

/// How the validation set is carved out of the source pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Holdout {
    /// Stratified fraction of each source subject's samples, per class.
    #[default]
    Samples,
    /// Whole subjects; at least one is held out and one kept for training.
    Subjects,
}

impl std::str::FromStr for Holdout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "samples" => Ok(Holdout::Samples),
            "subjects" => Ok(Holdout::Subjects),
            other => Err(Error::Config(format!("unknown holdout `{other}` (samples|subjects)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Inner (base learner) SGD rate.
    pub alpha: f32,
    /// Meta rate, used as the Adam learning rate.
    pub beta: f64,
    /// Subjects per meta-batch; `None` uses every training subject.
    pub subjects_per_batch: Option<usize>,
    pub inner_steps: usize,
    pub inner_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub holdout: Holdout,
    pub center_lr: f32,
    pub center_weight: f32,
    pub reduction: Reduction,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha: 0.001,
            beta: 0.0001,
            subjects_per_batch: None,
            inner_steps: 1,
            inner_batch: 32,
            max_epochs: 50,
            patience: 5,
            val_fraction: 0.1,
            holdout: Holdout::Samples,
            center_lr: DEFAULT_CENTER_LR,
            center_weight: DEFAULT_CENTER_WEIGHT,
            reduction: Reduction::Mean,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.subjects_per_batch == Some(0) {
            return Err(Error::Config("subjects_per_batch must be at least 1".into()));
        }
        if self.inner_batch == 0 {
            return Err(Error::Config("inner_batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.beta)
    }
}

/// A labeled batch drawn from one subject.
#[derive(Clone, Debug)]
pub struct Task {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Task {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("empty task".into()));
        }
        if x.shape()[0] != labels.len() {
            return Err(Error::shape("task", format!("{} samples, {} labels", x.shape()[0], labels.len())));
        }
        Ok(Task { x, labels })
    }
}

pub(crate) fn accumulate(acc: &mut [Tensor], g: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (v, &d) in a.data_mut().iter_mut().zip(g.data()) {
            *v += d;
        }
    }
}

pub(crate) fn scale(acc: &mut [Tensor], s: f32) {
    for a in acc {
        a.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

pub(crate) fn zeros_like(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// `steps` SGD steps from a copy of `params`; `params` is left untouched.
pub fn inner_adapt_with<F>(params: &[Tensor], alpha: f32, steps: usize, mut grad: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<Vec<Tensor>>,
{
    let mut adapted = params.to_vec();
    for _ in 0..steps {
        let g = grad(&adapted)?;
        sgd_step(&mut adapted, &g, alpha)?;
    }
    Ok(adapted)
}

/// Adapts a copy of `model` to one task with SGD on the joint loss.
pub fn inner_adapt(
    model: &ModelParams,
    task: &Task,
    alpha: f32,
    steps: usize,
    centers: &ClassCenters,
    reduction: Reduction,
) -> Result<ModelParams> {
    if task.labels.is_empty() {
        return Err(Error::Data("empty task".into()));
    }
    let tensors = inner_adapt_with(model.tensors(), alpha, steps, |p| {
        Ok(model.with_tensors(p.to_vec())?.loss_and_grad(&task.x, &task.labels, centers, reduction)?.grads)
    })?;
    model.with_tensors(tensors)
}

/// First-order meta-gradient `Σ_i ∇L_i(θ*_i)` for arbitrary tasks.
pub fn meta_gradient_with<T, F>(params: &[Tensor], tasks: &[T], alpha: f32, steps: usize, grad: F) -> Result<Vec<Tensor>>
where
    T: Sync,
    F: Fn(&[Tensor], &T) -> Result<Vec<Tensor>> + Sync,
{
    let per_task: Vec<Result<Vec<Tensor>>> = tasks
        .par_iter()
        .map(|t| {
            let adapted = inner_adapt_with(params, alpha, steps, |p| grad(p, t))?;
            grad(&adapted, t)
        })
        .collect();
    let mut acc = zeros_like(params);
    for g in per_task {
        accumulate(&mut acc, &g?);
    }
    Ok(acc)
}

/// Loss and accuracy of the outer evaluations in one meta step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss_sum: f64,
    pub tasks: usize,
    pub correct: usize,
    pub seen: usize,
}

impl StepStats {
    fn merge(&mut self, o: StepStats) {
        self.loss_sum += o.loss_sum;
        self.tasks += o.tasks;
        self.correct += o.correct;
        self.seen += o.seen;
    }
}

/// One meta update: adapt to each task, sum the gradients taken at the
/// adapted points, apply Adam, then move the centers toward the adapted
/// features.
pub fn meta_step(
    model: &mut ModelParams,
    tasks: &[Task],
    config: &MetaConfig,
    centers: &mut ClassCenters,
    optim: &mut OptimState,
) -> Result<StepStats> {
    if tasks.is_empty() {
        return Err(Error::Data("meta_step needs at least one task".into()));
    }
    if !optim.is_initialized() {
        optim.init(model.tensors());
    }
    let snapshot: &ModelParams = model;
    let snap_centers: &ClassCenters = centers;
    let outcomes: Vec<Result<_>> = tasks
        .par_iter()
        .map(|task| {
            let adapted = inner_adapt(snapshot, task, config.alpha, config.inner_steps, snap_centers, config.reduction)?;
            adapted.loss_and_grad(&task.x, &task.labels, snap_centers, config.reduction)
        })
        .collect();
    let mut g = zeros_like(model.tensors());
    let mut stats = StepStats::default();
    let mut features = Vec::with_capacity(tasks.len());
    let mut labels = Vec::new();
    for (task, out) in tasks.iter().zip(outcomes) {
        let out = out?;
        accumulate(&mut g, &out.grads);
        let preds = argmax_rows(&out.forward.probs);
        stats.merge(StepStats {
            loss_sum: out.loss,
            tasks: 1,
            correct: preds.iter().zip(&task.labels).filter(|(p, y)| p == y).count(),
            seen: task.labels.len(),
        });
        features.push(out.forward.features);
        labels.extend_from_slice(&task.labels);
    }
    optim.adam_step(model.tensors_mut(), &g)?;
    let features = Tensor::concat_rows(&features.iter().collect::<Vec<_>>())?;
    centers.update(&features, &labels)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub params: ModelParams,
    pub centers: ClassCenters,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint; 0 if no epoch ran.
    pub best_epoch: usize,
}

/// Training pools per subject and the pooled validation set.
struct Pools {
    train: Vec<(Tensor, Vec<usize>)>,
    val: Option<(Tensor, Vec<usize>)>,
}

fn split_sources(sources: &[&SubjectDataset], config: &MetaConfig, seed: u64) -> Result<Pools> {
    let mut train = Vec::new();
    let mut val_x = Vec::new();
    let mut val_y = Vec::new();
    match config.holdout {
        Holdout::Samples => {
            for (s, d) in sources.iter().enumerate() {
                let mut keep = Vec::new();
                for (class, idx) in d.indices_by_class().iter().enumerate() {
                    let mut perm = idx.clone();
                    perm.shuffle(&mut rng(derive_seed(&[seed, s as u64, class as u64])));
                    let n_val = ((idx.len() as f64 * config.val_fraction).round() as usize).min(idx.len().saturating_sub(1));
                    let (v, k) = perm.split_at(n_val);
                    if !v.is_empty() {
                        let (x, y) = d.subset(v);
                        val_x.push(x);
                        val_y.extend(y);
                    }
                    keep.extend_from_slice(k);
                }
                keep.sort_unstable();
                if !keep.is_empty() {
                    train.push(d.subset(&keep));
                }
            }
        }
        Holdout::Subjects => {
            let n = sources.len();
            let n_val = ((n as f64 * config.val_fraction).round() as usize).clamp(1, n - 1);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng(seed));
            let held: Vec<usize> = order[..n_val].to_vec();
            for (s, d) in sources.iter().enumerate() {
                let all: Vec<usize> = (0..d.len()).collect();
                let (x, y) = d.subset(&all);
                if held.contains(&s) {
                    val_x.push(x);
                    val_y.extend(y);
                } else {
                    train.push((x, y));
                }
            }
        }
    }
    let val = if val_x.is_empty() {
        None
    } else {
        Some((Tensor::concat_rows(&val_x.iter().collect::<Vec<_>>())?, val_y))
    };
    Ok(Pools { train, val })
}

fn check_sources(spec: &ModelSpec, sources: &[&SubjectDataset]) -> Result<()> {
    if sources.len() < 2 {
        return Err(Error::Config(format!("pre-training needs at least 2 source subjects, got {}", sources.len())));
    }
    for d in sources {
        if d.channels() != spec.channels || d.time_len() != spec.time_len || d.n_classes() != spec.n_classes {
            return Err(Error::Config(format!(
                "subject {} is {}×{} with {} classes, model expects {}×{} with {}",
                d.subject_id,
                d.channels(),
                d.time_len(),
                d.n_classes(),
                spec.channels,
                spec.time_len,
                spec.n_classes
            )));
        }
    }
    Ok(())
}

pub fn accuracy_of(model: &ModelParams, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let preds = model.predict(x)?;
    Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

/// Meta-trains a freshly initialized model on the source subjects and
/// returns the checkpoint with the best validation accuracy.
pub fn pretrain(spec: &ModelSpec, sources: &[&SubjectDataset], config: &MetaConfig, seed: u64) -> Result<PretrainOutput> {
    config.validate()?;
    check_sources(spec, sources)?;
    let mut model = build(spec, derive_seed(&[seed, 1]))?;
    let mut centers = model.zero_centers().with_rates(config.center_lr, config.center_weight);
    let pools = split_sources(sources, config, derive_seed(&[seed, 2]))?;
    if let Some(m) = config.subjects_per_batch {
        if m > pools.train.len() {
            return Err(Error::Config(format!(
                "subjects_per_batch {m} exceeds the {} training subjects",
                pools.train.len()
            )));
        }
    }
    let mut optim = OptimState::for_params(config.adam(), model.tensors());
    let mut history = Vec::new();
    let mut best = (model.clone(), centers.clone(), f64::NEG_INFINITY, 0usize);
    let mut since_best = 0;
    let max_len = pools.train.iter().map(|(_, y)| y.len()).max().unwrap_or(0);
    let steps = max_len.div_ceil(config.inner_batch);
    for epoch in 1..=config.max_epochs {
        let mut r = rng(derive_seed(&[seed, 3, epoch as u64]));
        let perms: Vec<Vec<usize>> = pools
            .train
            .iter()
            .map(|(_, y)| {
                let mut p: Vec<usize> = (0..y.len()).collect();
                p.shuffle(&mut r);
                p
            })
            .collect();
        let mut stats = StepStats::default();
        for step in 0..steps {
            let chosen: Vec<usize> = match config.subjects_per_batch {
                Some(m) if m < pools.train.len() => {
                    let mut v = index::sample(&mut r, pools.train.len(), m).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..pools.train.len()).collect(),
            };
            let tasks = chosen
                .iter()
                .map(|&s| {
                    let (x, y) = &pools.train[s];
                    let perm = &perms[s];
                    let b = config.inner_batch.min(perm.len());
                    let idx: Vec<usize> = (0..b).map(|i| perm[(step * config.inner_batch + i) % perm.len()]).collect();
                    Task::new(x.select_rows(&idx), idx.iter().map(|&i| y[i]).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            stats.merge(meta_step(&mut model, &tasks, config, &mut centers, &mut optim)?);
        }
        let train_loss = stats.loss_sum / stats.tasks.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence(format!("pre-training loss is {train_loss} at epoch {epoch}")));
        }
        let train_acc = stats.correct as f64 / stats.seen.max(1) as f64;
        let val_acc = match &pools.val {
            Some((x, y)) => accuracy_of(&model, x, y)?,
            None => train_acc,
        };
        history.push(EpochRecord {
            epoch,
            train_acc,
            val_acc,
            train_loss,
        });
        if val_acc > best.2 {
            best = (model.clone(), centers.clone(), val_acc, epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                break;
            }
        }
    }
    Ok(PretrainOutput {
        params: best.0,
        centers: best.1,
        history,
        best_epoch: best.3,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_acc", "val_acc", "train_loss"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:.6}", h.train_acc),
            format!("{:.6}", h.val_acc),
            format!("{:.6}", h.train_loss),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(p: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::scalar(2.0 * p[0].data()[0])])
    }

    #[test]
    fn inner_adapt_on_square() {
        let theta = vec![Tensor::scalar(1.0)];
        let one = inner_adapt_with(&theta, 0.1, 1, quad_grad).unwrap();
        assert!((one[0].data()[0] - 0.8).abs() < 1e-7);
        let two = inner_adapt_with(&theta, 0.1, 2, quad_grad).unwrap();
        assert!((two[0].data()[0] - 0.64).abs() < 1e-6);
        assert_eq!(theta[0].data()[0], 1.0);
        let zero = inner_adapt_with(&theta, 0.0, 3, quad_grad).unwrap();
        assert_eq!(zero, theta);
    }

    #[test]
    fn meta_gradient_quadratic_and_symmetry() {
        let theta = vec![Tensor::scalar(1.0)];
        let g = meta_gradient_with(&theta, &[()], 0.1, 1, |p, _| quad_grad(p)).unwrap();
        assert!((g[0].data()[0] - 2.0 * 0.8).abs() < 1e-6);
        let g3 = meta_gradient_with(&theta, &[(), (), ()], 0.1, 1, |p, _| quad_grad(p)).unwrap();
        assert!((g3[0].data()[0] - 3.0 * g[0].data()[0]).abs() < 1e-6);
    }

    #[test]
    fn empty_task_rejected() {
        assert!(Task::new(Tensor::zeros(&[1, 2, 2]), vec![]).is_err());
    }
}
