//! Semi-supervised adaptation to a target subject: pseudo-labeling, the
//! confidence and center-distance filter, class-balanced subsampling, and
//! the fine-tuning loop over pseudo-labeled and labeled losses.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::backbones::{ForwardResult, ModelParams};
use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::meta::{accumulate, accuracy_of, inner_adapt, scale, zeros_like, Task};
use crate::objectives::{feature_distance, ClassCenters, Reduction};
use crate::optim::{AdamConfig, OptimState};
use crate::rng::{derive_seed, rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    /// Confidence threshold ε; members need `p > ε`.
    pub epsilon: f64,
    /// Distance threshold ς; members need `d < ς`.
    pub sigma: f64,
    /// Outer (Adam) fine-tuning rate.
    pub gamma: f64,
    /// Inner SGD rate.
    pub alpha: f32,
    pub weight_decay: f64,
    pub outer_epochs: usize,
    pub n_shot: usize,
    /// Minimum number of mini-batches per epoch.
    pub batches_per_epoch: usize,
    pub max_batch: usize,
    /// Rebuild the support set at the start of every epoch.
    pub refresh_support: bool,
    /// A support set with fewer members than this in any class is not used.
    /// 0 only requires it to be non-empty.
    pub min_per_class: usize,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epsilon: 0.9,
            sigma: 1.0,
            gamma: 0.001,
            alpha: 0.001,
            weight_decay: 0.001,
            outer_epochs: 10,
            n_shot: 5,
            batches_per_epoch: 4,
            max_batch: 64,
            refresh_support: false,
            min_per_class: 5,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        // ε = 1 is allowed: it empties the support set.
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon must be in (0, 1], got {}", self.epsilon)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("gamma and weight_decay must be non-negative".into()));
        }
        if self.batches_per_epoch == 0 || self.max_batch == 0 {
            return Err(Error::Config("batches_per_epoch and max_batch must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::with_lr(self.gamma)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoSample {
    /// Row in the unlabeled pool.
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
    pub distance: f64,
}

/// Pseudo-labels from precomputed outputs.
pub fn label_outputs(out: &ForwardResult, centers: &ClassCenters) -> Result<Vec<PseudoSample>> {
    if out.feature_width() != centers.width() {
        return Err(Error::shape(
            "pseudo_label",
            format!("feature width {} vs center width {}", out.feature_width(), centers.width()),
        ));
    }
    out.predictions()
        .into_iter()
        .enumerate()
        .map(|(i, y)| {
            Ok(PseudoSample {
                index: i,
                label: y,
                confidence: out.probs.row(i)[y] as f64,
                distance: feature_distance(out.features.row(i), centers.center(y))?,
            })
        })
        .collect()
}

pub fn pseudo_label(model: &ModelParams, centers: &ClassCenters, x: Option<&Tensor>) -> Result<Vec<PseudoSample>> {
    match x {
        None => Ok(Vec::new()),
        Some(x) => label_outputs(&model.forward(x)?, centers),
    }
}

/// Pseudo-labeled samples passing the confidence and distance filter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupportSet {
    pub members: Vec<PseudoSample>,
    pub class_counts: Vec<usize>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Non-empty, and every class has at least `min_per_class` members.
    pub fn usable(&self, min_per_class: usize) -> bool {
        !self.is_empty() && (min_per_class == 0 || self.class_counts.iter().all(|&c| c >= min_per_class))
    }
}

/// Keeps samples with `p > epsilon` and `d < sigma`, in input order.
pub fn build_support_set(pseudo: &[PseudoSample], epsilon: f64, sigma: f64, n_classes: usize) -> SupportSet {
    let members: Vec<PseudoSample> = pseudo
        .iter()
        .filter(|s| s.confidence > epsilon && s.distance < sigma)
        .copied()
        .collect();
    let width = n_classes.max(members.iter().map(|s| s.label + 1).max().unwrap_or(0));
    let mut class_counts = vec![0; width];
    for s in &members {
        class_counts[s.label] += 1;
    }
    SupportSet { members, class_counts }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BalancedBatches {
    pub batches: Vec<Vec<PseudoSample>>,
    /// Samples drawn per present class.
    pub per_class: usize,
    /// Only one class was present in the support set.
    pub single_class: bool,
}

impl BalancedBatches {
    pub fn total(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Draws `min` samples from every present class without replacement,
/// shuffles them and splits them into `max(k, ⌈total/max_batch⌉)`
/// near-equal mini-batches (fewer if there are not enough samples).
pub fn balance_subsample(q: &SupportSet, k: usize, max_batch: usize, seed: u64) -> BalancedBatches {
    let present: Vec<usize> = (0..q.class_counts.len()).filter(|&c| q.class_counts[c] > 0).collect();
    let Some(per_class) = present.iter().map(|&c| q.class_counts[c]).min() else {
        return BalancedBatches::default();
    };
    let mut r = rng(seed);
    let mut picked = Vec::with_capacity(per_class * present.len());
    for &c in &present {
        let members: Vec<&PseudoSample> = q.members.iter().filter(|s| s.label == c).collect();
        let mut chosen = index::sample(&mut r, members.len(), per_class).into_vec();
        chosen.sort_unstable();
        picked.extend(chosen.into_iter().map(|i| *members[i]));
    }
    picked.shuffle(&mut r);
    let total = picked.len();
    let n_batches = k.max(1).max(total.div_ceil(max_batch.max(1))).min(total);
    let mut batches = Vec::with_capacity(n_batches);
    let mut start = 0;
    for b in 0..n_batches {
        let size = total / n_batches + usize::from(b < total % n_batches);
        batches.push(picked[start..start + size].to_vec());
        start += size;
    }
    BalancedBatches {
        batches,
        per_class,
        single_class: present.len() == 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub q_size: usize,
    pub q_counts: Vec<usize>,
    pub fallback: bool,
    pub eval_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaptReport {
    pub q_size: usize,
    pub q_counts: Vec<usize>,
    /// No pseudo-labeled sample passed the filter; only the labeled set was used.
    pub fallback: bool,
    pub single_class: bool,
    pub epochs: Vec<AdaptEpoch>,
}

#[derive(Clone, Debug)]
pub struct AdaptOutput {
    pub params: ModelParams,
    pub centers: ClassCenters,
    pub report: AdaptReport,
}

fn eval_acc(model: &ModelParams, eval: Option<&LabeledSet>) -> Result<Option<f64>> {
    match eval {
        Some(LabeledSet {
            samples: Some(x), labels, ..
        }) => Ok(Some(accuracy_of(model, x, labels)?)),
        _ => Ok(None),
    }
}

/// Supervised fine-tuning on the labeled target samples: one Adam step per
/// epoch on the full-batch joint loss, then a center update on the labeled
/// features.
pub fn supervised_finetune(
    model: &ModelParams,
    centers: &ClassCenters,
    labeled: &LabeledSet,
    config: &AdaptConfig,
    eval: Option<&LabeledSet>,
) -> Result<AdaptOutput> {
    config.validate()?;
    let Some(xq) = &labeled.samples else {
        return Err(Error::Data("nothing to adapt on: no labeled samples".into()));
    };
    let mut model = model.clone();
    let mut centers = centers.clone();
    let mut optim = OptimState::for_params(config.adam(), model.tensors());
    let mut epochs = Vec::with_capacity(config.outer_epochs);
    for epoch in 1..=config.outer_epochs {
        let g = model.loss_and_grad(xq, &labeled.labels, &centers, config.reduction)?.grads;
        optim.adam_step(model.tensors_mut(), &g)?;
        centers.update(&model.forward(xq)?.features, &labeled.labels)?;
        epochs.push(AdaptEpoch {
            epoch,
            q_size: 0,
            q_counts: vec![0; model.n_classes()],
            fallback: true,
            eval_acc: eval_acc(&model, eval)?,
        });
    }
    Ok(AdaptOutput {
        report: AdaptReport {
            q_size: 0,
            q_counts: vec![0; model.n_classes()],
            fallback: true,
            single_class: false,
            epochs,
        },
        params: model,
        centers,
    })
}

/// Semi-supervised fine-tuning.
///
/// The support set is built once from the unlabeled pool (every epoch with
/// `refresh_support`). Each epoch draws class-balanced mini-batches `T_j`,
/// adapts `θ*_j = θ − α∇L(T_j)`, and averages `∇[L(T_j) + L(T_q)]` taken at
/// `θ*_j` over the batches for one Adam step. Centers then move toward the
/// features of `T_q ∪ B` under the new parameters. With an unusable support
/// set (see [`SupportSet::usable`]) this is exactly [`supervised_finetune`],
/// or the unchanged model when there are no labeled samples either.
pub fn ssml_finetune(
    model: &ModelParams,
    centers: &ClassCenters,
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    config: &AdaptConfig,
    eval: Option<&LabeledSet>,
) -> Result<AdaptOutput> {
    config.validate()?;
    let k = model.n_classes();
    let xu = unlabeled.samples.as_ref();
    let mut q = build_support_set(&pseudo_label(model, centers, xu)?, config.epsilon, config.sigma, k);
    if !q.usable(config.min_per_class) {
        if !labeled.is_empty() {
            let mut out = supervised_finetune(model, centers, labeled, config, eval)?;
            out.report.q_counts = q.class_counts.clone();
            return Ok(out);
        }
        if unlabeled.is_empty() {
            return Err(Error::Data("nothing to adapt on: unlabeled and labeled sets are both empty".into()));
        }
        return Ok(AdaptOutput {
            params: model.clone(),
            centers: centers.clone(),
            report: AdaptReport {
                q_size: q.len(),
                q_counts: q.class_counts,
                fallback: true,
                single_class: false,
                epochs: Vec::new(),
            },
        });
    }
    let xu = xu.expect("non-empty support set implies unlabeled samples");
    let mut report = AdaptReport {
        q_size: q.len(),
        q_counts: q.class_counts.clone(),
        ..Default::default()
    };
    let mut model = model.clone();
    let mut centers = centers.clone();
    let mut optim = OptimState::for_params(config.adam(), model.tensors());
    let tq = match &labeled.samples {
        Some(x) => Some(Task::new(x.clone(), labeled.labels.clone())?),
        None => None,
    };
    for epoch in 1..=config.outer_epochs {
        if config.refresh_support && epoch > 1 {
            q = build_support_set(&pseudo_label(&model, &centers, Some(xu))?, config.epsilon, config.sigma, k);
        }
        let balanced = balance_subsample(
            &q,
            config.batches_per_epoch,
            config.max_batch,
            derive_seed(&[config.seed, epoch as u64]),
        );
        report.single_class |= balanced.single_class;
        if !q.usable(config.min_per_class) {
            // Only reachable with refresh_support: fall back for this epoch.
            let tq = tq
                .as_ref()
                .ok_or_else(|| Error::Data("nothing to adapt on: support set unusable and no labeled samples".into()))?;
            let g = model.loss_and_grad(&tq.x, &tq.labels, &centers, config.reduction)?.grads;
            optim.adam_step(model.tensors_mut(), &g)?;
            centers.update(&model.forward(&tq.x)?.features, &tq.labels)?;
            report.epochs.push(AdaptEpoch {
                epoch,
                q_size: 0,
                q_counts: q.class_counts.clone(),
                fallback: true,
                eval_acc: eval_acc(&model, eval)?,
            });
            continue;
        }
        let tasks = balanced
            .batches
            .iter()
            .map(|b| {
                let idx: Vec<usize> = b.iter().map(|s| s.index).collect();
                Task::new(xu.select_rows(&idx), b.iter().map(|s| s.label).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let snapshot = &model;
        let snap_centers = &centers;
        let grads: Vec<Result<Vec<Tensor>>> = tasks
            .par_iter()
            .map(|tj| {
                let adapted = inner_adapt(snapshot, tj, config.alpha, 1, snap_centers, config.reduction)?;
                let mut g = adapted.loss_and_grad(&tj.x, &tj.labels, snap_centers, config.reduction)?.grads;
                if let Some(tq) = &tq {
                    accumulate(&mut g, &adapted.loss_and_grad(&tq.x, &tq.labels, snap_centers, config.reduction)?.grads);
                }
                Ok(g)
            })
            .collect();
        let mut g = zeros_like(model.tensors());
        for gj in grads {
            accumulate(&mut g, &gj?);
        }
        scale(&mut g, 1.0 / tasks.len() as f32);
        optim.adam_step(model.tensors_mut(), &g)?;

        let mut xs: Vec<&Tensor> = tasks.iter().map(|t| &t.x).collect();
        let mut ys: Vec<usize> = tasks.iter().flat_map(|t| t.labels.iter().copied()).collect();
        if let Some(tq) = &tq {
            xs.insert(0, &tq.x);
            ys.splice(0..0, tq.labels.iter().copied());
        }
        let feats = model.forward(&Tensor::concat_rows(&xs)?)?.features;
        centers.update(&feats, &ys)?;
        report.epochs.push(AdaptEpoch {
            epoch,
            q_size: q.len(),
            q_counts: q.class_counts.clone(),
            fallback: false,
            eval_acc: eval_acc(&model, eval)?,
        });
    }
    Ok(AdaptOutput {
        params: model,
        centers,
        report,
    })
}

/// Writes `epoch,q_size,q_class_0..,fallback,eval_acc`.
pub fn write_adapt_csv(path: &Path, report: &AdaptReport) -> Result<()> {
    let k = report.q_counts.len();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "q_size".to_string()];
    header.extend((0..k).map(|c| format!("q_class_{c}")));
    header.extend(["fallback".to_string(), "eval_acc".to_string()]);
    w.write_record(&header)?;
    for e in &report.epochs {
        let mut row = vec![e.epoch.to_string(), e.q_size.to_string()];
        row.extend((0..k).map(|c| e.q_counts.get(c).copied().unwrap_or(0).to_string()));
        row.push(u8::from(e.fallback).to_string());
        row.push(e.eval_acc.map_or(String::new(), |a| format!("{a:.6}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(label: usize, confidence: f64, distance: f64) -> PseudoSample {
        PseudoSample {
            index: 0,
            label,
            confidence,
            distance,
        }
    }

    #[test]
    fn outputs_to_pseudo_labels() {
        let out = ForwardResult {
            probs: Tensor::from_rows(&[&[0.95, 0.05], &[0.5, 0.5]]),
            features: Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]),
        };
        let centers = ClassCenters::zeros(2, 2);
        let p = label_outputs(&out, &centers).unwrap();
        assert_eq!(p[0].label, 0);
        assert!((p[0].confidence - 0.95).abs() < 1e-7);
        assert_eq!(p[0].distance, 0.0);
        assert_eq!(p[1].label, 0);
        assert_eq!(p[1].distance, 0.5);
    }

    #[test]
    fn support_filter_is_strict() {
        let pseudo = [ps(0, 0.95, 0.5), ps(1, 0.95, 1.5), ps(1, 0.85, 0.2), ps(0, 0.9, 0.1), ps(1, 0.99, 1.0)];
        let q = build_support_set(&pseudo, 0.9, 1.0, 2);
        assert_eq!(q.members, vec![pseudo[0]]);
        assert_eq!(q.class_counts, vec![1, 0]);
        assert!(build_support_set(&pseudo, 0.999, 1.0, 2).is_empty());
    }

    #[test]
    fn balance_min_rule_and_single_class() {
        let mut members: Vec<PseudoSample> = (0..10).map(|i| PseudoSample { index: i, ..ps(0, 1.0, 0.0) }).collect();
        members.extend((10..14).map(|i| PseudoSample { index: i, ..ps(1, 1.0, 0.0) }));
        let q = SupportSet {
            members,
            class_counts: vec![10, 4],
        };
        let b = balance_subsample(&q, 4, 64, 7);
        assert_eq!(b.total(), 8);
        assert_eq!(b.batches.len(), 4);
        assert_eq!(b, balance_subsample(&q, 4, 64, 7));
        let single = SupportSet {
            members: (0..6).map(|i| PseudoSample { index: i, ..ps(0, 1.0, 0.0) }).collect(),
            class_counts: vec![6, 0],
        };
        let b = balance_subsample(&single, 4, 64, 7);
        assert_eq!(b.total(), 6);
        assert!(b.single_class);
        assert!(balance_subsample(&SupportSet::default(), 4, 64, 7).batches.is_empty());
    }
}
