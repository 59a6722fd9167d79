//! Leave-one-subject-out splits and few-shot sampling of a target subject.

use rand::seq::SliceRandom;

use super::SubjectDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LosoSplit<'a> {
    pub sources: Vec<&'a SubjectDataset>,
    pub target: &'a SubjectDataset,
}

/// Removes subject `target_index`; the remaining subjects keep their order.
pub fn loso_split(datasets: &[SubjectDataset], target_index: usize) -> Result<LosoSplit<'_>> {
    if datasets.len() < 2 {
        return Err(Error::Data(format!("LOSO needs at least 2 subjects, got {}", datasets.len())));
    }
    if target_index >= datasets.len() {
        return Err(Error::Index(format!(
            "target index {target_index} out of range for {} subjects",
            datasets.len()
        )));
    }
    let sources = datasets
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_index)
        .map(|(_, d)| d)
        .collect();
    Ok(LosoSplit {
        sources,
        target: &datasets[target_index],
    })
}

/// Labeled target samples. `samples` is `None` when the set is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub indices: Vec<usize>,
    pub samples: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    fn gather(target: &SubjectDataset, indices: Vec<usize>) -> Self {
        if indices.is_empty() {
            return LabeledSet {
                indices,
                samples: None,
                labels: Vec::new(),
            };
        }
        let (samples, labels) = target.subset(&indices);
        LabeledSet {
            indices,
            samples: Some(samples),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Target samples whose labels are withheld from adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub indices: Vec<usize>,
    pub samples: Option<Tensor>,
    /// Ground truth, kept only for diagnostics such as pseudo-label accuracy.
    pub hidden_labels: Vec<usize>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub type EvalSet = LabeledSet;

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSplit {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub eval: EvalSet,
}

/// Splits a target subject into labeled, unlabeled and evaluation parts.
///
/// Each class is permuted once per seed. The evaluation share of each class
/// is taken from the front of that permutation, so for a fixed seed the
/// evaluation set does not depend on `n_shot`. The next `n_shot` samples are
/// labeled and the rest form the unlabeled pool.
pub fn few_shot_sample(target: &SubjectDataset, n_shot: usize, eval_fraction: f64, seed: u64) -> Result<FewShotSplit> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Config(format!("eval_fraction must be in [0, 1), got {eval_fraction}")));
    }
    let by_class = target.indices_by_class();
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < n_shot + 1 {
            return Err(Error::Data(format!(
                "subject {}: class {class} has {} samples, {}-shot sampling needs at least {}",
                target.subject_id,
                idx.len(),
                n_shot,
                n_shot + 1
            )));
        }
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut eval = Vec::new();
    for (class, idx) in by_class.iter().enumerate() {
        let mut perm = idx.clone();
        perm.shuffle(&mut rng(derive_seed(&[seed, class as u64])));
        let n_eval = ((idx.len() as f64 * eval_fraction).round() as usize).min(idx.len() - n_shot - 1);
        eval.extend_from_slice(&perm[..n_eval]);
        labeled.extend_from_slice(&perm[n_eval..n_eval + n_shot]);
        unlabeled.extend_from_slice(&perm[n_eval + n_shot..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    eval.sort_unstable();
    let unlabeled = {
        let l = LabeledSet::gather(target, unlabeled);
        UnlabeledSet {
            indices: l.indices,
            samples: l.samples,
            hidden_labels: l.labels,
        }
    };
    Ok(FewShotSplit {
        labeled: LabeledSet::gather(target, labeled),
        unlabeled,
        eval: LabeledSet::gather(target, eval),
    })
}
