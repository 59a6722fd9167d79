//! Subject datasets, the MSHD file format, LOSO and few-shot splitting, and
//! the synthetic subject-shift generator.

mod format;
mod split;
mod synth;

pub use format::{export_labels_csv, load_dataset, load_datasets, save_dataset, save_datasets, MAGIC, VERSION};
pub use split::{few_shot_sample, loso_split, EvalSet, FewShotSplit, LabeledSet, LosoSplit, UnlabeledSet};
pub use synth::{synth_generate, synth_generate_with_truth, SubjectTruth, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One subject's samples (`N×C×T`) and integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectDataset {
    pub subject_id: String,
    samples: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl SubjectDataset {
    pub fn new(subject_id: impl Into<String>, samples: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let subject_id = subject_id.into();
        if samples.ndim() != 3 {
            return Err(Error::shape(
                "subject_dataset",
                format!("subject {subject_id}: samples must be N×C×T, got {:?}", samples.shape()),
            ));
        }
        if labels.len() != samples.shape()[0] {
            return Err(Error::Data(format!(
                "subject {subject_id}: {} labels for {} samples",
                labels.len(),
                samples.shape()[0]
            )));
        }
        if n_classes == 0 {
            return Err(Error::Data(format!("subject {subject_id}: n_classes must be positive")));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Data(format!(
                "subject {subject_id}: label {bad} outside [0, {n_classes})"
            )));
        }
        Ok(SubjectDataset {
            subject_id,
            samples,
            labels,
            n_classes,
        })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn time_len(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// True when some class has no samples.
    pub fn is_degenerate(&self) -> bool {
        self.class_counts().contains(&0)
    }

    /// Sample indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.n_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }

    /// `(samples, labels)` for the given indices.
    pub fn subset(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.samples.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}
