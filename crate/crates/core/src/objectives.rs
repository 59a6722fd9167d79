//! Classification and center losses, the class-center update rule, and the
//! normalized feature distance used to filter pseudo-labels.

use crate::error::{Error, Result};
use crate::tape::{GradTape, NodeId};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

pub const DEFAULT_CENTER_LR: f32 = 0.001;
pub const DEFAULT_CENTER_WEIGHT: f32 = 0.001;

/// How the cross-entropy term is reduced over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::Config(format!("unknown reduction `{other}` (mean|sum)"))),
        }
    }
}

/// One feature-space center per class, plus the center learning rate and
/// the weight of the center term in the joint loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters {
    centers: Tensor,
    pub lr: f32,
    pub lambda: f32,
}

impl ClassCenters {
    /// Zero-initialized centers for `n_classes` classes of width `width`.
    pub fn zeros(n_classes: usize, width: usize) -> Self {
        ClassCenters {
            centers: Tensor::zeros(&[n_classes, width]),
            lr: DEFAULT_CENTER_LR,
            lambda: DEFAULT_CENTER_WEIGHT,
        }
    }

    pub fn from_tensor(centers: Tensor, lr: f32, lambda: f32) -> Result<Self> {
        if centers.ndim() != 2 {
            return Err(Error::shape(
                "class_centers",
                format!("expected K×n, got {:?}", centers.shape()),
            ));
        }
        if !centers.is_finite() {
            return Err(Error::Data("class centers contain non-finite values".into()));
        }
        Ok(ClassCenters { centers, lr, lambda })
    }

    pub fn with_rates(mut self, lr: f32, lambda: f32) -> Self {
        self.lr = lr;
        self.lambda = lambda;
        self
    }

    pub fn n_classes(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.centers
    }

    pub fn center(&self, class: usize) -> &[f32] {
        self.centers.row(class)
    }

    /// Applies `c_j ← c_j − lr · Δc_j` for every class, where
    /// `Δc_j = Σ_i δ(y_i = j)(c_j − h_i) / (1 + Σ_i δ(y_i = j))`.
    /// Classes absent from the batch keep their centers.
    pub fn update(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        check_features(features, labels, &self.centers, "update_centers")?;
        let n = self.width();
        let k = self.n_classes();
        let mut delta = vec![0f64; k * n];
        let mut counts = vec![0usize; k];
        for (i, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            let c = self.centers.row(y);
            for ((d, &cj), &h) in delta[y * n..(y + 1) * n].iter_mut().zip(c).zip(features.row(i)) {
                *d += cj as f64 - h as f64;
            }
        }
        let lr = self.lr as f64;
        let data = self.centers.data_mut();
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let denom = 1.0 + counts[j] as f64;
            for (c, &d) in data[j * n..(j + 1) * n].iter_mut().zip(&delta[j * n..(j + 1) * n]) {
                *c = (*c as f64 - lr * (d / denom)) as f32;
            }
        }
        Ok(())
    }
}

/// Functional form of [`ClassCenters::update`].
pub fn update_centers(centers: &ClassCenters, features: &Tensor, labels: &[usize]) -> Result<ClassCenters> {
    let mut next = centers.clone();
    next.update(features, labels)?;
    Ok(next)
}

fn check_labels(labels: &[usize], rows: usize, classes: usize, op: &'static str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(op, format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("{op}: label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn check_features(features: &Tensor, labels: &[usize], centers: &Tensor, op: &'static str) -> Result<()> {
    if features.ndim() != 2 || features.shape()[1] != centers.shape()[1] {
        return Err(Error::shape(
            op,
            format!("features {:?} vs centers {:?}", features.shape(), centers.shape()),
        ));
    }
    check_labels(labels, features.shape()[0], centers.shape()[0], op)
}

/// Mean of `−log p[i, y_i]` over the batch, `p` clamped to `[1e-12, 1]`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with(probs, labels, Reduction::Mean)
}

pub fn cross_entropy_with(probs: &Tensor, labels: &[usize], reduction: Reduction) -> Result<f64> {
    if probs.ndim() != 2 {
        return Err(Error::shape("cross_entropy", format!("expected m×K, got {:?}", probs.shape())));
    }
    let (m, k) = (probs.shape()[0], probs.shape()[1]);
    check_labels(labels, m, k, "cross_entropy")?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(probs.data()[i * k + y] as f64).clamp(LOG_CLAMP, 1.0).ln())
        .sum();
    Ok(match reduction {
        Reduction::Mean => total / m as f64,
        Reduction::Sum => total,
    })
}

pub(crate) fn cross_entropy_grad(probs: &Tensor, labels: &[usize], reduction: Reduction, seed: f64) -> Tensor {
    let (m, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = match reduction {
        Reduction::Mean => seed / m as f64,
        Reduction::Sum => seed,
    };
    let mut g = Tensor::zeros(probs.shape());
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.data()[i * k + y] as f64;
        // Inside the clamp the loss is constant.
        if p > LOG_CLAMP {
            g.data_mut()[i * k + y] = (-scale / p) as f32;
        }
    }
    g
}

/// `½ Σ_i ‖h_i − c_{y_i}‖²`, summed over the batch.
pub fn center_loss(features: &Tensor, labels: &[usize], centers: &ClassCenters) -> Result<f64> {
    center_loss_raw(features, labels, centers.tensor())
}

pub(crate) fn center_loss_raw(features: &Tensor, labels: &[usize], centers: &Tensor) -> Result<f64> {
    check_features(features, labels, centers, "center_loss")?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| 0.5 * sq_dist(features.row(i), centers.row(y)))
        .sum())
}

pub(crate) fn center_loss_grad(features: &Tensor, labels: &[usize], centers: &Tensor, seed: f64) -> Tensor {
    let n = features.shape()[1];
    let mut g = Tensor::zeros(features.shape());
    for (i, &y) in labels.iter().enumerate() {
        let dst = &mut g.data_mut()[i * n..(i + 1) * n];
        for ((d, &h), &c) in dst.iter_mut().zip(features.row(i)).zip(centers.row(y)) {
            *d = (seed * (h as f64 - c as f64)) as f32;
        }
    }
    g
}

/// `L_S + λ·L_C` with the cross-entropy averaged over the batch.
pub fn joint_loss(probs: &Tensor, features: &Tensor, labels: &[usize], centers: &ClassCenters) -> Result<f64> {
    joint_loss_with(probs, features, labels, centers, Reduction::Mean)
}

pub fn joint_loss_with(
    probs: &Tensor,
    features: &Tensor,
    labels: &[usize],
    centers: &ClassCenters,
    reduction: Reduction,
) -> Result<f64> {
    let ce = cross_entropy_with(probs, labels, reduction)?;
    if centers.lambda == 0.0 {
        return Ok(ce);
    }
    Ok(ce + centers.lambda as f64 * center_loss(features, labels, centers)?)
}

/// Records the joint loss on `tape`, returning the scalar loss node.
/// The backward pass sends `λ(h_i − c_{y_i})` into the features.
pub fn record_joint_loss(
    tape: &mut GradTape,
    probs: NodeId,
    features: NodeId,
    labels: &[usize],
    centers: &ClassCenters,
    reduction: Reduction,
) -> Result<NodeId> {
    let ce = tape.cross_entropy(probs, labels, reduction)?;
    if centers.lambda == 0.0 {
        return Ok(ce);
    }
    let cl = tape.center_loss(features, centers.tensor(), labels)?;
    tape.weighted_sum(&[(ce, 1.0), (cl, centers.lambda as f64)])
}

/// Squared distance divided by twice the feature width.
pub fn feature_distance(feature: &[f32], center: &[f32]) -> Result<f64> {
    if feature.len() != center.len() || feature.is_empty() {
        return Err(Error::shape(
            "feature_distance",
            format!("feature width {} vs center width {}", feature.len(), center.len()),
        ));
    }
    Ok(sq_dist(feature, center) / (2.0 * feature.len() as f64))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}
