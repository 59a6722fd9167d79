//! Central finite-difference checks of backbone gradients.
//!
//! The numeric side runs an independent float64 forward pass, so steps small
//! enough to stay clear of ReLU and max-pool kinks are not lost to f32
//! rounding.

use rand::Rng;

use crate::backbones::{BackboneKind, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::objectives::{ClassCenters, Reduction, LOG_CLAMP};
use crate::rng::rng;
use crate::tensor::{fnv, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Allowed `|g_analytic − g_numeric| / max(1, |g_numeric|)`.
    pub tol: f64,
    /// Coordinates checked per parameter block.
    pub coords_per_block: usize,
    /// Candidate coordinates drawn per block before giving up, counting
    /// the ones rejected for straddling a ReLU or max-pool kink.
    pub max_draws_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-6,
            tol: 1e-4,
            coords_per_block: 4,
            max_draws_per_block: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±h perturbation changed the ReLU/max-pool branch
    /// pattern; central differences are not a valid oracle there.
    pub skipped_kinks: usize,
    pub max_rel_dev: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.blocks.iter().all(|b| b.pass)
    }

    pub fn max_rel_dev(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_dev).fold(0.0, f64::max)
    }
}

/// Compares backpropagated joint-loss gradients against central
/// differences on a random subset of coordinates of every block.
pub fn grad_check(
    model: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    centers: &ClassCenters,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = model.loss_and_grad(x, labels, centers, Reduction::Mean)?.grads;
    grad_check_against(model, x, labels, centers, &analytic, cfg)
}

/// As [`grad_check`], but against caller-supplied analytic gradients.
pub fn grad_check_against(
    model: &ModelParams,
    x: &Tensor,
    labels: &[usize],
    centers: &ClassCenters,
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if analytic.len() != model.tensors().len() {
        return Err(Error::shape("grad_check", "one analytic gradient per parameter block required"));
    }
    // Validates input, labels and center shapes once.
    model.loss_and_grad(x, labels, centers, Reduction::Mean)?;
    let mut params: Vec<Vec<f64>> = model
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let spec = model.spec();
    let (_, base_sig) = reference_loss(spec, &params, x, labels, centers);
    let mut rng = rng(cfg.seed);
    let mut blocks = Vec::with_capacity(params.len());
    for (b, name) in model.names().iter().enumerate() {
        let numel = params[b].len();
        let mut report = BlockReport {
            name: name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_dev: 0.0,
            pass: false,
        };
        let mut draws = 0;
        while report.checked < cfg.coords_per_block.min(numel) && draws < cfg.max_draws_per_block {
            draws += 1;
            let i = rng.random_range(0..numel);
            let orig = params[b][i];
            params[b][i] = orig + cfg.h;
            let (lp, sp) = reference_loss(spec, &params, x, labels, centers);
            params[b][i] = orig - cfg.h;
            let (lm, sm) = reference_loss(spec, &params, x, labels, centers);
            params[b][i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.h);
            let ga = analytic[b].data()[i] as f64;
            let dev = (ga - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_dev = report.max_rel_dev.max(dev);
            report.checked += 1;
        }
        report.pass = report.checked > 0 && report.max_rel_dev <= cfg.tol;
        blocks.push(report);
    }
    Ok(GradCheckReport { blocks })
}

/// Running hash of the ReLU signs and max-pool winners.
struct Kinks(u64);

impl Kinks {
    fn relu(&mut self, v: &mut [f64]) {
        for chunk in v.chunks_mut(64) {
            let mut bits = 0u64;
            for (i, x) in chunk.iter_mut().enumerate() {
                if *x > 0.0 {
                    bits |= 1 << i;
                } else {
                    *x = 0.0;
                }
            }
            self.0 = fnv(self.0, &bits.to_le_bytes());
        }
    }

    /// Pairwise max over the last axis of width `w`, dropping an odd tail.
    fn pool(&mut self, v: &[f64], w: usize) -> Vec<f64> {
        let ow = w / 2;
        let mut out = Vec::with_capacity(v.len() / w * ow);
        for row in v.chunks(w) {
            let mut bits = 0u64;
            for j in 0..ow {
                let right = row[2 * j + 1] > row[2 * j];
                if right {
                    bits |= 1 << (j % 64);
                }
                out.push(if right { row[2 * j + 1] } else { row[2 * j] });
                if j % 64 == 63 || j + 1 == ow {
                    self.0 = fnv(self.0, &bits.to_le_bytes());
                    bits = 0;
                }
            }
        }
        out
    }
}

/// Valid, stride-1 convolution of one `c_in×h×w` sample with kernels
/// `c_out×c_in×kh×kw`.
fn conv(x: &[f64], (c_in, h, w): (usize, usize, usize), k: &[f64], bias: &[f64], (kh, kw): (usize, usize)) -> Vec<f64> {
    let c_out = bias.len();
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        let dst = &mut out[co * oh * ow..(co + 1) * oh * ow];
        dst.iter_mut().for_each(|o| *o = bias[co]);
        for ci in 0..c_in {
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = k[((co * c_in + ci) * kh + dy) * kw + dx];
                    for y in 0..oh {
                        let src = &x[(ci * h + y + dy) * w + dx..][..ow];
                        for (o, &s) in dst[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                            *o += kv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `x·W + b` for one row, `W` stored `d_in×d_out`.
fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * b.len()..(i + 1) * b.len()]) {
            *o += xi * wv;
        }
    }
    out
}

fn features(spec: &ModelSpec, p: &[Vec<f64>], x: &[f64], kinks: &mut Kinks) -> Vec<f64> {
    let (c, t) = (spec.channels, spec.time_len);
    match spec.kind {
        BackboneKind::Mlp => {
            let mut h = dense(x, &p[0], &p[1]);
            kinks.relu(&mut h);
            h
        }
        BackboneKind::Stnn => {
            let s = spec.stnn_spatial;
            let mut out = Vec::with_capacity(s * spec.stnn_temporal);
            for (filter, &bias) in p[1].iter().enumerate() {
                let mut row = vec![bias; t];
                for ch in 0..c {
                    let wv = p[0][filter * c + ch];
                    for (o, &xv) in row.iter_mut().zip(&x[ch * t..(ch + 1) * t]) {
                        *o += wv * xv;
                    }
                }
                out.extend(dense(&row, &p[2], &p[3]));
            }
            out
        }
        BackboneKind::Cnn => {
            let mut h = x.to_vec();
            let (mut c_in, mut width) = (1, t);
            for layer in 0..4 {
                let kw = if layer == 0 { spec.cnn_first_kernel } else { spec.cnn_kernel };
                h = conv(&h, (c_in, c, width), &p[2 * layer], &p[2 * layer + 1], (1, kw));
                c_in = spec.cnn_filters[layer];
                width = width - kw + 1;
                kinks.relu(&mut h);
                if layer < 3 {
                    h = kinks.pool(&h, width);
                    width /= 2;
                }
            }
            let mut h = conv(&h, (c_in, c, width), &p[8], &p[9], (c, 1));
            kinks.relu(&mut h);
            h
        }
    }
}

/// Float64 joint loss (mean cross-entropy) and the kink signature of the
/// forward pass, for parameters given in layout order.
fn reference_loss(
    spec: &ModelSpec,
    p: &[Vec<f64>],
    x: &Tensor,
    labels: &[usize],
    centers: &ClassCenters,
) -> (f64, u64) {
    let sample = x.row_len();
    let n = p.len();
    let mut kinks = Kinks(0xcbf2_9ce4_8422_2325);
    let (mut ce, mut cl) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        let xs: Vec<f64> = x.data()[i * sample..(i + 1) * sample].iter().map(|&v| v as f64).collect();
        let feat = features(spec, p, &xs, &mut kinks);
        let logits = dense(&feat, &p[n - 2], &p[n - 1]);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let prob = (logits[y] - max).exp() / total;
        ce -= prob.clamp(LOG_CLAMP, 1.0).ln();
        cl += 0.5
            * feat
                .iter()
                .zip(centers.center(y))
                .map(|(&h, &c)| (h - c as f64).powi(2))
                .sum::<f64>();
    }
    let mut loss = ce / labels.len() as f64;
    if centers.lambda != 0.0 {
        loss += centers.lambda as f64 * cl;
    }
    (loss, kinks.0)
}
