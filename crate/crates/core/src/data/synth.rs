//! Synthetic multi-subject signals with a controllable inter-subject shift.
//!
//! Every class has a smooth `C×T` prototype with RMS `class_separation`.
//! Subject `s` sees prototype `P` as `A_s·P + B_s`, where
//! `A_s = I + shift_scale·G_s/√C` mixes channels and `B_s` is a smooth bias
//! field with RMS `shift_scale·bias_scale`. Each sample adds white Gaussian
//! noise with standard deviation `noise_sd`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::SubjectDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, EngineRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub time_len: usize,
    pub samples_per_subject: usize,
    pub shift_scale: f64,
    /// RMS of each class prototype.
    pub class_separation: f64,
    /// RMS of the subject bias field per unit of `shift_scale`.
    pub bias_scale: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_subjects: 8,
            n_classes: 2,
            channels: 32,
            time_len: 128,
            samples_per_subject: 192,
            shift_scale: 2.2,
            class_separation: 0.05,
            bias_scale: 0.02,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 || self.channels == 0 || self.time_len == 0 {
            return bad("n_subjects, channels and time_len must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.samples_per_subject < self.n_classes {
            return bad(format!(
                "samples_per_subject ({}) is smaller than n_classes ({})",
                self.samples_per_subject, self.n_classes
            ));
        }
        if !(self.shift_scale >= 0.0 && self.shift_scale.is_finite()) {
            return bad(format!("shift_scale must be finite and non-negative, got {}", self.shift_scale));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return bad(format!("class_separation must be positive, got {}", self.class_separation));
        }
        if !(self.bias_scale >= 0.0 && self.bias_scale.is_finite()) {
            return bad(format!("bias_scale must be finite and non-negative, got {}", self.bias_scale));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be finite and non-negative, got {}", self.noise_sd));
        }
        Ok(())
    }
}

/// Noise-free class means of one subject, for likelihood classification.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTruth {
    pub subject_id: String,
    /// One `C×T` mean per class.
    pub class_means: Vec<Vec<f64>>,
    pub noise_sd: f64,
}

impl SubjectTruth {
    /// Maximum-likelihood class under isotropic Gaussian noise (nearest mean).
    pub fn classify(&self, sample: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, mean) in self.class_means.iter().enumerate() {
            let d: f64 = mean.iter().zip(sample).map(|(m, &x)| (x as f64 - m).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

/// A sum of a few Gaussian-windowed sinusoids in time times cosine patterns
/// over channels.
fn smooth_field(r: &mut EngineRng, c: usize, t: usize, components: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * t];
    for _ in 0..components {
        let center = r.random_range(0.2..0.8) * t as f64;
        let width = r.random_range(0.05..0.2) * t as f64;
        let freq = r.random_range(1.0..6.0);
        let phase = r.random_range(0.0..std::f64::consts::TAU);
        let sfreq = r.random_range(0.0..2.0);
        let sphase = r.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = r.sample(StandardNormal);
        let temporal: Vec<f64> = (0..t)
            .map(|i| {
                let u = i as f64;
                (-(u - center).powi(2) / (2.0 * width * width)).exp()
                    * (std::f64::consts::TAU * freq * u / t as f64 + phase).sin()
            })
            .collect();
        for ch in 0..c {
            let s = amp * (std::f64::consts::PI * sfreq * ch as f64 / c as f64 + sphase).cos();
            for (o, &tv) in out[ch * t..(ch + 1) * t].iter_mut().zip(&temporal) {
                *o += s * tv;
            }
        }
    }
    out
}

fn normalize_rms(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

pub fn synth_generate(config: &SynthConfig) -> Result<Vec<SubjectDataset>> {
    Ok(synth_generate_with_truth(config)?.into_iter().map(|(d, _)| d).collect())
}

/// Like [`synth_generate`], also returning each subject's class means.
pub fn synth_generate_with_truth(config: &SynthConfig) -> Result<Vec<(SubjectDataset, SubjectTruth)>> {
    config.validate()?;
    let (c, t, k) = (config.channels, config.time_len, config.n_classes);
    let mut proto_rng = rng(derive_seed(&[config.seed, 0]));
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let mut p = smooth_field(&mut proto_rng, c, t, 3);
            normalize_rms(&mut p);
            p.iter().map(|v| config.class_separation * v).collect()
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(config.n_subjects);
    for s in 0..config.n_subjects {
        let mut r = rng(derive_seed(&[config.seed, 1, s as u64]));
        let scale = config.shift_scale / (c as f64).sqrt();
        let mut mix = vec![0.0; c * c];
        for (i, m) in mix.iter_mut().enumerate() {
            let g: f64 = r.sample(StandardNormal);
            *m = g * scale + if i / c == i % c { 1.0 } else { 0.0 };
        }
        let mut bias = smooth_field(&mut r, c, t, 2);
        normalize_rms(&mut bias);
        let bias_gain = config.shift_scale * config.bias_scale;
        let means: Vec<Vec<f64>> = prototypes
            .iter()
            .map(|p| {
                let mut m = vec![0.0; c * t];
                for i in 0..c {
                    let row = &mut m[i * t..(i + 1) * t];
                    for j in 0..c {
                        let a = mix[i * c + j];
                        if a != 0.0 {
                            for (o, &pv) in row.iter_mut().zip(&p[j * t..(j + 1) * t]) {
                                *o += a * pv;
                            }
                        }
                    }
                    for (o, &b) in row.iter_mut().zip(&bias[i * t..(i + 1) * t]) {
                        *o += bias_gain * b;
                    }
                }
                m
            })
            .collect();
        let n = config.samples_per_subject;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut data = Vec::with_capacity(n * c * t);
        for &y in &labels {
            for &m in &means[y] {
                let e = if config.noise_sd > 0.0 { noise.sample(&mut r) } else { 0.0 };
                data.push((m + e) as f32);
            }
        }
        let id = format!("s{:02}", s + 1);
        let samples = Tensor::new(vec![n, c, t], data)?;
        let dataset = SubjectDataset::new(id.clone(), samples, labels, k)?;
        out.push((
            dataset,
            SubjectTruth {
                subject_id: id,
                class_means: means,
                noise_sd: config.noise_sd,
            },
        ));
    }
    Ok(out)
}
