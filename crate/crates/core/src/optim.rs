//! SGD and Adam update rules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pairs(params: &[Tensor], grads: &[Tensor], op: &'static str) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(op, format!("{} parameter blocks, {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(op, format!("block {i}: parameter {:?}, gradient {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

/// `θ ← θ − lr · g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
    check_pairs(params, grads, "sgd_step")?;
    if lr == 0.0 {
        return Ok(());
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: `θ ← θ − lr · weight_decay · θ` before the Adam step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Adam moments and step counter for one set of parameters.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl OptimState {
    /// A state with no moments yet; call [`OptimState::init`] before stepping.
    pub fn new(config: AdamConfig) -> Self {
        OptimState {
            config,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
            step: 0,
        }
    }

    pub fn for_params(config: AdamConfig, params: &[Tensor]) -> Self {
        let mut s = Self::new(config);
        s.init(params);
        s
    }

    /// Zeroes the moments to mirror `params` and resets the step counter.
    pub fn init(&mut self, params: &[Tensor]) {
        self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        self.second = self.first.clone();
        self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
        self.step = 0;
    }

    pub fn is_initialized(&self) -> bool {
        !self.shapes.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if !self.is_initialized() {
            return Err(Error::Usage("adam_step on an uninitialized optimizer state".into()));
        }
        check_pairs(params, grads, "adam_step")?;
        if params.iter().zip(&self.shapes).any(|(p, s)| p.shape() != s.as_slice()) || params.len() != self.shapes.len() {
            return Err(Error::shape("adam_step", "optimizer state was initialized for different parameters"));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mut th = *theta as f64;
                if weight_decay > 0.0 {
                    th -= lr * weight_decay * th;
                }
                th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *theta = th as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_cases() {
        let mut p = vec![Tensor::scalar(1.0)];
        sgd_step(&mut p, &[Tensor::scalar(2.0)], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-7);
        sgd_step(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
        sgd_step(&mut p, &[Tensor::scalar(5.0)], 0.0).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-7);
        assert!(sgd_step(&mut p, &[Tensor::zeros(&[2])], 0.1).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut s = OptimState::for_params(AdamConfig::with_lr(0.001), &p);
        s.adam_step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        assert!((p[0].data()[0] as f64 - (0.5 - 0.001)).abs() < 1e-7);
    }

    #[test]
    fn adam_zero_gradient_no_decay_is_identity() {
        let mut p = vec![Tensor::full(&[3], 0.25)];
        let mut s = OptimState::for_params(AdamConfig::default(), &p);
        for _ in 0..5 {
            s.adam_step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p[0].data(), &[0.25; 3]);
    }

    #[test]
    fn uninitialized_state_is_rejected() {
        let mut p = vec![Tensor::scalar(0.5)];
        let mut s = OptimState::new(AdamConfig::default());
        assert!(matches!(s.adam_step(&mut p, &[Tensor::scalar(1.0)]), Err(Error::Usage(_))));
    }

    #[test]
    fn decoupled_decay_shrinks_norm() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let cfg = AdamConfig {
            weight_decay: 0.01,
            lr: 0.01,
            ..Default::default()
        };
        let mut s = OptimState::for_params(cfg, &p);
        let mut last = p[0].sum_sq();
        for _ in 0..20 {
            s.adam_step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
            let now = p[0].sum_sq();
            assert!(now < last);
            last = now;
        }
    }
}
