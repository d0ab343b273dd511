//! Adam optimizer with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamHyper {
    /// lr 2e-4, beta1 0.5 — the usual conditional-GAN recipe.
    pub fn gan_defaults() -> Self {
        AdamHyper { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moment buffers plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    /// Zero-initialized moments, one buffer per parameter tensor.
    pub fn new(hyper: AdamHyper, param_sizes: &[usize]) -> Self {
        AdamState {
            hyper,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores a state saved in a checkpoint.
    pub fn restore(hyper: AdamHyper, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step_count: u64) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Dimension("adam moment buffers disagree".into()));
        }
        Ok(AdamState { hyper, m, v, step_count })
    }

    /// One Adam step over all parameters. `params` and `grads` must line up
    /// with the sizes this state was built with.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam expects {} parameter tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), mbuf) in params.iter().zip(grads).zip(&self.m) {
            if p.numel() != g.numel() || p.numel() != mbuf.len() {
                return Err(Error::Dimension(format!(
                    "adam shape mismatch: param {} / grad {} / state {}",
                    p.numel(),
                    g.numel(),
                    mbuf.len()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamHyper { learning_rate, beta1, beta2, epsilon } = self.hyper;
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = param.data_mut();
            let gd = grad.data();
            for i in 0..pd.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gd[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * gd[i] * gd[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] -= learning_rate * mhat / (libm::sqrt(vhat) + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let mut state = AdamState::new(AdamHyper::default(), &[3]);
        for _ in 0..5 {
            state.update(&mut [&mut p], &[Tensor::zeros(vec![3])]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With m=v=0 and g=1, the bias-corrected first step is
        // lr * 1 / (1 + eps), i.e. approximately -lr.
        let hyper = AdamHyper { learning_rate: 0.01, ..AdamHyper::default() };
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new(hyper, &[1]);
        state.update(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.01 * (1.0 / (1.0 + 1e-8));
        assert!((p.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_streams_stay_identical() {
        let mut p1 = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut p2 = p1.clone();
        let mut s1 = AdamState::new(AdamHyper::gan_defaults(), &[2]);
        let mut s2 = AdamState::new(AdamHyper::gan_defaults(), &[2]);
        for step in 0..20 {
            let g = Tensor::new(vec![2], vec![0.1 * step as f64, -0.05]).unwrap();
            s1.update(&mut [&mut p1], core::slice::from_ref(&g)).unwrap();
            s2.update(&mut [&mut p2], &[g]).unwrap();
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = Tensor::zeros(vec![2]);
        let mut state = AdamState::new(AdamHyper::default(), &[2]);
        assert!(state.update(&mut [&mut p], &[Tensor::zeros(vec![3])]).is_err());
        assert!(state.update(&mut [&mut p], &[]).is_err());
    }
}
