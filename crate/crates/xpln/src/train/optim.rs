//! Adaptive-moment optimizer. Moment buffers are kept in the parameter
//! dtype and aligned with the parameter list, so serializing them round-trips
//! exactly and resumed runs continue bit-for-bit.

use crate::error::Result;
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub t: u64,
    /// First/second moment per parameter tensor, in `leaves()` order.
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let sizes: Vec<usize> = params.leaves().iter().map(|(_, t)| t.numel()).collect();
        Self {
            t: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// One update over all parameters; `grads` is aligned with `leaves()`
    /// (missing gradients are passed as zeros by the caller, so moments keep
    /// decaying regardless of which loss terms reach a parameter).
    pub fn step(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &[Vec<S>],
        cfg: &AdamConfig,
        lr_scale: f64,
    ) -> Result<()> {
        self.t += 1;
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one = S::one();
        let eps = S::from_f64(cfg.eps);
        let corr1 = S::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = S::from_f64(cfg.lr * lr_scale);
        let leaves = params.leaves();
        let mut updated = Vec::with_capacity(leaves.len());
        for (i, (name, tensor)) in leaves.iter().enumerate() {
            let g = &grads[i];
            if g.len() != tensor.numel() {
                return Err(crate::Error::Shape(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    tensor.numel()
                )));
            }
            let mut data = tensor.data().to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / corr1;
                let vh = v[j] / corr2;
                data[j] = data[j] - lr * mh / (vh.sqrt() + eps);
            }
            updated.push(Tensor::leaf(tensor.shape(), data)?);
        }
        params.set_leaves(updated)
    }
}

/// Read a backward pass into the `leaves()`-aligned layout `Adam::step`
/// expects; parameters the loss never reached get zero gradients.
pub fn aligned_grads<S: Scalar>(
    params: &ModelParams<S>,
    grads: &crate::tensor::Gradients<S>,
) -> Vec<Vec<S>> {
    params
        .leaves()
        .iter()
        .map(|(_, t)| match grads.wrt(t) {
            Some(g) => g.to_vec(),
            None => vec![S::zero(); t.numel()],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParams<f64> {
        let cfg = ModelConfig {
            maps: 3,
            labels: 2,
            input: (16, 16),
            in_channels: 1,
            encoder_widths: vec![4, 8],
            decoder_width: 4,
            seed: 3,
        };
        ModelParams::init(&cfg).unwrap()
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut params = tiny();
        let before: Vec<Vec<f64>> =
            params.leaves().iter().map(|(_, t)| t.data().to_vec()).collect();
        let img = Tensor::leaf(&[1, 16, 16], vec![0.5; 256]).unwrap();
        let out = params.forward_full(&img).unwrap();
        let grads = out.probs.sum_all().backward().unwrap();
        let aligned = aligned_grads(&params, &grads);
        let mut adam = Adam::new(&params);
        let cfg = AdamConfig { lr: 0.0, ..AdamConfig::default() };
        adam.step(&mut params, &aligned, &cfg, 1.0).unwrap();
        for ((_, t), b) in params.leaves().iter().zip(&before) {
            assert_eq!(t.data(), b.as_slice());
        }
    }

    #[test]
    fn step_moves_against_the_gradient() {
        let mut params = tiny();
        let img = Tensor::leaf(
            &[1, 16, 16],
            (0..256).map(|i| 0.5 + 0.3 * (i as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        let loss_at = |p: &ModelParams<f64>| {
            p.forward_full(&img).unwrap().probs.sum_all().item().unwrap()
        };
        let before = loss_at(&params);
        let out = params.forward_full(&img).unwrap();
        let grads = out.probs.sum_all().backward().unwrap();
        let aligned = aligned_grads(&params, &grads);
        let mut adam = Adam::new(&params);
        adam.step(&mut params, &aligned, &AdamConfig { lr: 1e-4, ..Default::default() }, 1.0)
            .unwrap();
        assert!(loss_at(&params) < before);
    }
}
