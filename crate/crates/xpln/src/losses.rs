//! Training objective: binary cross-entropy on grade labels, a matching
//! auxiliary term, a squared-probability penalty on occluded inputs, and a
//! foreground-area penalty, combined linearly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` before logs.
pub const CLIP: f64 = 1e-7;

/// Mixing weights for the secondary loss terms; the primary term always has
/// weight 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.1, gamma: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Every term of one loss evaluation, still attached to the graph.
#[derive(Debug, Clone)]
pub struct LossBreakdown<S: Scalar> {
    pub primary: Tensor<S>,
    pub auxiliary: Tensor<S>,
    pub occlusion: Tensor<S>,
    pub sparsity: Tensor<S>,
    pub total: Tensor<S>,
}

impl<S: Scalar> LossBreakdown<S> {
    /// The five detached values in log order:
    /// primary, auxiliary, occlusion, sparsity, total.
    pub fn values(&self) -> [f64; 5] {
        [
            self.primary.item().expect("scalar by construction").to_f64(),
            self.auxiliary.item().expect("scalar by construction").to_f64(),
            self.occlusion.item().expect("scalar by construction").to_f64(),
            self.sparsity.item().expect("scalar by construction").to_f64(),
            self.total.item().expect("scalar by construction").to_f64(),
        ]
    }
}

/// Mean binary cross-entropy between predictions and 0/1 targets of the same
/// shape. Accepts a single prediction vector or a stacked batch; the mean runs
/// over every element either way.
pub fn primary_loss<S: Scalar>(p: &Tensor<S>, delta: &Tensor<S>) -> Result<Tensor<S>> {
    if p.shape() != delta.shape() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs targets {:?}",
            p.shape(),
            delta.shape()
        )));
    }
    let floor = S::from_f64(CLIP);
    let log_p = p.ln_clipped(floor);
    let log_q = p.affine(-S::one(), S::one()).ln_clipped(floor);
    let one_minus_delta = delta.affine(-S::one(), S::one());
    let terms = delta.mul(&log_p)?.add(&one_minus_delta.mul(&log_q)?)?;
    Ok(terms.mean_all().affine(-S::one(), S::zero()))
}

/// Same measure applied to the auxiliary head's predictions.
pub fn auxiliary_loss<S: Scalar>(p: &Tensor<S>, delta: &Tensor<S>) -> Result<Tensor<S>> {
    primary_loss(p, delta)
}

/// Mean squared prediction on lesion-erased inputs; driving this to zero means
/// nothing outside the highlighted regions supports a positive call.
pub fn occlusion_loss<S: Scalar>(p_occluded: &Tensor<S>) -> Tensor<S> {
    p_occluded.square().mean_all()
}

/// Mean foreground probability: pixel-mean of the summed non-background
/// channels of a `[M, H, W]` map stack. Lies in [0, 1] by construction.
pub fn sparsity_loss<S: Scalar>(maps: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = maps.shape();
    if shape.len() != 3 || shape[0] < 2 {
        return Err(Error::Shape(format!(
            "map stack must be [M>=2, H, W], got {shape:?}"
        )));
    }
    let (m, h, w) = (shape[0], shape[1], shape[2]);
    let fg = maps.narrow0(1, m - 1)?;
    let scale = S::from_f64(1.0 / (h * w) as f64);
    Ok(fg.sum_all().affine(scale, S::zero()))
}

/// Weighted combination; all five values stay in the graph so one backward
/// pass covers every term.
pub fn total_loss<S: Scalar>(
    primary: Tensor<S>,
    auxiliary: Tensor<S>,
    occlusion: Tensor<S>,
    sparsity: Tensor<S>,
    weights: &LossWeights,
) -> Result<LossBreakdown<S>> {
    weights.validate()?;
    let scaled_aux = auxiliary.affine(S::from_f64(weights.alpha), S::zero());
    let scaled_occ = occlusion.affine(S::from_f64(weights.beta), S::zero());
    let scaled_sp = sparsity.affine(S::from_f64(weights.gamma), S::zero());
    let total = primary.add(&scaled_aux)?.add(&scaled_occ)?.add(&scaled_sp)?;
    Ok(LossBreakdown { primary, auxiliary, occlusion, sparsity, total })
}
