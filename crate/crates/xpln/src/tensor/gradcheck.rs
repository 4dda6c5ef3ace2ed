use crate::error::Result;
use crate::scalar::Scalar;

use super::Tensor;

/// Central-difference gradients of a scalar-valued function w.r.t. every
/// element of every leaf, used to validate the analytic backward pass.
///
/// `f` must rebuild its graph from the leaves it is handed; each call sees one
/// element perturbed by `±h`.
pub fn finite_difference<S, F>(f: F, leaves: &[Tensor<S>], h: f64) -> Result<Vec<Vec<f64>>>
where
    S: Scalar,
    F: Fn(&[Tensor<S>]) -> Result<Tensor<S>>,
{
    let mut out = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut grad = Vec::with_capacity(leaf.numel());
        for j in 0..leaf.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = leaf.data().to_vec();
                data[j] = data[j] + S::from_f64(delta);
                let perturbed = Tensor::leaf(leaf.shape(), data)?;
                let mut set: Vec<Tensor<S>> = leaves.to_vec();
                set[li] = perturbed;
                Ok(f(&set)?.item()?.to_f64())
            };
            let plus = eval(h)?;
            let minus = eval(-h)?;
            grad.push((plus - minus) / (2.0 * h));
        }
        out.push(grad);
    }
    Ok(out)
}
