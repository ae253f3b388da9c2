use super::tensor::Tensor4;
use crate::error::Result;

/// `sum_k ||target_k - pred_k||^2 / (2K)` over a batch of `K` samples, with
/// its gradient `(pred - target) / K`.
pub fn mse_loss(pred: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    pred.same_dims(target, "mse target")?;
    let k = pred.batch() as f64;
    let mut sum = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            d / k
        })
        .collect();
    Ok((sum / (2.0 * k), Tensor4::new(pred.dims(), grad)?))
}
