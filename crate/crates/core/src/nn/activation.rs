use super::tensor::Tensor4;
use crate::error::Result;

pub fn relu(input: &Tensor4) -> Tensor4 {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    input.same_dims(grad_out, "relu backward")?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::new(input.dims(), data)
}
