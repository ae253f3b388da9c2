use crate::error::{invalid, Error, Result};

/// Moment estimates for every parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    beta1_pow: f64,
    beta2_pow: f64,
}

impl AdamState {
    /// Fresh state for parameter groups of the given lengths.
    pub fn new(lengths: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            beta1_pow: 1.0,
            beta2_pow: 1.0,
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient
/// is non-finite.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate {lr} must be positive")));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(invalid(format!(
            "adam got {} parameter groups, {} gradient groups, state for {}",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (gi, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first[gi].len() {
            return Err(invalid(format!("adam group {gi} length mismatch")));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at group {gi} index {i} (step {})",
                state.step + 1
            )));
        }
    }

    state.step += 1;
    state.beta1_pow *= state.beta1;
    state.beta2_pow *= state.beta2;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - state.beta1_pow;
    let c2 = 1.0 - state.beta2_pow;
    for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[gi];
        let v = &mut state.second[gi];
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
