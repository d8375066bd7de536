//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::NumericsError;

/// First/second moment estimates keyed by parameter name.
/// Moment matrices are created lazily on the first update of each parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over named parameters. Parameters without an entry in
/// `grads` are treated as having zero gradient.
pub fn adam_step(
    params: &mut [(&'static str, &mut Matrix)],
    grads: &BTreeMap<String, Matrix>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NumericsError> {
    for (name, param) in params.iter() {
        if let Some(g) = grads.get(*name) {
            if g.shape() != param.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: format!("{:?}", param.shape()),
                    rhs: format!("{:?}", g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFiniteGradient { name: name.to_string() });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (name, param) in params.iter_mut() {
        let zero = Matrix::zeros(param.rows(), param.cols());
        let g = grads.get(*name).unwrap_or(&zero);
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(param.rows(), param.cols()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(param.rows(), param.cols()));

        for i in 0..param.len() {
            let gi = g.values()[i];
            let mi = state.beta1 * m.values()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.values()[i] + (1.0 - state.beta2) * gi * gi;
            m.values_mut()[i] = mi;
            v.values_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            param.values_mut()[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>, max_norm: f64) -> f64 {
    let sq_sum: f64 = grads
        .values()
        .map(|g| g.values().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq_sum.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.values_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
