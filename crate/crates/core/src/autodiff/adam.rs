use super::{ParameterSet, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers of the Adam optimizer, shape-matched to a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            config,
        }
    }

    fn check_matches(&self, params: &ParameterSet) -> Result<(), TensorError> {
        if self.first_moment.len() != params.len() || self.second_moment.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "optimizer tracks {} tensors, parameter set has {}",
                    self.first_moment.len(),
                    params.len()
                ),
            });
        }
        for (i, (name, t)) in params.iter().enumerate() {
            for m in [&self.first_moment[i], &self.second_moment[i]] {
                if m.shape() != t.shape() {
                    return Err(TensorError::Invalid {
                        op: "adam_step",
                        msg: format!("moment shape {:?} does not match `{name}` {:?}", m.shape(), t.shape()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter, followed by zeroing the gradients.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState) -> Result<(), TensorError> {
    state.check_matches(params)?;
    if let Some(i) = (0..params.len()).find(|&i| !params.is_touched(i)) {
        return Err(TensorError::MissingGradient(params.name(i).to_string()));
    }
    let AdamConfig {
        learning_rate: lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let grad = params.tensor(i).grad().expect("parameters carry gradients").to_vec();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params.tensor_mut(i).data_mut();
        for j in 0..p.len() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    params.zero_grad();
    Ok(())
}
