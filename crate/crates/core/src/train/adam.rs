use crate::error::{Error, Result};
use crate::params::{NamedTensors, Parameters};

use super::AdamConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: NamedTensors,
    pub second_moment: NamedTensors,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &impl Parameters) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: NamedTensors::zeros_like(params),
            second_moment: NamedTensors::zeros_like(params),
        }
    }
}

/// One bias-corrected Adam update of `params` along `grads`.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let layout = params.layout();
    if grads.layout() != layout || state.first_moment.layout() != layout || state.second_moment.layout() != layout {
        return Err(Error::ShapeMismatch("parameters, gradients and Adam moments are not shape-parallel".into()));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let correct1 = 1.0 - beta1.powi(t);
    let correct2 = 1.0 - beta2.powi(t);

    let mut grad_tensors = Vec::new();
    grads.visit(&mut |_, _, g| grad_tensors.push(g.to_vec()));
    let mut k = 0;
    let (m_all, v_all) = (&mut state.first_moment.tensors, &mut state.second_moment.tensors);
    params.visit_mut(&mut |_, _, theta| {
        let g = &grad_tensors[k];
        let m = &mut m_all[k].data;
        let v = &mut v_all[k].data;
        for i in 0..theta.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / correct1;
            let v_hat = v[i] / correct2;
            theta[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        k += 1;
    });
    Ok(())
}
