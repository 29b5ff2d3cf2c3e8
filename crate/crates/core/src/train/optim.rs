use serde::{Deserialize, Serialize};

use crate::net::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

/// Moment buffers for the parameters one optimizer owns, indexed like the
/// parameter store. Buffers are created on the first gradient a parameter
/// receives; a parameter that never gets a gradient is never touched.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: usize) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            step: 0,
            first: vec![None; params],
            second: vec![None; params],
        }
    }

    /// Apply one update. `grads[j]` is the gradient of parameter `j`, or
    /// `None` when the loss does not depend on it.
    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.step += 1;
        let lr = self.learning_rate;
        // bias corrections in f64 so tiny steps stay accurate in f32
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (j, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let p = params.entries[j].value.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let m = self.first[j].get_or_insert_with(|| vec![T::zero(); grad.len()]);
                    let v = self.second[j].get_or_insert_with(|| vec![T::zero(); grad.len()]);
                    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
                    let step_size = T::from_f64(lr / bc1);
                    let (sqrt_bc2, eps) = (T::from_f64(bc2.sqrt()), T::from_f64(ADAM_EPS));
                    for k in 0..grad.len() {
                        let gk = grad[k];
                        m[k] = b1 * m[k] + (T::one() - b1) * gk;
                        v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                        p[k] = p[k] - step_size * m[k] / (v[k].sqrt() / sqrt_bc2 + eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let buf = self.first[j].get_or_insert_with(|| vec![T::zero(); grad.len()]);
                    let (mu, lr) = (T::from_f64(SGD_MOMENTUM), T::from_f64(lr));
                    for k in 0..grad.len() {
                        buf[k] = mu * buf[k] + grad[k];
                        p[k] = p[k] - lr * buf[k];
                    }
                }
            }
        }
    }
}
