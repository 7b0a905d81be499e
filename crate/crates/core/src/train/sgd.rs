use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T: Scalar = f32> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
///
/// Parameters without an entry in `grads` are left untouched, including
/// their weight decay.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut SgdState<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else {
            continue;
        };
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        if v.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd momentum buffer",
                left: v.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Step schedule: `base_lr · factor^(number of decay epochs ≤ epoch)`,
/// epochs counted from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * self.factor.powi(k as i32)
    }
}
