//! SGD with classical momentum and decoupled-by-channel weight decay.

use crate::scalar::Scalar;
use crate::tape::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Scalar> SgdConfig<T> {
    pub fn plain(lr: T) -> Self {
        SgdConfig {
            lr,
            momentum: T::zero(),
            weight_decay: T::zero(),
        }
    }
}

/// One update over the given parameters, in the given order:
///
///   v     <- momentum * v + (grad + weight_decay * value)
///   value <- value - lr * v
///
/// Gradients are zeroed afterwards. The L2 penalty enters only through the
/// weight_decay term here; reported losses stay data-only.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId], cfg: &SgdConfig<T>) {
    for &id in ids {
        let p = store.param_mut_for_update(id);
        let (value, grad, velocity) = p;
        for i in 0..value.len() {
            let g = grad[i] + cfg.weight_decay * value[i];
            let v = cfg.momentum * velocity[i] + g;
            velocity[i] = v;
            value[i] = value[i] - cfg.lr * v;
            grad[i] = T::zero();
        }
    }
}
