use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// Per-parameter momentum buffers, created as zeros on first use.
pub type SgdState<T> = BTreeMap<String, Tensor<T>>;

/// Heavy-ball SGD: `buf = momentum·buf + grad; param −= lr·buf`.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, grad) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::config(format!("gradient for unknown parameter `{name}`")))?;
        if p.kind != ParamKind::Trainable {
            return Err(Error::config(format!("gradient for non-trainable `{name}`")));
        }
        if p.value.shape() != grad.shape() {
            return Err(Error::dim(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                grad.shape(),
                p.value.shape()
            )));
        }
    }
    let (lr, m) = (T::of(lr), T::of(momentum));
    for (name, grad) in grads {
        let buf = state
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        if buf.shape() != grad.shape() {
            return Err(Error::dim(format!("momentum buffer for `{name}` has the wrong shape")));
        }
        let p = params.get_mut(name).expect("checked above");
        for ((b, &g), w) in buf.data_mut().iter_mut().zip(grad.data()).zip(p.value.data_mut()) {
            *b = m * *b + g;
            *w = *w - lr * *b;
        }
    }
    Ok(())
}
