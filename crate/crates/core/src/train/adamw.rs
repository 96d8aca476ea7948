//! AdamW with decoupled weight decay.

use flowct_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::net::Params;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// First/second moment buffers (same order and shapes as the parameters)
/// and the number of updates applied so far.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros = || {
            params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn matches(&self, params: &Params<T>) -> bool {
        let same = |buf: &[Tensor<T>]| {
            buf.len() == params.len()
                && buf
                    .iter()
                    .zip(&params.tensors)
                    .all(|(b, p)| b.shape() == p.shape())
        };
        same(&self.m) && same(&self.v)
    }
}

/// One update: `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps)`. Moment arithmetic is
/// carried out in `f64`. Gradients are checked for finiteness before any
/// parameter is touched.
pub fn adamw_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || !state.matches(params) {
        return Err(Error::Config(format!(
            "optimizer: {} gradients / {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.names.iter().zip(&params.tensors).zip(grads) {
        if g.shape() != p.shape() {
            return Err(Error::Config(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let k = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, g) in grads.iter().enumerate() {
        let p = params.tensors[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j].f64();
            let mj = cfg.beta1 * m[j].f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].f64() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let (m_hat, v_hat) = (mj / bc1, vj / bc2);
            p[j] = T::of(p[j].f64() * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
