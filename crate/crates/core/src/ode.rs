//! Fixed-step explicit integrators for `dx/dt = v(x, t)` on `t ∈ [0, 1]`.

use flowct_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

impl Method {
    /// Velocity evaluations per step.
    pub fn stages(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Midpoint => 2,
            Method::Rk4 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps: 32,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("integrator steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One explicit step of size `h` from `(x, t)`.
pub fn step<T, F>(method: Method, v: &mut F, x: &Tensor<T>, t: f64, h: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if !(h > 0.0) || t < 0.0 || t + h > 1.0 + 1e-12 {
        return Err(Error::Domain {
            what: "step interval end",
            value: t + h,
            domain: "[0, 1] with h > 0",
        });
    }
    let hs = T::of(h);
    match method {
        Method::Euler => {
            let k1 = v(x, t)?;
            Ok(x.add_scaled(&k1, hs)?)
        }
        Method::Midpoint => {
            let k1 = v(x, t)?;
            let mid = x.add_scaled(&k1, T::of(h / 2.0))?;
            let k2 = v(&mid, t + h / 2.0)?;
            Ok(x.add_scaled(&k2, hs)?)
        }
        Method::Rk4 => {
            let half = T::of(h / 2.0);
            let k1 = v(x, t)?;
            let k2 = v(&x.add_scaled(&k1, half)?, t + h / 2.0)?;
            let k3 = v(&x.add_scaled(&k2, half)?, t + h / 2.0)?;
            let k4 = v(&x.add_scaled(&k3, hs)?, t + h)?;
            let sixth = T::of(h / 6.0);
            let two = T::of(2.0);
            let mut out = x.clone();
            let (a, b, c, d) = (k1.data(), k2.data(), k3.data(), k4.data());
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = *o + sixth * (a[i] + two * b[i] + two * c[i] + d[i]);
            }
            Ok(out)
        }
    }
}

/// Integrates from `t = 0` to `t = 1` over `cfg.steps` uniform steps.
pub fn integrate<T, F>(mut v: F, x0: &Tensor<T>, cfg: &IntegratorConfig) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    cfg.validate()?;
    let n = cfg.steps;
    let mut x = x0.clone();
    for i in 0..n {
        let t0 = i as f64 / n as f64;
        let t1 = if i + 1 == n {
            1.0
        } else {
            (i + 1) as f64 / n as f64
        };
        x = step(cfg.method, &mut v, &x, t0, t1 - t0).map_err(|e| match e {
            Error::Tensor(flowct_tensor::TensorError::NonFinite { .. }) => {
                Error::NonFiniteStep { step: i }
            }
            other => other,
        })?;
        if !x.is_finite() {
            return Err(Error::NonFiniteStep { step: i });
        }
    }
    Ok(x)
}
