//! Linear noise-to-data probability path, its conditional velocity, and the
//! combined L1 + MSE regression objective.

use flowct_tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowPathConfig {
    /// Noise scale left at `t = 1`; keeps the velocity denominator `>= sigma_min`.
    pub sigma_min: f64,
    pub lambda_l1: f64,
    pub lambda_mse: f64,
}

impl Default for FlowPathConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-5,
            lambda_l1: 1.0,
            lambda_mse: 1.0,
        }
    }
}

impl FlowPathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::Config(format!(
                "sigma_min {} must lie in (0, 1)",
                self.sigma_min
            )));
        }
        if self.lambda_l1 < 0.0 || self.lambda_mse < 0.0 || self.lambda_l1 + self.lambda_mse == 0.0
        {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative and not both zero (l1 {}, mse {})",
                self.lambda_l1, self.lambda_mse
            )));
        }
        Ok(())
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "t",
            value: t,
            domain: "[0, 1]",
        })
    }
}

/// `1 - (1 - sigma_min) t`.
pub fn sigma_t(t: f64, cfg: &FlowPathConfig) -> Result<f64> {
    check_time(t)?;
    Ok(1.0 - (1.0 - cfg.sigma_min) * t)
}

/// One point on the path together with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T> {
    pub t: f64,
    pub x_t: Tensor<T>,
    pub u_t: Tensor<T>,
    pub epsilon: Tensor<T>,
}

/// `x_t = t·x1 + sigma_t·eps`, with `u_t` filled from [`target_velocity`].
pub fn sample_path<T: Scalar>(
    x1: &Tensor<T>,
    epsilon: &Tensor<T>,
    t: f64,
    cfg: &FlowPathConfig,
) -> Result<FlowSample<T>> {
    let sigma = sigma_t(t, cfg)?;
    let x_t = x1.zip_map(epsilon, "sample_path", |a, e| {
        T::of(t * a.f64() + sigma * e.f64())
    })?;
    let u_t = target_velocity(&x_t, t, x1, cfg)?;
    Ok(FlowSample {
        t,
        x_t,
        u_t,
        epsilon: epsilon.clone(),
    })
}

/// Conditional velocity `(x1 - (1 - sigma_min) x_t) / (1 - (1 - sigma_min) t)`.
pub fn target_velocity<T: Scalar>(
    x_t: &Tensor<T>,
    t: f64,
    x1: &Tensor<T>,
    cfg: &FlowPathConfig,
) -> Result<Tensor<T>> {
    let denom = sigma_t(t, cfg)?;
    let keep = 1.0 - cfg.sigma_min;
    Ok(x1.zip_map(x_t, "target_velocity", |a, x| {
        T::of((a.f64() - keep * x.f64()) / denom)
    })?)
}

/// Recorded loss terms; `total = lambda_l1·l1 + lambda_mse·mse`.
#[derive(Debug, Clone, Copy)]
pub struct FmLoss {
    pub total: Var,
    pub l1: Var,
    pub mse: Var,
}

/// `lambda_l1·mean|v - u| + lambda_mse·mean (v - u)²` on the tape.
pub fn fm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v_pred: Var,
    u_target: Var,
    cfg: &FlowPathConfig,
) -> Result<FmLoss> {
    let diff = tape.sub(v_pred, u_target)?;
    let abs = tape.abs(diff)?;
    let l1 = tape.mean(abs)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean(sq)?;
    let l1w = tape.scale(l1, cfg.lambda_l1)?;
    let msew = tape.scale(mse, cfg.lambda_mse)?;
    let total = tape.add(l1w, msew)?;
    Ok(FmLoss { total, l1, mse })
}

/// [`fm_loss`] evaluated directly on values, in f64.
pub fn fm_loss_value<T: Scalar>(
    v_pred: &Tensor<T>,
    u_target: &Tensor<T>,
    cfg: &FlowPathConfig,
) -> Result<f64> {
    let diff = v_pred.sub(u_target)?;
    let n = diff.len() as f64;
    let l1 = diff.data().iter().map(|d| d.f64().abs()).sum::<f64>() / n;
    let mse = diff.data().iter().map(|d| d.f64().powi(2)).sum::<f64>() / n;
    Ok(cfg.lambda_l1 * l1 + cfg.lambda_mse * mse)
}

/// Standard normal tensor, deterministic in `rng`.
pub fn gaussian_like<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `t ~ U[0, 1)` and `eps ~ N(0, I)` from `seed` and builds the path sample.
pub fn draw_training_tuple<T: Scalar>(
    x1: &Tensor<T>,
    seed: u64,
    cfg: &FlowPathConfig,
) -> Result<FlowSample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t: f64 = rng.gen();
    let epsilon = gaussian_like(x1.shape(), &mut rng);
    sample_path(x1, &epsilon, t, cfg)
}
