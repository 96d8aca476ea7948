use flowct_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::gaussian_like;
use crate::net::{Params, VelocityNet, VelocityNetConfig};
use crate::ode::{integrate, IntegratorConfig};
use crate::prep::{normalize_source, postprocess, to_model_grid, Modality, NormalizationSpec};
use crate::train::{Checkpoint, CheckpointMeta};
use crate::volume::{IntensityKind, Volume};

/// Trained parameters plus the settings needed to apply them.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    pub net: VelocityNet,
    pub params: Params<f32>,
    pub meta: CheckpointMeta,
}

impl InferenceModel {
    /// Validates the checkpoint against its own architecture and, when
    /// given, against the architecture the caller expects.
    pub fn from_checkpoint(
        ckpt: Checkpoint<f32>,
        expected: Option<&VelocityNetConfig>,
    ) -> Result<Self> {
        if let Some(cfg) = expected {
            if *cfg != ckpt.meta.net {
                return Err(Error::Checkpoint(format!(
                    "checkpoint network {:?} does not match configured network {:?}",
                    ckpt.meta.net, cfg
                )));
            }
        }
        let net = VelocityNet::new(ckpt.meta.net.clone())?;
        net.check_params(&ckpt.params)?;
        Ok(Self {
            net,
            params: ckpt.params,
            meta: ckpt.meta,
        })
    }
}

/// Normalized source on the `side³` model grid.
pub fn prepare_source(
    source: &Volume,
    modality: Modality,
    side: usize,
    spec: &NormalizationSpec,
) -> Result<Volume> {
    to_model_grid(&normalize_source(source, modality, spec)?, side)
}

/// Standard-normal starting point, determined by `seed`.
pub fn initial_noise<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    gaussian_like(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Inference with an arbitrary velocity field `field(x, t, condition)`:
/// preprocess the source, integrate from seeded noise, map back to HU on
/// the source grid.
pub fn infer_with_field<T, F>(
    source: &Volume,
    modality: Modality,
    side: usize,
    spec: &NormalizationSpec,
    integrator: &IntegratorConfig,
    seed: u64,
    mut field: F,
) -> Result<Volume>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, f64, &Tensor<T>) -> Result<Tensor<T>>,
{
    integrator.validate()?;
    let prepared = prepare_source(source, modality, side, spec)?;
    let cond = prepared.to_tensor::<T>();
    let x0 = initial_noise::<T>(cond.shape(), seed);
    let x1 = integrate(|x: &Tensor<T>, t| field(x, t, &cond), &x0, integrator)?;
    let sct = Volume::from_tensor(&x1, 0, &prepared, IntensityKind::NormalizedHu)?;
    postprocess(&sct, source, spec)
}

/// Synthetic CT for `source` on its own grid.
pub fn infer(
    source: &Volume,
    model: &InferenceModel,
    integrator: &IntegratorConfig,
    seed: u64,
) -> Result<Volume> {
    let side = model.net.config().input_side;
    let mut features = None;
    infer_with_field::<f32, _>(
        source,
        model.meta.modality,
        side,
        &model.meta.normalization,
        integrator,
        seed,
        |x, t, cond| {
            if features.is_none() {
                features = Some(model.net.condition_features(&model.params, cond)?);
            }
            let f = features.as_ref().expect("features computed above");
            model.net.predict(&model.params, x, &[t], f)
        },
    )
}
