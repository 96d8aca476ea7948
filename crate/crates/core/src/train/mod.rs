//! Training loop (augmentation, flow-matching loss, AdamW), checkpoints and
//! ODE-based inference.

mod adamw;
mod augment;
mod checkpoint;
mod infer;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use flowct_tensor::rng::{mix, uniform};
use flowct_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{draw_training_tuple, fm_loss, gaussian_like, sample_path, FlowPathConfig};
use crate::io::{read_mha, CaseFiles, DatasetManifest, Split};
use crate::net::{ForwardMode, Params, VelocityNet, VelocityNetConfig};
use crate::prep::{
    normalize_ct, normalize_source, resample, to_model_grid, Interpolation, Modality,
    NormalizationSpec,
};
use crate::volume::{IntensityKind, Volume};

pub use adamw::{adamw_step, AdamWConfig, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use augment::{augment_pair, AugmentRange, RigidTransform};
pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, CHECKPOINT_VERSION};
pub use infer::{infer, infer_with_field, initial_noise, prepare_source, InferenceModel};

/// Times at which validation evaluates the loss.
pub const VALIDATION_TIMES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

pub const TRAIN_LOG_HEADER: &str = "step,loss_l1,loss_mse,loss_total,wall_ms";
pub const VAL_LOG_HEADER: &str = "step,val_mse";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Symmetric per-axis translation range, in model-grid voxels.
    pub translate_range: f64,
    /// Symmetric per-axis rotation range, in radians.
    pub rotate_range: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub validation_every: u64,
    /// Progress-line interval; every step is written to the CSV log.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 2,
            total_steps: 2000,
            translate_range: 2.0,
            rotate_range: 0.1,
            seed: 0,
            checkpoint_every: 500,
            validation_every: 500,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !nonneg(self.learning_rate) || !nonneg(self.weight_decay) {
            return Err(Error::Config(format!(
                "learning_rate {} and weight_decay {} must be finite and nonnegative",
                self.learning_rate, self.weight_decay
            )));
        }
        if !nonneg(self.translate_range) || !nonneg(self.rotate_range) {
            return Err(Error::Config(
                "augmentation ranges must be finite and nonnegative".into(),
            ));
        }
        if self.batch_size == 0
            || self.checkpoint_every == 0
            || self.validation_every == 0
            || self.log_every == 0
        {
            return Err(Error::Config(
                "batch_size, checkpoint_every, validation_every and log_every must be positive"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::new(self.learning_rate, self.weight_decay)
    }

    pub fn augment_range(&self) -> AugmentRange {
        AugmentRange {
            translate: self.translate_range,
            rotate: self.rotate_range,
        }
    }
}

/// A case normalized and resampled onto the model grid.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub case_id: String,
    pub source: Volume,
    pub target: Volume,
    pub mask: Volume,
}

impl PreparedCase {
    pub fn prepare(
        case_id: &str,
        source: &Volume,
        target: &Volume,
        mask: &Volume,
        modality: Modality,
        side: usize,
        spec: &NormalizationSpec,
    ) -> Result<Self> {
        if !source.same_grid(target) || !source.same_grid(mask) {
            return Err(Error::Data(format!(
                "case {case_id}: source {:?}, target {:?} and mask {:?} grids differ",
                source.dims, target.dims, mask.dims
            )));
        }
        let mut target = target.clone();
        target.kind = IntensityKind::Hu;
        let source = to_model_grid(&normalize_source(source, modality, spec)?, side)?;
        let target = to_model_grid(&normalize_ct(&target, spec)?, side)?;
        let mask = resample(mask, source.dims, source.spacing, Interpolation::Nearest)?;
        Ok(Self {
            case_id: case_id.to_string(),
            source,
            target,
            mask,
        })
    }

    pub fn load(
        manifest: &DatasetManifest,
        files: &CaseFiles,
        side: usize,
        spec: &NormalizationSpec,
    ) -> Result<Self> {
        let read = |p: &PathBuf| {
            read_mha(manifest.resolve(p))
                .map_err(|e| Error::Data(format!("case {}: {e}", files.case_id)))
        };
        let (source, target, mask) = (
            read(&files.source)?,
            read(&files.target)?,
            read(&files.mask)?,
        );
        Self::prepare(
            &files.case_id,
            &source,
            &target,
            &mask,
            manifest.modality,
            side,
            spec,
        )
    }
}

/// Prepared training and validation cases, held in memory.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub modality: Modality,
    pub train: Vec<PreparedCase>,
    pub val: Vec<PreparedCase>,
}

impl TrainingData {
    pub fn load(manifest: &DatasetManifest, side: usize, spec: &NormalizationSpec) -> Result<Self> {
        let load = |split| {
            manifest
                .cases(split)
                .map(|c| PreparedCase::load(manifest, c, side, spec))
                .collect::<Result<Vec<_>>>()
        };
        let data = Self {
            modality: manifest.modality,
            train: load(Split::Train)?,
            val: load(Split::Val)?,
        };
        if data.train.is_empty() {
            return Err(Error::Data("manifest has no training cases".into()));
        }
        Ok(data)
    }
}

/// Loss terms of one optimizer step (`step` counts from 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_l1: f64,
    pub loss_mse: f64,
    pub loss_total: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.step, self.loss_l1, self.loss_mse, self.loss_total, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub losses: Vec<StepRecord>,
    /// `(step, mean validation MSE)`.
    pub validation: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = items[0].shape().to_vec();
    shape[0] = items.len();
    let data = items
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Ok(Tensor::from_vec(shape, data)?)
}

/// Single-precision training state. All randomness is a function of
/// `(seed, step)`, so a run resumed from a checkpoint continues bitwise
/// identically.
pub struct Trainer {
    net: VelocityNet,
    cfg: TrainConfig,
    meta: CheckpointMeta,
    data: TrainingData,
    params: Params<f32>,
    optimizer: OptimizerState<f32>,
    seed: u64,
    step: u64,
}

impl Trainer {
    pub fn new(
        net_cfg: VelocityNetConfig,
        cfg: TrainConfig,
        flow: FlowPathConfig,
        data: TrainingData,
    ) -> Result<Self> {
        cfg.validate()?;
        flow.validate()?;
        let net = VelocityNet::new(net_cfg)?;
        check_data(&net, &data)?;
        let params = net.init_params(cfg.seed);
        let optimizer = OptimizerState::new(&params);
        let meta = CheckpointMeta {
            net: net.config().clone(),
            flow,
            modality: data.modality,
            normalization: NormalizationSpec::default(),
        };
        Ok(Self {
            net,
            seed: cfg.seed,
            cfg,
            meta,
            data,
            params,
            optimizer,
            step: 0,
        })
    }

    /// Continues from `ckpt`; its architecture, flow settings and RNG state
    /// take precedence over the configuration.
    pub fn resume(ckpt: Checkpoint<f32>, cfg: TrainConfig, data: TrainingData) -> Result<Self> {
        cfg.validate()?;
        let net = VelocityNet::new(ckpt.meta.net.clone())?;
        net.check_params(&ckpt.params)?;
        if !ckpt.optimizer.matches(&ckpt.params) {
            return Err(Error::Checkpoint(
                "optimizer moments do not match parameters".into(),
            ));
        }
        if ckpt.meta.modality != data.modality {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {:?} data, manifest is {:?}",
                ckpt.meta.modality, data.modality
            )));
        }
        if ckpt.rng.seed != cfg.seed {
            log::warn!(
                "resuming with the checkpoint seed {} (config seed {})",
                ckpt.rng.seed,
                cfg.seed
            );
        }
        check_data(&net, &data)?;
        Ok(Self {
            net,
            cfg,
            meta: ckpt.meta,
            data,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            seed: ckpt.rng.seed,
            step: ckpt.step,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn net(&self) -> &VelocityNet {
        &self.net
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint {
            meta: self.meta.clone(),
            step: self.step,
            rng: RngState {
                seed: self.seed,
                counter: self.step,
            },
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Runs one optimizer step on a freshly drawn, augmented batch.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let k = self.step;
        let flow = self.meta.flow;
        let n_train = self.data.train.len();
        let pick_key = mix(&[self.seed, k, 0xBA7C]);
        let (mut sources, mut x_t, mut u_t, mut times) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for b in 0..self.cfg.batch_size as u64 {
            let idx = ((uniform(pick_key, b) * n_train as f64) as usize).min(n_train - 1);
            let case = &self.data.train[idx];
            let (src, tgt, _mask) = augment_pair(
                &case.source,
                &case.target,
                &case.mask,
                self.cfg.augment_range(),
                mix(&[self.seed, b]),
                k,
            )?;
            let sample = draw_training_tuple(
                &tgt.to_tensor::<f32>(),
                mix(&[self.seed, k, b, 0xF10]),
                &flow,
            )?;
            sources.push(src.to_tensor::<f32>());
            x_t.push(sample.x_t);
            u_t.push(sample.u_t);
            times.push(sample.t);
        }
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape);
        let c = tape.constant(stack(&sources)?);
        let x = tape.constant(stack(&x_t)?);
        let u = tape.constant(stack(&u_t)?);
        let feats = self.net.encode_condition(&mut tape, &p, c)?;
        let v = self.net.forward(
            &mut tape,
            &p,
            x,
            &times,
            feats,
            ForwardMode::train(self.seed, k),
        )?;
        let loss = fm_loss(&mut tape, v, u, &flow)?;
        let scalar = |var: Var| tape.value(var).data()[0] as f64;
        let (l1, mse, total) = (scalar(loss.l1), scalar(loss.mse), scalar(loss.total));
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: k + 1 });
        }
        tape.backward(loss.total)?;
        let grads: Vec<Tensor<f32>> = p
            .iter()
            .zip(&self.params.tensors)
            .map(|(&var, t)| {
                tape.grad(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect();
        drop(tape);
        adamw_step(
            &mut self.params,
            &grads,
            &mut self.optimizer,
            &self.cfg.optimizer(),
        )?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss_l1: l1,
            loss_mse: mse,
            loss_total: total,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Mean MSE term of the loss over the validation cases at
    /// [`VALIDATION_TIMES`], with noise fixed per case. Evaluation mode, so
    /// the result depends only on the parameters.
    pub fn validate(&self) -> Result<Option<f64>> {
        if self.data.val.is_empty() {
            return Ok(None);
        }
        let flow = self.meta.flow;
        let mut total = 0.0;
        for (i, case) in self.data.val.iter().enumerate() {
            let x1 = case.target.to_tensor::<f32>();
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(mix(&[self.seed, i as u64, 0x7A1]));
            let (mut x_t, mut u_t) = (Vec::new(), Vec::new());
            for &t in &VALIDATION_TIMES {
                let eps = gaussian_like::<f32>(x1.shape(), &mut rng);
                let s = sample_path(&x1, &eps, t, &flow)?;
                x_t.push(s.x_t);
                u_t.push(s.u_t);
            }
            let cond = case.source.to_tensor::<f32>();
            let feats = self.net.condition_features(&self.params, &cond)?;
            let feats = stack(&vec![feats; VALIDATION_TIMES.len()])?;
            let v = self
                .net
                .predict(&self.params, &stack(&x_t)?, &VALIDATION_TIMES, &feats)?;
            let u = stack(&u_t)?;
            let mse = v
                .data()
                .iter()
                .zip(u.data())
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum::<f64>()
                / v.len() as f64;
            total += mse;
        }
        Ok(Some(total / self.data.val.len() as f64))
    }

    /// Trains until `total_steps`. With `out_dir`, appends to
    /// `train_log.csv` / `val_log.csv` and writes `checkpoint_<step>.ckpt`
    /// periodically plus `final.ckpt` at the end.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainSummary> {
        let mut summary = TrainSummary::default();
        let mut logs = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some((
                    open_log(&dir.join("train_log.csv"), TRAIN_LOG_HEADER)?,
                    open_log(&dir.join("val_log.csv"), VAL_LOG_HEADER)?,
                ))
            }
            None => None,
        };
        while self.step < self.cfg.total_steps {
            let rec = self.step_once()?;
            if let Some(((log, path), _)) = logs.as_mut() {
                writeln!(log, "{}", rec.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if rec.step % self.cfg.log_every == 0
                || rec.step == 1
                || rec.step == self.cfg.total_steps
            {
                log::info!(
                    "step {}/{}: loss {:.5} (l1 {:.5}, mse {:.5}) {:.0} ms",
                    rec.step,
                    self.cfg.total_steps,
                    rec.loss_total,
                    rec.loss_l1,
                    rec.loss_mse,
                    rec.wall_ms
                );
            }
            summary.losses.push(rec);
            if rec.step % self.cfg.validation_every == 0 {
                if let Some(val) = self.validate()? {
                    log::info!("step {}: validation mse {val:.5}", rec.step);
                    if let Some((_, (log, path))) = logs.as_mut() {
                        writeln!(log, "{},{val}", rec.step)
                            .map_err(|e| Error::io(path.as_path(), e))?;
                    }
                    summary.validation.push((rec.step, val));
                }
            }
            if let Some(dir) = out_dir {
                if rec.step % self.cfg.checkpoint_every == 0 {
                    let path = dir.join(format!("checkpoint_{:06}.ckpt", rec.step));
                    self.checkpoint().save(&path)?;
                    summary.checkpoints.push(path);
                }
            }
        }
        if let Some(dir) = out_dir {
            let path = dir.join("final.ckpt");
            self.checkpoint().save(&path)?;
            summary.checkpoints.push(path);
        }
        Ok(summary)
    }
}

fn check_data(net: &VelocityNet, data: &TrainingData) -> Result<()> {
    let side = net.config().input_side;
    if let Some(c) = data
        .train
        .iter()
        .chain(&data.val)
        .find(|c| c.source.dims != [side; 3])
    {
        return Err(Error::Config(format!(
            "case {} is prepared at {:?}, the network expects side {side}",
            c.case_id, c.source.dims
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Data("no training cases".into()));
    }
    Ok(())
}

fn open_log(path: &Path, header: &str) -> Result<(File, PathBuf)> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok((f, path.to_path_buf()))
}

/// Loads a manifest and trains from scratch, or resumes from `resume`.
pub fn train(
    manifest: &DatasetManifest,
    net_cfg: VelocityNetConfig,
    cfg: TrainConfig,
    flow: FlowPathConfig,
    resume: Option<Checkpoint<f32>>,
    out_dir: Option<&Path>,
) -> Result<(Trainer, TrainSummary)> {
    if let Some(ckpt) = &resume {
        if ckpt.meta.net != net_cfg || ckpt.meta.flow != flow {
            return Err(Error::Checkpoint(
                "network or flow configuration differs from the checkpoint being resumed".into(),
            ));
        }
    }
    let side = net_cfg.input_side;
    let data = TrainingData::load(manifest, side, &NormalizationSpec::default())?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg, data)?,
        None => Trainer::new(net_cfg, cfg, flow, data)?,
    };
    let summary = trainer.run(out_dir)?;
    Ok((trainer, summary))
}
