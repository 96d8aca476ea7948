use flowct::flow::FlowPathConfig;
use flowct::io::{
    generate_phantom_pair, write_phantom_dataset, DatasetManifest, PhantomSpec, MANIFEST_FILE,
};
use flowct::net::VelocityNetConfig;
use flowct::ode::IntegratorConfig;
use flowct::prep::{postprocess, Modality, NormalizationSpec};
use flowct::train::*;
use flowct::{Error, IntensityKind, Volume};
use flowct_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_net() -> VelocityNetConfig {
    VelocityNetConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        attention_at: vec![64],
        cond_channels: 4,
        time_embed_dim: 16,
        input_side: 8,
        norm_groups: 4,
        ..VelocityNetConfig::desk()
    }
}

fn phantom_cases(n: u64, modality: Modality) -> Vec<PreparedCase> {
    (0..n)
        .map(|i| {
            let p = generate_phantom_pair(&PhantomSpec {
                seed: 50 + i,
                shape: [8; 3],
                modality,
                ..Default::default()
            })
            .unwrap();
            PreparedCase::prepare(
                &format!("p{i}"),
                &p.source,
                &p.target,
                &p.mask,
                modality,
                8,
                &NormalizationSpec::default(),
            )
            .unwrap()
        })
        .collect()
}

fn tiny_data() -> TrainingData {
    let mut train = phantom_cases(4, Modality::Mr);
    let val = train.split_off(3);
    TrainingData {
        modality: Modality::Mr,
        train,
        val,
    }
}

fn train_cfg(steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        seed: 11,
        validation_every: 2,
        checkpoint_every: 2,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
    Volume::new(
        dims,
        [1.0, 1.5, 2.0],
        [3.0, -4.0, 5.0],
        IntensityKind::Raw,
        data,
    )
    .unwrap()
}

// ---- augmentation ----

#[test]
fn zero_ranges_leave_volumes_bitwise_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_volume(&mut rng, [6, 5, 4]);
    let b = random_volume(&mut rng, [6, 5, 4]);
    let m = random_volume(&mut rng, [6, 5, 4]);
    let zero = AugmentRange {
        translate: 0.0,
        rotate: 0.0,
    };
    let (a2, b2, m2) = augment_pair(&a, &b, &m, zero, 3, 9).unwrap();
    assert_eq!((a2, b2, m2), (a, b, m));
}

#[test]
fn integer_translation_shifts_along_first_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = random_volume(&mut rng, [7, 4, 3]);
    let tf = RigidTransform {
        angles: [0.0; 3],
        shift: [2.0, 0.0, 0.0],
    };
    for nearest in [false, true] {
        let out = tf.apply(&v, nearest, -999.0).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..7 {
                    let expected = if x >= 2 { v.at(x - 2, y, z) } else { -999.0 };
                    assert_eq!(out.at(x, y, z), expected, "({x},{y},{z}) nearest={nearest}");
                }
            }
        }
    }
}

#[test]
fn augmentation_is_keyed_and_joint() {
    let p = generate_phantom_pair(&PhantomSpec {
        seed: 4,
        shape: [12; 3],
        ..Default::default()
    })
    .unwrap();
    let range = AugmentRange {
        translate: 2.0,
        rotate: 0.1,
    };
    let first = augment_pair(&p.source, &p.target, &p.mask, range, 5, 17).unwrap();
    let again = augment_pair(&p.source, &p.target, &p.mask, range, 5, 17).unwrap();
    assert_eq!(first, again);
    let other = augment_pair(&p.source, &p.target, &p.mask, range, 5, 18).unwrap();
    assert_ne!(first.0, other.0);

    // every volume received the same transform
    let tf = RigidTransform::sample(range, 5, 17);
    assert!(!tf.is_identity());
    assert!(tf.angles.iter().all(|a| a.abs() <= 0.1) && tf.shift.iter().all(|s| s.abs() <= 2.0));
    assert_eq!(
        first.0,
        tf.apply(&p.source, false, p.source.min_max().0).unwrap()
    );
    assert_eq!(
        first.1,
        tf.apply(&p.target, false, p.target.min_max().0).unwrap()
    );
    assert_eq!(first.2, tf.apply(&p.mask, true, 0.0).unwrap());

    // mask stays binary; a small transform moves its volume only slightly
    assert!(first.2.data.iter().all(|&m| m == 0.0 || m == 1.0));
    let before: f64 = p.mask.data.iter().sum();
    let after: f64 = first.2.data.iter().sum();
    assert!((after - before).abs() / before < 0.1, "{before} -> {after}");
}

#[test]
fn augmentation_rejects_mismatched_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_volume(&mut rng, [4, 4, 4]);
    let b = random_volume(&mut rng, [4, 4, 5]);
    let range = AugmentRange {
        translate: 1.0,
        rotate: 0.0,
    };
    assert!(matches!(
        augment_pair(&a, &b, &a, range, 0, 0),
        Err(Error::Data(_))
    ));
}

// ---- optimizer ----

fn params_of(values: Vec<Vec<f64>>) -> flowct::net::Params<f64> {
    flowct::net::Params {
        names: (0..values.len()).map(|i| format!("p{i}")).collect(),
        tensors: values
            .into_iter()
            .map(|v| Tensor::from_vec(vec![v.len()], v).unwrap())
            .collect(),
    }
}

#[test]
fn zero_gradient_is_pure_decay() {
    let mut params = params_of(vec![vec![1.0, -2.5, 0.3], vec![7.0]]);
    let mut state = OptimizerState::new(&params);
    let cfg = AdamWConfig::new(1e-2, 0.5);
    let grads: Vec<Tensor<f64>> = params
        .tensors
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut expected: Vec<f64> = vec![1.0, -2.5, 0.3, 7.0];
    for _ in 0..5 {
        adamw_step(&mut params, &grads, &mut state, &cfg).unwrap();
        expected.iter_mut().for_each(|p| *p *= 1.0 - 1e-2 * 0.5);
    }
    let got: Vec<f64> = params
        .tensors
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    assert_eq!(got, expected);
    assert_eq!(state.step, 5);
}

#[test]
fn first_step_moves_by_learning_rate_times_sign() {
    let mut params = params_of(vec![vec![0.5, 0.5, 0.5, 0.5]]);
    let mut state = OptimizerState::new(&params);
    let grads = vec![Tensor::from_vec(vec![4], vec![3.0, -0.01, 1e3, -42.0]).unwrap()];
    adamw_step(
        &mut params,
        &grads,
        &mut state,
        &AdamWConfig::new(1e-3, 0.0),
    )
    .unwrap();
    for (p, g) in params.tensors[0].data().iter().zip(grads[0].data()) {
        let step = p - 0.5;
        assert!(
            (step + 1e-3 * g.signum()).abs() < 1e-3 * 1e-5,
            "{step} for gradient {g}"
        );
    }
}

#[test]
fn zero_weight_decay_matches_textbook_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let init: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut params = params_of(vec![init.clone()]);
    let mut state = OptimizerState::new(&params);
    let (lr, b1, b2, eps) = (3e-3, 0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (init, vec![0.0; 16], vec![0.0; 16]);
    for t in 1..=20 {
        let g: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        adamw_step(
            &mut params,
            &[Tensor::from_vec(vec![16], g.clone()).unwrap()],
            &mut state,
            &AdamWConfig::new(lr, 0.0),
        )
        .unwrap();
        for i in 0..16 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    assert_eq!(params.tensors[0].data(), &p[..]);
}

#[test]
fn zero_learning_rate_is_bitwise_noop() {
    let mut params = params_of(vec![vec![0.1, -3.0, 1e-20]]);
    let before = params.clone();
    let mut state = OptimizerState::new(&params);
    let grads = vec![Tensor::from_vec(vec![3], vec![1.0, 2.0, -3.0]).unwrap()];
    for _ in 0..3 {
        adamw_step(&mut params, &grads, &mut state, &AdamWConfig::new(0.0, 0.1)).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn nan_gradient_names_the_parameter() {
    let mut params = params_of(vec![vec![1.0], vec![2.0, 3.0]]);
    let before = params.clone();
    let mut state = OptimizerState::new(&params);
    let grads = vec![
        Tensor::from_vec(vec![1], vec![0.5]).unwrap(),
        Tensor::from_vec(vec![2], vec![0.0, f64::NAN]).unwrap(),
    ];
    let err = adamw_step(
        &mut params,
        &grads,
        &mut state,
        &AdamWConfig::new(1e-3, 0.0),
    )
    .unwrap_err();
    assert!(
        matches!(&err, Error::NonFiniteGradient { name } if name == "p1"),
        "{err}"
    );
    assert_eq!(params, before);
    assert_eq!(state.step, 0);
}

// ---- checkpoints and the training loop ----

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let mut trainer = Trainer::new(
        tiny_net(),
        train_cfg(0),
        FlowPathConfig::default(),
        tiny_data(),
    )
    .unwrap();
    let summary = trainer.run(None).unwrap();
    assert!(summary.losses.is_empty());
    let ckpt = trainer.checkpoint();
    let net = flowct::net::VelocityNet::new(tiny_net()).unwrap();
    assert_eq!(ckpt.params, net.init_params::<f32>(11));
    assert_eq!(ckpt.step, 0);
    assert_eq!(
        ckpt.rng,
        RngState {
            seed: 11,
            counter: 0
        }
    );
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut trainer = Trainer::new(
        tiny_net(),
        train_cfg(2),
        FlowPathConfig::default(),
        tiny_data(),
    )
    .unwrap();
    trainer.run(None).unwrap();
    let ckpt = trainer.checkpoint();
    assert_eq!(ckpt.optimizer.step, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);

    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes),
        Err(Error::Checkpoint(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bad),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let flow = FlowPathConfig::default();
    let mut full = Trainer::new(tiny_net(), train_cfg(5), flow, tiny_data()).unwrap();
    let full_summary = full.run(None).unwrap();

    let mut first = Trainer::new(tiny_net(), train_cfg(3), flow, tiny_data()).unwrap();
    first.run(None).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(ckpt, train_cfg(5), tiny_data()).unwrap();
    let rest = resumed.run(None).unwrap();

    assert_eq!(resumed.checkpoint(), full.checkpoint());
    let losses = |s: &[StepRecord]| s.iter().map(|r| (r.step, r.loss_total)).collect::<Vec<_>>();
    assert_eq!(losses(&rest.losses), losses(&full_summary.losses[3..]));
}

#[test]
fn training_updates_parameters_and_validates() {
    let mut trainer = Trainer::new(
        tiny_net(),
        train_cfg(2),
        FlowPathConfig::default(),
        tiny_data(),
    )
    .unwrap();
    let init = trainer.params().clone();
    let summary = trainer.run(None).unwrap();
    assert_eq!(summary.losses.len(), 2);
    assert!(summary
        .losses
        .iter()
        .all(|r| r.loss_total.is_finite() && r.loss_total > 0.0));
    assert_ne!(trainer.params(), &init);
    assert_eq!(summary.validation.len(), 1);
    assert!(summary.validation[0].1.is_finite());
    // evaluation-mode validation depends only on the parameters
    assert_eq!(trainer.validate().unwrap(), Some(summary.validation[0].1));
}

#[test]
fn training_from_manifest_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let template = PhantomSpec {
        shape: [8; 3],
        ..Default::default()
    };
    write_phantom_dataset(&data_dir, 4, &template, 0.75, 3).unwrap();
    let manifest = DatasetManifest::load(data_dir.join(MANIFEST_FILE)).unwrap();
    let out = dir.path().join("run");
    let (_, summary) = train(
        &manifest,
        tiny_net(),
        train_cfg(3),
        FlowPathConfig::default(),
        None,
        Some(&out),
    )
    .unwrap();
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], TRAIN_LOG_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,"));
    let val = std::fs::read_to_string(out.join("val_log.csv")).unwrap();
    assert_eq!(val.lines().count(), 2);
    assert!(out.join("checkpoint_000002.ckpt").is_file());
    assert!(out.join("final.ckpt").is_file());
    assert_eq!(summary.checkpoints.len(), 2);

    // resuming with a different architecture is refused before training
    let ckpt = Checkpoint::<f32>::load(out.join("final.ckpt")).unwrap();
    let other = VelocityNetConfig {
        cond_channels: 8,
        ..tiny_net()
    };
    let err = train(
        &manifest,
        other,
        train_cfg(4),
        FlowPathConfig::default(),
        Some(ckpt),
        None,
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn invalid_train_config_is_rejected() {
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        },
        TrainConfig {
            translate_range: f64::NAN,
            ..Default::default()
        },
        TrainConfig {
            validation_every: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
    let wrong_side = VelocityNetConfig {
        input_side: 16,
        ..tiny_net()
    };
    assert!(matches!(
        Trainer::new(
            wrong_side,
            train_cfg(1),
            FlowPathConfig::default(),
            tiny_data()
        ),
        Err(Error::Config(_))
    ));
}

// ---- inference ----

#[test]
fn exact_conditional_field_reproduces_target() {
    let p = generate_phantom_pair(&PhantomSpec {
        seed: 21,
        shape: [10, 12, 9],
        spacing: [1.2, 1.0, 2.0],
        ..Default::default()
    })
    .unwrap();
    let spec = NormalizationSpec::default();
    let side = 8;
    // the known endpoint: the target, normalized, on the model grid
    let x1 = prepare_source(&p.target, Modality::Cbct, side, &spec).unwrap();
    let x1t = x1.to_tensor::<f64>();
    let sigma_min = FlowPathConfig::default().sigma_min;
    let field = |x: &Tensor<f64>, t: f64, _c: &Tensor<f64>| {
        let denom = 1.0 - (1.0 - sigma_min) * t;
        Ok(x1t.zip_map(x, "field", |a, b| (a - (1.0 - sigma_min) * b) / denom)?)
    };
    let out = infer_with_field(
        &p.source,
        Modality::Mr,
        side,
        &spec,
        &IntegratorConfig::default(),
        4,
        field,
    )
    .unwrap();
    let expected =
        postprocess(&x1.clone_as(IntensityKind::NormalizedHu), &p.source, &spec).unwrap();
    assert_eq!(out.dims, p.source.dims);
    assert_eq!(out.spacing, p.source.spacing);
    assert_eq!(out.origin, p.source.origin);
    let worst = out
        .data
        .iter()
        .zip(&expected.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1.0, "max deviation {worst} HU");
}

trait CloneAs {
    fn clone_as(&self, kind: IntensityKind) -> Volume;
}

impl CloneAs for Volume {
    fn clone_as(&self, kind: IntensityKind) -> Volume {
        let mut v = self.clone();
        v.kind = kind;
        v
    }
}

#[test]
fn inference_is_deterministic_and_on_the_source_grid() {
    let mut trainer = Trainer::new(
        tiny_net(),
        train_cfg(2),
        FlowPathConfig::default(),
        tiny_data(),
    )
    .unwrap();
    trainer.run(None).unwrap();
    let model = InferenceModel::from_checkpoint(trainer.checkpoint(), Some(&tiny_net())).unwrap();
    let p = generate_phantom_pair(&PhantomSpec {
        seed: 99,
        shape: [9, 10, 8],
        spacing: [1.0, 0.8, 1.5],
        ..Default::default()
    })
    .unwrap();
    let integrator = IntegratorConfig {
        steps: 4,
        ..Default::default()
    };
    let a = infer(&p.source, &model, &integrator, 5).unwrap();
    let b = infer(&p.source, &model, &integrator, 5).unwrap();
    let c = infer(&p.source, &model, &integrator, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(
        (a.dims, a.spacing, a.origin),
        (p.source.dims, p.source.spacing, p.source.origin)
    );
    assert_eq!(a.kind, IntensityKind::Hu);
    assert!(a.data.iter().all(|&v| (-1024.0..=3071.0).contains(&v)));
}

#[test]
fn mismatched_checkpoint_is_refused() {
    let trainer = Trainer::new(
        tiny_net(),
        train_cfg(0),
        FlowPathConfig::default(),
        tiny_data(),
    )
    .unwrap();
    let other = VelocityNetConfig {
        base_channels: 16,
        ..tiny_net()
    };
    let err = InferenceModel::from_checkpoint(trainer.checkpoint(), Some(&other)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");

    let mut ckpt = trainer.checkpoint();
    ckpt.params.tensors.pop();
    ckpt.params.names.pop();
    assert!(matches!(
        InferenceModel::from_checkpoint(ckpt, None),
        Err(Error::Checkpoint(_))
    ));
}
