use flowct::prep::{
    extent_spacing, normalize_ct, normalize_mr, postprocess, resample, to_model_grid,
    Interpolation, NormalizationSpec,
};
use flowct::{IntensityKind, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec() -> NormalizationSpec {
    NormalizationSpec::default()
}

fn hu_volume(dims: [usize; 3], data: Vec<f64>) -> Volume {
    Volume::new(
        dims,
        [0.9, 1.1, 3.0],
        [-12.5, 40.0, 7.25],
        IntensityKind::Hu,
        data,
    )
    .unwrap()
}

#[test]
fn every_integer_hu_survives_the_round_trip() {
    let data: Vec<f64> = (-1024..=3071).map(f64::from).collect();
    let v = hu_volume([16, 16, 16], data);
    let back = postprocess(&normalize_ct(&v, &spec()).unwrap(), &v, &spec()).unwrap();
    assert_eq!(back, v);
}

#[test]
fn out_of_window_values_come_back_clipped() {
    let v = hu_volume([2, 1, 1], vec![-3000.0, 5000.0]);
    let back = postprocess(&normalize_ct(&v, &spec()).unwrap(), &v, &spec()).unwrap();
    assert_eq!(back.data, vec![-1024.0, 3071.0]);
}

#[test]
fn trilinear_output_stays_between_neighbours() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [5, 6, 4];
    let v = Volume::new(
        dims,
        [1.0, 1.0, 2.0],
        [0.0; 3],
        IntensityKind::Raw,
        (0..120).map(|_| rng.gen()).collect(),
    )
    .unwrap();
    let out = resample(&v, [9, 7, 11], [0.5, 0.8, 0.7], Interpolation::Trilinear).unwrap();
    for z in 0..11 {
        for y in 0..7 {
            for x in 0..9 {
                let p = [x as f64 * 0.5, y as f64 * 0.8 / 1.0, z as f64 * 0.7 / 2.0];
                let lo: [usize; 3] =
                    std::array::from_fn(|a| (p[a].floor() as usize).min(dims[a] - 1));
                let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + 1).min(dims[a] - 1));
                let corners: Vec<f64> = (0..8)
                    .map(|c| {
                        let pick = |a: usize| if c >> a & 1 == 1 { hi[a] } else { lo[a] };
                        v.at(pick(0), pick(1), pick(2))
                    })
                    .collect();
                let (mn, mx) = corners
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &c| {
                        (a.min(c), b.max(c))
                    });
                let got = out.at(x, y, z);
                assert!(
                    got >= mn - 1e-12 && got <= mx + 1e-12,
                    "({x},{y},{z}): {got} not in [{mn}, {mx}]"
                );
            }
        }
    }
}

#[test]
fn model_grid_keeps_the_physical_extent() {
    let v = Volume::filled(
        [20, 30, 12],
        [0.8, 1.0, 3.0],
        [1.0, 2.0, 3.0],
        IntensityKind::Raw,
        4.0,
    )
    .unwrap();
    let g = to_model_grid(&v, 16).unwrap();
    assert_eq!(g.dims, [16; 3]);
    assert_eq!(g.origin, v.origin);
    for a in 0..3 {
        let before = v.dims[a] as f64 * v.spacing[a];
        let after = g.dims[a] as f64 * g.spacing[a];
        assert!(
            (before - after).abs() < g.spacing[a],
            "axis {a}: {before} vs {after}"
        );
    }
    assert_eq!(g.spacing, extent_spacing(&v, [16; 3]));
    assert!(g.data.iter().all(|&x| x == 4.0));
}

#[test]
fn resample_rejects_empty_grids() {
    let v = Volume::filled([2, 2, 2], [1.0; 3], [0.0; 3], IntensityKind::Raw, 0.0).unwrap();
    assert!(resample(&v, [0, 2, 2], [1.0; 3], Interpolation::Nearest).is_err());
    assert!(resample(&v, [2, 2, 2], [1.0, 0.0, 1.0], Interpolation::Nearest).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_hu_round_trips_exactly(values in prop::collection::vec(-1024i32..=3071, 24)) {
        let v = hu_volume([2, 3, 4], values.into_iter().map(f64::from).collect());
        let back = postprocess(&normalize_ct(&v, &spec()).unwrap(), &v, &spec()).unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn mr_normalization_is_bounded(values in prop::collection::vec(-1e4f64..1e4, 2..60), spike in 0usize..60) {
        let mut values = values;
        let n = values.len();
        values[spike % n] *= 50.0;
        let v = Volume::new([n, 1, 1], [1.0; 3], [0.0; 3], IntensityKind::Raw, values.clone()).unwrap();
        let out = normalize_mr(&v, &spec()).unwrap();
        prop_assert!(out.volume.data.iter().all(|x| x.abs() <= 3.0));
        prop_assert_eq!(out.volume.kind, IntensityKind::ZScored);
        if !out.degenerate {
            // before clipping the statistics are exactly standard
            let z: Vec<f64> = values.iter().map(|x| (x - out.mean) / out.std).collect();
            let mean = z.iter().sum::<f64>() / n as f64;
            let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_inputs_are_flagged(c in -1e6f64..1e6, n in 1usize..40) {
        let v = Volume::filled([n, 1, 1], [1.0; 3], [0.0; 3], IntensityKind::Raw, c).unwrap();
        let out = normalize_mr(&v, &spec()).unwrap();
        prop_assert!(out.degenerate);
        prop_assert!(out.volume.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn resample_is_idempotent_on_its_own_grid(seed in any::<u64>(), nearest in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Volume::new([4, 3, 5], [1.0, 2.0, 0.5], [0.0; 3], IntensityKind::Raw, (0..60).map(|_| rng.gen()).collect()).unwrap();
        let mode = if nearest { Interpolation::Nearest } else { Interpolation::Trilinear };
        let once = resample(&v, [7, 6, 3], [0.6, 1.0, 0.9], mode).unwrap();
        let twice = resample(&once, once.dims, once.spacing, mode).unwrap();
        prop_assert_eq!(once, twice);
    }
}
