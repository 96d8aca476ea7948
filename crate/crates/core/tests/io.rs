use flowct::io::{
    decode_mha, encode_mha, generate_phantom_pair, read_mha_typed, split_manifest, write_mha,
    write_phantom_dataset, CaseFiles, DatasetManifest, ElementType, MhaError, PhantomSpec, Split,
    MANIFEST_FILE,
};
use flowct::prep::Modality;
use flowct::{Error, IntensityKind, Volume};
use proptest::prelude::*;

fn volume_strategy(short: bool) -> impl Strategy<Value = Volume> {
    let dims = (1usize..6, 1usize..6, 1usize..6);
    let spacing = prop::array::uniform3(0.05f64..10.0);
    let origin = prop::array::uniform3(-500.0f64..500.0);
    (dims, spacing, origin).prop_flat_map(move |((x, y, z), spacing, origin)| {
        let n = x * y * z;
        let values = if short {
            prop::collection::vec((-32768i32..=32767).prop_map(f64::from), n).boxed()
        } else {
            prop::collection::vec(
                any::<f32>()
                    .prop_filter("finite", |v| v.is_finite())
                    .prop_map(f64::from),
                n,
            )
            .boxed()
        };
        values.prop_map(move |data| {
            Volume::new([x, y, z], spacing, origin, IntensityKind::Raw, data).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn short_volumes_round_trip(v in volume_strategy(true)) {
        let bytes = encode_mha(&v, ElementType::Short).unwrap();
        let (back, element) = decode_mha(&bytes).unwrap();
        prop_assert_eq!(element, ElementType::Short);
        prop_assert_eq!(back, v);
    }

    #[test]
    fn float_volumes_round_trip(v in volume_strategy(false)) {
        let bytes = encode_mha(&v, ElementType::Float).unwrap();
        let (back, element) = decode_mha(&bytes).unwrap();
        prop_assert_eq!(element, ElementType::Float);
        prop_assert_eq!(back, v);
    }
}

#[test]
fn files_round_trip_with_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let v = Volume::new(
        [3, 2, 2],
        [0.7, 1.3, 3.0],
        [-100.25, 7.5, 0.1],
        IntensityKind::Hu,
        vec![
            -1024.0, 0.0, 3071.0, 1.0, -1.0, 12.0, 40.0, -500.0, 900.0, 2.0, 3.0, 4.0,
        ],
    )
    .unwrap();
    for element in [ElementType::Short, ElementType::Float] {
        let path = dir.path().join("v.mha");
        write_mha(&v, &path, element).unwrap();
        let (back, e) = read_mha_typed(&path).unwrap();
        assert_eq!(e, element);
        assert_eq!(
            (back.dims, back.spacing, back.origin, back.data.clone()),
            (v.dims, v.spacing, v.origin, v.data.clone())
        );
    }
    let text = std::fs::read(dir.path().join("v.mha")).unwrap();
    let header = String::from_utf8_lossy(&text);
    assert!(header.contains("ElementDataFile = LOCAL\n"));
}

#[test]
fn read_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mha");
    let err = read_mha_typed(&missing).unwrap_err();
    assert!(err.to_string().contains("nope.mha"));
    let bad = dir.path().join("bad.mha");
    std::fs::write(
        &bad,
        "NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = LOCAL\n\x01",
    )
    .unwrap();
    let err = read_mha_typed(&bad).unwrap_err();
    assert!(
        matches!(
            &err,
            Error::Mha {
                source: MhaError::Truncated {
                    expected: 16,
                    found: 1
                },
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn split_of_a_hundred_cases() {
    let cases: Vec<CaseFiles> = (0..100)
        .map(|i| CaseFiles::conventional(&format!("c{i}")))
        .collect();
    let m = split_manifest(cases.clone(), Modality::Mr, 0.75, 9).unwrap();
    assert_eq!(
        (m.cases(Split::Train).count(), m.cases(Split::Val).count()),
        (75, 25)
    );
    assert_eq!(split_manifest(cases, Modality::Mr, 0.75, 9).unwrap(), m);
}

#[test]
fn phantom_datasets_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let template = PhantomSpec {
        shape: [8, 9, 10],
        modality: Modality::Cbct,
        ..Default::default()
    };
    let a = write_phantom_dataset(&dir.path().join("a"), 8, &template, 0.75, 5).unwrap();
    write_phantom_dataset(&dir.path().join("b"), 8, &template, 0.75, 5).unwrap();
    assert_eq!(
        (a.cases(Split::Train).count(), a.cases(Split::Val).count()),
        (6, 2)
    );
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8 * 3 + 1);
    for name in names {
        let fa = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let fb = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(fa, fb, "{name:?}");
    }
    let loaded = DatasetManifest::load(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.entries, a.entries);
    loaded.check_paths().unwrap();

    // the stored triples are the generated phantoms
    let first = &loaded.entries[0].files;
    let (target, element) = read_mha_typed(loaded.resolve(&first.target)).unwrap();
    assert_eq!(element, ElementType::Short);
    let idx: usize = first.case_id.trim_start_matches("case_").parse().unwrap();
    let pair = generate_phantom_pair(&PhantomSpec {
        seed: flowct_tensor::rng::mix(&[5, idx as u64]),
        ..template
    })
    .unwrap();
    let rounded: Vec<f64> = pair.target.data.iter().map(|v| v.round()).collect();
    assert_eq!(target.data, rounded);
}

#[test]
fn missing_manifest_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let template = PhantomSpec {
        shape: [8; 3],
        ..Default::default()
    };
    write_phantom_dataset(dir.path(), 2, &template, 0.5, 1).unwrap();
    std::fs::remove_file(dir.path().join("case_0001_mask.mha")).unwrap();
    let err = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap_err();
    assert!(
        matches!(&err, Error::Data(msg) if msg.contains("case_0001_mask.mha")),
        "{err}"
    );
}
