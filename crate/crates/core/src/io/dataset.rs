use std::fs;
use std::path::Path;

use flowct_tensor::rng::mix;

use crate::error::{Error, Result};
use crate::io::{
    generate_phantom_pair, split_manifest, write_mha, CaseFiles, DatasetManifest, ElementType,
    PhantomSpec,
};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `n_cases` phantom triples (`case_XXXX_{source,target,mask}.mha`)
/// and a split manifest into `dir`. Case `i` uses phantom seed
/// `mix(seed, i)`, so the dataset is a pure function of its arguments.
/// Sources are stored as MET_FLOAT, targets and masks as MET_SHORT.
pub fn write_phantom_dataset(
    dir: &Path,
    n_cases: usize,
    template: &PhantomSpec,
    train_ratio: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let spec = PhantomSpec {
            seed: mix(&[seed, i as u64]),
            ..template.clone()
        };
        let pair = generate_phantom_pair(&spec)?;
        let files = CaseFiles::conventional(&format!("case_{i:04}"));
        write_mha(&pair.source, dir.join(&files.source), ElementType::Float)?;
        write_mha(&pair.target, dir.join(&files.target), ElementType::Short)?;
        write_mha(&pair.mask, dir.join(&files.mask), ElementType::Short)?;
        cases.push(files);
    }
    let mut manifest = split_manifest(cases, template.modality, train_ratio, seed)?;
    manifest.save(dir.join(MANIFEST_FILE))?;
    manifest.root = dir.to_path_buf();
    Ok(manifest)
}
