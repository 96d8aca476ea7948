//! Pipeline commands behind the `flowct` binary: phantom generation,
//! training, inference and evaluation, all driven by a [`RunConfig`].
//!
//! Exit codes: 0 success, 1 unexpected failure, 2 configuration error
//! (including bad command-line usage and checkpoint/config mismatches),
//! 3 data or I/O error, 4 numerical abort (non-finite loss, gradient or
//! ODE state).

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use flowct::io::{
    read_mha, write_mha, write_phantom_dataset, DatasetManifest, ElementType, Split, MANIFEST_FILE,
};
use flowct::metrics::{evaluate_case, MetricReport};
use flowct::train::{infer, Checkpoint, InferenceModel, TrainSummary, Trainer};
use flowct::{Error, ErrorKind, Result};

pub use config::{DataConfig, InferConfig, Paths, RunConfig, Task};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

/// Writes the phantom dataset described by `cfg.data` into `cfg.paths.data_dir`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    let template = cfg.data.phantom_template(cfg.modality());
    let manifest = write_phantom_dataset(
        &cfg.paths.data_dir,
        cfg.data.n_cases,
        &template,
        cfg.data.train_ratio,
        cfg.data.seed,
    )?;
    println!(
        "wrote {} cases ({} train, {} val) to {}",
        manifest.entries.len(),
        manifest.cases(Split::Train).count(),
        manifest.cases(Split::Val).count(),
        cfg.paths.data_dir.display()
    );
    Ok(manifest)
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(cfg.paths.data_dir.join(MANIFEST_FILE))?;
    if manifest.modality != cfg.modality() {
        return Err(Error::Config(format!(
            "task {:?} expects {:?} sources, the manifest in {} holds {:?}",
            cfg.task,
            cfg.modality(),
            cfg.paths.data_dir.display(),
            manifest.modality
        )));
    }
    Ok(manifest)
}

/// Trains into `cfg.paths.output_dir`; with `resume`, continues from
/// [`RunConfig::checkpoint_path`].
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<(Trainer, TrainSummary)> {
    let manifest = load_manifest(cfg)?;
    let resume = if resume {
        let path = cfg.checkpoint_path();
        let ckpt = Checkpoint::<f32>::load(&path)?;
        println!("resuming from {} at step {}", path.display(), ckpt.step);
        Some(ckpt)
    } else {
        None
    };
    fs::create_dir_all(&cfg.paths.output_dir).map_err(|e| Error::Io {
        path: cfg.paths.output_dir.clone(),
        source: e,
    })?;
    let used = cfg.paths.output_dir.join("config.toml");
    fs::write(&used, cfg.to_toml()).map_err(|e| Error::Io {
        path: used,
        source: e,
    })?;
    let (trainer, summary) = flowct::train::train(
        &manifest,
        cfg.net.clone(),
        cfg.train.clone(),
        cfg.flow,
        resume,
        Some(&cfg.paths.output_dir),
    )?;
    if let Some(last) = summary.losses.last() {
        println!(
            "trained to step {}; last loss {:.5}",
            last.step, last.loss_total
        );
    }
    if let Some(path) = summary.checkpoints.last() {
        println!("checkpoint {}", path.display());
    }
    Ok((trainer, summary))
}

/// `{case}_source.mha` → `{case}`; other names keep their stem.
pub fn case_id_of(path: &Path) -> String {
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".mha").unwrap_or(n))
        .unwrap_or("volume");
    stem.strip_suffix("_source").unwrap_or(stem).to_string()
}

/// Synthesizes one CT per input as `{case}_sct.mha` (16-bit HU) in
/// `out_dir`. With no inputs, runs on the validation split of the dataset.
pub fn cmd_infer(cfg: &RunConfig, inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let path = cfg.checkpoint_path();
    let model = InferenceModel::from_checkpoint(Checkpoint::<f32>::load(&path)?, Some(&cfg.net))?;
    if model.meta.modality != cfg.modality() {
        return Err(Error::Checkpoint(format!(
            "{} was trained on {:?} sources, task {:?} needs {:?}",
            path.display(),
            model.meta.modality,
            cfg.task,
            cfg.modality()
        )));
    }
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        let manifest = load_manifest(cfg)?;
        manifest
            .cases(Split::Val)
            .map(|c| manifest.resolve(&c.source))
            .collect()
    } else {
        inputs.to_vec()
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let integrator = cfg.infer.integrator();
    let mut written = Vec::with_capacity(inputs.len());
    for input in &inputs {
        let source = read_mha(input)?;
        let sct = infer(&source, &model, &integrator, cfg.infer.seed)?;
        let out = out_dir.join(format!("{}_sct.mha", case_id_of(input)));
        write_mha(&sct, &out, ElementType::Short)?;
        println!("{} -> {}", input.display(), out.display());
        written.push(out);
    }
    Ok(written)
}

/// Case ids that have a file `{id}{suffix}` in `dir`.
fn ids_with_suffix(dir: &Path, suffix: &str) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        if let Some(id) = entry
            .file_name()
            .to_str()
            .and_then(|n| n.strip_suffix(suffix))
        {
            ids.insert(id.to_string());
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Cases present on only one side, with what is missing.
    pub unpaired: Vec<(String, String)>,
    /// Paired cases whose metrics could not be computed.
    pub failed: Vec<(String, String)>,
}

/// Pairs `{id}_sct.mha` in `pred_dir` with `{id}_target.mha` in
/// `target_dir` and `{id}_mask.mha` in `mask_dir`, and scores every pair.
/// The per-case CSV goes to `csv_out`. Unless `allow_partial`, any unpaired
/// or failed case makes this an error after the CSV is written.
pub fn cmd_evaluate(
    pred_dir: &Path,
    target_dir: &Path,
    mask_dir: &Path,
    csv_out: &Path,
    allow_partial: bool,
) -> Result<Evaluation> {
    let preds = ids_with_suffix(pred_dir, "_sct.mha")?;
    let targets = ids_with_suffix(target_dir, "_target.mha")?;
    let masks = ids_with_suffix(mask_dir, "_mask.mha")?;
    let mut eval = Evaluation::default();
    for id in preds.union(&targets) {
        let missing: Vec<&str> = [
            ("prediction", &preds),
            ("target", &targets),
            ("mask", &masks),
        ]
        .into_iter()
        .filter(|(_, set)| !set.contains(id))
        .map(|(what, _)| what)
        .collect();
        if !missing.is_empty() {
            eval.unpaired
                .push((id.clone(), format!("no {}", missing.join(", no "))));
            continue;
        }
        let scored = (|| {
            let pred = read_mha(pred_dir.join(format!("{id}_sct.mha")))?;
            let target = read_mha(target_dir.join(format!("{id}_target.mha")))?;
            let mask = read_mha(mask_dir.join(format!("{id}_mask.mha")))?;
            evaluate_case(id, &pred, &target, &mask)
        })();
        match scored {
            Ok(m) => eval.report.cases.push(m),
            Err(e) => eval.failed.push((id.clone(), e.to_string())),
        }
    }
    if let Some(parent) = csv_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(csv_out, eval.report.to_csv()).map_err(|e| Error::Io {
        path: csv_out.to_path_buf(),
        source: e,
    })?;
    print!("{}", eval.report.to_table());
    for (id, why) in &eval.unpaired {
        eprintln!("unpaired case {id}: {why}");
    }
    for (id, why) in &eval.failed {
        eprintln!("case {id} skipped: {why}");
    }
    let skipped = eval.unpaired.len() + eval.failed.len();
    if skipped > 0 && !allow_partial {
        return Err(Error::Data(format!(
            "{skipped} case(s) could not be evaluated (pass --allow-partial to accept)"
        )));
    }
    if eval.report.cases.is_empty() {
        return Err(Error::Data(format!(
            "no cases evaluated in {}",
            pred_dir.display()
        )));
    }
    Ok(eval)
}
