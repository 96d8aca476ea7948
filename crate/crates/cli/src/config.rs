use std::fs;
use std::path::{Path, PathBuf};

use flowct::flow::FlowPathConfig;
use flowct::io::PhantomSpec;
use flowct::net::VelocityNetConfig;
use flowct::ode::{IntegratorConfig, Method};
use flowct::prep::Modality;
use flowct::train::TrainConfig;
use flowct::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which source modality is translated to CT.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    MrToCt,
    CbctToCt,
}

impl Task {
    pub fn modality(self) -> Modality {
        match self {
            Task::MrToCt => Modality::Mr,
            Task::CbctToCt => Modality::Cbct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory holding `manifest.json`.
    pub data_dir: PathBuf,
    /// Logs, checkpoints and synthetic CTs go here.
    pub output_dir: PathBuf,
    /// Checkpoint used by `infer` and by `train --resume`; defaults to
    /// `output_dir/final.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            output_dir: "runs/default".into(),
            checkpoint: None,
        }
    }
}

/// Phantom dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_cases: usize,
    pub train_ratio: f64,
    pub seed: u64,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub n_ellipsoids: usize,
    pub noise_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PhantomSpec::default();
        Self {
            n_cases: 200,
            train_ratio: 0.75,
            seed: 0,
            shape: [16; 3],
            spacing: p.spacing,
            n_ellipsoids: p.n_ellipsoids,
            noise_scale: p.noise_scale,
        }
    }
}

impl DataConfig {
    pub fn phantom_template(&self, modality: Modality) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed,
            shape: self.shape,
            spacing: self.spacing,
            n_ellipsoids: self.n_ellipsoids,
            modality,
            noise_scale: self.noise_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Seed of the initial noise volume.
    pub seed: u64,
    pub method: Method,
    pub steps: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        let i = IntegratorConfig::default();
        Self {
            seed: 0,
            method: i.method,
            steps: i.steps,
        }
    }
}

impl InferConfig {
    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            method: self.method,
            steps: self.steps,
        }
    }
}

/// Everything a run needs; one TOML file per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Anatomical region label; recorded in outputs, not interpreted.
    pub region: String,
    pub paths: Paths,
    pub data: DataConfig,
    pub flow: FlowPathConfig,
    pub net: VelocityNetConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::MrToCt,
            region: "phantom".into(),
            paths: Paths::default(),
            data: DataConfig::default(),
            flow: FlowPathConfig::default(),
            net: VelocityNetConfig::desk(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Reads `path`; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.data_dir = base.join(&cfg.paths.data_dir);
        cfg.paths.output_dir = base.join(&cfg.paths.output_dir);
        cfg.paths.checkpoint = cfg.paths.checkpoint.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.infer.integrator().validate()?;
        let d = &self.data;
        if d.n_cases < 2 {
            return Err(Error::Config(format!(
                "data.n_cases must be >= 2, got {}",
                d.n_cases
            )));
        }
        if !(d.train_ratio > 0.0 && d.train_ratio < 1.0) {
            return Err(Error::Config(format!(
                "data.train_ratio {} must lie in (0, 1)",
                d.train_ratio
            )));
        }
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.task.modality()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("final.ckpt"))
    }
}
