use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderConfig;
use crate::error::{Error, IoContext, Result};
use crate::mapeval::Roi;
use crate::scenegen::{CameraRig, SceneParams};
use crate::supervision::{SupervisionConfig, TrainConfig, Variant};

/// Scene seed ranges: training scenes use `first_seed..first_seed+n_train`,
/// validation scenes the following `n_val` seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub first_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 256,
            n_val: 64,
            first_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn val_from_seed(&self) -> u64 {
        self.first_seed + self.n_train as u64
    }

    pub fn seeds(&self) -> std::ops::Range<u64> {
        self.first_seed..self.val_from_seed() + self.n_val as u64
    }
}

/// Everything one run depends on. Scalar fields come first so the TOML
/// dump keeps them above the tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Student initialization and batch-order seed.
    pub seed: u64,
    pub teacher_seed: u64,
    pub roi: Roi,
    pub output: PathBuf,
    pub data: DataConfig,
    /// `scene.seed` is overwritten per scene from the data seed range.
    pub scene: SceneParams,
    pub rig: CameraRig,
    pub encoder: EncoderConfig,
    pub supervision: SupervisionConfig,
    pub train: TrainConfig,
    pub teacher_train: TrainConfig,
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        steps: 1000,
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            teacher_seed: 0,
            roi: Roi::Extended,
            output: PathBuf::from("runs"),
            data: DataConfig::default(),
            scene: SceneParams::default(),
            rig: CameraRig::default(),
            encoder: EncoderConfig::default(),
            supervision: SupervisionConfig::default(),
            train: desk_train(),
            teacher_train: desk_train(),
        }
    }
}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn dump<S: Serialize>(v: &S) -> String {
    toml::to_string(v).expect("config types serialize to TOML")
}

#[derive(Serialize)]
struct Wrap<'a, S> {
    v: &'a S,
}

fn dump_any<S: Serialize>(v: &S) -> String {
    dump(&Wrap { v })
}

/// Short decimal for ordinary weights, exponent form for extreme ones.
pub fn lambda_label(l: f64) -> String {
    let a = l.abs();
    if l == 0.0 || (1e-4..1e6).contains(&a) {
        format!("{l}")
    } else {
        format!("{l:e}")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        self.scene.validate()?;
        self.rig.validate()?;
        self.encoder.validate()?;
        self.supervision.validate()?;
        self.train.validate()?;
        self.teacher_train.validate()
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::from_toml(&text, path)
    }

    /// Full dump with every default spelled out.
    pub fn to_toml(&self) -> String {
        dump(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).at(path)
    }

    /// Key of the rendered corpus: data ranges, scene parameters, rig, RoI.
    pub fn dataset_key(&self) -> String {
        digest(&[
            &dump(&self.data),
            &dump(&self.scene),
            &dump(&self.rig),
            self.roi.name(),
        ])
    }

    /// Key of the frozen teacher: corpus, architecture, schedule and seed.
    pub fn teacher_key(&self) -> String {
        digest(&[
            &self.dataset_key(),
            &dump(&self.encoder),
            &dump(&self.teacher_train),
            &self.teacher_seed.to_string(),
        ])
    }

    /// Key of a student run: every field except the output location.
    pub fn run_key(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        digest(&[&c.to_toml()])
    }

    /// Copy configured for one student run.
    pub fn for_run(&self, variant: Variant, lambda: f64, seed: u64) -> Self {
        Self {
            seed,
            supervision: SupervisionConfig::new(variant, lambda),
            ..self.clone()
        }
    }

    /// Run directory name, e.g. `norm_adapter_lam1_seed0`.
    pub fn run_name(&self) -> String {
        format!("{}_lam{}_seed{}", self.supervision.variant, lambda_label(self.supervision.lambda_bev), self.seed)
    }

    /// Small corpus and short schedules for smoke runs.
    pub fn smoke(scenes: usize, steps: usize) -> Self {
        let n_val = (scenes / 5).max(1);
        let short = TrainConfig {
            steps,
            ..desk_train()
        };
        Self {
            data: DataConfig {
                n_train: scenes.saturating_sub(n_val).max(1),
                n_val,
                first_seed: 0,
            },
            train: short.clone(),
            teacher_train: short,
            ..Self::default()
        }
    }
}

/// Hash of an arbitrary serializable value, used for artifact checksums.
pub fn value_key<S: Serialize>(v: &S) -> String {
    digest(&[&dump_any(v)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_exact() {
        let mut c = RunConfig::default();
        c.supervision.lambda_bev = 0.25;
        c.train.optimizer.lr = 1.0 / 3.0;
        let text = c.to_toml();
        let back = RunConfig::from_toml(&text, Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[data]\nn_train = 10\n", Path::new("x")).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.data.n_train, 10);
        assert_eq!(c.data.n_val, 64);
        assert_eq!(c.train.steps, 1000);
    }

    #[test]
    fn keys_track_their_inputs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.scene.curvature = 0.02;
        assert_ne!(a.dataset_key(), b.dataset_key());
        assert_ne!(a.teacher_key(), b.teacher_key());
        let mut c = a.clone();
        c.seed = 5;
        assert_eq!(a.teacher_key(), c.teacher_key());
        assert_ne!(a.run_key(), c.run_key());
        let mut d = a.clone();
        d.output = PathBuf::from("elsewhere");
        assert_eq!(a.run_key(), d.run_key());
        let mut e = a.clone();
        e.teacher_train.steps = 10;
        assert_eq!(a.dataset_key(), e.dataset_key());
        assert_ne!(a.teacher_key(), e.teacher_key());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[supervision]\nlambda_bev = -1.0\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("roi = \"huge\"\n", Path::new("x")).is_err());
        assert!(RunConfig::from_toml("[data]\nn_val = 0\n", Path::new("x")).is_err());
    }

    #[test]
    fn run_names() {
        let c = RunConfig::default().for_run(Variant::NormOnly, 0.5, 2);
        assert_eq!(c.run_name(), "norm_only_lam0.5_seed2");
        assert_eq!(lambda_label(0.0), "0");
        assert_eq!(lambda_label(1e308), "1e308");
        assert_eq!(lambda_label(2.5e-7), "2.5e-7");
    }
}
