//! Flat `key = value` configuration files.
//!
//! One experiment is described by a handful of scalars, so the format stays
//! line-oriented and diff-friendly: `#` starts a comment, blank lines are
//! skipped, every other line is `key = value`. Unknown keys are rejected,
//! parse errors carry line numbers, and parse -> serialize -> parse is an
//! identity. Any key can be overridden through an `MFS_`-prefixed
//! environment variable (`MFS_LR`, `MFS_N_TRAIN`, ...).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::envdata::SyntheticSpec;
use crate::sampler::ModelDims;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {got:?}")]
    Syntax { line: usize, got: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: key {key:?}: {detail}")]
    BadValue { line: usize, key: String, detail: String },
    #[error("{key}: {detail}")]
    OutOfRange { key: &'static str, detail: String },
    #[error("environment variable {var}: {detail}")]
    BadEnv { var: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw `key = value` lines, each tagged with its 1-based line number.
fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError::Syntax { line, got: raw.trim().to_string() });
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax { line, got: raw.trim().to_string() });
        }
        out.push((line, key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Accumulated assignments with typed getters; every consumer drains one of
/// these and then calls [`Assignments::finish`] to reject leftovers.
struct Assignments {
    entries: BTreeMap<String, (usize, String)>,
}

impl Assignments {
    fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (line, key, value) in parse_kv(text)? {
            if entries.insert(key.clone(), (line, value)).is_some() {
                return Err(ConfigError::DuplicateKey { line, key });
            }
        }
        Ok(Assignments { entries })
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some((line, value)) = self.entries.remove(key) {
            *slot = value.parse().map_err(|_| ConfigError::BadValue {
                line,
                key: key.to_string(),
                detail: format!("cannot parse {value:?} as {}", std::any::type_name::<T>()),
            })?;
        }
        Ok(())
    }

    fn take_path(&mut self, key: &str, slot: &mut Option<PathBuf>) -> Result<(), ConfigError> {
        if let Some((_, value)) = self.entries.remove(key) {
            *slot = Some(PathBuf::from(value));
        }
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(ConfigError::UnknownKey { line, key });
        }
        Ok(())
    }
}

/// Everything one training or evaluation run needs. Field names follow the
/// config keys listed with each field.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `F`: sequence length the model operates on; shorter inputs are
    /// cyclically padded to this length.
    pub num_frames: usize,
    /// `D`: feature dimension.
    pub feat_dim: usize,
    /// `d_o`: trunk output width.
    pub obs_dim: usize,
    /// `H`: recurrent hidden size.
    pub hidden: usize,
    /// `C`: number of classes.
    pub classes: usize,
    /// `M`: context radius (neighbors visible on each side).
    pub context_radius: usize,
    /// `N_train` / `N_test`: team sizes for training and evaluation.
    pub n_train: usize,
    pub n_test: usize,
    /// `delta`: cursor stride per move action.
    pub stride: usize,
    /// `T_max`: episode step cap.
    pub t_max: usize,
    /// `gamma`: reward discount.
    pub gamma: f64,
    /// `lambda1`: weight of the entropy term inside the policy loss.
    pub lambda1: f64,
    /// `lambda2`: weight of the policy loss inside the total loss.
    pub lambda2: f64,
    /// `K`: sampled episodes per video per update.
    pub episodes_per_update: usize,
    /// `lr`: Adam learning rate.
    pub lr: f64,
    /// `clip_norm`: global gradient-norm ceiling applied before Adam.
    pub clip_norm: f64,
    /// `epochs`: passes over the training set.
    pub epochs: usize,
    /// `eval_interval`: greedy validation every this many epochs.
    pub eval_interval: usize,
    /// `seed`: master seed for parameter init, shuffling, and episodes.
    pub seed: u64,
    /// `train_dir` / `val_dir`: dataset directories.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// `aux_step_loss`: add a per-step classification term (default off;
    /// the standard objective classifies at the final step only).
    pub aux_step_loss: bool,
    /// `grad_accum`: videos whose gradients are accumulated per Adam step.
    pub grad_accum: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            num_frames: 120,
            feat_dim: 32,
            obs_dim: 64,
            hidden: 1024,
            classes: 10,
            context_radius: 1,
            n_train: 5,
            n_test: 25,
            stride: 1,
            t_max: 10,
            gamma: 0.9,
            lambda1: 1.0,
            lambda2: 1.0,
            episodes_per_update: 1,
            lr: 1e-4,
            clip_norm: 5.0,
            epochs: 30,
            eval_interval: 1,
            seed: 0,
            train_dir: None,
            val_dir: None,
            aux_step_loss: false,
            grad_accum: 1,
        }
    }
}

impl ExperimentConfig {
    /// Parse a config file body. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut kv = Assignments::from_text(text)?;
        cfg.read_assignments(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn read_assignments(&mut self, kv: &mut Assignments) -> Result<(), ConfigError> {
        kv.take("F", &mut self.num_frames)?;
        kv.take("D", &mut self.feat_dim)?;
        kv.take("d_o", &mut self.obs_dim)?;
        kv.take("H", &mut self.hidden)?;
        kv.take("C", &mut self.classes)?;
        kv.take("M", &mut self.context_radius)?;
        kv.take("N_train", &mut self.n_train)?;
        kv.take("N_test", &mut self.n_test)?;
        kv.take("delta", &mut self.stride)?;
        kv.take("T_max", &mut self.t_max)?;
        kv.take("gamma", &mut self.gamma)?;
        kv.take("lambda1", &mut self.lambda1)?;
        kv.take("lambda2", &mut self.lambda2)?;
        kv.take("K", &mut self.episodes_per_update)?;
        kv.take("lr", &mut self.lr)?;
        kv.take("clip_norm", &mut self.clip_norm)?;
        kv.take("epochs", &mut self.epochs)?;
        kv.take("eval_interval", &mut self.eval_interval)?;
        kv.take("seed", &mut self.seed)?;
        kv.take_path("train_dir", &mut self.train_dir)?;
        kv.take_path("val_dir", &mut self.val_dir)?;
        kv.take("aux_step_loss", &mut self.aux_step_loss)?;
        kv.take("grad_accum", &mut self.grad_accum)?;
        Ok(())
    }

    /// Apply `MFS_<KEY>` environment overrides (key uppercased, e.g.
    /// `MFS_LR`, `MFS_T_MAX`). Unknown `MFS_` variables are rejected.
    pub fn apply_env_overrides(
        &mut self,
        vars: impl Iterator<Item = (String, String)>,
    ) -> Result<(), ConfigError> {
        for (var, value) in vars {
            let Some(suffix) = var.strip_prefix("MFS_") else { continue };
            let key = KEYS
                .iter()
                .find(|k| k.to_uppercase() == suffix)
                .ok_or_else(|| ConfigError::BadEnv {
                    var: var.clone(),
                    detail: "does not match any config key".into(),
                })?;
            let mut kv = Assignments::from_text(&format!("{key} = {value}"))
                .map_err(|e| ConfigError::BadEnv { var: var.clone(), detail: e.to_string() })?;
            self.read_assignments(&mut kv)
                .map_err(|e| ConfigError::BadEnv { var: var.clone(), detail: e.to_string() })?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |key: &'static str, detail: String| Err(ConfigError::OutOfRange { key, detail });
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return range("gamma", format!("{} not in (0, 1]", self.gamma));
        }
        if self.t_max < 1 {
            return range("T_max", "must be at least 1".into());
        }
        if self.stride < 1 {
            return range("delta", "must be at least 1".into());
        }
        let positives: [(&'static str, usize); 11] = [
            ("F", self.num_frames),
            ("D", self.feat_dim),
            ("d_o", self.obs_dim),
            ("H", self.hidden),
            ("C", self.classes),
            ("N_train", self.n_train),
            ("N_test", self.n_test),
            ("K", self.episodes_per_update),
            ("epochs", self.epochs),
            ("eval_interval", self.eval_interval),
            ("grad_accum", self.grad_accum),
        ];
        for (key, v) in positives {
            if v < 1 {
                return range(key, "must be at least 1".into());
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return range("lr", format!("{} must be positive and finite", self.lr));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return range("clip_norm", format!("{} must be positive and finite", self.clip_norm));
        }
        if !(self.lambda1.is_finite() && self.lambda2.is_finite()) {
            return range("lambda1", "lambda weights must be finite".into());
        }
        Ok(())
    }

    /// Serialize as a parseable config file with every key present.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "F = {}", self.num_frames);
        let _ = writeln!(s, "D = {}", self.feat_dim);
        let _ = writeln!(s, "d_o = {}", self.obs_dim);
        let _ = writeln!(s, "H = {}", self.hidden);
        let _ = writeln!(s, "C = {}", self.classes);
        let _ = writeln!(s, "M = {}", self.context_radius);
        let _ = writeln!(s, "N_train = {}", self.n_train);
        let _ = writeln!(s, "N_test = {}", self.n_test);
        let _ = writeln!(s, "delta = {}", self.stride);
        let _ = writeln!(s, "T_max = {}", self.t_max);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "K = {}", self.episodes_per_update);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(p) = &self.train_dir {
            let _ = writeln!(s, "train_dir = {}", p.display());
        }
        if let Some(p) = &self.val_dir {
            let _ = writeln!(s, "val_dir = {}", p.display());
        }
        let _ = writeln!(s, "aux_step_loss = {}", self.aux_step_loss);
        let _ = writeln!(s, "grad_accum = {}", self.grad_accum);
        s
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            feat_dim: self.feat_dim,
            obs_dim: self.obs_dim,
            hidden: self.hidden,
            classes: self.classes,
            context_radius: self.context_radius,
        }
    }
}

const KEYS: [&str; 23] = [
    "F", "D", "d_o", "H", "C", "M", "N_train", "N_test", "delta", "T_max", "gamma", "lambda1",
    "lambda2", "K", "lr", "clip_norm", "epochs", "eval_interval", "seed", "train_dir", "val_dir",
    "aux_step_loss", "grad_accum",
];

/// Parse a synthetic dataset recipe from the same `key = value` format.
/// Keys: `C`, `F`, `D`, `salient_fraction`, `confuser_fraction`,
/// `noise_sigma`, `videos_per_class`, `val_videos_per_class`, `seed`.
pub fn parse_synthetic_spec(text: &str) -> Result<(SyntheticSpec, usize), ConfigError> {
    let mut spec = SyntheticSpec {
        num_classes: 10,
        frames_per_video: 120,
        feat_dim: 32,
        salient_fraction: 0.1,
        confuser_fraction: 0.25,
        noise_sigma: 0.3,
        videos_per_class: 60,
        seed: 0,
    };
    let mut val_videos_per_class = 20usize;
    let mut kv = Assignments::from_text(text)?;
    kv.take("C", &mut spec.num_classes)?;
    kv.take("F", &mut spec.frames_per_video)?;
    kv.take("D", &mut spec.feat_dim)?;
    kv.take("salient_fraction", &mut spec.salient_fraction)?;
    kv.take("confuser_fraction", &mut spec.confuser_fraction)?;
    kv.take("noise_sigma", &mut spec.noise_sigma)?;
    kv.take("videos_per_class", &mut spec.videos_per_class)?;
    kv.take("val_videos_per_class", &mut val_videos_per_class)?;
    kv.take("seed", &mut spec.seed)?;
    kv.finish()?;
    spec.validate().map_err(|e| ConfigError::OutOfRange {
        key: "synthetic spec",
        detail: e.to_string(),
    })?;
    Ok((spec, val_videos_per_class))
}
