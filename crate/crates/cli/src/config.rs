//! Run configuration, stored as TOML.
//!
//! A run is a pure function of its config and the code version. Every
//! section has defaults, so a config file only needs the keys it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use sbrush_core::distill::{ConditionSet, DistillConfig};
use sbrush_core::eval::AblationSuite;
use sbrush_core::nets::NetConfig;
use sbrush_core::schedule::ScheduleSpec;
use sbrush_core::teacher::{GmmSpec, TrainConfig};

/// Version of the config layout; bumped on incompatible changes.
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error in {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Closed-form GMM noise predictor; nothing to train.
    #[default]
    Analytic,
    /// Network trained on samples from the GMM.
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub mode: TeacherMode,
    /// Teacher checkpoint for `trained` mode; defaults to `<out>/teacher/teacher.sbck`.
    pub checkpoint: Option<PathBuf>,
    /// Training set size drawn from the GMM.
    pub dataset_size: usize,
    pub train: TrainConfig,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Analytic,
            checkpoint: None,
            dataset_size: 20_000,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub every: usize,
    pub probes: usize,
    /// Evaluate the EMA weights rather than the raw student.
    pub use_ema: bool,
    pub min_frac: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: 500,
            probes: 4096,
            use_ema: true,
            min_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub small_rank: usize,
    pub warmup_frac: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            small_rank: 4,
            warmup_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub schedule: ScheduleSpec,
    /// Target distribution: the analytic teacher, the training data for a
    /// trained teacher, and the reference for every metric.
    pub gmm: GmmSpec,
    pub net: NetConfig,
    pub teacher: TeacherSection,
    pub distill: DistillConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: PathBuf::from("runs/default"),
            schedule: ScheduleSpec::default(),
            gmm: GmmSpec::reference(),
            net: NetConfig::default(),
            teacher: TeacherSection::default(),
            distill: DistillConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    /// The desk-scale reference problem used by the ablation.
    ///
    /// Uses the Stable Diffusion beta range, which keeps `alpha_T` near 0.04;
    /// the DDPM range drives it to 0.006 and amplifies student updates 160x.
    pub fn reference() -> Self {
        Self {
            schedule: ScheduleSpec {
                beta_min: 8.5e-4,
                beta_max: 0.012,
                ..ScheduleSpec::default()
            },
            out: PathBuf::from("runs/reference"),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::NotFound(path.to_path_buf()),
            _ => ConfigError::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        let cfg = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            },
            e => e,
        })?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid(m);
        if self.version != CONFIG_VERSION {
            return Err(bad(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.schedule.build().map_err(|e| bad(e.to_string()))?;
        self.gmm.validate().map_err(|e| bad(e.to_string()))?;
        self.net.validate().map_err(|e| bad(e.to_string()))?;
        if self.net.data_dim != self.gmm.data_dim || self.net.num_classes != self.gmm.classes.len() {
            return Err(bad(format!(
                "net expects {} classes in {}-D but the GMM has {} in {}-D",
                self.net.num_classes,
                self.net.data_dim,
                self.gmm.classes.len(),
                self.gmm.data_dim
            )));
        }
        self.distill.validate().map_err(|e| bad(e.to_string()))?;
        if self.eval.every == 0 || self.eval.probes <= self.gmm.data_dim {
            return Err(bad("eval.every must be >= 1 and eval.probes > data_dim".into()));
        }
        if !(self.eval.min_frac > 0.0 && self.eval.min_frac <= 1.0 / self.gmm.classes.len() as f64) {
            return Err(bad(format!("eval.min_frac must lie in (0, 1/K], got {}", self.eval.min_frac)));
        }
        if self.teacher.dataset_size == 0 {
            return Err(bad("teacher.dataset_size must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form with `out` cleared, so the same
    /// experiment written to two places hashes identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn conditions(&self) -> ConditionSet {
        ConditionSet::uniform(self.gmm.classes.len())
    }

    pub fn ablation_suite(&self) -> AblationSuite {
        AblationSuite {
            base: self.distill.clone(),
            seed: self.seed,
            small_rank: self.ablation.small_rank,
            eval_every: self.eval.every,
            probes: self.eval.probes,
            warmup_frac: self.ablation.warmup_frac,
            use_ema: self.eval.use_ema,
            min_frac: self.eval.min_frac,
        }
    }

    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.teacher
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("teacher").join("teacher.sbck"))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
