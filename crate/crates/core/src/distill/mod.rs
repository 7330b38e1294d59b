//! Score distillation into a one-step student: the re-parameterized student,
//! SDS and VSD student updates, the LoRA-teacher update and the alternating
//! training loop.

mod point;
mod run;
mod steps;
mod student;

pub use point::{expected_point_residual, PointEstimate};
pub use run::{distill_loop, DistillHooks, DistillState, IterRecord, LoopOutcome, NoHooks};
pub use steps::{lora_step, sds_student_step, vsd_student_step, StudentStep};
pub use student::{Student, MIN_ALPHA_T};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{Cond, NetError};
use crate::rng::RngStream;
use crate::schedule::{ScheduleError, WeightFn};
use crate::teacher::TeacherError;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error("non-finite residual at t = {t} (|x0_hat| = {x0_norm})")]
    Numeric { t: usize, x0_norm: f64 },
    #[error("gradient contract violated: {0}")]
    Contract(String),
    #[error("hook failed: {0}")]
    Hook(String),
    #[error("distillation aborted at iteration {iter} (last record: {last:?}): {source}")]
    Aborted {
        iter: usize,
        last: Option<IterRecord>,
        source: Box<DistillError>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Vsd,
    Sds,
}

/// Hyperparameters of one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Student learning rate.
    pub eta1: f64,
    /// LoRA-teacher learning rate.
    pub eta2: f64,
    pub guidance_scale: f64,
    pub weight_fn: WeightFn,
    pub batch: usize,
    pub iters: usize,
    pub t_range_vsd: (f64, f64),
    pub t_range_lora: (f64, f64),
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Probability of training the LoRA teacher on the null token.
    pub lora_cond_dropout: f64,
    pub ema_decay: f64,
    pub parameterize_student: bool,
    pub loss_kind: LossKind,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            eta1: 1e-4,
            eta2: 1e-3,
            guidance_scale: 4.5,
            weight_fn: WeightFn::Constant,
            batch: 64,
            iters: 10_000,
            t_range_vsd: (0.02, 0.98),
            t_range_lora: (0.0, 1.0),
            lora_rank: 16,
            lora_alpha: 27.0,
            lora_cond_dropout: 0.1,
            ema_decay: 0.999,
            parameterize_student: true,
            loss_kind: LossKind::Vsd,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: String| Err(DistillError::Config(m));
        if !(self.eta1 > 0.0 && self.eta2 > 0.0) {
            return bad(format!("learning rates must be positive, got {} and {}", self.eta1, self.eta2));
        }
        if self.iters == 0 || self.batch == 0 {
            return bad("iters and batch must be >= 1".into());
        }
        if !(self.guidance_scale >= 0.0) {
            return bad(format!("guidance scale must be >= 0, got {}", self.guidance_scale));
        }
        if !(0.0..=1.0).contains(&self.lora_cond_dropout) {
            return bad(format!("LoRA condition dropout must lie in [0, 1], got {}", self.lora_cond_dropout));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("EMA decay must lie in [0, 1], got {}", self.ema_decay));
        }
        for (lo, hi) in [self.t_range_vsd, self.t_range_lora] {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return bad(format!("timestep range ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1"));
            }
        }
        Ok(())
    }
}

/// Conditions the student is trained on, with sampling weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub classes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ConditionSet {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            classes: (0..num_classes).collect(),
            weights: vec![1.0; num_classes],
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if self.classes.is_empty() || self.classes.len() != self.weights.len() {
            return Err(DistillError::Config("condition set must be nonempty with one weight per class".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(DistillError::Config("condition weights must be nonnegative and not all zero".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngStream) -> Cond {
        let total: f64 = self.weights.iter().sum();
        let u = rng.uniform() * total;
        let mut acc = 0.0;
        for (c, w) in self.classes.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return Cond::Class(*c);
            }
        }
        Cond::Class(*self.classes.last().expect("nonempty"))
    }

    /// Conditions cycled in order: `classes[i % len]`.
    pub fn cycle(&self, n: usize) -> Vec<Cond> {
        (0..n).map(|i| Cond::Class(self.classes[i % self.classes.len()])).collect()
    }
}
