//! Sample-quality metrics standing in for FID and CLIP score, metric traces,
//! the four-arm ablation harness and interpolation.

mod ablation;
mod frechet;
mod interp;
mod modes;
mod probe;
mod trace;

pub use ablation::{run_ablation, AblationResult, AblationSuite, Arm, ArmResult, ArmStatus, SummaryRow};
pub use frechet::{frechet_by_class, frechet_from_moments, frechet_gauss, gaussian_fit, Frechet};
pub use interp::{interpolate_sample, slerp, InterpSpec};
pub use modes::{alignment_score, assign_modes, mode_coverage, Coverage};
pub use probe::{evaluate_student, EvalHook, EvalMetrics, ProbeSet};
pub use trace::{MetricPoint, MetricTrace};

use thiserror::Error;

use crate::distill::DistillError;
use crate::nets::NetError;
use crate::teacher::TeacherError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Input(String),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
}
