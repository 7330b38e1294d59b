//! Frozen score teachers: the closed-form GMM teacher, a trainer for learned
//! teachers on toy data, and a deterministic multi-step DDIM sampler.

mod dataset;
mod ddim;
mod gmm;
mod train;

pub use dataset::{DatasetSpec, ToyDataset};
pub use ddim::{ddim_sample, ddim_timesteps};
pub use gmm::{ClassSpec, GmmSpec, GmmTeacher, Mode};
pub use train::{train_teacher, TrainConfig, TrainReport};

use thiserror::Error;

use crate::nets::{Cond, EpsModel, NetError};
use crate::schedule::ScheduleError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("invalid GMM spec: {0}")]
    Spec(String),
    #[error("unknown class {class} (teacher has {classes})")]
    UnknownClass { class: usize, classes: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Net(Box<NetError>),
    #[error("teacher training diverged at step {step}: {source}")]
    Training { step: usize, source: Box<NetError> },
}

impl From<NetError> for TeacherError {
    fn from(e: NetError) -> Self {
        TeacherError::Net(Box::new(e))
    }
}

impl GmmTeacher {
    /// Soft class weights for a condition.
    pub fn cond_weights(&self, c: Cond) -> Result<Vec<f64>, TeacherError> {
        let k = self.num_classes();
        match c {
            Cond::Class(c) if c == k => self.class_weights(None),
            Cond::Class(c) => self.class_weights(Some(c)),
            Cond::Null => self.class_weights(None),
            Cond::Lerp { from, to, t } => {
                let mut w = self.class_weights(Some(from))?;
                w.iter_mut().for_each(|v| *v *= 1.0 - t);
                for (v, u) in w.iter_mut().zip(self.class_weights(Some(to))?) {
                    *v += t * u;
                }
                Ok(w)
            }
        }
    }
}

impl EpsModel for GmmTeacher {
    fn data_dim(&self) -> usize {
        GmmTeacher::data_dim(self)
    }

    fn eps(&self, x: &Tensor, ts: &[usize], y: &[Cond]) -> Result<Tensor, NetError> {
        if y.len() != ts.len() {
            return Err(NetError::Config(format!(
                "{} timesteps but {} conditions",
                ts.len(),
                y.len()
            )));
        }
        let w: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| self.cond_weights(c))
            .collect::<Result<_, _>>()?;
        Ok(self.eps_star_rows(x, ts, &w)?)
    }
}
