//! Noise-prediction networks: the MLP trunk shared by teacher, student and
//! LoRA teacher, classifier-free guidance, LoRA adapters and EMA shadows.

mod ema;
mod eps_net;
mod lora;
mod params;

pub use ema::EmaShadow;
pub use eps_net::{time_embedding, EpsNet, Init};
pub use lora::LoraNet;
pub use params::ParamSet;

pub(crate) use eps_net::{GradTargets, Head};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::ScheduleError;
use crate::teacher::TeacherError;
use crate::tensor::{Activation, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("unknown condition id {id} (net has {classes} classes plus null token {classes})")]
    Condition { id: usize, classes: usize },
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("parameter structure mismatch: {0}")]
    Structure(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Prior(#[from] TeacherError),
}

/// Conditioning input for one batch row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cond {
    Class(usize),
    /// The null token used for unconditional prediction.
    Null,
    /// Linear interpolation between two class embeddings.
    Lerp { from: usize, to: usize, t: f64 },
}

impl From<Option<usize>> for Cond {
    fn from(y: Option<usize>) -> Self {
        y.map_or(Cond::Null, Cond::Class)
    }
}

/// Architecture of an [`EpsNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![64, 64, 64],
            time_dim: 16,
            cond_dim: 8,
            num_classes: 3,
            activation: Activation::Tanh,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.data_dim == 0 || self.cond_dim == 0 || self.num_classes == 0 {
            return Err(NetError::Config("dimensions must be positive".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(NetError::Config(format!(
                "time_dim must be positive and even, got {}",
                self.time_dim
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(NetError::Config("need at least one non-empty hidden layer".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim
    }

    /// `(fan_in, fan_out)` of every trunk linear layer, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.data_dim));
        dims
    }
}

/// Anything that predicts noise for a batch of rows.
pub trait EpsModel: Sync {
    fn data_dim(&self) -> usize;

    fn eps(&self, x: &crate::tensor::Tensor, ts: &[usize], y: &[Cond])
        -> Result<crate::tensor::Tensor, NetError>;

    /// Classifier-free guidance `eps(x, t, null) + s * (eps(x, t, y) - eps(x, t, null))`.
    ///
    /// `s = 1` returns the conditional prediction and `s = 0` the
    /// unconditional one without any extra arithmetic.
    fn cfg_eps(
        &self,
        x: &crate::tensor::Tensor,
        ts: &[usize],
        y: &[Cond],
        s: f64,
    ) -> Result<crate::tensor::Tensor, NetError> {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(NetError::Config(format!("guidance scale must be >= 0, got {s}")));
        }
        let n = x.rows();
        if s == 1.0 {
            return self.eps(x, ts, y);
        }
        let nulls = vec![Cond::Null; n];
        if s == 0.0 {
            return self.eps(x, ts, &nulls);
        }
        let x2 = crate::tensor::Tensor::concat_rows(&[x, x]);
        let ts2: Vec<usize> = ts.iter().chain(ts).copied().collect();
        let y2: Vec<Cond> = y.iter().chain(&nulls).copied().collect();
        let both = self.eps(&x2, &ts2, &y2)?;
        let cond = both.slice_rows(0, n);
        let uncond = both.slice_rows(n, 2 * n);
        Ok(uncond.zip_map(&cond, |u, c| u + s * (c - u)))
    }
}

impl EpsModel for EpsNet {
    fn data_dim(&self) -> usize {
        self.config().data_dim
    }

    fn eps(&self, x: &crate::tensor::Tensor, ts: &[usize], y: &[Cond]) -> Result<crate::tensor::Tensor, NetError> {
        self.eps_forward(x, ts, y)
    }
}

impl EpsModel for LoraNet {
    fn data_dim(&self) -> usize {
        self.base().config().data_dim
    }

    fn eps(&self, x: &crate::tensor::Tensor, ts: &[usize], y: &[Cond]) -> Result<crate::tensor::Tensor, NetError> {
        self.eps_forward(x, ts, y)
    }
}
