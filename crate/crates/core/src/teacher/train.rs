use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{TeacherError, ToyDataset};
use crate::nets::{Cond, EpsNet, NetError, ParamSet};
use crate::optim::Adam;
use crate::rng::RngStream;
use crate::schedule::{add_noise_rows, sample_t};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Probability of replacing the label with the null token.
    pub p_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-3,
            batch: 64,
            p_drop: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Minimizes `E |eps(x_t, t, y) - eps|^2` over the dataset with Adam,
/// replacing labels by the null token with probability `p_drop`.
pub fn train_teacher(
    data: &ToyDataset,
    net: &mut EpsNet,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainReport, TeacherError> {
    if data.is_empty() {
        return Err(TeacherError::Config("dataset is empty".into()));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..=1.0).contains(&cfg.p_drop) {
        return Err(TeacherError::Config(format!(
            "need batch >= 1, lr > 0, p_drop in [0, 1]; got {cfg:?}"
        )));
    }
    if data.num_classes() != net.config().num_classes || data.x.cols() != net.data_dim() {
        return Err(TeacherError::Config("dataset and network disagree on classes or dimension".into()));
    }
    let sched = net.schedule().clone();
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let b = cfg.batch;
    for step in 0..cfg.steps {
        let mut rows = Vec::with_capacity(b);
        let mut conds = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        for _ in 0..b {
            let i = rng.int_inclusive(0, data.len() - 1);
            rows.push(data.x.row(i).to_vec());
            let drop = rng.uniform() < cfg.p_drop;
            conds.push(if drop { Cond::Null } else { Cond::Class(data.y[i]) });
            ts.push(sample_t(0.0, 1.0, sched.max_t(), rng)?);
        }
        let x0 = Tensor::from_rows(&rows);
        let eps = rng.normal_tensor(x0.shape());
        let xt = add_noise_rows(&x0, &ts, &eps, &sched)?;

        let diverged = |source: NetError| TeacherError::Training {
            step,
            source: Box::new(source),
        };
        let (graph, pred) = net.eps_forward_graph(&xt, &ts, &conds).map_err(diverged)?;
        let diff = pred.zip_map(&eps, |p, e| p - e);
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / b as f64;
        if !loss.is_finite() {
            return Err(diverged(NetError::Config(format!("loss is {loss}"))));
        }
        report.losses.push(loss);
        let seed = diff.map(|v| 2.0 * v / b as f64);
        let mut grads = graph
            .backward(&BTreeMap::from([("out".to_string(), seed)]))
            .map_err(|e| diverged(e.into()))?;
        grads.remove("x");
        if ParamSet::grad_norm(&grads).is_nan() {
            return Err(diverged(NetError::Config("NaN gradient".into())));
        }
        opt.step(net.params_mut(), &grads);
    }
    Ok(report)
}
