use std::collections::BTreeMap;

use super::{ConditionSet, DistillConfig, DistillError, Student};
use crate::nets::{Cond, EpsModel, EpsNet, LoraNet, ParamSet};
use crate::optim::Adam;
use crate::rng::RngStream;
use crate::schedule::{add_noise_rows, sample_t, weight};
use crate::tensor::Tensor;

/// Result of one student update.
#[derive(Debug, Clone)]
pub struct StudentStep {
    /// L2 norm of the gradient applied to the student weights.
    pub grad_norm: f64,
    /// Detached one-step samples from before the update.
    pub x0_hat: Tensor,
    pub y: Vec<Cond>,
}

/// VSD update: residual `w(t) (cfg eps_teacher - cfg eps_lora)`.
pub fn vsd_student_step(
    st: &mut Student,
    teacher: &EpsNet,
    lora: &LoraNet,
    conds: &ConditionSet,
    cfg: &DistillConfig,
    opt: &mut Adam,
    rng: &mut RngStream,
) -> Result<StudentStep, DistillError> {
    student_step(st, teacher, Some(lora), conds, cfg, opt, rng)
}

/// SDS update: residual `w(t) (cfg eps_teacher - eps)` with the noise used to
/// form `x_t`.
pub fn sds_student_step(
    st: &mut Student,
    teacher: &EpsNet,
    conds: &ConditionSet,
    cfg: &DistillConfig,
    opt: &mut Adam,
    rng: &mut RngStream,
) -> Result<StudentStep, DistillError> {
    student_step(st, teacher, None, conds, cfg, opt, rng)
}

fn student_step(
    st: &mut Student,
    teacher: &EpsNet,
    lora: Option<&LoraNet>,
    conds: &ConditionSet,
    cfg: &DistillConfig,
    opt: &mut Adam,
    rng: &mut RngStream,
) -> Result<StudentStep, DistillError> {
    let b = cfg.batch;
    let dim = st.net().data_dim();
    let sched = st.net().schedule().clone();
    let y: Vec<Cond> = (0..b).map(|_| conds.sample(rng)).collect();
    let z = rng.normal_tensor(&[b, dim]);
    let (graph, x0_hat) = st.forward_graph(&z, &y)?;
    let (lo, hi) = cfg.t_range_vsd;
    let ts: Vec<usize> = (0..b)
        .map(|_| sample_t(lo, hi, sched.max_t(), rng))
        .collect::<Result<_, _>>()?;
    let eps = rng.normal_tensor(&[b, dim]);
    let x0_detached = x0_hat.detach();
    let xt = add_noise_rows(&x0_detached, &ts, &eps, &sched)?;

    let s = cfg.guidance_scale;
    let e_teacher = teacher.cfg_eps(&xt, &ts, &y, s)?;
    let target = match lora {
        Some(l) => l.cfg_eps(&xt, &ts, &y, s)?,
        None => eps,
    };
    let mut residual = e_teacher.zip_map(&target, |a, c| a - c);
    for (i, &t) in ts.iter().enumerate() {
        let w = weight(t, &sched, cfg.weight_fn) / b as f64;
        for v in residual.row_mut(i) {
            *v *= w;
        }
    }
    if !residual.is_finite() {
        let (i, t) = (0..b)
            .map(|i| (i, ts[i]))
            .find(|&(i, _)| residual.row(i).iter().any(|v| !v.is_finite()))
            .expect("some row is non-finite");
        let x0_norm = x0_detached.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        return Err(DistillError::Numeric { t, x0_norm });
    }

    let grads = graph
        .backward(&BTreeMap::from([("out".to_string(), residual)]))
        .map_err(crate::nets::NetError::from)?;
    let grad_norm = ParamSet::grad_norm(&grads);
    opt.step(st.net_mut().params_mut(), &grads);
    let params = st.net().params().clone();
    st.ema_mut().update(&params)?;
    Ok(StudentStep {
        grad_norm,
        x0_hat: x0_detached,
        y,
    })
}

/// One LoRA-teacher update on `|eps_lora(x_t', t', y) - eps'|^2`, averaged over
/// the batch. Each label is replaced by the null token with probability
/// `p_drop`. Only the adapters may receive gradients.
pub fn lora_step(
    lora: &mut LoraNet,
    x0_hat: &Tensor,
    y: &[Cond],
    t_range: (f64, f64),
    p_drop: f64,
    opt: &mut Adam,
    rng: &mut RngStream,
) -> Result<f64, DistillError> {
    if x0_hat.requires_grad() {
        return Err(DistillError::Contract("x0_hat must be detached before the LoRA step".into()));
    }
    let b = x0_hat.rows();
    let sched = lora.base().schedule().clone();
    let ts: Vec<usize> = (0..b)
        .map(|_| sample_t(t_range.0, t_range.1, sched.max_t(), rng))
        .collect::<Result<_, _>>()?;
    let eps = rng.normal_tensor(x0_hat.shape());
    let xt = add_noise_rows(x0_hat, &ts, &eps, &sched)?;
    let y: Vec<Cond> = if p_drop > 0.0 {
        y.iter().map(|&c| if rng.uniform() < p_drop { Cond::Null } else { c }).collect()
    } else {
        y.to_vec()
    };
    let (graph, pred) = lora.forward_train(&xt, &ts, &y)?;
    let diff = pred.zip_map(&eps, |p, e| p - e);
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / b as f64;
    let seed = diff.map(|v| 2.0 * v / b as f64);
    let grads = graph
        .backward(&BTreeMap::from([("out".to_string(), seed)]))
        .map_err(crate::nets::NetError::from)?;
    if let Some(name) = grads.keys().find(|k| lora.adapters().get(k).is_none()) {
        return Err(DistillError::Contract(format!("LoRA step produced a gradient for {name}")));
    }
    opt.step(lora.adapters_mut(), &grads);
    Ok(loss)
}
