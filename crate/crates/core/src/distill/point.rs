use super::DistillError;
use crate::nets::{Cond, EpsModel};
use crate::rng::RngStream;
use crate::schedule::{sample_t, weight, NoiseSchedule, WeightFn};
use crate::tensor::Tensor;

/// Monte Carlo mean of a residual with its per-coordinate standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Expected distillation residual for a point student whose output is the
/// fixed vector `theta`.
///
/// Each draw samples `t` on `t_range` and `eps`, forms
/// `x_t = alpha_t theta + sigma_t eps` and evaluates
/// `w(t) (cfg eps_teacher(x_t) - target)`, where the target is `eps` (SDS) or
/// the guided auxiliary prediction when `aux` is given (VSD). The expected
/// update direction is the negated mean.
#[allow(clippy::too_many_arguments)]
pub fn expected_point_residual(
    teacher: &dyn EpsModel,
    aux: Option<&dyn EpsModel>,
    sched: &NoiseSchedule,
    theta: &[f64],
    y: Cond,
    guidance: f64,
    weight_fn: WeightFn,
    t_range: (f64, f64),
    draws: usize,
    rng: &mut RngStream,
) -> Result<PointEstimate, DistillError> {
    if draws < 2 {
        return Err(DistillError::Config("need at least two draws".into()));
    }
    let d = theta.len();
    let ts: Vec<usize> = (0..draws)
        .map(|_| sample_t(t_range.0, t_range.1, sched.max_t(), rng))
        .collect::<Result<_, _>>()?;
    let eps = rng.normal_tensor(&[draws, d]);
    let mut xt = eps.clone();
    for (i, &t) in ts.iter().enumerate() {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        for (x, th) in xt.row_mut(i).iter_mut().zip(theta) {
            *x = a * th + s * *x;
        }
    }
    let ys = vec![y; draws];
    let e_teacher = teacher.cfg_eps(&xt, &ts, &ys, guidance)?;
    let target: Tensor = match aux {
        Some(m) => m.cfg_eps(&xt, &ts, &ys, guidance)?,
        None => eps,
    };
    let mut sum = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    for (i, &t) in ts.iter().enumerate() {
        let w = weight(t, sched, weight_fn);
        for k in 0..d {
            let r = w * (e_teacher.row(i)[k] - target.row(i)[k]);
            sum[k] += r;
            sumsq[k] += r * r;
        }
    }
    let n = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    Ok(PointEstimate { mean, se })
}
