//! Variance-preserving noise schedules, forward noising and timestep sampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule config: {0}")]
    Config(String),
    #[error("timestep {t} outside [1, {max}]")]
    OutOfRange { t: usize, max: usize },
    #[error("noise shape {noise:?} does not match data shape {data:?}")]
    Shape { data: Vec<usize>, noise: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VpLinear,
    VpCosine,
}

/// Parameters that fully determine a [`NoiseSchedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VpLinear,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        make_vp_schedule(self.steps, self.beta_min, self.beta_max, self.kind)
    }
}

/// Tables of `(alpha_t, sigma_t)` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Builds a VP schedule. `VpLinear` spaces betas linearly in
/// `[beta_min, beta_max]`; `VpCosine` uses the squared-cosine cumulative
/// product with offset 0.008 and betas clipped at 0.999.
pub fn make_vp_schedule(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule, ScheduleError> {
    if steps < 2 {
        return Err(ScheduleError::Config(format!("T must be >= 2, got {steps}")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(ScheduleError::Config(format!(
            "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::VpLinear => (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::VpCosine => {
            let f = |i: usize| {
                let u = (i as f64 / steps as f64 + 0.008) / 1.008;
                (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            (1..=steps)
                .map(|i| (1.0 - f(i) / f(i - 1)).min(0.999))
                .collect()
        }
    };
    let mut alphas = Vec::with_capacity(steps);
    let mut sigmas = Vec::with_capacity(steps);
    let mut cumprod = 1.0;
    for b in betas {
        cumprod *= 1.0 - b;
        alphas.push(cumprod.sqrt());
        sigmas.push((1.0 - cumprod).sqrt());
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            kind,
            steps,
            beta_min,
            beta_max,
        },
        alphas,
        sigmas,
    })
}

impl NoiseSchedule {
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn kind(&self) -> ScheduleKind {
        self.spec.kind
    }

    /// Maximum timestep `T`.
    pub fn max_t(&self) -> usize {
        self.alphas.len()
    }

    pub fn check(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.max_t() {
            Err(ScheduleError::OutOfRange { t, max: self.max_t() })
        } else {
            Ok(())
        }
    }

    /// `alpha_t`; panics when `t` is outside `[1, T]`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// `x_t = alpha_t x0 + sigma_t eps`.
pub fn add_noise(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, ScheduleError> {
    sched.check(t)?;
    if x0.shape() != eps.shape() {
        return Err(ScheduleError::Shape {
            data: x0.shape().to_vec(),
            noise: eps.shape().to_vec(),
        });
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(x0.zip_map(eps, |x, e| a * x + s * e))
}

/// Row-wise forward noising where row `i` of `x0` uses timestep `ts[i]`.
pub fn add_noise_rows(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, ScheduleError> {
    if x0.shape() != eps.shape() || x0.rows() != ts.len() {
        return Err(ScheduleError::Shape {
            data: x0.shape().to_vec(),
            noise: eps.shape().to_vec(),
        });
    }
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        sched.check(t)?;
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        for (o, &e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Inclusive integer bounds `[max(1, ceil(lo*T)), floor(hi*T)]`.
pub fn t_bounds(lo_frac: f64, hi_frac: f64, max_t: usize) -> Result<(usize, usize), ScheduleError> {
    if !(0.0 <= lo_frac && lo_frac < hi_frac && hi_frac <= 1.0) {
        return Err(ScheduleError::Config(format!(
            "need 0 <= lo < hi <= 1, got ({lo_frac}, {hi_frac})"
        )));
    }
    // Snap products like 0.98 * 1000 = 979.9999... before rounding inward.
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let lo = (snap(lo_frac * max_t as f64).ceil() as usize).max(1);
    let hi = snap(hi_frac * max_t as f64).floor() as usize;
    if lo > hi {
        return Err(ScheduleError::Config(format!(
            "timestep range ({lo_frac}, {hi_frac}) is empty for T = {max_t}"
        )));
    }
    Ok((lo, hi))
}

/// Uniform integer timestep on the inward-rounded range.
pub fn sample_t(
    lo_frac: f64,
    hi_frac: f64,
    max_t: usize,
    rng: &mut RngStream,
) -> Result<usize, ScheduleError> {
    let (lo, hi) = t_bounds(lo_frac, hi_frac, max_t)?;
    Ok(rng.int_inclusive(lo, hi))
}

/// Loss weighting `w(t)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    #[default]
    Constant,
    SigmaSq,
}

pub fn weight(t: usize, sched: &NoiseSchedule, w: WeightFn) -> f64 {
    match w {
        WeightFn::Constant => 1.0,
        WeightFn::SigmaSq => sched.sigma(t).powi(2),
    }
}
