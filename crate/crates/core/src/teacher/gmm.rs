//! Class-conditional isotropic Gaussian mixtures with a closed-form optimal
//! noise predictor.
//!
//! Under `x_t = alpha_t x0 + sigma_t eps`, a component `N(mu, s^2 I)` becomes
//! `N(alpha_t mu, (alpha_t^2 s^2 + sigma_t^2) I)`, so the time-`t` marginal
//! stays a mixture and `eps* = -sigma_t grad log q_t` has a closed form.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::TeacherError;
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// One class: a weighted set of isotropic Gaussian components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub data_dim: usize,
    pub classes: Vec<ClassSpec>,
}

impl GmmSpec {
    /// `k` single-mode classes evenly spaced on a circle in 2-D, starting at 90 degrees.
    pub fn circle(k: usize, radius: f64, std: f64) -> Self {
        let classes = (0..k)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 + 2.0 * PI * i as f64 / k as f64;
                ClassSpec {
                    weights: vec![1.0],
                    means: vec![vec![radius * a.cos(), radius * a.sin()]],
                    stds: vec![std],
                }
            })
            .collect();
        Self { data_dim: 2, classes }
    }

    /// The desk-scale reference problem: three classes, one mode each.
    pub fn reference() -> Self {
        Self::circle(3, 2.0, 0.3)
    }

    pub fn validate(&self) -> Result<(), TeacherError> {
        if self.classes.is_empty() || self.data_dim == 0 {
            return Err(TeacherError::Spec("need at least one class and data_dim >= 1".into()));
        }
        for (y, c) in self.classes.iter().enumerate() {
            let n = c.weights.len();
            if n == 0 || c.means.len() != n || c.stds.len() != n {
                return Err(TeacherError::Spec(format!("class {y}: ragged component lists")));
            }
            if c.weights.iter().any(|&w| !(w > 0.0)) {
                return Err(TeacherError::Spec(format!("class {y}: weights must be positive")));
            }
            let total: f64 = c.weights.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(TeacherError::Spec(format!(
                    "class {y}: weights sum to {total}, expected 1"
                )));
            }
            if c.means.iter().any(|m| m.len() != self.data_dim) {
                return Err(TeacherError::Spec(format!("class {y}: mean dimension mismatch")));
            }
            if c.stds.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(TeacherError::Spec(format!("class {y}: stds must be positive")));
            }
        }
        Ok(())
    }
}

/// A single mixture component, flattened across classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub class: usize,
    pub log_weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// The analytic teacher: exact `eps*` for a class-conditional GMM.
#[derive(Debug, Clone)]
pub struct GmmTeacher {
    spec: GmmSpec,
    modes: Vec<Mode>,
    class_prior: Vec<f64>,
    sched: Arc<NoiseSchedule>,
}

impl GmmTeacher {
    pub fn new(spec: GmmSpec, sched: Arc<NoiseSchedule>) -> Result<Self, TeacherError> {
        spec.validate()?;
        let modes = spec
            .classes
            .iter()
            .enumerate()
            .flat_map(|(y, c)| {
                (0..c.weights.len()).map(move |k| Mode {
                    class: y,
                    log_weight: c.weights[k].ln(),
                    mean: c.means[k].clone(),
                    std: c.stds[k],
                })
            })
            .collect();
        let k = spec.classes.len();
        Ok(Self {
            spec,
            modes,
            class_prior: vec![1.0 / k as f64; k],
            sched,
        })
    }

    pub fn spec(&self) -> &GmmSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &Arc<NoiseSchedule> {
        &self.sched
    }

    pub fn num_classes(&self) -> usize {
        self.spec.classes.len()
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn class_prior(&self) -> &[f64] {
        &self.class_prior
    }

    /// Class weights for a hard class, or the class prior when `None`.
    pub fn class_weights(&self, y: Option<usize>) -> Result<Vec<f64>, TeacherError> {
        match y {
            None => Ok(self.class_prior.clone()),
            Some(c) if c < self.num_classes() => {
                let mut w = vec![0.0; self.num_classes()];
                w[c] = 1.0;
                Ok(w)
            }
            Some(c) => Err(TeacherError::UnknownClass {
                class: c,
                classes: self.num_classes(),
            }),
        }
    }

    /// Per-mode log terms `log w_y + log pi_k + log N(x; alpha mu_k, v_k I)` at
    /// time `t` (`t = 0` means clean data), with the per-mode variance `v_k`.
    fn mode_terms(&self, x: &[f64], t: usize, class_w: &[f64]) -> Vec<(f64, f64)> {
        let (a, s) = self.alpha_sigma(t);
        let d = x.len() as f64;
        self.modes
            .iter()
            .map(|m| {
                let v = a * a * m.std * m.std + s * s;
                let wy = class_w[m.class];
                if wy <= 0.0 {
                    return (f64::NEG_INFINITY, v);
                }
                let sq: f64 = x.iter().zip(&m.mean).map(|(xi, mi)| (xi - a * mi).powi(2)).sum();
                let log = wy.ln() + m.log_weight - 0.5 * d * (2.0 * PI * v).ln() - 0.5 * sq / v;
                (log, v)
            })
            .collect()
    }

    fn alpha_sigma(&self, t: usize) -> (f64, f64) {
        if t == 0 {
            (1.0, 0.0)
        } else {
            (self.sched.alpha(t), self.sched.sigma(t))
        }
    }

    /// `log q_t(x | class weights)`.
    pub fn log_density(&self, x: &[f64], t: usize, class_w: &[f64]) -> f64 {
        let terms = self.mode_terms(x, t, class_w);
        log_sum_exp(terms.iter().map(|(l, _)| *l))
    }

    /// `eps*(x, t)` for one point under soft class weights.
    pub fn eps_star_point(&self, x: &[f64], t: usize, class_w: &[f64]) -> Vec<f64> {
        let (a, s) = self.alpha_sigma(t);
        let terms = self.mode_terms(x, t, class_w);
        let lse = log_sum_exp(terms.iter().map(|(l, _)| *l));
        let mut out = vec![0.0; x.len()];
        for (m, (l, v)) in self.modes.iter().zip(&terms) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for (o, (xi, mi)) in out.iter_mut().zip(x.iter().zip(&m.mean)) {
                *o += r * (xi - a * mi) / v;
            }
        }
        out.iter_mut().for_each(|o| *o *= s);
        out
    }

    /// Batched `eps*` with per-row timesteps and class weights.
    pub fn eps_star_rows(
        &self,
        x: &Tensor,
        ts: &[usize],
        class_w: &[Vec<f64>],
    ) -> Result<Tensor, TeacherError> {
        self.check_batch(x, ts.len())?;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.rows() {
            self.sched.check(ts[i])?;
            out.row_mut(i)
                .copy_from_slice(&self.eps_star_point(x.row(i), ts[i], &class_w[i]));
        }
        Ok(out)
    }

    fn check_batch(&self, x: &Tensor, rows: usize) -> Result<(), TeacherError> {
        if x.shape().len() != 2 || x.cols() != self.data_dim() || x.rows() != rows {
            return Err(TeacherError::Shape(format!(
                "expected [{rows}, {}], got {:?}",
                self.data_dim(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Draws `x0` from class `y` (or from the class-marginal when `None`).
    pub fn sample_point(&self, y: Option<usize>, rng: &mut RngStream) -> Vec<f64> {
        let class_w = self.class_weights(y).expect("valid class");
        let logits: Vec<f64> = self
            .modes
            .iter()
            .map(|m| {
                if class_w[m.class] > 0.0 {
                    class_w[m.class].ln() + m.log_weight
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let lse = log_sum_exp(logits.iter().copied());
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = self.modes.len() - 1;
        for (k, l) in logits.iter().enumerate() {
            acc += (l - lse).exp();
            if u < acc {
                pick = k;
                break;
            }
        }
        let m = &self.modes[pick];
        m.mean.iter().map(|mu| mu + m.std * rng.normal()).collect()
    }

    /// `n` samples of class `y` as an `[n, D]` tensor.
    pub fn sample(&self, y: Option<usize>, n: usize, rng: &mut RngStream) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| self.sample_point(y, rng)).collect();
        Tensor::from_rows(&rows)
    }

    /// Exactly checks the GMM parameters for bit-identity.
    pub fn same_parameters(&self, other: &GmmTeacher) -> bool {
        self.spec == other.spec
    }
}

pub(crate) fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_vp_schedule, ScheduleKind};

    fn sched() -> Arc<NoiseSchedule> {
        Arc::new(make_vp_schedule(1000, 1e-4, 0.02, ScheduleKind::VpLinear).unwrap())
    }

    fn single(mean: Vec<f64>, std: f64) -> GmmSpec {
        GmmSpec {
            data_dim: mean.len(),
            classes: vec![ClassSpec {
                weights: vec![1.0],
                means: vec![mean],
                stds: vec![std],
            }],
        }
    }

    #[test]
    fn standard_normal_gives_sigma_times_x() {
        let s = sched();
        let g = GmmTeacher::new(single(vec![0.0, 0.0], 1.0), s.clone()).unwrap();
        for t in [1, 250, 999] {
            let x = [0.7, -1.3];
            let e = g.eps_star_point(&x, t, &[1.0]);
            for i in 0..2 {
                assert!((e[i] - s.sigma(t) * x[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn general_gaussian_closed_form() {
        let s = sched();
        let (mu, sd) = (vec![1.5, -0.5], 0.4);
        let g = GmmTeacher::new(single(mu.clone(), sd), s.clone()).unwrap();
        let t = 300;
        let (a, sg) = (s.alpha(t), s.sigma(t));
        let x = [0.2, 0.9];
        let e = g.eps_star_point(&x, t, &[1.0]);
        for i in 0..2 {
            let want = sg * (x[i] - a * mu[i]) / (a * a * sd * sd + sg * sg);
            assert!((e[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut spec = GmmSpec::reference();
        spec.classes[1].weights = vec![0.7];
        assert!(matches!(
            GmmTeacher::new(spec, sched()),
            Err(TeacherError::Spec(_))
        ));
    }

    #[test]
    fn far_points_stay_finite() {
        let g = GmmTeacher::new(GmmSpec::reference(), sched()).unwrap();
        let e = g.eps_star_point(&[1e3, -1e3], 5, g.class_prior());
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reference_modes_are_well_separated() {
        let spec = GmmSpec::reference();
        let m: Vec<&Vec<f64>> = spec.classes.iter().map(|c| &c.means[0]).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                let d: f64 = m[i].iter().zip(m[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 6.0 * 0.3);
            }
        }
    }
}
