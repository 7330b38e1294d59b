use super::TeacherError;
use crate::nets::{Cond, EpsModel};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Strided timesteps `ceil(k T / n)` for `k = n, ..., 1`.
pub fn ddim_timesteps(max_t: usize, n_steps: usize) -> Result<Vec<usize>, TeacherError> {
    if n_steps == 0 || n_steps > max_t {
        return Err(TeacherError::Config(format!(
            "DDIM needs 1 <= steps <= {max_t}, got {n_steps}"
        )));
    }
    Ok((1..=n_steps)
        .rev()
        .map(|k| (k * max_t).div_ceil(n_steps))
        .collect())
}

/// Deterministic DDIM from `x_T ~ N(0, I)` down to clean data, applying
/// guidance scale `s` at every step. `y` holds one condition per sample.
pub fn ddim_sample(
    model: &dyn EpsModel,
    sched: &NoiseSchedule,
    n_steps: usize,
    y: &[Cond],
    s: f64,
    rng: &mut RngStream,
) -> Result<Tensor, TeacherError> {
    let ts = ddim_timesteps(sched.max_t(), n_steps)?;
    let n = y.len();
    let mut x = rng.normal_tensor(&[n, model.data_dim()]);
    for (i, &t) in ts.iter().enumerate() {
        let eps = model.cfg_eps(&x, &vec![t; n], y, s)?;
        let (a, sg) = (sched.alpha(t), sched.sigma(t));
        let (a_prev, s_prev) = match ts.get(i + 1) {
            Some(&tp) => (sched.alpha(tp), sched.sigma(tp)),
            None => (1.0, 0.0),
        };
        x = x.zip_map(&eps, |xv, ev| {
            let x0 = (xv - sg * ev) / a;
            a_prev * x0 + s_prev * ev
        });
    }
    Ok(x)
}
