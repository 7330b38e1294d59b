use std::ops::ControlFlow;

use rayon::prelude::*;

use super::{alignment_score, assign_modes, frechet_by_class, mode_coverage, EvalError, MetricPoint, MetricTrace};
use crate::distill::{ConditionSet, DistillHooks, DistillState, IterRecord, Student};
use crate::nets::Cond;
use crate::rng::RngStream;
use crate::teacher::GmmTeacher;
use crate::tensor::Tensor;

const CHUNK: usize = 512;

/// Fixed `(z, y)` inputs at which every checkpoint is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub z: Tensor,
    pub y: Vec<Cond>,
}

impl ProbeSet {
    /// `n` noise vectors with conditions cycled over `conds`.
    pub fn new(n: usize, data_dim: usize, conds: &ConditionSet, seed: u64) -> Self {
        let z = RngStream::new(seed, "probe").normal_tensor(&[n, data_dim]);
        Self { z, y: conds.cycle(n) }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub frechet: f64,
    pub regularized: bool,
    pub alignment: f64,
    pub coverage: usize,
    pub histogram: Vec<usize>,
}

/// Generates the probe samples (in parallel chunks) and scores them.
pub fn evaluate_student(
    student: &Student,
    probes: &ProbeSet,
    gmm: &GmmTeacher,
    use_ema: bool,
    min_frac: f64,
) -> Result<(Tensor, EvalMetrics), EvalError> {
    let net = if use_ema { student.ema_net()? } else { student.net().clone() };
    let st = Student::from_parts(net, student.ema().clone(), student.parameterized())?;
    let n = probes.len();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let parts: Vec<Tensor> = chunks
        .par_iter()
        .map(|&(s, e)| st.forward(&probes.z.slice_rows(s, e), &probes.y[s..e]))
        .collect::<Result<_, _>>()?;
    let samples = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>());
    let metrics = score_samples(&samples, &probes.y, gmm, min_frac)?;
    Ok((samples, metrics))
}

pub(crate) fn score_samples(samples: &Tensor, ys: &[Cond], gmm: &GmmTeacher, min_frac: f64) -> Result<EvalMetrics, EvalError> {
    let f = frechet_by_class(samples, ys, gmm)?;
    let assignment = assign_modes(samples, gmm);
    let cov = mode_coverage(&assignment, gmm.modes().len(), min_frac)?;
    Ok(EvalMetrics {
        frechet: f.value,
        regularized: f.regularized,
        alignment: alignment_score(&assignment, ys, gmm)?,
        coverage: cov.modes_hit,
        histogram: cov.histogram,
    })
}

/// Distillation hook that appends probe metrics to a trace.
pub struct EvalHook<'a> {
    pub probes: &'a ProbeSet,
    pub gmm: &'a GmmTeacher,
    pub use_ema: bool,
    pub min_frac: f64,
    pub trace: MetricTrace,
    pub wall_ms: f64,
    /// Stop after this many completed iterations (simulates an interrupt).
    pub stop_at: Option<usize>,
}

impl<'a> EvalHook<'a> {
    pub fn new(probes: &'a ProbeSet, gmm: &'a GmmTeacher, trace: MetricTrace) -> Self {
        Self {
            probes,
            gmm,
            use_ema: true,
            min_frac: 0.05,
            trace,
            wall_ms: 0.0,
            stop_at: None,
        }
    }
}

impl DistillHooks for EvalHook<'_> {
    fn on_iter(&mut self, rec: &IterRecord, _state: &DistillState) -> Result<ControlFlow<()>, String> {
        self.wall_ms += rec.wall_ms;
        Ok(ControlFlow::Continue(()))
    }

    fn on_eval(&mut self, state: &DistillState) -> Result<ControlFlow<()>, String> {
        let (_, m) = evaluate_student(&state.student, self.probes, self.gmm, self.use_ema, self.min_frac)
            .map_err(|e| e.to_string())?;
        self.trace
            .push(MetricPoint {
                iter: state.iter,
                frechet: m.frechet,
                alignment: m.alignment,
                coverage: m.coverage,
                wall_ms: self.wall_ms,
            })
            .map_err(|e| e.to_string())?;
        Ok(match self.stop_at {
            Some(k) if state.iter >= k => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        })
    }
}
