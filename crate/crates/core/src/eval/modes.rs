use super::EvalError;
use crate::nets::Cond;
use crate::teacher::GmmTeacher;
use crate::tensor::Tensor;

/// Index of the nearest GMM mode of every row, by Mahalanobis distance
/// `|x - mu_k|^2 / s_k^2`.
pub fn assign_modes(samples: &Tensor, gmm: &GmmTeacher) -> Vec<usize> {
    (0..samples.rows())
        .map(|i| {
            let x = samples.row(i);
            gmm.modes()
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    let d2: f64 = x.iter().zip(&m.mean).map(|(a, b)| (a - b).powi(2)).sum();
                    (k, d2 / (m.std * m.std))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .expect("GMM has modes")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub modes_hit: usize,
    /// Samples per mode, zeros included.
    pub histogram: Vec<usize>,
}

/// A mode is hit when at least `min_frac` of the samples land on it.
pub fn mode_coverage(assignment: &[usize], num_modes: usize, min_frac: f64) -> Result<Coverage, EvalError> {
    if !(min_frac > 0.0 && min_frac <= 1.0) {
        return Err(EvalError::Input(format!("min_frac must lie in (0, 1], got {min_frac}")));
    }
    let mut histogram = vec![0; num_modes];
    for &k in assignment {
        histogram[k] += 1;
    }
    let n = assignment.len().max(1) as f64;
    let modes_hit = histogram.iter().filter(|&&c| c as f64 / n >= min_frac).count();
    Ok(Coverage { modes_hit, histogram })
}

/// Fraction of samples whose nearest mode belongs to their own class.
pub fn alignment_score(assignment: &[usize], ys: &[Cond], gmm: &GmmTeacher) -> Result<f64, EvalError> {
    if assignment.len() != ys.len() || ys.is_empty() {
        return Err(EvalError::Input("one class per sample required".into()));
    }
    let mut hits = 0;
    for (&k, y) in assignment.iter().zip(ys) {
        let Cond::Class(c) = *y else {
            return Err(EvalError::Input(format!("alignment needs class conditions, got {y:?}")));
        };
        if gmm.modes()[k].class == c {
            hits += 1;
        }
    }
    Ok(hits as f64 / ys.len() as f64)
}
