use serde::{Deserialize, Serialize};

use super::{GmmSpec, GmmTeacher, TeacherError};
use crate::rng::RngStream;
use crate::schedule::ScheduleSpec;
use crate::tensor::Tensor;

/// How toy training data is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Samples from a class-conditional Gaussian mixture.
    Gmm { gmm: GmmSpec },
    /// Class `k` is a ring of radius `(k + 1) * spacing` with Gaussian radial
    /// jitter `width`.
    Rings { classes: usize, spacing: f64, width: f64 },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Gmm { gmm } => gmm.classes.len(),
            DatasetSpec::Rings { classes, .. } => *classes,
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            DatasetSpec::Gmm { gmm } => gmm.data_dim,
            DatasetSpec::Rings { .. } => 2,
        }
    }
}

/// Labelled clean samples `(x0, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub spec: DatasetSpec,
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl ToyDataset {
    /// `n` samples with classes drawn uniformly.
    pub fn generate(spec: &DatasetSpec, n: usize, rng: &mut RngStream) -> Result<Self, TeacherError> {
        if n == 0 {
            return Err(TeacherError::Config("dataset must be nonempty".into()));
        }
        let k = spec.num_classes();
        let mut rows = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        match spec {
            DatasetSpec::Gmm { gmm } => {
                // The schedule is irrelevant for clean samples.
                let sched = ScheduleSpec::default().build()?;
                let teacher = GmmTeacher::new(gmm.clone(), sched.into())?;
                for _ in 0..n {
                    let y = rng.int_inclusive(0, k - 1);
                    rows.push(teacher.sample_point(Some(y), rng));
                    ys.push(y);
                }
            }
            &DatasetSpec::Rings { classes, spacing, width } => {
                if classes == 0 || !(spacing > 0.0) || !(width >= 0.0) {
                    return Err(TeacherError::Spec(format!(
                        "rings need classes >= 1, spacing > 0, width >= 0; got {classes}, {spacing}, {width}"
                    )));
                }
                for _ in 0..n {
                    let y = rng.int_inclusive(0, k - 1);
                    let theta = 2.0 * std::f64::consts::PI * rng.uniform();
                    let r = (y + 1) as f64 * spacing + width * rng.normal();
                    rows.push(vec![r * theta.cos(), r * theta.sin()]);
                    ys.push(y);
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            x: Tensor::from_rows(&rows),
            y: ys,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }
}
