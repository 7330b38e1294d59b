use super::{NetError, ParamSet};

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaShadow {
    decay: f64,
    shadow: ParamSet,
}

impl EmaShadow {
    pub fn new(decay: f64, params: &ParamSet) -> Result<Self, NetError> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(NetError::Config(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        let mut shadow = params.clone();
        shadow.set_requires_grad(false);
        shadow.zero_grad();
        Ok(Self { decay, shadow })
    }

    pub fn from_parts(decay: f64, shadow: ParamSet) -> Result<Self, NetError> {
        Self::new(decay, &shadow)
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &ParamSet {
        &self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ParamSet) -> Result<(), NetError> {
        if !self.shadow.same_structure(params) {
            return Err(NetError::Structure("EMA shadow and parameters differ".into()));
        }
        let d = self.decay;
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }
}
