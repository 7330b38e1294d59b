use super::{Cond, EpsNet, GradTargets, Head, NetError, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};

pub(crate) fn lora_a(i: usize) -> String {
    format!("l{i}.lora_a")
}

pub(crate) fn lora_b(i: usize) -> String {
    format!("l{i}.lora_b")
}

/// A frozen [`EpsNet`] with low-rank deltas on its hidden linear layers.
///
/// For a layer stored as `W: [in, out]` the adapter holds a down-projection
/// `A: [in, r]` and an up-projection `B: [r, out]`, and the layer computes
/// `x W + (alpha / r) (x A) B`. `B` starts at zero, so the adapted network is
/// exactly the base network until the first update. The output head is not
/// adapted: its width is the data dimension, below any useful rank.
#[derive(Debug, Clone)]
pub struct LoraNet {
    base: EpsNet,
    adapters: ParamSet,
    rank: usize,
    alpha: f64,
}

impl LoraNet {
    pub fn attach(base: &EpsNet, rank: usize, alpha: f64, rng: &mut RngStream) -> Result<Self, NetError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(NetError::Config(format!("LoRA alpha must be positive, got {alpha}")));
        }
        let dims = base.config().layer_dims();
        let hidden = &dims[..dims.len() - 1];
        if rank == 0 {
            return Err(NetError::Config("LoRA rank must be >= 1".into()));
        }
        if let Some((i, &(m, n))) = hidden.iter().enumerate().find(|(_, (m, n))| rank > *m.min(n)) {
            return Err(NetError::Config(format!(
                "LoRA rank {rank} exceeds min({m}, {n}) of layer {i}"
            )));
        }
        let mut adapters = ParamSet::new();
        for (i, &(fan_in, fan_out)) in hidden.iter().enumerate() {
            let scale = (1.0 / fan_in as f64).sqrt();
            adapters.insert(lora_a(i), rng.normal_tensor(&[fan_in, rank]).map(|v| v * scale));
            adapters.insert(lora_b(i), Tensor::zeros(&[rank, fan_out]));
        }
        Ok(Self {
            base: base.clone(),
            adapters,
            rank,
            alpha,
        })
    }

    /// Rebuilds an adapted network from stored adapters.
    pub fn from_parts(base: EpsNet, mut adapters: ParamSet, rank: usize, alpha: f64) -> Result<Self, NetError> {
        let template = Self::attach(&base, rank, alpha, &mut RngStream::new(0, "template"))?;
        if !template.adapters.same_structure(&adapters) {
            return Err(NetError::Structure("stored adapters do not match the base network".into()));
        }
        adapters.set_requires_grad(false);
        Ok(Self {
            base,
            adapters,
            rank,
            alpha,
        })
    }

    pub fn base(&self) -> &EpsNet {
        &self.base
    }

    pub fn adapters(&self) -> &ParamSet {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut ParamSet {
        &mut self.adapters
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn eps_forward(&self, x: &Tensor, ts: &[usize], y: &[Cond]) -> Result<Tensor, NetError> {
        Ok(self
            .base
            .run(x, ts, y, Some((&self.adapters, self.scale())), GradTargets::default(), Head::Eps)?
            .1)
    }

    /// Forward pass with gradients flowing to the adapters only.
    pub fn forward_train(&self, x: &Tensor, ts: &[usize], y: &[Cond]) -> Result<(Graph, Tensor), NetError> {
        let grads = GradTargets {
            adapter: true,
            ..Default::default()
        };
        self.base
            .run(x, ts, y, Some((&self.adapters, self.scale())), grads, Head::Eps)
    }
}
