use serde::{Deserialize, Serialize};

use super::{EvalHook, MetricTrace, ProbeSet};
use crate::distill::{distill_loop, ConditionSet, DistillConfig, DistillState, LossKind};
use crate::nets::EpsNet;
use crate::teacher::GmmTeacher;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Full,
    NoParam,
    SmallRank,
    #[serde(rename = "SDS")]
    Sds,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoParam, Arm::SmallRank, Arm::Sds];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "Full",
            Arm::NoParam => "NoParam",
            Arm::SmallRank => "SmallRank",
            Arm::Sds => "SDS",
        }
    }
}

/// Four distillation arms that differ in one factor each from `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSuite {
    pub base: DistillConfig,
    pub seed: u64,
    pub small_rank: usize,
    pub eval_every: usize,
    pub probes: usize,
    /// Leading fraction of the budget excluded from "worst at every checkpoint".
    pub warmup_frac: f64,
    pub use_ema: bool,
    pub min_frac: f64,
}

impl Default for AblationSuite {
    fn default() -> Self {
        Self {
            base: DistillConfig::default(),
            seed: 0,
            small_rank: 4,
            eval_every: 500,
            probes: 4096,
            warmup_frac: 0.1,
            use_ema: true,
            min_frac: 0.05,
        }
    }
}

impl AblationSuite {
    pub fn arm_config(&self, arm: Arm) -> DistillConfig {
        let mut c = self.base.clone();
        match arm {
            Arm::Full => {}
            Arm::NoParam => c.parameterize_student = false,
            Arm::SmallRank => c.lora_rank = self.small_rank,
            Arm::Sds => c.loss_kind = LossKind::Sds,
        }
        c
    }

    pub fn warmup_iters(&self) -> usize {
        (self.warmup_frac * self.base.iters as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "error", rename_all = "snake_case")]
pub enum ArmStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub status: ArmStatus,
    pub trace: MetricTrace,
    /// Final state, absent when the arm failed.
    pub state: Option<DistillState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub best_frechet: Option<f64>,
    pub final_frechet: Option<f64>,
    pub final_alignment: Option<f64>,
    pub final_coverage: Option<usize>,
    pub status: ArmStatus,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub arms: Vec<ArmResult>,
}

impl AblationResult {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms.iter().find(|r| r.arm == arm).expect("every arm is run")
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.arms
            .iter()
            .map(|r| SummaryRow {
                arm: r.arm.name().to_string(),
                best_frechet: r.trace.best_frechet(),
                final_frechet: r.trace.last().map(|p| p.frechet),
                final_alignment: r.trace.last().map(|p| p.alignment),
                final_coverage: r.trace.last().map(|p| p.coverage),
                status: r.status.clone(),
            })
            .collect()
    }
}

/// Runs the arms one after another with the shared teacher, seed and probe
/// set. A failing arm is recorded and the others still run.
pub fn run_ablation(suite: &AblationSuite, teacher: &EpsNet, gmm: &GmmTeacher, conds: &ConditionSet) -> AblationResult {
    let probes = ProbeSet::new(suite.probes, teacher.data_dim(), conds, suite.seed);
    let arms = Arm::ALL
        .iter()
        .map(|&arm| {
            let cfg = suite.arm_config(arm);
            let mut hook = EvalHook::new(&probes, gmm, MetricTrace::new(arm.name(), suite.seed));
            hook.use_ema = suite.use_ema;
            hook.min_frac = suite.min_frac;
            let run = DistillState::init(&cfg, teacher, suite.seed).and_then(|mut state| {
                distill_loop(&cfg, teacher, &mut state, conds, suite.eval_every, &mut hook)?;
                Ok(state)
            });
            let (status, state) = match run {
                Ok(s) => (ArmStatus::Ok, Some(s)),
                Err(e) => (ArmStatus::Failed(e.to_string()), None),
            };
            ArmResult {
                arm,
                status,
                trace: hook.trace,
                state,
            }
        })
        .collect();
    AblationResult { arms }
}
