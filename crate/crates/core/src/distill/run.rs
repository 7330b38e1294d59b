use std::ops::ControlFlow;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{lora_step, ConditionSet, DistillConfig, DistillError, LossKind, Student, StudentStep};
use crate::nets::{EpsNet, LoraNet};
use crate::optim::Adam;
use crate::rng::RngStream;

/// Per-iteration training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub grad_norm: f64,
    /// `None` when the arm has no LoRA teacher.
    pub lora_loss: Option<f64>,
    pub wall_ms: f64,
}

/// Everything that evolves during distillation; enough to resume a run.
#[derive(Debug, Clone)]
pub struct DistillState {
    /// Completed iterations.
    pub iter: usize,
    pub student: Student,
    pub lora: Option<LoraNet>,
    pub opt_student: Adam,
    pub opt_lora: Adam,
    pub rng_student: RngStream,
    pub rng_lora: RngStream,
}

impl DistillState {
    /// Algorithm start: student and LoRA teacher both copy the teacher.
    pub fn init(cfg: &DistillConfig, teacher: &EpsNet, seed: u64) -> Result<Self, DistillError> {
        cfg.validate()?;
        let student = Student::from_teacher(teacher, cfg.ema_decay, cfg.parameterize_student)?;
        let lora = match cfg.loss_kind {
            LossKind::Vsd => Some(LoraNet::attach(
                teacher,
                cfg.lora_rank,
                cfg.lora_alpha,
                &mut RngStream::new(seed, "lora_init"),
            )?),
            LossKind::Sds => None,
        };
        Ok(Self {
            iter: 0,
            student,
            lora,
            opt_student: Adam::new(cfg.eta1),
            opt_lora: Adam::new(cfg.eta2),
            rng_student: RngStream::new(seed, "student"),
            rng_lora: RngStream::new(seed, "lora"),
        })
    }
}

/// Callbacks from [`distill_loop`].
pub trait DistillHooks {
    /// After every iteration.
    fn on_iter(&mut self, _rec: &IterRecord, _state: &DistillState) -> Result<ControlFlow<()>, String> {
        Ok(ControlFlow::Continue(()))
    }

    /// Before the first iteration of a fresh run, every `every` iterations
    /// and after the last one.
    fn on_eval(&mut self, _state: &DistillState) -> Result<ControlFlow<()>, String> {
        Ok(ControlFlow::Continue(()))
    }
}

pub struct NoHooks;

impl DistillHooks for NoHooks {}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    /// False when a hook stopped the run early.
    pub completed: bool,
    pub records: Vec<IterRecord>,
}

/// Alternates one student update and one LoRA update per iteration until
/// `cfg.iters` iterations have completed, continuing from `state.iter`.
pub fn distill_loop(
    cfg: &DistillConfig,
    teacher: &EpsNet,
    state: &mut DistillState,
    conds: &ConditionSet,
    every: usize,
    hooks: &mut dyn DistillHooks,
) -> Result<LoopOutcome, DistillError> {
    cfg.validate()?;
    conds.validate()?;
    if every == 0 {
        return Err(DistillError::Config("evaluation interval must be >= 1".into()));
    }
    if (cfg.loss_kind == LossKind::Vsd) != state.lora.is_some() {
        return Err(DistillError::Config("LoRA teacher must exist exactly for VSD".into()));
    }
    let mut records = Vec::new();
    let abort = |iter: usize, last: Option<&IterRecord>, e: DistillError| DistillError::Aborted {
        iter,
        last: last.cloned(),
        source: Box::new(e),
    };
    let stopped = |flow: ControlFlow<()>| flow.is_break();
    if state.iter == 0 && stopped(hooks.on_eval(state).map_err(|e| abort(0, None, DistillError::Hook(e)))?) {
        return Ok(LoopOutcome { completed: false, records });
    }
    while state.iter < cfg.iters {
        let iter = state.iter + 1;
        let start = Instant::now();
        let rec = step_once(cfg, teacher, state, conds).map_err(|e| abort(iter, records.last(), e))?;
        let rec = IterRecord {
            iter,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            ..rec
        };
        state.iter = iter;
        records.push(rec.clone());
        let hook_err = |e: String| abort(iter, Some(&rec), DistillError::Hook(e));
        if stopped(hooks.on_iter(&rec, state).map_err(hook_err)?) {
            return Ok(LoopOutcome { completed: false, records });
        }
        if (iter.is_multiple_of(every) || iter == cfg.iters) && stopped(hooks.on_eval(state).map_err(hook_err)?) {
            return Ok(LoopOutcome { completed: iter == cfg.iters, records });
        }
    }
    Ok(LoopOutcome { completed: true, records })
}

fn step_once(
    cfg: &DistillConfig,
    teacher: &EpsNet,
    state: &mut DistillState,
    conds: &ConditionSet,
) -> Result<IterRecord, DistillError> {
    let DistillState {
        student,
        lora,
        opt_student,
        opt_lora,
        rng_student,
        rng_lora,
        ..
    } = state;
    let StudentStep { grad_norm, x0_hat, y } = match lora {
        Some(l) => super::vsd_student_step(student, teacher, l, conds, cfg, opt_student, rng_student)?,
        None => super::sds_student_step(student, teacher, conds, cfg, opt_student, rng_student)?,
    };
    let lora_loss = match lora {
        Some(l) => Some(lora_step(l, &x0_hat, &y, cfg.t_range_lora, cfg.lora_cond_dropout, opt_lora, rng_lora)?),
        None => None,
    };
    Ok(IterRecord {
        iter: 0,
        grad_norm,
        lora_loss,
        wall_ms: 0.0,
    })
}
