//! Building teachers and students from configs and checkpoints.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sbrush_core::distill::{DistillConfig, DistillState, LossKind, Student};
use sbrush_core::nets::{EmaShadow, EpsNet, Init, LoraNet};
use sbrush_core::optim::Adam;
use sbrush_core::rng::{RngState, RngStream};
use sbrush_core::schedule::NoiseSchedule;
use sbrush_core::teacher::GmmTeacher;
use sbrush_core::tensor::Tensor;

use crate::checkpoint::{Checkpoint, CheckpointMeta, Component, Dtype, LoraMeta};
use crate::config::{RunConfig, TeacherMode};

pub fn schedule(cfg: &RunConfig) -> Result<Arc<NoiseSchedule>> {
    Ok(Arc::new(cfg.schedule.build()?))
}

pub fn gmm(cfg: &RunConfig) -> Result<GmmTeacher> {
    Ok(GmmTeacher::new(cfg.gmm.clone(), schedule(cfg)?)?)
}

/// The closed-form teacher as a network: a trunk whose last hidden layer is
/// zero (so it outputs exactly zero) on top of the GMM's `eps*`. Students
/// and LoRA teachers copy it, so they start exactly at the optimum and can
/// still learn.
pub fn analytic_teacher(cfg: &RunConfig) -> Result<EpsNet> {
    let prior = Arc::new(gmm(cfg)?);
    let mut rng = RngStream::new(cfg.seed, "teacher_init");
    Ok(EpsNet::new(cfg.net.clone(), schedule(cfg)?, Init::ZeroLastHidden, &mut rng)?.with_prior(prior)?)
}

/// The teacher named by the config, checked against the config's schedule
/// and architecture before anything trains.
pub fn teacher_for(cfg: &RunConfig) -> Result<EpsNet> {
    match cfg.teacher.mode {
        TeacherMode::Analytic => analytic_teacher(cfg),
        TeacherMode::Trained => {
            let path = cfg.teacher_checkpoint();
            let ck = Checkpoint::load(&path).with_context(|| format!("loading teacher {}", path.display()))?;
            ck.expect(Component::Teacher)?;
            if ck.meta.schedule != cfg.schedule {
                bail!(
                    "teacher/config schedule mismatch: teacher uses {:?}, config uses {:?}",
                    ck.meta.schedule,
                    cfg.schedule
                );
            }
            if ck.meta.net != cfg.net {
                bail!("teacher/config architecture mismatch: teacher uses {:?}, config uses {:?}", ck.meta.net, cfg.net);
            }
            net_from_checkpoint(&ck)
        }
    }
}

pub fn net_meta(component: Component, config_hash: &str, iteration: usize, net: &EpsNet) -> CheckpointMeta {
    CheckpointMeta {
        component,
        config_hash: config_hash.to_string(),
        iteration,
        schedule: net.schedule().spec().clone(),
        net: net.config().clone(),
        gmm_prior: net.prior().map(|g| g.spec().clone()),
        parameterize: None,
        lora: None,
        ema_decay: None,
        extra: serde_json::Value::Null,
    }
}

/// Rebuilds the network stored in a teacher, student or student_ema checkpoint.
pub fn net_from_checkpoint(ck: &Checkpoint) -> Result<EpsNet> {
    let sched = Arc::new(ck.meta.schedule.build()?);
    let prior = match &ck.meta.gmm_prior {
        Some(spec) => Some(Arc::new(GmmTeacher::new(spec.clone(), sched.clone())?)),
        None => None,
    };
    Ok(EpsNet::from_parts(ck.meta.net.clone(), sched, ck.params(""), prior)?)
}

pub fn save_teacher(path: &Path, config_hash: &str, net: &EpsNet) -> Result<()> {
    let mut ck = Checkpoint::new(net_meta(Component::Teacher, config_hash, 0, net), Dtype::F32);
    ck.push_params("", net.params());
    ck.save(path)?;
    Ok(())
}

/// Writes `student.sbck`, `student_ema.sbck` and, for VSD, `lora.sbck`.
/// Returns the names written.
pub fn save_distilled(dir: &Path, config_hash: &str, cfg: &DistillConfig, state: &DistillState) -> Result<Vec<&'static str>> {
    let st = &state.student;
    let mut written = Vec::new();
    for (name, component, params) in [
        ("student.sbck", Component::Student, st.net().params()),
        ("student_ema.sbck", Component::StudentEma, st.ema().shadow()),
    ] {
        let mut meta = net_meta(component, config_hash, state.iter, st.net());
        meta.parameterize = Some(st.parameterized());
        meta.ema_decay = Some(cfg.ema_decay);
        let mut ck = Checkpoint::new(meta, Dtype::F32);
        ck.push_params("", params);
        ck.save(&dir.join(name))?;
        written.push(name);
    }
    if let Some(lora) = &state.lora {
        let mut meta = net_meta(Component::Lora, config_hash, state.iter, lora.base());
        meta.lora = Some(LoraMeta {
            rank: lora.rank(),
            alpha: lora.alpha(),
        });
        let mut ck = Checkpoint::new(meta, Dtype::F32);
        ck.push_params("", lora.adapters());
        ck.save(&dir.join("lora.sbck"))?;
        written.push("lora.sbck");
    }
    Ok(written)
}

/// A one-step generator from a student or student_ema checkpoint.
pub fn student_from_checkpoint(ck: &Checkpoint) -> Result<Student> {
    if !matches!(ck.meta.component, Component::Student | Component::StudentEma) {
        bail!(
            "checkpoint holds a {} component; one-step sampling needs student or student_ema",
            ck.meta.component
        );
    }
    let net = net_from_checkpoint(ck)?;
    let ema = EmaShadow::new(ck.meta.ema_decay.unwrap_or(0.999), net.params())?;
    Ok(Student::from_parts(net, ema, ck.meta.parameterize.unwrap_or(true))?)
}

#[derive(Debug, Serialize, Deserialize)]
struct ResumeExtra {
    rng_student: RngState,
    rng_lora: RngState,
    adam_student_steps: u64,
    adam_lora_steps: u64,
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, opt: &Adam) {
    for (k, t) in opt.state_tensors() {
        ck.push(format!("{prefix}{k}"), &t);
    }
}

fn adam_tensors(ck: &Checkpoint, prefix: &str) -> Vec<(String, Tensor)> {
    ck.tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
        .collect()
}

/// Full-precision snapshot of a distillation run.
pub fn save_resume(path: &Path, config_hash: &str, cfg: &DistillConfig, state: &DistillState) -> Result<()> {
    let st = &state.student;
    let mut meta = net_meta(Component::Resume, config_hash, state.iter, st.net());
    meta.parameterize = Some(st.parameterized());
    meta.ema_decay = Some(cfg.ema_decay);
    meta.lora = state.lora.as_ref().map(|l| LoraMeta {
        rank: l.rank(),
        alpha: l.alpha(),
    });
    meta.extra = serde_json::to_value(ResumeExtra {
        rng_student: state.rng_student.state(),
        rng_lora: state.rng_lora.state(),
        adam_student_steps: state.opt_student.steps_taken(),
        adam_lora_steps: state.opt_lora.steps_taken(),
    })?;
    let mut ck = Checkpoint::new(meta, Dtype::F64);
    ck.push_params("student/", st.net().params());
    ck.push_params("ema/", st.ema().shadow());
    if let Some(l) = &state.lora {
        ck.push_params("lora/", l.adapters());
    }
    push_adam(&mut ck, "adam_student/", &state.opt_student);
    push_adam(&mut ck, "adam_lora/", &state.opt_lora);
    ck.save(path)?;
    Ok(())
}

pub fn load_resume(path: &Path, config_hash: &str, cfg: &DistillConfig, teacher: &EpsNet) -> Result<DistillState> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading resume state {}", path.display()))?;
    ck.expect(Component::Resume)?;
    if ck.meta.config_hash != config_hash {
        bail!("resume state was written by a different config (hash {})", ck.meta.config_hash);
    }
    let extra: ResumeExtra = serde_json::from_value(ck.meta.extra.clone()).context("resume metadata")?;
    let net = EpsNet::from_parts(
        teacher.config().clone(),
        teacher.schedule().clone(),
        ck.params("student/"),
        teacher.prior().cloned(),
    )?;
    let ema = EmaShadow::from_parts(cfg.ema_decay, ck.params("ema/"))?;
    let student = Student::from_parts(net, ema, cfg.parameterize_student)?;
    let lora = match (cfg.loss_kind, ck.meta.lora) {
        (LossKind::Vsd, Some(m)) => Some(LoraNet::from_parts(teacher.clone(), ck.params("lora/"), m.rank, m.alpha)?),
        (LossKind::Sds, None) => None,
        _ => bail!("resume state and config disagree about the LoRA teacher"),
    };
    let mut opt_student = Adam::new(cfg.eta1);
    opt_student.restore(extra.adam_student_steps, &adam_tensors(&ck, "adam_student/"));
    let mut opt_lora = Adam::new(cfg.eta2);
    opt_lora.restore(extra.adam_lora_steps, &adam_tensors(&ck, "adam_lora/"));
    let rng = |s: &RngState| RngStream::from_state(s).context("corrupt RNG state in resume file");
    Ok(DistillState {
        iter: ck.meta.iteration,
        student,
        lora,
        opt_student,
        opt_lora,
        rng_student: rng(&extra.rng_student)?,
        rng_lora: rng(&extra.rng_lora)?,
    })
}
