use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sbrush_core::distill::{distill_loop, DistillHooks, DistillState, IterRecord, LossKind};
use sbrush_core::eval::{
    interpolate_sample, run_ablation, EvalHook, InterpSpec, MetricTrace, ProbeSet, SummaryRow,
};
use sbrush_core::nets::{Cond, EpsNet, Init};
use sbrush_core::rng::RngStream;
use sbrush_core::teacher::{ddim_sample, train_teacher, DatasetSpec, ToyDataset};
use sbrush_core::tensor::Tensor;

use crate::checkpoint::{Checkpoint, Component};
use crate::config::{RunConfig, TeacherMode};
use crate::manifest::{prepare_run_dir, RunRecorder};
use crate::models;

pub const TEACHER_DIR: &str = "teacher";
pub const DISTILL_DIR: &str = "distill";
pub const ABLATE_DIR: &str = "ablate";

/// Trains the network teacher on GMM samples and writes `teacher.sbck`.
pub fn train_teacher_cmd(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    if cfg.teacher.mode == TeacherMode::Analytic {
        bail!("analytic teacher needs no training (set teacher.mode = \"trained\")");
    }
    let dir = prepare_run_dir(&cfg.out.join(TEACHER_DIR), force)?;
    let mut rec = RunRecorder::start("train-teacher", cfg);
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let data = ToyDataset::generate(
        &DatasetSpec::Gmm { gmm: cfg.gmm.clone() },
        cfg.teacher.dataset_size,
        &mut RngStream::new(cfg.seed, "dataset"),
    )?;
    let mut net = EpsNet::new(
        cfg.net.clone(),
        models::schedule(cfg)?,
        Init::Standard,
        &mut RngStream::new(cfg.seed, "teacher_init"),
    )?;
    let report = train_teacher(&data, &mut net, &cfg.teacher.train, &mut RngStream::new(cfg.seed, "teacher_train"))
        .context("teacher training failed")?;
    let mut log = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(log, "{},{l}", i + 1)?;
    }
    std::fs::write(dir.join("train_log.csv"), log)?;
    let path = dir.join("teacher.sbck");
    models::save_teacher(&path, &cfg.hash(), &net)?;
    rec.file(&dir, "teacher.sbck")?;
    rec.file(&dir, "train_log.csv")?;
    rec.finish(&dir)?;
    println!(
        "final loss {:.6} (mean of last 10%: {:.6})",
        report.final_loss().unwrap_or(f64::NAN),
        tail_mean(&report.losses, 0.1)
    );
    println!("teacher checkpoint: {}", path.display());
    Ok(path)
}

fn tail_mean(v: &[f64], frac: f64) -> f64 {
    let k = ((v.len() as f64 * frac).ceil() as usize).clamp(1, v.len().max(1));
    v[v.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
}

#[derive(Debug, Clone, Default)]
pub struct DistillOpts {
    /// Continue from `resume.sbck` in the existing run directory.
    pub resume: bool,
    /// Stop after the first evaluation at or past this iteration, as if the
    /// process had been interrupted there.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DistillSummary {
    pub dir: PathBuf,
    pub completed: bool,
    pub iter: usize,
    pub trace: MetricTrace,
}

/// Persists metrics and resume state at every evaluation.
struct RunHook<'a> {
    eval: EvalHook<'a>,
    dir: &'a Path,
    config_hash: String,
    cfg: &'a sbrush_core::distill::DistillConfig,
    iters: BufWriter<File>,
}

impl DistillHooks for RunHook<'_> {
    fn on_iter(&mut self, rec: &IterRecord, state: &DistillState) -> Result<ControlFlow<()>, String> {
        let line = serde_json::to_string(rec).map_err(|e| e.to_string())?;
        writeln!(self.iters, "{line}").map_err(|e| e.to_string())?;
        self.eval.on_iter(rec, state)
    }

    fn on_eval(&mut self, state: &DistillState) -> Result<ControlFlow<()>, String> {
        let flow = self.eval.on_eval(state)?;
        let io = |e: anyhow::Error| format!("{e:#}");
        write_trace(self.dir, "metrics", &self.eval.trace).map_err(io)?;
        self.iters.flush().map_err(|e| e.to_string())?;
        models::save_resume(&self.dir.join("resume.sbck"), &self.config_hash, self.cfg, state).map_err(io)?;
        Ok(flow)
    }
}

fn write_trace(dir: &Path, stem: &str, trace: &MetricTrace) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}.jsonl")), trace.to_jsonl())?;
    std::fs::write(dir.join(format!("{stem}.csv")), trace.to_csv())?;
    Ok(())
}

/// Runs the alternating distillation loop and writes the student, its EMA,
/// the LoRA teacher (VSD only) and the metric trace.
pub fn distill_cmd(cfg: &RunConfig, force: bool, opts: &DistillOpts) -> Result<DistillSummary> {
    let dir = cfg.out.join(DISTILL_DIR);
    let resume_path = dir.join("resume.sbck");
    if opts.resume {
        if !resume_path.exists() {
            bail!("nothing to resume: {} does not exist", resume_path.display());
        }
    } else {
        prepare_run_dir(&dir, force)?;
    }
    // Everything that can be checked is checked before the first update.
    let teacher = models::teacher_for(cfg)?;
    let gmm = models::gmm(cfg)?;
    let conds = cfg.conditions();
    let config_hash = cfg.hash();
    let mut rec = RunRecorder::start("distill", cfg);
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let (mut state, trace) = if opts.resume {
        let state = models::load_resume(&resume_path, &config_hash, &cfg.distill, &teacher)?;
        let text = std::fs::read_to_string(dir.join("metrics.jsonl"))?;
        let mut trace = MetricTrace::from_jsonl(&text)?;
        trace.points.retain(|p| p.iter <= state.iter);
        truncate_iter_log(&dir.join("iters.jsonl"), state.iter)?;
        (state, trace)
    } else {
        let state = DistillState::init(&cfg.distill, &teacher, cfg.seed)?;
        (state, MetricTrace::new(run_id(cfg), cfg.seed))
    };

    let probes = ProbeSet::new(cfg.eval.probes, cfg.gmm.data_dim, &conds, cfg.seed);
    let mut eval = EvalHook::new(&probes, &gmm, trace);
    eval.use_ema = cfg.eval.use_ema;
    eval.min_frac = cfg.eval.min_frac;
    eval.wall_ms = eval.trace.last().map_or(0.0, |p| p.wall_ms);
    eval.stop_at = opts.stop_after;
    let iters = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("iters.jsonl"))?;
    let mut hook = RunHook {
        eval,
        dir: &dir,
        config_hash: config_hash.clone(),
        cfg: &cfg.distill,
        iters: BufWriter::new(iters),
    };
    let start = Instant::now();
    let outcome = distill_loop(&cfg.distill, &teacher, &mut state, &conds, cfg.eval.every, &mut hook)?;
    hook.iters.flush()?;
    let trace = hook.eval.trace;

    models::save_teacher(&dir.join("teacher.sbck"), &config_hash, &teacher)?;
    let written = models::save_distilled(&dir, &config_hash, &cfg.distill, &state)?;
    for name in written.iter().copied().chain(["teacher.sbck"]) {
        rec.file(&dir, name)?;
    }
    rec.hashed("metrics.jsonl", trace.content_hash());
    rec.finish(&dir)?;

    if let Some(p) = trace.last() {
        println!(
            "iter {}: frechet {:.4}, alignment {:.3}, coverage {} ({:.1}s this session)",
            p.iter,
            p.frechet,
            p.alignment,
            p.coverage,
            start.elapsed().as_secs_f64()
        );
    }
    if !outcome.completed {
        println!("stopped at iteration {}; continue with --resume", state.iter);
    }
    Ok(DistillSummary {
        dir,
        completed: outcome.completed,
        iter: state.iter,
        trace,
    })
}

fn run_id(cfg: &RunConfig) -> String {
    let arm = match (cfg.distill.loss_kind, cfg.distill.parameterize_student) {
        (LossKind::Sds, _) => "sds",
        (LossKind::Vsd, true) => "vsd",
        (LossKind::Vsd, false) => "vsd-noparam",
    };
    format!("{arm}-seed{}", cfg.seed)
}

fn truncate_iter_log(path: &Path, upto: usize) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: IterRecord = serde_json::from_str(line).context("parsing iters.jsonl")?;
        if rec.iter <= upto {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    OneStep,
    Ddim(usize),
}

impl std::str::FromStr for SampleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "onestep" {
            return Ok(SampleMode::OneStep);
        }
        let steps = s
            .strip_prefix("ddim:")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .ok_or_else(|| format!("mode must be 'onestep' or 'ddim:<steps>', got '{s}'"))?;
        Ok(SampleMode::Ddim(steps))
    }
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub n: usize,
    pub y: Option<usize>,
    pub mode: SampleMode,
    pub out: PathBuf,
    pub seed: u64,
    pub guidance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub n: usize,
    pub total_ms: f64,
    pub per_sample_ms: f64,
}

/// Writes `n` samples as CSV (`y,x0,x1,...`) and a timing summary next to it.
pub fn sample_cmd(args: &SampleArgs) -> Result<Timing> {
    if args.n == 0 {
        bail!("need at least one sample");
    }
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let k = ck.meta.net.num_classes;
    let ys: Vec<Cond> = match args.y {
        Some(y) if y >= k => bail!("class {y} out of range; checkpoint has {k} classes"),
        Some(y) => vec![Cond::Class(y); args.n],
        None => sbrush_core::distill::ConditionSet::uniform(k).cycle(args.n),
    };
    let mut rng = RngStream::new(args.seed, "sample");
    let (x, elapsed) = match args.mode {
        SampleMode::OneStep => {
            let student = models::student_from_checkpoint(&ck)?;
            let z = rng.normal_tensor(&[args.n, ck.meta.net.data_dim]);
            let start = Instant::now();
            let x = student.generate(&z, &ys, false)?;
            (x, start.elapsed())
        }
        SampleMode::Ddim(steps) => {
            if ck.meta.component != Component::Teacher {
                bail!("ddim sampling needs a teacher checkpoint, got {}", ck.meta.component);
            }
            let net = models::net_from_checkpoint(&ck)?;
            let start = Instant::now();
            let x = ddim_sample(&net, &net.schedule().clone(), steps, &ys, args.guidance, &mut rng)?;
            (x, start.elapsed())
        }
    };
    if !x.is_finite() {
        bail!("sampling produced non-finite values");
    }
    write_samples(&args.out, &ys, &x)?;
    let total_ms = elapsed.as_secs_f64() * 1e3;
    let timing = Timing {
        n: args.n,
        total_ms,
        per_sample_ms: total_ms / args.n as f64,
    };
    std::fs::write(timing_path(&args.out), serde_json::to_string_pretty(&timing)?)?;
    println!(
        "{} samples -> {} ({:.5} ms per sample)",
        args.n,
        args.out.display(),
        timing.per_sample_ms
    );
    Ok(timing)
}

pub fn timing_path(samples: &Path) -> PathBuf {
    samples.with_extension("timing.json")
}

fn cond_label(c: &Cond) -> String {
    match c {
        Cond::Class(k) => k.to_string(),
        Cond::Null => "null".into(),
        Cond::Lerp { from, to, t } => format!("{from}>{to}@{t}"),
    }
}

fn write_samples(path: &Path, ys: &[Cond], x: &Tensor) -> Result<()> {
    let mut out = String::from("y");
    for j in 0..x.cols() {
        write!(out, ",x{j}")?;
    }
    out.push('\n');
    for (i, y) in ys.iter().enumerate() {
        out.push_str(&cond_label(y));
        for v in x.row(i) {
            write!(out, ",{v}")?;
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Runs the four ablation arms and writes one trace per arm plus a summary.
pub fn ablate_cmd(cfg: &RunConfig, force: bool) -> Result<Vec<SummaryRow>> {
    let dir = prepare_run_dir(&cfg.out.join(ABLATE_DIR), force)?;
    let teacher = models::teacher_for(cfg)?;
    let gmm = models::gmm(cfg)?;
    let mut rec = RunRecorder::start("ablate", cfg);
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let result = run_ablation(&cfg.ablation_suite(), &teacher, &gmm, &cfg.conditions());
    for arm in &result.arms {
        let stem = format!("trace_{}", arm.arm.name());
        write_trace(&dir, &stem, &arm.trace)?;
        rec.hashed(&format!("{stem}.jsonl"), arm.trace.content_hash());
    }
    let summary = result.summary();
    std::fs::write(dir.join("summary.csv"), summary_csv(&summary))?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    rec.file(&dir, "summary.csv")?;
    rec.finish(&dir)?;
    print!("{}", summary_table(&summary));
    Ok(summary)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn status(s: &sbrush_core::eval::ArmStatus) -> String {
    match s {
        sbrush_core::eval::ArmStatus::Ok => "ok".into(),
        sbrush_core::eval::ArmStatus::Failed(m) => format!("failed: {}", m.replace(['\n', ','], " ")),
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("arm,best_frechet,final_frechet,final_alignment,final_coverage,status\n");
    for r in rows {
        let cov = r.final_coverage.map_or_else(|| "NA".into(), |c| c.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{cov},{}",
            r.arm,
            opt(r.best_frechet),
            opt(r.final_frechet),
            opt(r.final_alignment),
            status(&r.status)
        );
    }
    out
}

fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<10} {:>12} {:>12} {:>10} {:>8}  status\n",
        "arm", "best_frechet", "final_frechet", "alignment", "coverage"
    );
    for r in rows {
        let cov = r.final_coverage.map_or_else(|| "NA".into(), |c| c.to_string());
        let _ = writeln!(
            out,
            "{:<10} {:>12} {:>12} {:>10} {:>8}  {}",
            r.arm,
            opt(r.best_frechet),
            opt(r.final_frechet),
            opt(r.final_alignment),
            cov,
            status(&r.status)
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    Lerp,
    Slerp,
}

#[derive(Debug, Clone)]
pub struct InterpArgs {
    pub checkpoint: PathBuf,
    pub mode: InterpMode,
    pub from: usize,
    pub to: usize,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
}

/// Lerp between two class embeddings with the noise fixed, or slerp between
/// two noise draws with the class (`from`) fixed.
pub fn interpolate_cmd(args: &InterpArgs) -> Result<Tensor> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let student = models::student_from_checkpoint(&ck)?;
    let k = ck.meta.net.num_classes;
    if args.from >= k || (args.mode == InterpMode::Lerp && args.to >= k) {
        bail!("class ids must be below {k}");
    }
    let dim = ck.meta.net.data_dim;
    let mut rng = RngStream::new(args.seed, "interp");
    let spec = match args.mode {
        InterpMode::Lerp => InterpSpec::LerpCond {
            from: args.from,
            to: args.to,
            z: rng.normal_vec(dim),
            steps: args.steps,
        },
        InterpMode::Slerp => InterpSpec::SlerpNoise {
            y: Cond::Class(args.from),
            z0: rng.normal_vec(dim),
            z1: rng.normal_vec(dim),
            steps: args.steps,
        },
    };
    let x = interpolate_sample(&student, &spec, false)?;
    let mut out = String::from("step");
    for j in 0..dim {
        write!(out, ",x{j}")?;
    }
    out.push('\n');
    for i in 0..x.rows() {
        out.push_str(&i.to_string());
        for v in x.row(i) {
            write!(out, ",{v}")?;
        }
        out.push('\n');
    }
    std::fs::write(&args.out, out).with_context(|| format!("writing {}", args.out.display()))?;
    println!("{} interpolated samples -> {}", x.rows(), args.out.display());
    Ok(x)
}

/// Human-readable description of a checkpoint.
pub fn inspect_checkpoint_cmd(path: &Path) -> Result<String> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut out = String::new();
    writeln!(out, "{}", path.display())?;
    writeln!(out, "component: {}", ck.meta.component)?;
    writeln!(out, "dtype: {:?}", ck.dtype)?;
    writeln!(out, "iteration: {}", ck.meta.iteration)?;
    writeln!(out, "config_hash: {}", ck.meta.config_hash)?;
    writeln!(out, "metadata: {}", serde_json::to_string(&ck.meta)?)?;
    let total: usize = ck.tensors.iter().map(|(_, t)| t.len()).sum();
    writeln!(out, "tensors: {} ({total} values)", ck.tensors.len())?;
    for (name, t) in &ck.tensors {
        writeln!(out, "  {name:<28} {:?}  |x|={:.6}", t.shape(), t.norm())?;
    }
    Ok(out)
}
