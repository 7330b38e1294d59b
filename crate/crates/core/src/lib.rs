//! One-step diffusion distillation lab: a small reverse-mode autodiff engine,
//! noise schedules, conditional noise-prediction networks with LoRA and EMA,
//! analytic and trained teachers, score distillation and evaluation.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distill;
pub mod eval;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod teacher;
pub mod tensor;
