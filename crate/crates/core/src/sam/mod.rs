//! Sharpness-aware minimization around a base optimizer.
//!
//! Each step first ascends to `Θ + Δ` with `Δ = ρ·∇L(Θ)/‖∇L(Θ)‖₂`, then
//! applies the base optimizer to `Θ` using the gradient taken at `Θ + Δ`.
//! Parameters are never mutated by the ascent: the perturbed point is a copy.

mod optimizer;
mod step;
mod train;

pub use optimizer::{BaseOptimizer, OptimizerConfig, OptimizerKind};
pub use step::{perturbation, SamConfig, SamStepper, StepReport, MIN_GRAD_NORM};
pub use train::{train, EpochRecord, Objective, TrainOutcome, TrainSettings, TrainState};
