use crate::autodiff::{GradSet, ParamSet};
use crate::error::{Error, Result};

use super::BaseOptimizer;

/// Gradients with a smaller global norm produce a zero perturbation.
pub const MIN_GRAD_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SamConfig {
    /// Radius of the perturbation ball.
    pub rho: f64,
    /// Recompute the perturbation every `ascent_period` steps, reusing it in between.
    pub ascent_period: u64,
    pub enabled: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            ascent_period: 1,
            enabled: true,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("sam.rho = {} must be > 0", self.rho)));
        }
        if self.ascent_period == 0 {
            return Err(Error::Config("sam.ascent_period must be >= 1".into()));
        }
        Ok(())
    }
}

/// `ρ·g/‖g‖₂` with the norm taken over every tensor jointly.
pub fn perturbation(grads: &GradSet, rho: f64) -> Result<GradSet> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho = {rho} must be > 0")));
    }
    Ok(ascent(grads, rho))
}

/// Like [`perturbation`] but accepts `rho = 0`.
pub(crate) fn ascent(grads: &GradSet, rho: f64) -> GradSet {
    let norm = grads.norm();
    if !(norm >= MIN_GRAD_NORM) {
        return grads.zeros_like();
    }
    grads.scaled(rho / norm)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Loss at `Θ`, present when the step computed it.
    pub loss: Option<f64>,
    /// Loss at `Θ + Δ`; absent when SAM is disabled.
    pub perturbed_loss: Option<f64>,
    pub grad_evals: u64,
    /// Whether the perturbation was recomputed on this step.
    pub ascent: bool,
}

/// Applies SAM steps and holds the cached perturbation between ascents.
#[derive(Clone, Debug, PartialEq)]
pub struct SamStepper {
    config: SamConfig,
    cached: Option<GradSet>,
}

impl SamStepper {
    pub fn new(config: SamConfig) -> Result<Self> {
        if config.enabled {
            config.validate()?;
        }
        Ok(Self {
            config,
            cached: None,
        })
    }

    pub fn config(&self) -> &SamConfig {
        &self.config
    }

    pub fn cached_perturbation(&self) -> Option<&GradSet> {
        self.cached.as_ref()
    }

    pub fn set_cached_perturbation(&mut self, delta: Option<GradSet>) {
        self.cached = delta;
    }

    /// One training step. `loss_fn` returns the loss and gradient at the
    /// parameters it is given and must be deterministic within a step.
    ///
    /// On error `params` and the optimizer are left untouched.
    pub fn step<F>(
        &mut self,
        params: &mut ParamSet,
        base: &mut BaseOptimizer,
        step_index: u64,
        mut loss_fn: F,
    ) -> Result<StepReport>
    where
        F: FnMut(&ParamSet) -> Result<(f64, GradSet)>,
    {
        if !self.config.enabled {
            let (loss, grads) = loss_fn(params)?;
            check_finite(loss, &grads, "loss")?;
            base.step(params, &grads)?;
            return Ok(StepReport {
                loss: Some(loss),
                perturbed_loss: None,
                grad_evals: 1,
                ascent: false,
            });
        }

        let mut report = StepReport::default();
        let delta = match self.cached.take() {
            Some(d) if step_index % self.config.ascent_period != 0 => d,
            _ => {
                let (loss, grads) = loss_fn(params)?;
                report.grad_evals += 1;
                check_finite(loss, &grads, "loss")?;
                report.loss = Some(loss);
                report.ascent = true;
                perturbation(&grads, self.config.rho)?
            }
        };
        let perturbed = params.added(&delta)?;
        let outcome = loss_fn(&perturbed);
        self.cached = Some(delta);
        let (loss, grads) = outcome?;
        report.grad_evals += 1;
        check_finite(loss, &grads, "perturbed loss")?;
        report.perturbed_loss = Some(loss);
        base.step(params, &grads)?;
        Ok(report)
    }
}

fn check_finite(loss: f64, grads: &GradSet, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("{what} is {loss}")));
    }
    if !grads.all_finite() {
        return Err(Error::Numeric(format!("non-finite gradient of the {what}")));
    }
    Ok(())
}
