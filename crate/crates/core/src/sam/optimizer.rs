use std::fmt;
use std::str::FromStr;

use crate::autodiff::{GradSet, ParamSet, TensorSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (sgd|adam)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay `θ ← θ − lr·λ·θ`, applied with the outer update.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// SGD or Adam with per-tensor first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseOptimizer {
    config: OptimizerConfig,
    steps: u64,
    first: Option<TensorSet>,
    second: Option<TensorSet>,
}

const FIRST_PREFIX: &str = "optim.m.";
const SECOND_PREFIX: &str = "optim.v.";

impl BaseOptimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            first: None,
            second: None,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<()> {
        if !params.is_congruent(grads) {
            return Err(Error::shape(
                "optimizer step",
                "gradients do not match parameters",
            ));
        }
        let c = &self.config;
        self.steps += 1;
        if c.weight_decay > 0.0 {
            let decay = 1.0 - c.lr * c.weight_decay;
            for t in params.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= decay);
            }
        }
        match c.kind {
            OptimizerKind::Sgd => params.axpy(-c.lr, grads),
            OptimizerKind::Adam => {
                let m = self.first.get_or_insert_with(|| grads.zeros_like());
                let v = self.second.get_or_insert_with(|| grads.zeros_like());
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let tensors = params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut().iter_mut().zip(v.tensors_mut()));
                for ((p, g), (m, v)) in tensors {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((p, &g), (m, v)) in it {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
                Ok(())
            }
        }
    }

    /// Moment tensors, prefixed for storage next to the parameters.
    pub fn export_state(&self) -> TensorSet {
        let mut out = TensorSet::new();
        for (prefix, set) in [(FIRST_PREFIX, &self.first), (SECOND_PREFIX, &self.second)] {
            if let Some(set) = set {
                for (name, t) in set.iter() {
                    out.push(format!("{prefix}{name}"), t.clone());
                }
            }
        }
        out
    }

    /// Restore moments saved by [`export_state`](Self::export_state).
    pub fn import_state(&mut self, steps: u64, state: &TensorSet, params: &ParamSet) -> Result<()> {
        self.steps = steps;
        self.first = take_prefixed(state, FIRST_PREFIX, params)?;
        self.second = take_prefixed(state, SECOND_PREFIX, params)?;
        Ok(())
    }
}

fn take_prefixed(state: &TensorSet, prefix: &str, params: &ParamSet) -> Result<Option<TensorSet>> {
    let mut out = TensorSet::new();
    for (name, t) in state.iter() {
        if let Some(stripped) = name.strip_prefix(prefix) {
            out.push(stripped, t.clone());
        }
    }
    if out.is_empty() {
        return Ok(None);
    }
    if !out.is_congruent(params) {
        return Err(Error::Format(format!(
            "optimizer state {prefix}* does not match the parameters"
        )));
    }
    Ok(Some(out))
}
