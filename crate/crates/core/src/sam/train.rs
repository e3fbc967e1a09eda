use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::augment::{combined_loss_and_grad, ContrastiveConfig};
use crate::autodiff::{GradSet, ParamSet, TensorSet};
use crate::dataset::{epoch_batches, SequenceDataset, Split, TrainingBatch};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, CandidateScheme};
use crate::model::{bce_loss_and_grad, init, Checkpoint, SasrecConfig};
use crate::rng;

use super::{BaseOptimizer, OptimizerConfig, SamConfig, SamStepper};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    #[default]
    Bce,
    BceContrastive,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Bce => "bce",
            Objective::BceContrastive => "bce+contrastive",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bce" => Ok(Objective::Bce),
            "bce+contrastive" => Ok(Objective::BceContrastive),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (bce|bce+contrastive)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub model: SasrecConfig,
    pub objective: Objective,
    pub contrastive: ContrastiveConfig,
    pub optimizer: OptimizerConfig,
    pub sam: SamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_negatives: usize,
    /// Epochs without a validation NDCG@10 improvement before stopping; 0 never stops.
    pub patience: usize,
    pub candidates: CandidateScheme,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(model: SasrecConfig) -> Self {
        Self {
            model,
            objective: Objective::Bce,
            contrastive: ContrastiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            sam: SamConfig::default(),
            epochs: 20,
            batch_size: 128,
            num_negatives: 1,
            patience: 5,
            candidates: CandidateScheme::FullCatalog,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.sam.enabled {
            self.sam.validate()?;
        }
        if self.objective == Objective::BceContrastive {
            self.contrastive.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be >= 1".into()));
        }
        Ok(())
    }

    /// Loss and gradient of the configured objective on one batch, with the
    /// dropout and augmentation stream fixed by `step_seed`.
    pub fn loss_and_grad(
        &self,
        params: &ParamSet,
        batch: &TrainingBatch,
        step_seed: u64,
    ) -> Result<(f64, GradSet)> {
        let mut r = rng::seeded(step_seed);
        match self.objective {
            Objective::Bce => bce_loss_and_grad(params, &self.model, batch, true, &mut r),
            Objective::BceContrastive => {
                combined_loss_and_grad(params, &self.model, batch, &self.contrastive, true, &mut r)
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss at the unperturbed parameters over the steps that computed it.
    pub train_loss: Option<f64>,
    pub perturbed_loss_mean: Option<f64>,
    pub valid_hr10: f64,
    pub valid_ndcg10: f64,
    /// Cumulative gradient evaluations since the start of training.
    pub grad_evals: u64,
    pub wall_seconds: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamSet,
    pub best_params: ParamSet,
    pub optimizer: BaseOptimizer,
    pub sam: SamStepper,
    pub epochs_done: usize,
    pub steps: u64,
    pub grad_evals: u64,
    pub best_ndcg: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub stopped: bool,
}

const DELTA_PREFIX: &str = "sam.delta.";
const BEST_PREFIX: &str = "best.";

impl TrainState {
    pub fn fresh(settings: &TrainSettings) -> Result<Self> {
        let params = init(&settings.model, settings.seed)?;
        Ok(Self {
            best_params: params.clone(),
            params,
            optimizer: BaseOptimizer::new(settings.optimizer.clone())?,
            sam: SamStepper::new(settings.sam.clone())?,
            epochs_done: 0,
            steps: 0,
            grad_evals: 0,
            best_ndcg: f64::NEG_INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
            stopped: false,
        })
    }

    pub fn to_checkpoint(&self, settings: &TrainSettings) -> Checkpoint {
        let mut ck = Checkpoint::new(settings.model.clone(), self.params.clone());
        let meta = [
            ("kind", "train_state".to_string()),
            ("epochs_done", self.epochs_done.to_string()),
            ("steps", self.steps.to_string()),
            ("grad_evals", self.grad_evals.to_string()),
            ("optimizer_steps", self.optimizer.steps().to_string()),
            (
                "best_ndcg_bits",
                format!("{:016x}", self.best_ndcg.to_bits()),
            ),
            ("best_epoch", self.best_epoch.to_string()),
            ("bad_epochs", self.bad_epochs.to_string()),
            ("stopped", self.stopped.to_string()),
        ];
        for (k, v) in meta {
            ck.meta.insert(k.into(), v);
        }
        ck.extra = self.optimizer.export_state();
        if let Some(delta) = self.sam.cached_perturbation() {
            push_prefixed(&mut ck.extra, DELTA_PREFIX, delta);
        }
        push_prefixed(&mut ck.extra, BEST_PREFIX, &self.best_params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, settings: &TrainSettings) -> Result<Self> {
        if ck.config != settings.model {
            return Err(Error::Config(
                "training state was produced with a different model config".into(),
            ));
        }
        if ck.meta.get("kind").map(String::as_str) != Some("train_state") {
            return Err(Error::Format(
                "checkpoint does not hold a training state".into(),
            ));
        }
        let get = |k: &str| {
            ck.meta
                .get(k)
                .ok_or_else(|| Error::Format(format!("training state lacks {k:?}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad training state field {k:?}")))
        };
        let bits = u64::from_str_radix(get("best_ndcg_bits")?, 16)
            .map_err(|_| Error::Format("bad training state field \"best_ndcg_bits\"".into()))?;
        let mut optimizer = BaseOptimizer::new(settings.optimizer.clone())?;
        optimizer.import_state(num("optimizer_steps")?, &ck.extra, &ck.params)?;
        let mut sam = SamStepper::new(settings.sam.clone())?;
        sam.set_cached_perturbation(take_prefixed(&ck.extra, DELTA_PREFIX, &ck.params)?);
        let best_params = take_prefixed(&ck.extra, BEST_PREFIX, &ck.params)?
            .ok_or_else(|| Error::Format("training state lacks the best parameters".into()))?;
        Ok(Self {
            params: ck.params.clone(),
            best_params,
            optimizer,
            sam,
            epochs_done: num("epochs_done")? as usize,
            steps: num("steps")?,
            grad_evals: num("grad_evals")?,
            best_ndcg: f64::from_bits(bits),
            best_epoch: num("best_epoch")? as usize,
            bad_epochs: num("bad_epochs")? as usize,
            stopped: get("stopped")? == "true",
        })
    }
}

fn push_prefixed(out: &mut TensorSet, prefix: &str, set: &TensorSet) {
    for (name, t) in set.iter() {
        out.push(format!("{prefix}{name}"), t.clone());
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
            "stored {prefix}* tensors do not match the parameters"
        )));
    }
    Ok(Some(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Records of the epochs run by this call.
    pub log: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_params(&self) -> &ParamSet {
        &self.state.best_params
    }
}

/// Train for `settings.epochs` epochs (counting epochs already in `resume`).
///
/// Each epoch record is written to `log` as one JSON line as soon as the epoch
/// finishes, so a numeric failure leaves the log of completed epochs behind.
pub fn train(
    ds: &SequenceDataset,
    settings: &TrainSettings,
    mut log: Option<&mut dyn Write>,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    if settings.model.num_items != ds.num_items() {
        return Err(Error::Config(format!(
            "model.num_items = {} but the dataset has {} items",
            settings.model.num_items,
            ds.num_items()
        )));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::fresh(settings)?,
    };
    let mut records = Vec::new();
    let started = Instant::now();

    while state.epochs_done < settings.epochs && !state.stopped {
        let epoch = state.epochs_done;
        let batches = epoch_batches(
            ds,
            settings.batch_size,
            settings.num_negatives,
            settings.seed,
            epoch as u64,
        )?;
        let (mut loss_sum, mut loss_n, mut pert_sum, mut pert_n) = (0.0, 0usize, 0.0, 0usize);
        for batch in &batches {
            let step_seed = rng::derive(settings.seed, &[0x57E9, state.steps]);
            let report =
                state
                    .sam
                    .step(&mut state.params, &mut state.optimizer, state.steps, |p| {
                        settings.loss_and_grad(p, batch, step_seed)
                    })?;
            if let Some(l) = report.loss {
                loss_sum += l;
                loss_n += 1;
            }
            if let Some(l) = report.perturbed_loss {
                pert_sum += l;
                pert_n += 1;
            }
            state.steps += 1;
            state.grad_evals += report.grad_evals;
        }

        let valid = evaluate_model(
            &state.params,
            &settings.model,
            ds,
            Split::Valid,
            &[10],
            settings.candidates,
        )?;
        let ndcg = valid.ndcg_at(10);
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            perturbed_loss_mean: (pert_n > 0).then(|| pert_sum / pert_n as f64),
            valid_hr10: valid.hr_at(10),
            valid_ndcg10: ndcg,
            grad_evals: state.grad_evals,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::Io {
                    path: "<training log>".into(),
                    source: e,
                })?;
        }
        records.push(record);

        state.epochs_done += 1;
        if ndcg > state.best_ndcg {
            state.best_ndcg = ndcg;
            state.best_epoch = state.epochs_done;
            state.best_params = state.params.clone();
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            if settings.patience > 0 && state.bad_epochs >= settings.patience {
                state.stopped = true;
            }
        }
    }
    Ok(TrainOutcome {
        state,
        log: records,
    })
}
