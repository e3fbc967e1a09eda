//! Sequence augmentations and the contrastive objective over augmented views.
//!
//! Two views of every sequence in a batch are encoded; each view's positive is
//! the other view of the same sequence and every other view in the batch is a
//! negative (normalized-temperature cross-entropy over cosine similarities).

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;

use crate::autodiff::{GradSet, Graph, ParamSet, Tensor, Var};
use crate::dataset::{window, TrainingBatch};
use crate::error::{Error, Result};
use crate::model::{
    bce_graph, encode, loss_and_grad, loss_value, SasrecConfig, Weights, ATTENTION_MASK_VALUE,
};

const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentKind {
    Crop,
    Mask,
    Reorder,
}

/// An augmentation and its ratio, written `kind:ratio` (e.g. `crop:0.6`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub ratio: f64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!(
                "augmentation ratio {ratio} not in (0, 1)"
            )));
        }
        Ok(Self { kind, ratio })
    }

    pub fn apply<R: Rng + ?Sized>(
        &self,
        seq: &[usize],
        mask_token: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        match self.kind {
            AugmentKind::Crop => crop(seq, self.ratio, rng),
            AugmentKind::Mask => mask(seq, self.ratio, mask_token, rng),
            AugmentKind::Reorder => reorder(seq, self.ratio, rng),
        }
    }
}

impl fmt::Display for AugmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            AugmentKind::Crop => "crop",
            AugmentKind::Mask => "mask",
            AugmentKind::Reorder => "reorder",
        };
        write!(f, "{}:{}", kind, self.ratio)
    }
}

impl FromStr for AugmentSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, ratio) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("augmentation {s:?} is not kind:ratio")))?;
        let kind = match kind.trim() {
            "crop" => AugmentKind::Crop,
            "mask" => AugmentKind::Mask,
            "reorder" => AugmentKind::Reorder,
            other => return Err(Error::Config(format!("unknown augmentation {other:?}"))),
        };
        let ratio = ratio
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("augmentation ratio {ratio:?}: {e}")))?;
        Self::new(kind, ratio)
    }
}

fn floor_count(ratio: f64, len: usize) -> usize {
    (ratio * len as f64).floor() as usize
}

/// Contiguous run of `max(1, floor(ratio * len))` items at a uniform start.
/// Sequences shorter than two items are returned unchanged.
pub fn crop<R: Rng + ?Sized>(seq: &[usize], ratio: f64, rng: &mut R) -> Vec<usize> {
    if seq.len() < 2 {
        return seq.to_vec();
    }
    let len = floor_count(ratio, seq.len()).clamp(1, seq.len());
    let start = rng.random_range(0..=seq.len() - len);
    seq[start..start + len].to_vec()
}

/// Replace `floor(ratio * len)` distinct positions with `mask_token`.
pub fn mask<R: Rng + ?Sized>(
    seq: &[usize],
    ratio: f64,
    mask_token: usize,
    rng: &mut R,
) -> Vec<usize> {
    let count = floor_count(ratio, seq.len()).min(seq.len());
    let mut out = seq.to_vec();
    for pos in index::sample(rng, seq.len(), count) {
        out[pos] = mask_token;
    }
    out
}

/// Shuffle a contiguous run of `max(2, floor(ratio * len))` items in place.
pub fn reorder<R: Rng + ?Sized>(seq: &[usize], ratio: f64, rng: &mut R) -> Vec<usize> {
    let mut out = seq.to_vec();
    if seq.len() < 2 {
        return out;
    }
    let len = floor_count(ratio, seq.len()).clamp(2, seq.len());
    let start = rng.random_range(0..=seq.len() - len);
    out[start..start + len].shuffle(rng);
    out
}

/// Contrastive objective settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Mixing weight of the contrastive term in the combined loss.
    pub weight: f64,
    /// Pool the two per-batch augmentations are drawn from.
    pub augmentations: Vec<AugmentSpec>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            weight: 0.1,
            augmentations: vec![
                AugmentSpec {
                    kind: AugmentKind::Crop,
                    ratio: 0.6,
                },
                AugmentSpec {
                    kind: AugmentKind::Mask,
                    ratio: 0.3,
                },
                AugmentSpec {
                    kind: AugmentKind::Reorder,
                    ratio: 0.3,
                },
            ],
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(self.weight >= 0.0) {
            return Err(Error::Config(format!(
                "contrastive weight {} must be >= 0",
                self.weight
            )));
        }
        if self.augmentations.is_empty() {
            return Err(Error::Config("no augmentations configured".into()));
        }
        Ok(())
    }
}

/// Two augmentations drawn independently and uniformly from `pool`.
pub fn draw_pair<R: Rng + ?Sized>(
    pool: &[AugmentSpec],
    rng: &mut R,
) -> Result<(AugmentSpec, AugmentSpec)> {
    let a = pool
        .choose(rng)
        .ok_or_else(|| Error::Config("empty augmentation pool".into()))?;
    let b = pool.choose(rng).expect("non-empty");
    Ok((*a, *b))
}

/// Cross-entropy over `2B` view representations `[2B, d]`, where row `i` and
/// row `i ± B` are positives.
pub fn nt_xent_graph(g: &mut Graph, reps: Var, temperature: f64) -> Result<Var> {
    let shape = g.shape(reps).to_vec();
    if shape.len() != 2 || shape[0] % 2 != 0 {
        return Err(Error::shape(
            "nt_xent",
            format!("need [2B, d] views, got {:?}", shape),
        ));
    }
    let views = shape[0];
    let b = views / 2;
    if b < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs a batch of at least 2 sequences".into(),
        ));
    }
    let z = g.l2_normalize(reps, NORMALIZE_EPS)?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, 1.0 / temperature)?;
    let diag: Vec<bool> = (0..views * views).map(|k| k / views == k % views).collect();
    let sim = g.mask_fill(sim, &diag, ATTENTION_MASK_VALUE)?;
    let logp = g.log_softmax(sim)?;
    let mut pick = vec![0.0; views * views];
    for i in 0..views {
        pick[i * views + (i + b) % views] = 1.0;
    }
    let pick = g.constant(Tensor::new(vec![views, views], pick)?);
    let chosen = g.mul(logp, pick)?;
    let total = g.sum(chosen)?;
    g.scale(total, -1.0 / views as f64)
}

/// Encode two augmented views of every history and record the contrastive
/// loss over their last-position representations.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    w: &Weights,
    cfg: &SasrecConfig,
    histories: &[Vec<usize>],
    pair: (AugmentSpec, AugmentSpec),
    temperature: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let b = histories.len();
    if b < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs a batch of at least 2 sequences".into(),
        ));
    }
    let n = cfg.max_len;
    let mut inputs = Vec::with_capacity(2 * b * n);
    for spec in [pair.0, pair.1] {
        for h in histories {
            let view = spec.apply(h, cfg.mask_token(), rng);
            inputs.extend(window(&view, n));
        }
    }
    let hidden = encode(g, w, cfg, &inputs, 2 * b, train, rng)?;
    let flat = g.reshape(hidden, &[2 * b * n, cfg.dim])?;
    let last: Vec<usize> = (0..2 * b).map(|v| v * n + n - 1).collect();
    let reps = g.embedding(flat, &last, &[2 * b])?;
    nt_xent_graph(g, reps, temperature)
}

#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss<R: Rng + ?Sized>(
    params: &ParamSet,
    cfg: &SasrecConfig,
    histories: &[Vec<usize>],
    pair: (AugmentSpec, AugmentSpec),
    temperature: f64,
    train: bool,
    rng: &mut R,
) -> Result<f64> {
    loss_value(params, cfg, |g, w| {
        contrastive_graph(g, w, cfg, histories, pair, temperature, train, rng)
    })
}

/// `bce + weight * contrastive`; with weight 0 this records exactly the BCE
/// graph. The random stream is consumed by the BCE term first, then by the
/// augmentation pair draw and the contrastive term.
pub fn combined_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    w: &Weights,
    cfg: &SasrecConfig,
    batch: &TrainingBatch,
    contrastive: &ContrastiveConfig,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let bce = bce_graph(g, w, cfg, batch, train, rng)?;
    if contrastive.weight == 0.0 {
        return Ok(bce);
    }
    let pair = draw_pair(&contrastive.augmentations, rng)?;
    let cl = contrastive_graph(
        g,
        w,
        cfg,
        &batch.histories,
        pair,
        contrastive.temperature,
        train,
        rng,
    )?;
    let cl = g.scale(cl, contrastive.weight)?;
    g.add(bce, cl)
}

pub fn combined_loss<R: Rng + ?Sized>(
    params: &ParamSet,
    cfg: &SasrecConfig,
    batch: &TrainingBatch,
    contrastive: &ContrastiveConfig,
    train: bool,
    rng: &mut R,
) -> Result<f64> {
    loss_value(params, cfg, |g, w| {
        combined_graph(g, w, cfg, batch, contrastive, train, rng)
    })
}

pub fn combined_loss_and_grad<R: Rng + ?Sized>(
    params: &ParamSet,
    cfg: &SasrecConfig,
    batch: &TrainingBatch,
    contrastive: &ContrastiveConfig,
    train: bool,
    rng: &mut R,
) -> Result<(f64, GradSet)> {
    loss_and_grad(params, cfg, |g, w| {
        combined_graph(g, w, cfg, batch, contrastive, train, rng)
    })
}
