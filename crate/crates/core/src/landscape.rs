//! Loss surfaces along two random parameter directions, and a sharpness proxy.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{GradSet, ParamSet, Tensor, TensorSet};
use crate::dataset::{SequenceDataset, TrainingBatch, PAD};
use crate::error::{Error, Result};
use crate::model::{bce_loss, bce_loss_and_grad, SasrecConfig, ITEM_TABLE};
use crate::rng;
use crate::sam::MIN_GRAD_NORM;

/// Interactions in the fixed evaluation subset used by default.
pub const DEFAULT_EVAL_POSITIONS: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Each row of a matrix (and each vector as a whole) is scaled to the
    /// norm of the matching slice of the parameters.
    #[default]
    Filter,
    /// The whole direction is scaled to the global parameter norm.
    Global,
    None,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Filter => "filter",
            Normalization::Global => "global",
            Normalization::None => "none",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "filter" => Ok(Normalization::Filter),
            "global" => Ok(Normalization::Global),
            "none" => Ok(Normalization::None),
            other => Err(Error::Config(format!(
                "unknown normalization {other:?} (filter|global|none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionPair {
    pub first: GradSet,
    pub second: GradSet,
    pub normalization: Normalization,
    pub seed: u64,
}

impl DirectionPair {
    pub fn swapped(&self) -> Self {
        Self {
            first: self.second.clone(),
            second: self.first.clone(),
            ..self.clone()
        }
    }
}

fn rows(t: &Tensor) -> usize {
    if t.shape().len() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

fn normal_direction(
    params: &ParamSet,
    normalization: Normalization,
    seed: u64,
    label: u64,
) -> TensorSet {
    let mut out = TensorSet::new();
    for (idx, (name, p)) in params.iter().enumerate() {
        let mut r = rng::stream(seed, &[0xD1EC, label, idx as u64]);
        let data: Vec<f64> = (0..p.len()).map(|_| r.sample(StandardNormal)).collect();
        let mut d = Tensor::new(p.shape().to_vec(), data).expect("shape matches");
        if name == ITEM_TABLE && d.num_rows() > PAD {
            d.row_mut(PAD).fill(0.0);
        }
        if normalization == Normalization::Filter {
            let n = rows(p);
            let width = p.len() / n.max(1);
            for r in 0..n {
                let target = norm(&p.data()[r * width..(r + 1) * width]);
                let slice = &mut d.data_mut()[r * width..(r + 1) * width];
                let have = norm(slice);
                let factor = if have > 0.0 { target / have } else { 0.0 };
                slice.iter_mut().for_each(|v| *v *= factor);
            }
        }
        out.push(name, d);
    }
    if normalization == Normalization::Global {
        let have = out.norm();
        if have > 0.0 {
            out = out.scaled(params.norm() / have);
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Two independent standard-normal directions, normalized per `normalization`.
/// The padding row of the item table never moves.
pub fn sample_directions(
    params: &ParamSet,
    normalization: Normalization,
    seed: u64,
) -> DirectionPair {
    DirectionPair {
        first: normal_direction(params, normalization, seed, 1),
        second: normal_direction(params, normalization, seed, 2),
        normalization,
        seed,
    }
}

/// `Θ + (α·d₁ + β·d₂)`, computed per element.
pub fn displaced(
    params: &ParamSet,
    dirs: &DirectionPair,
    alpha: f64,
    beta: f64,
) -> Result<ParamSet> {
    if !params.is_congruent(&dirs.first) || !params.is_congruent(&dirs.second) {
        return Err(Error::shape(
            "displace",
            "directions do not match the parameters",
        ));
    }
    let mut out = params.clone();
    let it = out
        .tensors_mut()
        .iter_mut()
        .zip(dirs.first.tensors().iter().zip(dirs.second.tensors()));
    for (p, (a, b)) in it {
        let it = p.data_mut().iter_mut().zip(a.data().iter().zip(b.data()));
        for (p, (a, b)) in it {
            *p += alpha * a + beta * b;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GridMeta {
    pub checkpoint: String,
    pub batch_spec: String,
    pub seed: u64,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major `[alphas.len(), betas.len()]`; flagged cells hold NaN.
    pub losses: Vec<f64>,
    /// `(i, j)` of cells whose loss was not finite.
    pub flagged: Vec<(usize, usize)>,
    pub meta: GridMeta,
}

impl LandscapeGrid {
    pub fn loss(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.betas.len() + j]
    }

    /// Loss at `α = β = 0`.
    pub fn center(&self) -> f64 {
        let i = self
            .alphas
            .iter()
            .position(|&a| a == 0.0)
            .expect("grid contains 0");
        let j = self
            .betas
            .iter()
            .position(|&b| b == 0.0)
            .expect("grid contains 0");
        self.loss(i, j)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta,loss\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                s.push_str(&format!("{a},{b},{}\n", self.loss(i, j)));
            }
        }
        s
    }

    /// Sidecar metadata, without the loss matrix.
    pub fn metadata_json(&self) -> String {
        serde_json::json!({
            "alphas": self.alphas,
            "betas": self.betas,
            "cells": self.losses.len(),
            "flagged": self.flagged,
            "checkpoint": self.meta.checkpoint,
            "batch_spec": self.meta.batch_spec,
            "seed": self.meta.seed,
            "normalization": self.meta.normalization,
        })
        .to_string()
    }
}

/// `n` evenly spaced values over `[lo, hi]`, with the midpoint of an odd grid exactly 0
/// when the range is symmetric.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let v = lo + step * i as f64;
            if v.abs() < step * 1e-9 {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Evaluate `loss_fn` on every grid cell in parallel. Parameters are only
/// read; each cell works on its own displaced copy.
pub fn evaluate_grid<F>(
    params: &ParamSet,
    dirs: &DirectionPair,
    alphas: &[f64],
    betas: &[f64],
    loss_fn: F,
) -> Result<LandscapeGrid>
where
    F: Fn(&ParamSet) -> Result<f64> + Sync,
{
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::InvalidArgument(
            "grid coefficient lists must be non-empty".into(),
        ));
    }
    if !alphas.contains(&0.0) || !betas.contains(&0.0) {
        return Err(Error::InvalidArgument(
            "grid coefficient lists must include 0".into(),
        ));
    }
    let nb = betas.len();
    let cells: Vec<Option<f64>> = (0..alphas.len() * nb)
        .into_par_iter()
        .map(|c| {
            let (a, b) = (alphas[c / nb], betas[c % nb]);
            let value = if a == 0.0 && b == 0.0 {
                loss_fn(params)
            } else {
                loss_fn(&displaced(params, dirs, a, b)?)
            };
            match value {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                Ok(_) | Err(Error::Numeric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let flagged = cells
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(c, _)| (c / nb, c % nb))
        .collect();
    Ok(LandscapeGrid {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        losses: cells.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        flagged,
        meta: GridMeta {
            seed: dirs.seed,
            normalization: dirs.normalization,
            ..GridMeta::default()
        },
    })
}

/// Fixed batches covering about `positions` training interactions, in a
/// seed-determined user order.
pub fn probe_batches(
    ds: &SequenceDataset,
    positions: usize,
    batch_size: usize,
    num_negatives: usize,
    seed: u64,
) -> Result<Vec<TrainingBatch>> {
    use rand::seq::SliceRandom;
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut r = rng::stream(seed, &[0x1A4D]);
    let mut users: Vec<usize> = (0..ds.num_users()).collect();
    users.shuffle(&mut r);
    let (mut picked, mut covered) = (Vec::new(), 0);
    for u in users {
        if covered >= positions {
            break;
        }
        let real = ds.train_items(u).len().saturating_sub(1).min(ds.max_len());
        if real == 0 {
            continue;
        }
        covered += real;
        picked.push(u);
    }
    if picked.is_empty() {
        return Err(Error::Data("no training interactions to probe".into()));
    }
    picked
        .chunks(batch_size)
        .map(|c| TrainingBatch::build(ds, c, num_negatives, &mut r))
        .collect()
}

/// Eval-mode BCE over `batches`, weighted by each batch's real positions.
pub fn model_loss(params: &ParamSet, cfg: &SasrecConfig, batches: &[TrainingBatch]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for b in batches {
        let n = b.num_positions();
        total += bce_loss(params, cfg, b, false, &mut rng::seeded(0))? * n as f64;
        count += n;
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SharpnessReport {
    pub max: f64,
    pub mean: f64,
    /// `L(Θ + Δ̂) − L(Θ)` per probe.
    pub values: Vec<f64>,
}

/// Loss increase after one normalized ascent step of length `rho`, recomputed
/// on each probe's batch. Probe `p` uses batch `p mod batches.len()`.
pub fn sharpness_proxy<B, G, L>(
    params: &ParamSet,
    batches: &[B],
    rho: f64,
    probes: usize,
    loss_and_grad: G,
    loss: L,
) -> Result<SharpnessReport>
where
    B: Sync,
    G: Fn(&ParamSet, &B) -> Result<(f64, GradSet)> + Sync,
    L: Fn(&ParamSet, &B) -> Result<f64> + Sync,
{
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("rho = {rho} must be >= 0")));
    }
    if batches.is_empty() || probes == 0 {
        return Err(Error::InvalidArgument(
            "sharpness needs at least one batch and one probe".into(),
        ));
    }
    let values: Vec<f64> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let batch = &batches[p % batches.len()];
            if rho == 0.0 {
                return Ok(0.0);
            }
            let (base, grads) = loss_and_grad(params, batch)?;
            let g = grads.norm();
            if !(g >= MIN_GRAD_NORM) {
                return Ok(0.0);
            }
            let moved = params.added(&grads.scaled(rho / g))?;
            Ok(loss(&moved, batch)? - base)
        })
        .collect::<Result<_>>()?;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(SharpnessReport { max, mean, values })
}

/// [`sharpness_proxy`] of the eval-mode BCE of a model.
pub fn model_sharpness(
    params: &ParamSet,
    cfg: &SasrecConfig,
    batches: &[TrainingBatch],
    rho: f64,
    probes: usize,
) -> Result<SharpnessReport> {
    sharpness_proxy(
        params,
        batches,
        rho,
        probes,
        |p, b| bce_loss_and_grad(p, cfg, b, false, &mut rng::seeded(0)),
        |p, b| bce_loss(p, cfg, b, false, &mut rng::seeded(0)),
    )
}
