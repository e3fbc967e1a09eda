use rand::Rng;

use super::forward::{encode, Weights};
use super::SasrecConfig;
use crate::autodiff::{GradSet, Graph, ParamSet, Tensor, Var};
use crate::dataset::TrainingBatch;
use crate::error::Result;

/// Record the next-item binary cross-entropy on `g`.
///
/// Per real position: `-[ln σ(r_pos) + Σ_j ln(1 - σ(r_neg_j))]`, averaged over
/// the real positions of the batch. A batch without real positions has loss 0.
pub fn bce_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    w: &Weights,
    cfg: &SasrecConfig,
    batch: &TrainingBatch,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let (b, n) = (batch.batch_size(), batch.max_len);
    let hidden = encode(g, w, cfg, &batch.inputs, b, train, rng)?;

    let pos = g.embedding(w.item_emb, &batch.targets, &[b, n])?;
    let pos = g.mul(hidden, pos)?;
    let pos = g.sum_last(pos)?;
    let mut terms = g.log_sigmoid(pos)?;
    for j in 0..batch.num_negatives {
        let neg = g.embedding(w.item_emb, &batch.negatives_column(j), &[b, n])?;
        let neg = g.mul(hidden, neg)?;
        let neg = g.sum_last(neg)?;
        let neg = g.scale(neg, -1.0)?;
        let neg = g.log_sigmoid(neg)?;
        terms = g.add(terms, neg)?;
    }

    let mask: Vec<f64> = batch
        .mask
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .collect();
    let mask = g.constant(Tensor::new(vec![b, n], mask)?);
    let masked = g.mul(terms, mask)?;
    let total = g.sum(masked)?;
    let count = batch.num_positions().max(1);
    g.scale(total, -1.0 / count as f64)
}

/// Scalar value of a loss built by `build`, without gradients.
pub fn loss_value<F>(params: &ParamSet, cfg: &SasrecConfig, build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &Weights) -> Result<Var>,
{
    let mut g = Graph::new();
    let w = Weights::bind(&mut g, cfg, params, false)?;
    let loss = build(&mut g, &w)?;
    g.value(loss).item()
}

/// Value and parameter gradient of a loss built by `build`.
pub fn loss_and_grad<F>(params: &ParamSet, cfg: &SasrecConfig, build: F) -> Result<(f64, GradSet)>
where
    F: FnOnce(&mut Graph, &Weights) -> Result<Var>,
{
    let mut g = Graph::new();
    let w = Weights::bind(&mut g, cfg, params, true)?;
    let loss = build(&mut g, &w)?;
    let value = g.value(loss).item()?;
    let grads = w.gradients(&mut g, loss, params)?;
    Ok((value, grads))
}

pub fn bce_loss<R: Rng + ?Sized>(
    params: &ParamSet,
    cfg: &SasrecConfig,
    batch: &TrainingBatch,
    train: bool,
    rng: &mut R,
) -> Result<f64> {
    loss_value(params, cfg, |g, w| bce_graph(g, w, cfg, batch, train, rng))
}

pub fn bce_loss_and_grad<R: Rng + ?Sized>(
    params: &ParamSet,
    cfg: &SasrecConfig,
    batch: &TrainingBatch,
    train: bool,
    rng: &mut R,
) -> Result<(f64, GradSet)> {
    loss_and_grad(params, cfg, |g, w| bce_graph(g, w, cfg, batch, train, rng))
}
