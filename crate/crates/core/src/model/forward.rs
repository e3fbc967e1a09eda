use rand::Rng;

use super::params::{check_layout, ITEM_TABLE};
use super::{SasrecConfig, LAYER_NORM_EPS};
use crate::autodiff::{GradSet, Graph, ParamSet, Tensor, Var};
use crate::dataset::PAD;
use crate::error::{Error, Result};

/// Logit assigned to attention entries that must not be attended.
pub const ATTENTION_MASK_VALUE: f64 = -1e9;

pub(crate) struct BlockWeights {
    attn_gain: Var,
    attn_bias: Var,
    query: Var,
    key: Var,
    value: Var,
    output: Var,
    ffn_gain: Var,
    ffn_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Parameters bound as leaves of a graph.
pub struct Weights {
    pub item_emb: Var,
    pub pos_emb: Var,
    blocks: Vec<BlockWeights>,
    final_gain: Var,
    final_bias: Var,
    leaves: Vec<Var>,
}

impl Weights {
    pub fn bind(
        g: &mut Graph,
        cfg: &SasrecConfig,
        params: &ParamSet,
        requires_grad: bool,
    ) -> Result<Self> {
        check_layout(cfg, params)?;
        let leaves: Vec<Var> = params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect();
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("layout checked");
        let item_emb = next();
        let pos_emb = next();
        let blocks = (0..cfg.num_layers)
            .map(|_| BlockWeights {
                attn_gain: next(),
                attn_bias: next(),
                query: next(),
                key: next(),
                value: next(),
                output: next(),
                ffn_gain: next(),
                ffn_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let final_gain = next();
        let final_bias = next();
        Ok(Self {
            item_emb,
            pos_emb,
            blocks,
            final_gain,
            final_bias,
            leaves,
        })
    }

    /// Collect leaf gradients into a set laid out like `params`, with the
    /// padding row of the item table zeroed.
    pub fn gradients(&self, g: &mut Graph, loss: Var, params: &ParamSet) -> Result<GradSet> {
        let grads = g.backward(loss)?;
        let mut out = GradSet::new();
        for (name, &leaf) in params.names().iter().zip(&self.leaves) {
            let mut t = grads.wrt(leaf);
            if name == ITEM_TABLE {
                t.row_mut(PAD).fill(0.0);
            }
            out.push(name.clone(), t);
        }
        Ok(out)
    }
}

/// Encode `batch` windows of `cfg.max_len` item indices into hidden states
/// `F` of shape `[batch, max_len, dim]`.
///
/// Attention is causal and never attends to padding keys, so `F[b][t]`
/// depends on `inputs[b][..=t]` only.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph,
    w: &Weights,
    cfg: &SasrecConfig,
    inputs: &[usize],
    batch: usize,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let (n, d) = (cfg.max_len, cfg.dim);
    if inputs.len() != batch * n {
        return Err(Error::shape(
            "encode",
            format!(
                "{} indices for batch {} x window {}",
                inputs.len(),
                batch,
                n
            ),
        ));
    }
    if let Some(&bad) = inputs.iter().find(|&&i| i > cfg.mask_token()) {
        return Err(Error::InvalidArgument(format!(
            "item index {bad} out of range [0, {}]",
            cfg.mask_token()
        )));
    }
    let p = cfg.dropout;

    let keep: Vec<f64> = inputs
        .iter()
        .flat_map(|&i| std::iter::repeat_n(if i == PAD { 0.0 } else { 1.0 }, d))
        .collect();
    let keep = g.constant(Tensor::new(vec![batch, n, d], keep)?);

    let mut attn_mask = Vec::with_capacity(batch * n * n);
    for row in inputs.chunks(n) {
        for t in 0..n {
            for (s, &item) in row.iter().enumerate() {
                attn_mask.push(s > t || item == PAD);
            }
        }
    }

    let e = g.embedding(w.item_emb, inputs, &[batch, n])?;
    let x = g.add(e, w.pos_emb)?;
    let x = g.dropout(x, p, train, rng)?;
    let mut x = g.mul(x, keep)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for blk in &w.blocks {
        let h = g.layer_norm(x, blk.attn_gain, blk.attn_bias, LAYER_NORM_EPS)?;
        let q = g.matmul(h, blk.query)?;
        let k = g.matmul(h, blk.key)?;
        let v = g.matmul(h, blk.value)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let (qh, kh, vh) = if cfg.num_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.narrow(q, head * dh, dh)?,
                    g.narrow(k, head * dh, dh)?,
                    g.narrow(v, head * dh, dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.mask_fill(scores, &attn_mask, ATTENTION_MASK_VALUE)?;
            let att = g.softmax(scores)?;
            let att = g.dropout(att, p, train, rng)?;
            heads.push(g.matmul(att, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads)?
        };
        let attn = g.matmul(merged, blk.output)?;
        let attn = g.dropout(attn, p, train, rng)?;
        x = g.add(x, attn)?;

        let h = g.layer_norm(x, blk.ffn_gain, blk.ffn_bias, LAYER_NORM_EPS)?;
        let f = g.matmul(h, blk.w1)?;
        let f = g.add(f, blk.b1)?;
        let f = g.relu(f)?;
        let f = g.dropout(f, p, train, rng)?;
        let f = g.matmul(f, blk.w2)?;
        let f = g.add(f, blk.b2)?;
        let f = g.dropout(f, p, train, rng)?;
        x = g.add(x, f)?;
        x = g.mul(x, keep)?;
    }
    g.layer_norm(x, w.final_gain, w.final_bias, LAYER_NORM_EPS)
}

/// Hidden states for `inputs` without recording gradients.
pub fn forward<R: Rng + ?Sized>(
    params: &ParamSet,
    cfg: &SasrecConfig,
    inputs: &[usize],
    batch: usize,
    train: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = Weights::bind(&mut g, cfg, params, false)?;
    let f = encode(&mut g, &w, cfg, inputs, batch, train, rng)?;
    Ok(g.value(f).clone())
}

/// Relevance `⟨F_t, T_item⟩` of a catalog item.
pub fn score(hidden: &[f64], item: usize, params: &ParamSet, cfg: &SasrecConfig) -> Result<f64> {
    if item == PAD || item > cfg.num_items {
        return Err(Error::InvalidArgument(format!(
            "cannot score item {item}; catalog is [1, {}]",
            cfg.num_items
        )));
    }
    let table = params
        .get(ITEM_TABLE)
        .ok_or_else(|| Error::shape("score", "missing item table"))?;
    let row = table.row(item);
    if row.len() != hidden.len() {
        return Err(Error::shape(
            "score",
            format!(
                "hidden size {} vs embedding size {}",
                hidden.len(),
                row.len()
            ),
        ));
    }
    Ok(hidden.iter().zip(row).map(|(a, b)| a * b).sum())
}
