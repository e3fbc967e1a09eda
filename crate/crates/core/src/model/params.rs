use rand::Rng;
use rand_distr::StandardNormal;

use super::SasrecConfig;
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::rng;

pub const ITEM_TABLE: &str = "item_emb";
pub const POS_TABLE: &str = "pos_emb";
pub const INIT_STD: f64 = 0.02;

/// Standard deviation of a unit normal truncated to `[-2, 2]`.
pub(crate) const TRUNC2_STD: f64 = 0.879_625_661_034_239_8;

/// Tensor names and shapes, in layout order.
pub fn param_layout(cfg: &SasrecConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.dim;
    let mut out = vec![
        (ITEM_TABLE.to_string(), vec![cfg.table_rows(), d]),
        (POS_TABLE.to_string(), vec![cfg.max_len, d]),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.push((p("attn_norm.gain"), vec![d]));
        out.push((p("attn_norm.bias"), vec![d]));
        for w in ["attn.query", "attn.key", "attn.value", "attn.output"] {
            out.push((p(w), vec![d, d]));
        }
        out.push((p("ffn_norm.gain"), vec![d]));
        out.push((p("ffn_norm.bias"), vec![d]));
        out.push((p("ffn.w1"), vec![d, d]));
        out.push((p("ffn.b1"), vec![d]));
        out.push((p("ffn.w2"), vec![d, d]));
        out.push((p("ffn.b2"), vec![d]));
    }
    out.push(("final_norm.gain".to_string(), vec![d]));
    out.push(("final_norm.bias".to_string(), vec![d]));
    out
}

/// Draw from a normal with standard deviation `std`, truncated at two
/// underlying standard deviations and rescaled so the result has exactly
/// `std` spread.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std / TRUNC2_STD;
        }
    }
}

/// Fresh parameters: truncated-normal tables and projections, unit
/// layer-norm gains, zero biases, and an all-zero padding row.
pub fn init(cfg: &SasrecConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut r = rng::stream(seed, &[0x1417]);
    let mut params = ParamSet::new();
    for (name, shape) in param_layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| truncated_normal(&mut r, INIT_STD)).collect()
        };
        let mut t = Tensor::new(shape, data)?;
        if name == ITEM_TABLE {
            t.row_mut(0).fill(0.0);
        }
        params.push(name, t);
    }
    Ok(params)
}

/// Check that `params` has exactly the layout `cfg` implies.
pub fn check_layout(cfg: &SasrecConfig, params: &ParamSet) -> Result<()> {
    let layout = param_layout(cfg);
    if layout.len() != params.len() {
        return Err(Error::shape(
            "params",
            format!("expected {} tensors, found {}", layout.len(), params.len()),
        ));
    }
    for ((name, shape), (pn, pt)) in layout.iter().zip(params.iter()) {
        if name != pn || shape.as_slice() != pt.shape() {
            return Err(Error::shape(
                "params",
                format!("expected {name} {shape:?}, found {pn} {:?}", pt.shape()),
            ));
        }
    }
    Ok(())
}
