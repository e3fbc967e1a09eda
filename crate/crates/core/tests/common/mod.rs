//! Helpers shared by the integration tests: finite differences and a
//! loop-based reference encoder written independently of the graph code.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use samrec::autodiff::{GradSet, Graph, ParamSet, Tensor, Var};
use samrec::dataset::{SequenceDataset, TrainingBatch, PAD};
use samrec::model::{init, SasrecConfig, ITEM_TABLE};
use samrec::rng;
use samrec::Result;

pub const FD_STEP: f64 = 1e-3;

/// Central difference of `f` at every element of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max|a − n| / max(max|a|, max|n|, 1e-6)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-6, f64::max);
    diff / scale
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.sample(StandardNormal)).collect(),
    )
    .unwrap()
}

/// Worst relative error over all inputs of `build`, whose output is reduced
/// to a scalar by a fixed random weighting.
pub fn check_op(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let value = |xs: &[Tensor]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = build(&mut g, &vars).unwrap();
        let w = random_tensor(g.shape(y), 0xF00D);
        let w = g.constant(w);
        let wy = g.mul(y, w).unwrap();
        let loss = g.sum(wy).unwrap();
        (g, vars, loss)
    };
    let (mut g, vars, loss) = value(inputs);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        let numeric = numeric_grad(x, FD_STEP, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = probe.clone();
            let (g, _, loss) = value(&xs);
            g.value(loss).item().unwrap()
        });
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

/// Per-tensor relative error of `grad` against central differences of `value`.
pub fn check_params(
    params: &ParamSet,
    grads: &GradSet,
    value: impl Fn(&ParamSet) -> f64,
) -> Vec<(String, f64)> {
    check_params_with_step(params, grads, FD_STEP, value)
}

pub fn check_params_with_step(
    params: &ParamSet,
    grads: &GradSet,
    h: f64,
    value: impl Fn(&ParamSet) -> f64,
) -> Vec<(String, f64)> {
    params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let numeric = numeric_grad(t, h, |probe| {
                let mut p = params.clone();
                p.tensors_mut()[i] = probe.clone();
                value(&p)
            });
            (
                name.to_string(),
                rel_error(grads.tensors()[i].data(), &numeric),
            )
        })
        .collect()
}

/// The 2-user, 8-item, n = 4, d = 8 instance.
pub struct Tiny {
    pub ds: SequenceDataset,
    pub cfg: SasrecConfig,
    pub params: ParamSet,
    pub batch: TrainingBatch,
}

pub fn tiny(dropout: f64) -> Tiny {
    let ds =
        SequenceDataset::from_sequences(vec![vec![1, 2, 3, 4, 5, 6, 7], vec![8, 3, 5, 2, 6]], 8, 4)
            .unwrap();
    let cfg = SasrecConfig {
        dim: 8,
        num_layers: 2,
        num_heads: 2,
        dropout,
        ..SasrecConfig::new(8, 4)
    };
    let params = jittered(&cfg, 11, 0.3);
    let batch = TrainingBatch::build(&ds, &[0, 1], 2, &mut rng::seeded(5)).unwrap();
    Tiny {
        ds,
        cfg,
        params,
        batch,
    }
}

/// Initial parameters plus `N(0, scale²)` noise, keeping the padding row zero.
pub fn jittered(cfg: &SasrecConfig, seed: u64, scale: f64) -> ParamSet {
    let mut p = init(cfg, seed).unwrap();
    let mut r = rng::seeded(seed ^ 0xABCD);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += scale * r.sample::<f64, _>(StandardNormal);
        }
    }
    p.get_mut(ITEM_TABLE).unwrap().row_mut(PAD).fill(0.0);
    p
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let s = (var + 1e-8).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) / s * g + b)
        .collect()
}

/// `x · W` for a row vector and a row-major `[d_in, d_out]` matrix.
fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout)
        .map(|j| (0..din).map(|k| x[k] * w.data()[k * dout + j]).sum())
        .collect()
}

/// Eval-mode hidden states `[n][d]` of one window, computed with plain loops.
pub fn reference_hidden(params: &ParamSet, cfg: &SasrecConfig, window: &[usize]) -> Vec<Vec<f64>> {
    let (n, d, heads) = (cfg.max_len, cfg.dim, cfg.num_heads);
    let dh = d / heads;
    let p = |name: &str| params.get(name).unwrap_or_else(|| panic!("{name}"));
    let keep = |t: usize| if window[t] == PAD { 0.0 } else { 1.0 };
    let mut x: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let e = p(ITEM_TABLE).row(window[t]);
            let q = p("pos_emb").row(t);
            e.iter().zip(q).map(|(a, b)| (a + b) * keep(t)).collect()
        })
        .collect();
    for l in 0..cfg.num_layers {
        let w = |s: &str| p(&format!("blocks.{l}.{s}"));
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm(r, w("attn_norm.gain").data(), w("attn_norm.bias").data()))
            .collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, w("attn.query"))).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, w("attn.key"))).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| vec_mat(r, w("attn.value"))).collect();
        let mut merged = vec![vec![0.0; d]; n];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for t in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|s| {
                        if s > t || window[s] == PAD {
                            -1e9
                        } else {
                            cols.clone().map(|c| q[t][c] * k[s][c]).sum::<f64>()
                                / (dh as f64).sqrt()
                        }
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|a| (a - m).exp()).sum();
                for s in 0..n {
                    let a = (logits[s] - m).exp() / z;
                    for c in cols.clone() {
                        merged[t][c] += a * v[s][c];
                    }
                }
            }
        }
        for t in 0..n {
            let o = vec_mat(&merged[t], w("attn.output"));
            for c in 0..d {
                x[t][c] += o[c];
            }
            let h = layer_norm(&x[t], w("ffn_norm.gain").data(), w("ffn_norm.bias").data());
            let mut f = vec_mat(&h, w("ffn.w1"));
            for (c, v) in f.iter_mut().enumerate() {
                *v = (*v + w("ffn.b1").data()[c]).max(0.0);
            }
            let f = vec_mat(&f, w("ffn.w2"));
            for c in 0..d {
                x[t][c] = (x[t][c] + f[c] + w("ffn.b2").data()[c]) * keep(t);
            }
        }
    }
    x.iter()
        .map(|r| layer_norm(r, p("final_norm.gain").data(), p("final_norm.bias").data()))
        .collect()
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Eval-mode next-item BCE of `batch`, scalar by scalar.
pub fn reference_bce(params: &ParamSet, cfg: &SasrecConfig, batch: &TrainingBatch) -> f64 {
    let n = batch.max_len;
    let table = params.get(ITEM_TABLE).unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut total, mut count) = (0.0, 0);
    for b in 0..batch.batch_size() {
        let f = reference_hidden(params, cfg, &batch.inputs[b * n..(b + 1) * n]);
        for t in 0..n {
            let pos = b * n + t;
            if !batch.mask[pos] {
                continue;
            }
            count += 1;
            total -= log_sigmoid(dot(&f[t], table.row(batch.targets[pos])));
            for j in 0..batch.num_negatives {
                let neg = batch.negatives[pos * batch.num_negatives + j];
                total -= log_sigmoid(-dot(&f[t], table.row(neg)));
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Relative finite-difference error of every graph primitive on random inputs.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let r = |shape: &[usize], seed| random_tensor(shape, seed);
    // keep relu / log inputs away from their kinks and poles
    let away = |t: Tensor| {
        let d = t
            .data()
            .iter()
            .map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v })
            .collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let positive = |t: Tensor| {
        let d = t.data().iter().map(|v| v.abs() + 0.2).collect();
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let mask: Vec<bool> = (0..12).map(|i| i % 5 == 1).collect();
    vec![
        (
            "matmul",
            check_op(&[r(&[2, 3, 4], 1), r(&[4, 5], 2)], |g, v| {
                g.matmul(v[0], v[1])
            }),
        ),
        (
            "matmul_batched",
            check_op(&[r(&[2, 3, 4], 3), r(&[2, 4, 3], 4)], |g, v| {
                g.matmul(v[0], v[1])
            }),
        ),
        (
            "transpose",
            check_op(&[r(&[2, 3, 4], 5)], |g, v| g.transpose(v[0])),
        ),
        (
            "add",
            check_op(&[r(&[3, 4], 6), r(&[4], 7)], |g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            check_op(&[r(&[3, 4], 8), r(&[3, 4], 9)], |g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            check_op(&[r(&[2, 3, 4], 10), r(&[3, 4], 11)], |g, v| {
                g.mul(v[0], v[1])
            }),
        ),
        (
            "scale",
            check_op(&[r(&[5], 12)], |g, v| g.scale(v[0], -1.7)),
        ),
        (
            "embedding",
            check_op(&[r(&[6, 3], 13)], |g, v| {
                g.embedding(v[0], &[0, 2, 2, 5, 1, 2], &[2, 3])
            }),
        ),
        (
            "softmax",
            check_op(&[r(&[3, 5], 14)], |g, v| g.softmax(v[0])),
        ),
        (
            "log_softmax",
            check_op(&[r(&[3, 5], 15)], |g, v| g.log_softmax(v[0])),
        ),
        (
            "layer_norm",
            check_op(&[r(&[3, 6], 16), r(&[6], 17), r(&[6], 18)], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-8)
            }),
        ),
        (
            "relu",
            check_op(&[away(r(&[4, 4], 19))], |g, v| g.relu(v[0])),
        ),
        ("sigmoid", check_op(&[r(&[7], 20)], |g, v| g.sigmoid(v[0]))),
        (
            "log_sigmoid",
            check_op(&[r(&[7], 21).scaled(4.0)], |g, v| g.log_sigmoid(v[0])),
        ),
        (
            "log",
            check_op(&[positive(r(&[7], 22))], |g, v| g.log(v[0])),
        ),
        (
            "dropout",
            check_op(&[r(&[4, 5], 23)], |g, v| {
                g.dropout(v[0], 0.3, true, &mut rng::seeded(9))
            }),
        ),
        (
            "mask_fill",
            check_op(&[r(&[3, 4], 24)], |g, v| g.mask_fill(v[0], &mask, -1e9)),
        ),
        ("sum", check_op(&[r(&[3, 4], 25)], |g, v| g.sum(v[0]))),
        ("mean", check_op(&[r(&[3, 4], 26)], |g, v| g.mean(v[0]))),
        (
            "sum_last",
            check_op(&[r(&[3, 4], 27)], |g, v| g.sum_last(v[0])),
        ),
        (
            "reshape",
            check_op(&[r(&[3, 4], 28)], |g, v| g.reshape(v[0], &[2, 6])),
        ),
        (
            "narrow",
            check_op(&[r(&[3, 6], 29)], |g, v| g.narrow(v[0], 2, 3)),
        ),
        (
            "concat",
            check_op(&[r(&[2, 3], 30), r(&[2, 2], 31)], |g, v| {
                g.concat(&[v[0], v[1]])
            }),
        ),
        (
            "l2_normalize",
            check_op(&[r(&[3, 4], 32)], |g, v| g.l2_normalize(v[0], 1e-12)),
        ),
    ]
}

/// Upper-tail p-value of Pearson's χ² statistic for `counts` against equal
/// expected frequencies.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Center of the flat well; the sharp well sits at 0.
pub const FLAT_CENTER: f64 = 3.0;

/// `min(50θ², ½(θ − 3)²)`: equal-depth wells with curvature 100 and 1.
pub fn double_well(theta: f64) -> (f64, f64) {
    let sharp = 50.0 * theta * theta;
    let flat = 0.5 * (theta - FLAT_CENTER).powi(2);
    if sharp <= flat {
        (sharp, 100.0 * theta)
    } else {
        (flat, theta - FLAT_CENTER)
    }
}

/// True when `theta` lies in the basin of the flat well.
pub fn in_flat_basin(theta: f64) -> bool {
    50.0 * theta * theta > 0.5 * (theta - FLAT_CENTER).powi(2)
}

/// 21 initializations between the wells, all on the sharp side of the ridge.
pub fn double_well_inits() -> Vec<f64> {
    let ridge = FLAT_CENTER / 11.0;
    (1..=21).map(|i| ridge * i as f64 / 22.0).collect()
}

/// Final θ after `steps` updates from `theta0` with SGD (lr 0.005), with or
/// without SAM at radius `rho`.
pub fn run_double_well(theta0: f64, sam: bool, rho: f64, steps: u64) -> f64 {
    use samrec::sam::{BaseOptimizer, OptimizerConfig, SamConfig, SamStepper};
    let mut p = ParamSet::new();
    p.push("theta", Tensor::from_vec(vec![theta0]));
    let mut opt = BaseOptimizer::new(OptimizerConfig::sgd(0.005)).unwrap();
    let mut stepper = SamStepper::new(SamConfig {
        rho,
        ascent_period: 1,
        enabled: sam,
    })
    .unwrap();
    for i in 0..steps {
        stepper
            .step(&mut p, &mut opt, i, |q| {
                let (l, g) = double_well(q.tensors()[0].data()[0]);
                let mut gs = GradSet::new();
                gs.push("theta", Tensor::from_vec(vec![g]));
                Ok((l, gs))
            })
            .unwrap();
    }
    p.tensors()[0].data()[0]
}

/// Synthetic Markov dataset windowed to `max_len`.
pub fn synthetic(
    spec: &samrec::dataset::synthetic::SyntheticSpec,
    max_len: usize,
) -> SequenceDataset {
    let log = samrec::dataset::synthetic::markov_log(spec);
    samrec::dataset::build_sequences(&log, max_len).unwrap()
}

/// Small, fast settings: d=16, one layer, Adam at lr 5e-3.
pub fn small_settings(
    ds: &SequenceDataset,
    seed: u64,
    sam: bool,
    epochs: usize,
) -> samrec::sam::TrainSettings {
    use samrec::sam::{OptimizerConfig, SamConfig, TrainSettings};
    let model = SasrecConfig {
        dim: 16,
        num_layers: 1,
        num_heads: 1,
        dropout: 0.1,
        ..SasrecConfig::new(ds.num_items(), ds.max_len())
    };
    TrainSettings {
        optimizer: OptimizerConfig {
            lr: 5e-3,
            ..OptimizerConfig::default()
        },
        sam: SamConfig {
            rho: 0.05,
            enabled: sam,
            ..SamConfig::default()
        },
        epochs,
        batch_size: 32,
        patience: 0,
        seed,
        ..TrainSettings::new(model)
    }
}
