//! Leave-one-out ranking evaluation with HR@K and NDCG@K.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::ParamSet;
use crate::dataset::{window, SequenceDataset, Split};
use crate::error::{Error, Result};
use crate::model::{forward, score, SasrecConfig, ITEM_TABLE};
use crate::rng;

/// Users scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 128;

/// Which items the held-out target is ranked against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CandidateScheme {
    /// Every catalog item.
    #[default]
    FullCatalog,
    /// The target plus `count` uniformly sampled items the user never touched.
    Sampled { count: usize, seed: u64 },
}

impl fmt::Display for CandidateScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CandidateScheme::FullCatalog => write!(f, "full"),
            CandidateScheme::Sampled { count, seed } => write!(f, "sampled:{count}:{seed}"),
        }
    }
}

impl FromStr for CandidateScheme {
    type Err = Error;

    /// `full`, `sampled:<count>` or `sampled:<count>:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || {
            Error::Config(format!(
                "candidate scheme {s:?} is not full|sampled:<count>[:<seed>]"
            ))
        };
        match parts.as_slice() {
            ["full"] | ["full_catalog"] => Ok(CandidateScheme::FullCatalog),
            ["sampled", count] => Ok(CandidateScheme::Sampled {
                count: count.parse().map_err(|_| bad())?,
                seed: 0,
            }),
            ["sampled", count, seed] => Ok(CandidateScheme::Sampled {
                count: count.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Anything that scores every catalog item for a batch of histories.
///
/// Each returned row has `num_items + 1` entries indexed by item; entry 0
/// (padding) is ignored.
pub trait Scorer: Sync {
    fn num_items(&self) -> usize;
    fn score(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// Scores items by the inner product of the final hidden state and the item
/// embedding, with dropout off.
pub struct ModelScorer<'a> {
    pub params: &'a ParamSet,
    pub config: &'a SasrecConfig,
}

impl Scorer for ModelScorer<'_> {
    fn num_items(&self) -> usize {
        self.config.num_items
    }

    fn score(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let n = self.config.max_len;
        let inputs: Vec<usize> = histories.iter().flat_map(|h| window(h, n)).collect();
        // eval mode never draws from the stream
        let hidden = forward(
            self.params,
            self.config,
            &inputs,
            histories.len(),
            false,
            &mut rng::seeded(0),
        )?;
        let table = self
            .params
            .get(ITEM_TABLE)
            .ok_or_else(|| Error::shape("score", "missing item table"))?;
        let d = self.config.dim;
        Ok((0..histories.len())
            .map(|b| {
                let last = &hidden.data()[(b * n + n - 1) * d..(b * n + n) * d];
                let mut row = vec![0.0; self.config.num_items + 1];
                for (item, slot) in row.iter_mut().enumerate().skip(1) {
                    *slot = last.iter().zip(table.row(item)).map(|(a, b)| a * b).sum();
                }
                row
            })
            .collect())
    }
}

/// `1 + #{c ≠ target : score(c) ≥ score(target)}`: ties count against the target.
pub fn rank_from_scores(scores: &[f64], target: usize, candidates: &[usize]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate set".into()));
    }
    if !candidates.contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "target {target} is not a candidate"
        )));
    }
    let ts = scores[target];
    Ok(1 + candidates
        .iter()
        .filter(|&&c| c != target && scores[c] >= ts)
        .count())
}

/// Rank of `target` among `candidates` given `history`.
pub fn rank_target(
    params: &ParamSet,
    cfg: &SasrecConfig,
    history: &[usize],
    target: usize,
    candidates: &[usize],
) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("empty history".into()));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty candidate set".into()));
    }
    let n = cfg.max_len;
    let hidden = forward(
        params,
        cfg,
        &window(history, n),
        1,
        false,
        &mut rng::seeded(0),
    )?;
    let last = &hidden.data()[(n - 1) * cfg.dim..];
    let mut scores = vec![f64::NEG_INFINITY; cfg.num_items + 1];
    for &c in candidates {
        scores[c] = score(last, c, params, cfg)?;
    }
    if !candidates.contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "target {target} is not a candidate"
        )));
    }
    rank_from_scores(&scores, target, candidates)
}

/// `(hit, ndcg)` of a single relevant item at `rank` with cutoff `k`.
pub fn metrics_from_rank(rank: usize, k: usize) -> Result<(f64, f64)> {
    if rank < 1 {
        return Err(Error::InvalidArgument("rank must be >= 1".into()));
    }
    if rank <= k {
        Ok((1.0, 1.0 / ((rank + 1) as f64).log2()))
    } else {
        Ok((0.0, 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_users_evaluated: usize,
    pub candidate_scheme: String,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// `dataset model seed HR@10 NDCG@10`, tab separated.
    pub fn tsv_line(&self, dataset: &str, model: &str, seed: u64) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            dataset,
            model,
            seed,
            self.hr_at(10),
            self.ndcg_at(10)
        )
    }
}

pub const TSV_HEADER: &str = "dataset\tmodel\tseed\tHR@10\tNDCG@10";

fn candidates_for(
    ds: &SequenceDataset,
    user: usize,
    target: usize,
    scheme: CandidateScheme,
) -> Vec<usize> {
    match scheme {
        CandidateScheme::FullCatalog => (1..=ds.num_items()).collect(),
        CandidateScheme::Sampled { count, seed } => {
            let pool: Vec<usize> = (1..=ds.num_items())
                .filter(|&i| !ds.contains(user, i))
                .collect();
            let mut r = rng::stream(seed, &[0xCA4D, user as u64]);
            let take = count.min(pool.len());
            let mut out = vec![target];
            out.extend(
                index::sample(&mut r, pool.len(), take)
                    .into_iter()
                    .map(|i| pool[i]),
            );
            out
        }
    }
}

/// Rank of every user's held-out item, in user order.
pub fn user_ranks(
    scorer: &dyn Scorer,
    ds: &SequenceDataset,
    split: Split,
    scheme: CandidateScheme,
) -> Result<Vec<usize>> {
    if scorer.num_items() != ds.num_items() {
        return Err(Error::Data(format!(
            "model covers {} items, dataset has {}",
            scorer.num_items(),
            ds.num_items()
        )));
    }
    let entries = ds.split_entries(split);
    let chunks: Vec<Vec<usize>> = entries
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let histories: Vec<&[usize]> = chunk.iter().map(|e| e.history).collect();
            let scores = scorer.score(&histories)?;
            chunk
                .iter()
                .zip(&scores)
                .map(|(e, s)| {
                    let cands = candidates_for(ds, e.user, e.target, scheme);
                    rank_from_scores(s, e.target, &cands)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean HR@K and NDCG@K over every user of `split`.
pub fn evaluate(
    scorer: &dyn Scorer,
    ds: &SequenceDataset,
    split: Split,
    ks: &[usize],
    scheme: CandidateScheme,
) -> Result<EvalReport> {
    if ds.num_users() == 0 {
        return Err(Error::Data("no evaluable users".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("cutoffs must be non-empty and >= 1".into()));
    }
    let ranks = user_ranks(scorer, ds, split, scheme)?;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let (mut h, mut g) = (0.0, 0.0);
        for &r in &ranks {
            let (a, b) = metrics_from_rank(r, k)?;
            h += a;
            g += b;
        }
        hr.insert(k, h / ranks.len() as f64);
        ndcg.insert(k, g / ranks.len() as f64);
    }
    Ok(EvalReport {
        split,
        hr,
        ndcg,
        num_users_evaluated: ranks.len(),
        candidate_scheme: scheme.to_string(),
    })
}

/// Convenience wrapper scoring with the model itself.
pub fn evaluate_model(
    params: &ParamSet,
    cfg: &SasrecConfig,
    ds: &SequenceDataset,
    split: Split,
    ks: &[usize],
    scheme: CandidateScheme,
) -> Result<EvalReport> {
    evaluate(
        &ModelScorer {
            params,
            config: cfg,
        },
        ds,
        split,
        ks,
        scheme,
    )
}
