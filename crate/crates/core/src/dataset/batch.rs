use rand::seq::SliceRandom;
use rand::Rng;

use super::{window, SequenceDataset, PAD};
use crate::error::{Error, Result};
use crate::rng;

/// A batch of fixed-length training windows, flattened row-major.
///
/// `inputs`, `targets` and `mask` are `batch × max_len`; `negatives` is
/// `batch × max_len × num_negatives`. Positions where the input is padding
/// have `mask == false`, target [`PAD`] and negatives [`PAD`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub users: Vec<usize>,
    pub max_len: usize,
    pub num_negatives: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub negatives: Vec<usize>,
    pub mask: Vec<bool>,
    /// Unwindowed training prefix of every user (augmentation input).
    pub histories: Vec<Vec<usize>>,
}

impl TrainingBatch {
    pub fn build<R: Rng + ?Sized>(
        ds: &SequenceDataset,
        users: &[usize],
        num_negatives: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_negatives == 0 {
            return Err(Error::InvalidArgument(
                "need at least one negative per positive".into(),
            ));
        }
        let n = ds.max_len();
        let b = users.len();
        let mut batch = TrainingBatch {
            users: users.to_vec(),
            max_len: n,
            num_negatives,
            inputs: Vec::with_capacity(b * n),
            targets: Vec::with_capacity(b * n),
            negatives: Vec::with_capacity(b * n * num_negatives),
            mask: Vec::with_capacity(b * n),
            histories: Vec::with_capacity(b),
        };
        for &u in users {
            let train = ds.train_items(u);
            let inputs = window(&train[..train.len() - 1], n);
            let targets = window(&train[1..], n);
            for (&i, &t) in inputs.iter().zip(&targets) {
                let real = i != PAD;
                batch.mask.push(real);
                for _ in 0..num_negatives {
                    batch.negatives.push(if real {
                        ds.sample_negative(u, rng)?
                    } else {
                        PAD
                    });
                }
                batch.targets.push(if real { t } else { PAD });
            }
            batch.inputs.extend(inputs);
            batch.histories.push(train.to_vec());
        }
        Ok(batch)
    }

    pub fn batch_size(&self) -> usize {
        self.users.len()
    }

    pub fn num_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Negatives for choice `j`, as a `batch × max_len` slice copy.
    pub fn negatives_column(&self, j: usize) -> Vec<usize> {
        self.negatives
            .iter()
            .skip(j)
            .step_by(self.num_negatives)
            .copied()
            .collect()
    }
}

/// Shuffled mini-batches for one epoch; the stream depends only on
/// `(seed, epoch)`.
pub fn epoch_batches(
    ds: &SequenceDataset,
    batch_size: usize,
    num_negatives: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<TrainingBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut r = rng::stream(seed, &[0xBA7C, epoch]);
    let mut users: Vec<usize> = (0..ds.num_users()).collect();
    users.shuffle(&mut r);
    users
        .chunks(batch_size)
        .map(|chunk| TrainingBatch::build(ds, chunk, num_negatives, &mut r))
        .collect()
}
