use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use super::InteractionLog;
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

/// Reserved item index for padding.
pub const PAD: usize = 0;

/// Default window length.
pub const DEFAULT_MAX_LEN: usize = 50;

const MAGIC: &[u8; 8] = b"SAMRECDS";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One user's history and held-out target for a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitEntry<'a> {
    pub user: usize,
    pub history: &'a [usize],
    pub target: usize,
}

/// Per-user chronological item sequences with 1-based item indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    sequences: Vec<Vec<usize>>,
    item_sets: Vec<Vec<usize>>,
    num_items: usize,
    max_len: usize,
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub avg_len: f64,
}

/// Keep the most recent `n` items, left-padding with [`PAD`] when shorter.
pub fn window(seq: &[usize], n: usize) -> Vec<usize> {
    if seq.len() >= n {
        seq[seq.len() - n..].to_vec()
    } else {
        let mut out = vec![PAD; n - seq.len()];
        out.extend_from_slice(seq);
        out
    }
}

/// Group records by user, order each user's items by timestamp (ties keep
/// input order), drop users with fewer than three interactions and index items
/// contiguously from 1 in order of first appearance.
pub fn build_sequences(log: &InteractionLog, max_len: usize) -> Result<SequenceDataset> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("window length must be >= 1".into()));
    }
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut per_user: Vec<(&str, Vec<(i64, &str)>)> = Vec::new();
    for r in &log.records {
        let u = *user_index.entry(&r.user).or_insert_with(|| {
            per_user.push((&r.user, Vec::new()));
            per_user.len() - 1
        });
        per_user[u].1.push((r.timestamp, &r.item));
    }

    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut item_tokens = Vec::new();
    let mut user_tokens = Vec::new();
    let mut sequences = Vec::new();
    for (user, mut events) in per_user {
        if events.len() < 3 {
            continue;
        }
        events.sort_by_key(|&(ts, _)| ts);
        let seq = events
            .into_iter()
            .map(|(_, item)| {
                *item_index.entry(item).or_insert_with(|| {
                    item_tokens.push(item.to_string());
                    item_tokens.len()
                })
            })
            .collect();
        user_tokens.push(user.to_string());
        sequences.push(seq);
    }
    SequenceDataset::with_tokens(
        sequences,
        item_tokens.len(),
        max_len,
        user_tokens,
        item_tokens,
    )
}

impl SequenceDataset {
    /// Dataset over already-indexed sequences with generated tokens.
    pub fn from_sequences(
        sequences: Vec<Vec<usize>>,
        num_items: usize,
        max_len: usize,
    ) -> Result<Self> {
        let user_tokens = (0..sequences.len()).map(|u| format!("u{u}")).collect();
        let item_tokens = (1..=num_items).map(|i| format!("i{i}")).collect();
        Self::with_tokens(sequences, num_items, max_len, user_tokens, item_tokens)
    }

    fn with_tokens(
        sequences: Vec<Vec<usize>>,
        num_items: usize,
        max_len: usize,
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("window length must be >= 1".into()));
        }
        for (u, s) in sequences.iter().enumerate() {
            if s.len() < 3 {
                return Err(Error::Data(format!(
                    "user {u} has {} interactions; leave-one-out needs at least 3",
                    s.len()
                )));
            }
            if let Some(&bad) = s.iter().find(|&&i| i == PAD || i > num_items) {
                return Err(Error::Data(format!(
                    "user {u} holds item index {bad} outside [1, {num_items}]"
                )));
            }
        }
        let item_sets = sequences
            .iter()
            .map(|s| {
                let mut v = s.clone();
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        Ok(Self {
            sequences,
            item_sets,
            num_items,
            max_len,
            user_tokens,
            item_tokens,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn sequence(&self, user: usize) -> &[usize] {
        &self.sequences[user]
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn user_token(&self, user: usize) -> &str {
        &self.user_tokens[user]
    }

    pub fn item_token(&self, item: usize) -> Option<&str> {
        item.checked_sub(1)
            .and_then(|i| self.item_tokens.get(i))
            .map(String::as_str)
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.item_sets[user].binary_search(&item).is_ok()
    }

    /// Items available for training: everything before the validation target.
    pub fn train_items(&self, user: usize) -> &[usize] {
        let s = &self.sequences[user];
        &s[..s.len() - 2]
    }

    /// History and target of `user` for an evaluation split. For
    /// [`Split::Train`] the target is the last training item.
    pub fn split_entry(&self, user: usize, split: Split) -> SplitEntry<'_> {
        let s = &self.sequences[user];
        let cut = match split {
            Split::Test => s.len() - 1,
            Split::Valid => s.len() - 2,
            Split::Train => s.len() - 3,
        };
        SplitEntry {
            user,
            history: &s[..cut],
            target: s[cut],
        }
    }

    pub fn split_entries(&self, split: Split) -> Vec<SplitEntry<'_>> {
        (0..self.num_users())
            .map(|u| self.split_entry(u, split))
            .collect()
    }

    /// Fingerprint of a split's held-out `(user, item)` pairs. Histories are
    /// left out, so subsampling the training prefix keeps the hash.
    pub fn split_hash(&self, split: Split) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.split_entries(split) {
            self.user_tokens[e.user].hash(&mut h);
            self.item_tokens[e.target - 1].hash(&mut h);
        }
        h.finish()
    }

    /// Uniform draw from the items `user` never interacted with.
    pub fn sample_negative<R: Rng + ?Sized>(&self, user: usize, rng: &mut R) -> Result<usize> {
        if self.item_sets[user].len() >= self.num_items {
            return Err(Error::Data(format!(
                "user {user} interacted with every item; no negative exists"
            )));
        }
        loop {
            let item = rng.random_range(1..=self.num_items);
            if !self.contains(user, item) {
                return Ok(item);
            }
        }
    }

    /// Keep `max(1, floor(fraction * count))` uniformly chosen training items
    /// per user, in chronological order. Validation and test targets are kept.
    pub fn subsample_training<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "training fraction {fraction} not in (0, 1]"
            )));
        }
        let sequences = self
            .sequences
            .iter()
            .enumerate()
            .map(|(u, s)| {
                let train = self.train_items(u);
                let keep = retained_count(train.len(), fraction);
                let mut out: Vec<usize> = if keep == train.len() {
                    train.to_vec()
                } else {
                    let mut picked = index::sample(rng, train.len(), keep).into_vec();
                    picked.sort_unstable();
                    picked.into_iter().map(|i| train[i]).collect()
                };
                out.extend_from_slice(&s[s.len() - 2..]);
                out
            })
            .collect();
        Self::with_tokens(
            sequences,
            self.num_items,
            self.max_len,
            self.user_tokens.clone(),
            self.item_tokens.clone(),
        )
    }

    /// Same sequences with a different window length.
    pub fn with_max_len(&self, max_len: usize) -> Result<Self> {
        Self::with_tokens(
            self.sequences.clone(),
            self.num_items,
            max_len,
            self.user_tokens.clone(),
            self.item_tokens.clone(),
        )
    }

    pub fn summary(&self) -> DatasetSummary {
        let total: usize = self.sequences.iter().map(Vec::len).sum();
        DatasetSummary {
            num_users: self.num_users(),
            num_items: self.num_items,
            num_interactions: total,
            avg_len: if self.sequences.is_empty() {
                0.0
            } else {
                total as f64 / self.sequences.len() as f64
            },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.bytes(MAGIC);
        e.u32(FORMAT_VERSION);
        e.usize(self.max_len);
        e.usize(self.num_items);
        for t in &self.item_tokens {
            e.str(t);
        }
        e.usize(self.sequences.len());
        for (t, s) in self.user_tokens.iter().zip(&self.sequences) {
            e.str(t);
            e.usize(s.len());
            for &i in s {
                e.usize(i);
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, "dataset artifact");
        d.expect_magic(MAGIC)?;
        let version = d.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "dataset artifact version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let max_len = d.usize()?;
        let num_items = d.len(8)?;
        let item_tokens = (0..num_items)
            .map(|_| d.str())
            .collect::<Result<Vec<_>>>()?;
        let num_users = d.len(16)?;
        let mut user_tokens = Vec::with_capacity(num_users);
        let mut sequences = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            user_tokens.push(d.str()?);
            let n = d.len(8)?;
            sequences.push((0..n).map(|_| d.usize()).collect::<Result<Vec<_>>>()?);
        }
        d.finish()?;
        Self::with_tokens(sequences, num_items, max_len, user_tokens, item_tokens)
    }

    pub fn is_artifact(bytes: &[u8]) -> bool {
        bytes.starts_with(MAGIC)
    }
}

pub(crate) fn retained_count(count: usize, fraction: f64) -> usize {
    // The epsilon keeps products like 0.29 * 100 from flooring to 28.
    (((fraction * count as f64) + 1e-9).floor() as usize).clamp(1, count.max(1))
}
