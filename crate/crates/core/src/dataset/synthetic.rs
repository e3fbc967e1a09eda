use rand::seq::SliceRandom;
use rand::Rng;

use super::InteractionLog;
use crate::rng;

/// Parameters of the Markov-chain interaction generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub seq_len: usize,
    /// Probability that a transition jumps to a uniformly random item instead
    /// of the successor on the hidden item cycle.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 200,
            num_items: 50,
            seq_len: 20,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Users walk a hidden random cycle over the catalog, starting at a random
/// item; each step follows the cycle with probability `1 - noise`.
pub fn markov_log(spec: &SyntheticSpec) -> InteractionLog {
    let mut r = rng::stream(spec.seed, &[0x5EED]);
    let mut cycle: Vec<usize> = (0..spec.num_items).collect();
    cycle.shuffle(&mut r);
    let mut successor = vec![0; spec.num_items];
    for (i, &item) in cycle.iter().enumerate() {
        successor[item] = cycle[(i + 1) % cycle.len()];
    }

    let mut log = InteractionLog::default();
    for u in 0..spec.num_users {
        let mut item = r.random_range(0..spec.num_items);
        for t in 0..spec.seq_len {
            log.push(
                format!("user{u}"),
                format!("item{item}"),
                (u * spec.seq_len + t) as i64,
            );
            item = if r.random::<f64>() < spec.noise {
                r.random_range(0..spec.num_items)
            } else {
                successor[item]
            };
        }
    }
    log
}
