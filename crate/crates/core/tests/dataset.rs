mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::chi_square_uniform_p;
use proptest::prelude::*;
use rand::Rng;
use samrec::dataset::synthetic::{markov_log, SyntheticSpec};
use samrec::dataset::{
    build_sequences, epoch_batches, five_core_filter, k_core_filter, window, Interaction,
    InteractionLog, SequenceDataset, Split, PAD,
};
use samrec::rng;

fn random_log(seed: u64, records: usize, users: usize, items: usize) -> InteractionLog {
    let mut r = rng::seeded(seed);
    let mut log = InteractionLog::default();
    for _ in 0..records {
        // skewed draws leave a mix of dense and sparse users and items
        let u = (r.random::<f64>().powi(2) * users as f64) as usize;
        let i = (r.random::<f64>().powi(2) * items as f64) as usize;
        log.push(format!("u{u}"), format!("i{i}"), r.random_range(0..1000));
    }
    log
}

fn counts<'a>(
    records: impl Iterator<Item = &'a Interaction>,
) -> (BTreeMap<&'a str, usize>, BTreeMap<&'a str, usize>) {
    let (mut users, mut items) = (BTreeMap::new(), BTreeMap::new());
    for r in records {
        *users.entry(r.user.as_str()).or_insert(0) += 1;
        *items.entry(r.item.as_str()).or_insert(0) += 1;
    }
    (users, items)
}

/// Removes one deficient user or item per round until none is left.
fn one_at_a_time_core(log: &InteractionLog, k: usize) -> Vec<Interaction> {
    let mut kept: Vec<Interaction> = log.records.clone();
    loop {
        let (users, items) = counts(kept.iter());
        let bad_user = users
            .iter()
            .find(|(_, &c)| c < k)
            .map(|(u, _)| u.to_string());
        let bad_item = items
            .iter()
            .find(|(_, &c)| c < k)
            .map(|(i, _)| i.to_string());
        match (bad_user, bad_item) {
            (Some(u), _) => kept.retain(|r| r.user != u),
            (None, Some(i)) => kept.retain(|r| r.item != i),
            (None, None) => return kept,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn five_core_is_an_idempotent_fixed_point(seed in any::<u64>(), size in 0usize..600) {
        let log = random_log(seed, size, 40, 40);
        let core = five_core_filter(&log);
        prop_assert_eq!(&five_core_filter(&core), &core);
        let (users, items) = counts(core.records.iter());
        prop_assert!(users.values().chain(items.values()).all(|&c| c >= 5));
        prop_assert_eq!(core.records, one_at_a_time_core(&log, 5));
    }

    #[test]
    fn windows_keep_the_recent_suffix(seq in proptest::collection::vec(1usize..100, 0..30), n in 1usize..20) {
        let w = window(&seq, n);
        prop_assert_eq!(w.len(), n);
        let keep = seq.len().min(n);
        prop_assert_eq!(&w[n - keep..], &seq[seq.len() - keep..]);
        prop_assert!(w[..n - keep].iter().all(|&x| x == PAD));
    }
}

#[test]
fn k_core_filter_handles_cascades() {
    // dropping i3 leaves u2 with one record, which then drops i1 below 2
    let mut log = InteractionLog::default();
    for (u, i) in [
        ("u1", "i1"),
        ("u1", "i2"),
        ("u2", "i1"),
        ("u2", "i3"),
        ("u3", "i2"),
        ("u3", "i2"),
    ] {
        log.push(u, i, 0);
    }
    let core = k_core_filter(&log, 2);
    let pairs: Vec<(&str, &str)> = core
        .records
        .iter()
        .map(|r| (r.user.as_str(), r.item.as_str()))
        .collect();
    assert_eq!(pairs, [("u3", "i2"), ("u3", "i2")]);
    assert!(k_core_filter(&InteractionLog::default(), 5).is_empty());
}

#[test]
fn leave_one_out_splits_partition_every_sequence() {
    let log = five_core_filter(&random_log(9, 4000, 120, 80));
    let ds = build_sequences(&log, 10).unwrap();
    assert!(ds.num_users() > 50);
    for u in 0..ds.num_users() {
        let s = ds.sequence(u);
        let test = ds.split_entry(u, Split::Test);
        let valid = ds.split_entry(u, Split::Valid);
        let train = ds.train_items(u);
        assert_eq!(test.target, s[s.len() - 1]);
        assert_eq!(valid.target, s[s.len() - 2]);
        assert_eq!(train, &s[..s.len() - 2]);
        assert_eq!(test.history, &s[..s.len() - 1]);
        assert_eq!(valid.history, train);
        // positions, not item ids, are what the split partitions
        let n = s.len();
        let positions: BTreeSet<usize> = (0..train.len()).chain([n - 2, n - 1]).collect();
        assert_eq!(positions.len(), n);
    }
}

#[test]
fn equal_timestamps_keep_input_order() {
    let mut log = InteractionLog::default();
    for (item, ts) in [("c", 5), ("a", 5), ("b", 1), ("d", 5), ("e", 9)] {
        log.push("u", item, ts);
    }
    let ds = build_sequences(&log, 4).unwrap();
    let tokens: Vec<&str> = ds
        .sequence(0)
        .iter()
        .map(|&i| ds.item_token(i).unwrap())
        .collect();
    assert_eq!(tokens, ["b", "c", "a", "d", "e"]);
}

#[test]
fn short_users_are_dropped() {
    let mut log = InteractionLog::default();
    for (u, i, t) in [
        ("a", "x", 1),
        ("a", "y", 2),
        ("b", "x", 1),
        ("b", "y", 2),
        ("b", "z", 3),
    ] {
        log.push(u, i, t);
    }
    let ds = build_sequences(&log, 4).unwrap();
    assert_eq!(ds.num_users(), 1);
    assert_eq!(ds.user_token(0), "b");
    assert!(SequenceDataset::from_sequences(vec![vec![1, 2]], 5, 4).is_err());
    assert!(SequenceDataset::from_sequences(vec![vec![1, 2, 9]], 5, 4).is_err());
}

#[test]
fn negatives_are_uniform_over_unseen_items() {
    let ds = SequenceDataset::from_sequences(vec![vec![1, 1, 1]], 50, 4).unwrap();
    let mut r = rng::seeded(11);
    let mut counts = vec![0u64; 49];
    for _ in 0..100_000 {
        let item = ds.sample_negative(0, &mut r).unwrap();
        assert_ne!(item, 1);
        counts[item - 2] += 1;
    }
    assert!(chi_square_uniform_p(&counts) > 0.01);
    let full = SequenceDataset::from_sequences(vec![vec![1, 2, 3]], 3, 4).unwrap();
    assert!(full.sample_negative(0, &mut r).is_err());
}

#[test]
fn subsampling_keeps_floor_fraction_in_order() {
    let seqs: Vec<Vec<usize>> = (0..30).map(|u| (1..=(5 + u)).collect()).collect();
    let ds = SequenceDataset::from_sequences(seqs, 40, 8).unwrap();
    for fraction in [0.1, 0.6, 0.8, 1.0] {
        let sub = ds
            .subsample_training(fraction, &mut rng::seeded(1))
            .unwrap();
        for u in 0..ds.num_users() {
            let full = ds.train_items(u);
            let kept = sub.train_items(u);
            let want = ((fraction * full.len() as f64 + 1e-9).floor() as usize).max(1);
            assert_eq!(kept.len(), want);
            assert!(kept.windows(2).all(|w| w[0] < w[1]));
            assert!(kept.iter().all(|i| full.contains(i)));
            assert_eq!(
                sub.split_entry(u, Split::Test).target,
                ds.split_entry(u, Split::Test).target
            );
            assert_eq!(
                sub.split_entry(u, Split::Valid).target,
                ds.split_entry(u, Split::Valid).target
            );
        }
    }
    assert_eq!(ds.subsample_training(1.0, &mut rng::seeded(0)).unwrap(), ds);
    assert!(ds.subsample_training(0.0, &mut rng::seeded(0)).is_err());
}

#[test]
fn epoch_batches_cover_users_once_and_are_seeded() {
    let ds = build_sequences(&markov_log(&SyntheticSpec::default()), 10).unwrap();
    let a = epoch_batches(&ds, 32, 2, 3, 0).unwrap();
    assert_eq!(a, epoch_batches(&ds, 32, 2, 3, 0).unwrap());
    assert_ne!(a, epoch_batches(&ds, 32, 2, 3, 1).unwrap());
    let mut users: Vec<usize> = a.iter().flat_map(|b| b.users.clone()).collect();
    users.sort_unstable();
    assert_eq!(users, (0..ds.num_users()).collect::<Vec<_>>());
    for b in &a {
        for (p, &real) in b.mask.iter().enumerate() {
            let negs = &b.negatives[p * 2..p * 2 + 2];
            if real {
                let u = b.users[p / b.max_len];
                assert!(negs.iter().all(|&n| n != PAD && !ds.contains(u, n)));
            } else {
                assert_eq!(negs, [PAD, PAD]);
            }
        }
    }
}

#[test]
fn synthetic_log_is_reproducible_and_sized() {
    let spec = SyntheticSpec::default();
    let log = markov_log(&spec);
    assert_eq!(log, markov_log(&spec));
    assert_eq!(log.len(), 200 * 20);
    let ds = build_sequences(&log, 50).unwrap();
    assert_eq!(ds.num_users(), 200);
    assert!(ds.num_items() <= 50);
    assert_ne!(log, markov_log(&SyntheticSpec { seed: 1, ..spec }));
}

#[test]
fn artifact_round_trip_preserves_everything() {
    let ds = build_sequences(
        &markov_log(&SyntheticSpec {
            num_users: 20,
            ..SyntheticSpec::default()
        }),
        12,
    )
    .unwrap();
    let bytes = ds.to_bytes();
    assert!(SequenceDataset::is_artifact(&bytes));
    assert_eq!(SequenceDataset::from_bytes(&bytes).unwrap(), ds);
    assert!(SequenceDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
