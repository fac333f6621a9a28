//! Seeded inputs shared by the benchmarks.

use memaudit_core::attacks::seq::SequenceRecord;
use memaudit_core::{ScoreEntry, ScoreSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` scores, members shifted up by `shift`.
pub fn score_set(n: usize, shift: f64, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| {
            let member = i % 2 == 0;
            ScoreEntry {
                sample_id: format!("s{i}"),
                score: rng.random::<f64>() + if member { shift } else { 0.0 },
                is_member: member,
            }
        })
        .collect();
    ScoreSet::new("bench", entries).expect("finite, unique")
}

pub fn probs(n: usize, classes: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn sequence(tokens: usize, seed: u64) -> SequenceRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SequenceRecord {
        sample_id: "doc".into(),
        token_logls: (0..tokens).map(|_| -rng.random_range(0.0..10.0)).collect(),
        raw_bytes: (0..tokens * 4).map(|_| rng.random_range(b'a'..=b'z')).collect(),
        ref_token_logls: None,
    }
}

pub fn features(n: usize, dim: usize, classes: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let y = (0..n).map(|i| i % classes).collect();
    (x, y)
}
