use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};

/// One cross-validation fold as index lists into the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled_classes(labels: &[u8], rng: &mut ChaCha8Rng) -> [Vec<usize>; 2] {
    let mut classes = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        classes[usize::from(l != 0)].push(i);
    }
    for c in &mut classes {
        c.shuffle(rng);
    }
    classes
}

/// Stratified `k`-fold partition, deterministic per seed.
pub fn kfold_split(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(config_err!("k must be at least 2, got {k}"));
    }
    if labels.len() < k {
        return Err(config_err!("{} records cannot fill {k} folds", labels.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = shuffled_classes(labels, &mut rng);
    for (name, c) in ["negative", "positive"].iter().zip(&classes) {
        if c.len() < k {
            return Err(config_err!("only {} {name} records for {k} folds", c.len()));
        }
    }
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    // continue the round-robin across classes so fold sizes stay balanced
    let mut slot = 0;
    for c in &classes {
        for &i in c {
            tests[slot % k].push(i);
            slot += 1;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}

/// Stratified holdout: returns `(train, held_out)` with roughly `fraction` of
/// each class held out (at least one per class when the class has two or more).
pub fn stratified_holdout(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = shuffled_classes(labels, &mut rng);
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for c in classes {
        let mut n = (c.len() as f64 * fraction).round() as usize;
        if n == 0 && c.len() >= 2 && fraction > 0.0 {
            n = 1;
        }
        held.extend_from_slice(&c[..n]);
        train.extend_from_slice(&c[n..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}
