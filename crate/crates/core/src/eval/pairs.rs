use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::embeddings::EmbeddingSet;
use crate::error::{Error, Result};

pub const DEFAULT_IMPOSTOR_RATIO: f64 = 10.0;

/// Index pairs `(i, j)` with `i < j` into an [`EmbeddingSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSet {
    pub genuine: Vec<(usize, usize)>,
    pub impostor: Vec<(usize, usize)>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPairs {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

/// Every same-identity pair, plus `min(⌊ratio·genuine⌋, available)`
/// cross-identity pairs drawn uniformly without replacement.
pub fn make_pairs(set: &EmbeddingSet, impostor_ratio: f64, seed: u64) -> Result<PairSet> {
    if !(impostor_ratio > 0.0) {
        return Err(Error::Config(format!(
            "eval.impostor_ratio must be positive, got {impostor_ratio}"
        )));
    }
    let blocks = set.identity_blocks();
    if blocks.len() < 2 {
        return Err(Error::Contract(
            "impostor pairs need at least 2 identities".into(),
        ));
    }
    let mut genuine = Vec::new();
    for b in &blocks {
        for i in b.clone() {
            for j in i + 1..b.end {
                genuine.push((i, j));
            }
        }
    }
    if genuine.is_empty() {
        return Err(Error::NoGenuinePairs);
    }

    // Entries are grouped by identity, so the impostor partners of `i` are
    // exactly the indices from the end of its block onward. `offsets[i]` is
    // the number of cross pairs whose first element precedes `i`.
    let n = set.len();
    let mut block_end = vec![0; n];
    for b in &blocks {
        block_end[b.clone()].fill(b.end);
    }
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0usize);
    for i in 0..n {
        offsets.push(offsets[i] + (n - block_end[i]));
    }
    let available = offsets[n];
    let wanted = (impostor_ratio * genuine.len() as f64 + 1e-9).floor();
    let count = if wanted >= available as f64 {
        available
    } else {
        wanted as usize
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, available, count).into_vec();
    picks.sort_unstable();
    let impostor = picks
        .into_iter()
        .map(|k| {
            let i = offsets.partition_point(|&o| o <= k) - 1;
            (i, block_end[i] + (k - offsets[i]))
        })
        .collect();

    Ok(PairSet {
        genuine,
        impostor,
        seed,
    })
}

/// Dot product, clamped to `[−1, 1]` against rounding on unit vectors.
pub fn score(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

pub fn score_pairs(set: &EmbeddingSet, pairs: &PairSet) -> ScoredPairs {
    let s = |&(i, j): &(usize, usize)| score(&set.get(i).vector, &set.get(j).vector);
    ScoredPairs {
        genuine: pairs.genuine.iter().map(s).collect(),
        impostor: pairs.impostor.iter().map(s).collect(),
    }
}
