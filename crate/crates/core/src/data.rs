//! Labeled comments and balanced sampling.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub comment: String,
    pub toxic: bool,
    /// Per-rater marks, 1 for toxic.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ratings: Vec<u8>,
}

impl LabeledExample {
    pub fn new(comment: impl Into<String>, toxic: bool) -> Self {
        LabeledExample { comment: comment.into(), toxic, ratings: Vec::new() }
    }

    /// Fraction of raters who marked the comment toxic.
    pub fn avg_rating(&self) -> Option<f64> {
        average_rating(&self.ratings)
    }
}

/// Mean of 0/1 marks, or `None` when there are none.
pub fn average_rating(marks: &[u8]) -> Option<f64> {
    if marks.is_empty() {
        return None;
    }
    Some(marks.iter().map(|&m| m as f64).sum::<f64>() / marks.len() as f64)
}

/// Split indices into (positives, negatives).
fn by_class(examples: &[LabeledExample]) -> (Vec<usize>, Vec<usize>) {
    (0..examples.len()).partition(|&i| examples[i].toxic)
}

/// Keep every example of the rarer class and an equal random share of the
/// other. Output order is shuffled.
pub fn balanced_downsample<R: Rng + ?Sized>(examples: &[LabeledExample], rng: &mut R) -> Vec<LabeledExample> {
    let (mut pos, mut neg) = by_class(examples);
    let k = pos.len().min(neg.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut idx: Vec<usize> = pos[..k].iter().chain(&neg[..k]).copied().collect();
    idx.shuffle(rng);
    idx.into_iter().map(|i| examples[i].clone()).collect()
}

/// Draw `n/2` of each class (`n` must be even) from the given index pools.
fn draw<R: Rng + ?Sized>(examples: &[LabeledExample], pos: &[usize], neg: &[usize], n: usize, rng: &mut R) -> Result<Vec<LabeledExample>> {
    if !n.is_multiple_of(2) {
        return Err(Error::invalid("balanced sets need an even size"));
    }
    let half = n / 2;
    let available = 2 * pos.len().min(neg.len());
    if half > pos.len() || half > neg.len() {
        return Err(Error::Insufficient { needed: n, available });
    }
    let mut idx: Vec<usize> = pos.choose_multiple(rng, half).chain(neg.choose_multiple(rng, half)).copied().collect();
    idx.shuffle(rng);
    Ok(idx.into_iter().map(|i| examples[i].clone()).collect())
}

/// A balanced test set of `test_size`, then one balanced training set per
/// entry of `sizes`, each drawn independently from what the test set left.
pub fn sample_train_sets(
    pool: &[LabeledExample],
    test_size: usize,
    sizes: &[usize],
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<Vec<LabeledExample>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = by_class(pool);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let half = test_size / 2;
    let test = draw(pool, &pos[..half.min(pos.len())], &neg[..half.min(neg.len())], test_size, &mut rng)?;
    let rest_pos = &pos[half..];
    let rest_neg = &neg[half..];
    let mut sets = Vec::with_capacity(sizes.len());
    for &n in sizes {
        sets.push(draw(pool, rest_pos, rest_neg, n, &mut rng)?);
    }
    Ok((test, sets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    fn pool(pos: usize, neg: usize) -> Vec<LabeledExample> {
        (0..pos).map(|i| LabeledExample::new(format!("p{i}"), true)).chain((0..neg).map(|i| LabeledExample::new(format!("n{i}"), false))).collect()
    }

    #[test]
    fn average_of_marks() {
        assert_eq!(average_rating(&[1, 0, 1]), Some(2.0 / 3.0));
        assert_eq!(average_rating(&[]), None);
    }

    #[test]
    fn downsample_balances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = balanced_downsample(&pool(3, 10), &mut rng);
        assert_eq!(out.len(), 6);
        assert_eq!(out.iter().filter(|e| e.toxic).count(), 3);
    }

    #[test]
    fn train_sets_are_disjoint_from_test() {
        let p = pool(60, 80);
        let (test, sets) = sample_train_sets(&p, 20, &[10, 40], 3).unwrap();
        assert_eq!(test.len(), 20);
        assert_eq!(test.iter().filter(|e| e.toxic).count(), 10);
        for s in &sets {
            assert_eq!(s.iter().filter(|e| e.toxic).count() * 2, s.len());
            assert!(s.iter().all(|e| !test.contains(e)));
        }
        assert_eq!(sets[1].len(), 40);
        assert!(matches!(sample_train_sets(&p, 20, &[200], 3), Err(Error::Insufficient { .. })));
        assert!(sample_train_sets(&p, 20, &[11], 3).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let p = pool(30, 30);
        assert_eq!(sample_train_sets(&p, 10, &[8], 9).unwrap(), sample_train_sets(&p, 10, &[8], 9).unwrap());
    }
}
