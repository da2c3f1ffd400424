//! Classification metrics, rank correlations and the prompt experiments.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::model::FrozenModel;
use crate::prompt::{Exemplar, HardPrompt, Variant};
use crate::real::m;
use crate::scorer::{Classification, Scorer, ScorerConfig};
use crate::tuner::SoftPrompt;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    /// Recall on positives (sensitivity).
    pub positive_acc: f64,
    /// Recall on negatives (specificity).
    pub negative_acc: f64,
    pub balanced_acc: f64,
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn confusion_metrics(labels: &[bool], predictions: &[bool]) -> Result<ConfusionMetrics> {
    check_len(labels.len(), predictions.len())?;
    let (mut pos, mut neg, mut tp, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &p) in labels.iter().zip(predictions) {
        if l {
            pos += 1;
            tp += p as usize;
        } else {
            neg += 1;
            tn += !p as usize;
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let positive_acc = tp as f64 / pos as f64;
    let negative_acc = tn as f64 / neg as f64;
    Ok(ConfusionMetrics { positive_acc, negative_acc, balanced_acc: (positive_acc + negative_acc) / 2.0 })
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && xs[idx[j]] == xs[idx[i]] {
            j += 1;
        }
        // Positions i..j share rank (i+1 + j) / 2.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Area under the ROC curve from the rank-sum statistic: the probability
/// that a random positive outscores a random negative, ties counting half.
pub fn auc_roc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    check_len(labels.len(), scores.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { what: "score", position: i });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Predict positive when the score is at least this.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve vertices from (0, 0) to (1, 1), one per distinct score in
/// descending order. The trapezoid area under them equals `auc_roc`.
pub fn roc_points(labels: &[bool], scores: &[f64]) -> Result<Vec<RocPoint>> {
    auc_roc(labels, scores)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint { threshold: t, fpr: fp as f64 / neg, tpr: tp as f64 / pos });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall_tau: f64,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    check_len(x.len(), y.len())?;
    if x.len() < 3 {
        return Err(Error::Insufficient { needed: 3, available: x.len() });
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "value", position: i % x.len() });
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("first variable"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("second variable"));
    }
    Ok((sxy / m::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall's tau-b, which corrects for ties on either side.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tie_x += 1;
            }
            if dy == 0.0 {
                tie_y += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    if tie_x == n0 {
        return Err(Error::ZeroVariance("first variable"));
    }
    if tie_y == n0 {
        return Err(Error::ZeroVariance("second variable"));
    }
    let denom = m::sqrt(((n0 - tie_x) as f64) * ((n0 - tie_y) as f64));
    Ok((((concordant - discordant) as f64) / denom).clamp(-1.0, 1.0))
}

pub fn correlations(scores: &[f64], ratings: &[f64]) -> Result<CorrelationReport> {
    Ok(CorrelationReport { pearson: pearson(scores, ratings)?, spearman: spearman(scores, ratings)?, kendall_tau: kendall_tau_b(scores, ratings)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MislabelCandidate {
    pub index: usize,
    pub rating: f64,
    pub score: f64,
    /// `|rating - score|`.
    pub gap: f64,
}

/// Examples ordered by how far the model score sits from the average rating,
/// largest gap first; equal gaps keep input order.
pub fn rank_mislabel_candidates(ratings: &[f64], scores: &[f64]) -> Result<Vec<MislabelCandidate>> {
    check_len(ratings.len(), scores.len())?;
    let mut out: Vec<MislabelCandidate> = ratings
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (&rating, &score))| MislabelCandidate { index, rating, score, gap: (rating - score).abs() })
        .collect();
    if let Some(c) = out.iter().find(|c| !c.gap.is_finite()) {
        return Err(Error::NonFinite { what: "rating or score", position: c.index });
    }
    out.sort_by(|a, b| b.gap.total_cmp(&a.gap));
    Ok(out)
}

/// The answer used for counting: the parsed answer, or the score answer when
/// the generation has none.
pub fn decided_answer(c: &Classification) -> (bool, bool) {
    match c.parsed.answer.answer() {
        Some(a) => (a.is_yes(), false),
        None => (c.score.answer.is_yes(), true),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Option<ConfusionMetrics>,
    /// Generations without a parseable answer (scored by the Yes/No score instead).
    pub unparseable: usize,
    pub error: Option<String>,
}

fn ablation_row(
    model: &FrozenModel,
    soft: Option<&SoftPrompt>,
    prompt: &HardPrompt,
    variant: Variant,
    dataset: &[LabeledExample],
    config: ScorerConfig,
) -> Result<(ConfusionMetrics, usize)> {
    let p = prompt.make_variant(variant)?;
    let scorer = Scorer::new(model, soft, &p, config)?;
    let mut labels = Vec::with_capacity(dataset.len());
    let mut preds = Vec::with_capacity(dataset.len());
    let mut unparseable = 0;
    for (i, ex) in dataset.iter().enumerate() {
        let c = scorer.classify(&ex.comment).map_err(|e| Error::at(i, e))?;
        let (yes, fallback) = decided_answer(&c);
        unparseable += fallback as usize;
        labels.push(ex.toxic);
        preds.push(yes);
    }
    Ok((confusion_metrics(&labels, &preds)?, unparseable))
}

/// One row per prompt variant, derived from the full prompt. A failing
/// variant records its error and the suite moves on.
pub fn run_ablation_suite(
    model: &FrozenModel,
    soft: Option<&SoftPrompt>,
    prompt: &HardPrompt,
    dataset: &[LabeledExample],
    config: ScorerConfig,
) -> Result<Vec<AblationRow>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(Variant::ALL
        .iter()
        .map(|&variant| match ablation_row(model, soft, prompt, variant, dataset, config) {
            Ok((metrics, unparseable)) => AblationRow { variant, metrics: Some(metrics), unparseable, error: None },
            Err(e) => AblationRow { variant, metrics: None, unparseable: 0, error: Some(e.to_string()) },
        })
        .collect())
}

/// Yes counts on the same comments under the base prompt and under the base
/// prompt with `extra` appended as its last exemplar.
pub fn exemplar_severity_experiment<S: AsRef<str>>(
    model: &FrozenModel,
    soft: Option<&SoftPrompt>,
    base: &HardPrompt,
    extra: &Exemplar,
    comments: &[S],
    config: ScorerConfig,
) -> Result<(usize, usize)> {
    if comments.is_empty() {
        return Ok((0, 0));
    }
    let augmented = base.add_exemplar(extra.clone(), base.exemplars.len())?;
    let count = |p: &HardPrompt| -> Result<usize> {
        let scorer = Scorer::new(model, soft, p, config)?;
        let mut yes = 0;
        for (i, c) in comments.iter().enumerate() {
            let cls = scorer.classify(c.as_ref()).map_err(|e| Error::at(i, e))?;
            yes += decided_answer(&cls).0 as usize;
        }
        Ok(yes)
    };
    Ok((count(base)?, count(&augmented)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_auc(labels: &[bool], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }


    #[test]
    fn roc_points_integrate_to_auc() {
        let labels = [true, false, true, false, true];
        let scores = [0.9, 0.8, 0.8, 0.1, 0.3];
        let pts = roc_points(&labels, &scores).unwrap();
        assert_eq!(pts.len(), 5);
        assert_eq!((pts[4].fpr, pts[4].tpr), (1.0, 1.0));
        let area: f64 = pts.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
        assert!((area - auc_roc(&labels, &scores).unwrap()).abs() < 1e-12);
    }
    #[test]
    fn confusion_examples() {
        let c = confusion_metrics(&[true, true, false, false], &[true, false, false, false]).unwrap();
        assert_eq!((c.positive_acc, c.negative_acc, c.balanced_acc), (0.5, 1.0, 0.75));
        let l = [true, false, true];
        let c = confusion_metrics(&l, &l).unwrap();
        assert_eq!(c.balanced_acc, 1.0);
        let c = confusion_metrics(&l, &[false, true, false]).unwrap();
        assert_eq!((c.positive_acc, c.negative_acc, c.balanced_acc), (0.0, 0.0, 0.0));
        assert_eq!(confusion_metrics(&[true, true], &[true, false]), Err(Error::SingleClass));
        assert!(matches!(confusion_metrics(&[true], &[]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[true, false, true, false], &[0.9, 0.8, 0.3, 0.1]).unwrap(), 0.75);
        assert_eq!(auc_roc(&[true, false], &[0.9, 0.1]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[true, false, false], &[0.4; 3]).unwrap(), 0.5);
        assert_eq!(auc_roc(&[true, true], &[0.4, 0.5]), Err(Error::SingleClass));
        assert!(auc_roc(&[true, false], &[f64::NAN, 0.5]).is_err());
    }

    #[test]
    fn correlation_examples() {
        let x = [0.1, 0.4, 0.35, 0.8];
        let r = correlations(&x, &x).unwrap();
        assert!((r.pearson - 1.0).abs() < 1e-12 && r.spearman == 1.0 && r.kendall_tau == 1.0);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        let r = correlations(&x, &y).unwrap();
        assert!((r.pearson + 1.0).abs() < 1e-12 && r.spearman == -1.0 && r.kendall_tau == -1.0);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &x[..3]), Err(Error::ZeroVariance("first variable")));
        assert!(matches!(pearson(&x[..2], &x[..2]), Err(Error::Insufficient { .. })));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn mislabel_examples() {
        let r = rank_mislabel_candidates(&[1.0, 0.0], &[0.1, 0.05]).unwrap();
        assert_eq!(r.iter().map(|c| c.index).collect::<Vec<_>>(), vec![0, 1]);
        let r = rank_mislabel_candidates(&[0.5; 4], &[0.25, 0.75, 0.25, 0.75]).unwrap();
        assert_eq!(r.iter().map(|c| c.index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(rank_mislabel_candidates(&[0.5], &[]).is_err());
    }

    fn labeled(max: usize) -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
        (2..max).prop_flat_map(|n| {
            (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec((0u32..20).prop_map(|k| k as f64 / 8.0), n))
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pairs((labels, scores) in labeled(120)) {
            let has_both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
            prop_assume!(has_both);
            prop_assert_eq!(auc_roc(&labels, &scores).unwrap(), pair_auc(&labels, &scores));
        }

        #[test]
        fn auc_monotone_invariant((labels, scores) in labeled(60)) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let t: Vec<f64> = scores.iter().map(|s| m::exp(3.0 * s) - 7.0).collect();
            prop_assert_eq!(auc_roc(&labels, &scores).unwrap(), auc_roc(&labels, &t).unwrap());
        }

        #[test]
        fn balanced_identity(pairs in proptest::collection::vec(any::<(bool, bool)>(), 2..80)) {
            let (l, p): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            if let Ok(c) = confusion_metrics(&l, &p) {
                prop_assert_eq!(c.balanced_acc, (c.positive_acc + c.negative_acc) / 2.0);
                prop_assert!((0.0..=1.0).contains(&c.balanced_acc));
            }
        }

        #[test]
        fn correlations_are_bounded(pairs in proptest::collection::vec((0u8..6, -1e6f64..1e6), 3..60)) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Ok(r) = correlations(&x, &y) {
                for v in [r.pearson, r.spearman, r.kendall_tau] {
                    prop_assert!((-1.0..=1.0).contains(&v), "{:?}", r);
                }
            }
        }

        #[test]
        fn spearman_is_pearson_on_ranks(perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(), xs in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            prop_assume!(sorted.len() == 12);
            let y: Vec<f64> = perm.iter().map(|&p| p as f64 * 0.5).collect();
            let rx = average_ranks(&xs);
            let ry = average_ranks(&y);
            prop_assert!(rx.iter().all(|r| r.fract() == 0.0));
            prop_assert_eq!(spearman(&xs, &y).unwrap(), pearson(&rx, &ry).unwrap());
        }

        #[test]
        fn gap_zero_append_lands_at_tail_position(ratings in proptest::collection::vec(0.0f64..1.0, 1..30), shift in 0.0f64..1.0) {
            let scores: Vec<f64> = ratings.iter().map(|r| (r + shift) % 1.0).collect();
            let base = rank_mislabel_candidates(&ratings, &scores).unwrap();
            let mut r2 = ratings.clone();
            let mut s2 = scores.clone();
            r2.push(0.5);
            s2.push(0.5);
            let ext = rank_mislabel_candidates(&r2, &s2).unwrap();
            let without: Vec<_> = ext.iter().filter(|c| c.index != ratings.len()).copied().collect();
            prop_assert_eq!(without, base);
            prop_assert_eq!(ext.last().unwrap().index, ratings.len());
        }
    }
}
