//! Registration error, classification and agreement statistics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};
use crate::register::{PointPair, RegistrationChain};

/// Matched keypoints of one adjacent pair, both already mapped onto the
/// common canvas.
pub type WarpedPair = ([f64; 2], [f64; 2]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationError {
    /// Median match distance of every pair in µm; NaN for a pair without matches.
    pub per_image_median: Vec<f64>,
    /// Match-count weighted mean of the medians, µm.
    pub core_error: f64,
    pub match_counts: Vec<usize>,
}

impl RegistrationError {
    pub fn weights(&self) -> Vec<f64> {
        let total: usize = self.match_counts.iter().sum();
        self.match_counts.iter().map(|&n| n as f64 / total as f64).collect()
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn registration_error(pairs: &[Vec<WarpedPair>], mpp: f64) -> Result<RegistrationError> {
    if !(mpp > 0.0) {
        return Err(Error::InvalidArgument(format!("microns per pixel {mpp}")));
    }
    let mut per_image_median = Vec::with_capacity(pairs.len());
    let mut match_counts = Vec::with_capacity(pairs.len());
    let (mut num, mut den) = (0.0, 0usize);
    for pair in pairs {
        match_counts.push(pair.len());
        if pair.is_empty() {
            per_image_median.push(f64::NAN);
            continue;
        }
        let mut d: Vec<f64> = pair.iter().map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]) * mpp).collect();
        let m = median(&mut d);
        per_image_median.push(m);
        num += m * pair.len() as f64;
        den += pair.len();
    }
    if den == 0 {
        return Err(Error::NoMatches);
    }
    Ok(RegistrationError {
        per_image_median,
        core_error: num / den as f64,
        match_counts,
    })
}

/// Push the original matches of every adjacent pair through the chain.
/// `correspondences[k]` holds points of section `k + 1` (`src`) and
/// section `k` (`dst`).
pub fn warp_matches(chain: &RegistrationChain, correspondences: &[Vec<PointPair>], rigid_only: bool) -> Result<Vec<Vec<WarpedPair>>> {
    if correspondences.len() + 1 != chain.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} correspondence sets for {} sections",
            correspondences.len(),
            chain.len()
        )));
    }
    let map = |i: usize, p: [f64; 2]| if rigid_only { chain.map_point_rigid(i, p) } else { chain.map_point(i, p) };
    Ok(correspondences
        .iter()
        .enumerate()
        .map(|(k, pairs)| pairs.iter().map(|pp| (map(k + 1, pp.src), map(k, pp.dst))).collect())
        .collect())
}

/// Rows are the true class, columns the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch(format!("{} labels, {} predictions", truth.len(), predicted.len())));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!("class index out of range for {classes} classes")));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_csv(&self) -> String {
        let c = self.classes();
        let mut out = String::from("truth\\predicted");
        for j in 0..c {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// One-vs-rest; NaN when the class is absent or is the only one present.
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_auc: f64,
    pub weighted_auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    /// Why the AUC is NaN, if it is.
    pub auc_note: Option<String>,
}

/// Area under the ROC curve of `scores` for the binary labels `positive`,
/// by trapezoidal integration over every distinct threshold. Tied scores
/// of positives and negatives contribute half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::ShapeMismatch(format!("{} scores, {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let p = positive.iter().filter(|&&b| b).count() as u128;
    let n = positive.len() as u128 - p;
    if p == 0 || n == 0 {
        return Ok(f64::NAN);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Twice the area in units of one (tp, fp) cell.
    let (mut tp, mut fp, mut area2) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
    }
    Ok(area2 as f64 / (2 * p * n) as f64)
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Macro one-vs-rest AUC, support-weighted precision/recall/F1 and the
/// confusion matrix of argmax predictions. `scores` is `samples x classes`.
pub fn classification_report(scores: &Array2<f64>, labels: &[usize]) -> Result<ClassificationReport> {
    let (n, c) = scores.dim();
    if n == 0 {
        return Err(Error::EmptyInput("samples"));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} score rows, {} labels", labels.len())));
    }
    for (i, row) in scores.rows().into_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("scores of sample {i} sum to {}", row.sum())));
        }
    }
    let predicted: Vec<usize> = scores.rows().into_iter().map(argmax).collect();
    let confusion = ConfusionMatrix::new(labels, &predicted, c)?;

    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion.counts[k][k] as f64;
        let support: u64 = confusion.counts[k].iter().sum();
        let predicted_k: u64 = (0..c).map(|i| confusion.counts[i][k]).sum();
        let precision = if predicted_k > 0 { tp / predicted_k as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let col: Vec<f64> = scores.column(k).to_vec();
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: support as usize,
            auc: roc_auc(&col, &pos)?,
        });
    }

    let weighted = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / n as f64;
    let defined: Vec<&ClassMetrics> = per_class.iter().filter(|m| !m.auc.is_nan()).collect();
    let present = per_class.iter().filter(|m| m.support > 0).count();
    let (macro_auc, weighted_auc, auc_note) = if present < 2 {
        (f64::NAN, f64::NAN, Some("labels contain a single class; AUC is undefined".to_string()))
    } else {
        let support: f64 = defined.iter().map(|m| m.support as f64).sum();
        (
            defined.iter().map(|m| m.auc).sum::<f64>() / defined.len() as f64,
            defined.iter().map(|m| m.auc * m.support as f64).sum::<f64>() / support,
            None,
        )
    };
    let accuracy = (0..c).map(|k| confusion.counts[k][k]).sum::<u64>() as f64 / n as f64;
    Ok(ClassificationReport {
        precision: weighted(|m| m.precision),
        recall: weighted(|m| m.recall),
        f1: weighted(|m| m.f1),
        per_class,
        macro_auc,
        weighted_auc,
        accuracy,
        confusion,
        auc_note,
    })
}

/// Quadratic weighted Cohen's kappa between two raters over `categories`
/// ordered classes. When neither the observed nor the chance-expected
/// ratings disagree, the raters agree perfectly and kappa is 1.
pub fn quadratic_kappa(a: &[usize], b: &[usize], categories: usize) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyInput("ratings"));
    }
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} ratings", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|&r| r >= categories) {
        return Err(Error::InvalidArgument(format!("rating outside {categories} categories")));
    }
    // Integer sums: kappa = 1 - n * sum(w O) / sum(w r c) with w = (i - j)^2.
    let n = a.len() as i128;
    let mut observed = vec![vec![0i128; categories]; categories];
    let (mut ha, mut hb) = (vec![0i128; categories], vec![0i128; categories]);
    for (&x, &y) in a.iter().zip(b) {
        observed[x][y] += 1;
        ha[x] += 1;
        hb[y] += 1;
    }
    let (mut wo, mut we) = (0i128, 0i128);
    for i in 0..categories {
        for j in 0..categories {
            let w = (i as i128 - j as i128).pow(2);
            wo += w * observed[i][j];
            we += w * ha[i] * hb[j];
        }
    }
    if we == 0 {
        return Ok(if wo == 0 { 1.0 } else { f64::NAN });
    }
    Ok((we - n * wo) as f64 / we as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// First classifier right, second wrong.
    pub b: usize,
    /// First classifier wrong, second right.
    pub c: usize,
    /// Continuity-corrected chi-square statistic (0 without discordant pairs).
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Below this many discordant pairs the exact binomial test is used.
pub const MCNEMAR_EXACT_BELOW: usize = 25;

pub fn mcnemar(first_correct: &[bool], second_correct: &[bool]) -> Result<McNemar> {
    if first_correct.len() != second_correct.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} vs {} paired outcomes",
            first_correct.len(),
            second_correct.len()
        )));
    }
    let b = first_correct.iter().zip(second_correct).filter(|(x, y)| **x && !**y).count();
    let c = first_correct.iter().zip(second_correct).filter(|(x, y)| !**x && **y).count();
    Ok(mcnemar_counts(b, c))
}

pub fn mcnemar_counts(b: usize, c: usize) -> McNemar {
    let exact = b + c < MCNEMAR_EXACT_BELOW;
    let (statistic, asymptotic) = mcnemar_asymptotic(b, c);
    McNemar {
        b,
        c,
        statistic,
        p_value: if exact { mcnemar_exact_p(b, c) } else { asymptotic },
        exact,
    }
}

/// Continuity-corrected statistic and its chi-square (1 dof) p-value.
pub fn mcnemar_asymptotic(b: usize, c: usize) -> (f64, f64) {
    if b + c == 0 {
        return (0.0, 1.0);
    }
    let d = (b as f64 - c as f64).abs() - 1.0;
    let stat = d.max(0.0).powi(2) / (b + c) as f64;
    // chi-square with one degree of freedom: P(X > s) = erfc(sqrt(s / 2))
    (stat, libm::erfc((stat / 2.0).sqrt()))
}

/// Two-sided exact binomial p-value of `b` successes in `b + c` fair trials.
pub fn mcnemar_exact_p(b: usize, c: usize) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    if 2 * k == n {
        return 1.0;
    }
    if n < 127 {
        let mut coef = 1u128;
        let mut tail = 0u128;
        for i in 0..=k {
            tail += coef;
            coef = coef * (n - i) as u128 / (i + 1) as u128;
        }
        return (tail as f64 / 2f64.powi(n as i32 - 1)).min(1.0);
    }
    let ln2 = std::f64::consts::LN_2;
    let tail: f64 = (0..=k).map(|i| (ln_binomial(n as u64, i as u64) - n as f64 * ln2).exp()).sum();
    (2.0 * tail).min(1.0)
}

/// The flat metrics report written next to evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcnemar: Option<McNemar>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registration: Option<RegistrationError>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weighted_core_error() {
        let mk = |d: f64, n: usize| vec![([0.0, 0.0], [d, 0.0]); n];
        let r = registration_error(&[mk(10.0, 100), mk(30.0, 300)], 1.0).unwrap();
        assert!((r.core_error - 25.0).abs() < 1e-12);
        assert_eq!(r.weights(), vec![0.25, 0.75]);
        let r = registration_error(&[mk(4.0, 3)], 0.5).unwrap();
        assert_eq!(r.core_error, 2.0);
    }

    #[test]
    fn aligned_stack_has_zero_error() {
        let p = vec![([3.0, 4.0], [3.0, 4.0]); 5];
        assert_eq!(registration_error(&[p.clone(), p], 0.25).unwrap().core_error, 0.0);
    }

    #[test]
    fn empty_pairs_are_skipped_or_rejected() {
        let r = registration_error(&[vec![], vec![([0.0, 0.0], [0.0, 2.0])]], 1.0).unwrap();
        assert!(r.per_image_median[0].is_nan());
        assert_eq!(r.core_error, 2.0);
        assert!(matches!(registration_error(&[vec![], vec![]], 1.0), Err(Error::NoMatches)));
    }

    #[test]
    fn even_count_median_is_midpoint() {
        let pairs = vec![([0.0, 0.0], [1.0, 0.0]), ([0.0, 0.0], [3.0, 0.0]), ([0.0, 0.0], [10.0, 0.0]), ([0.0, 0.0], [2.0, 0.0])];
        assert_eq!(registration_error(&[pairs], 1.0).unwrap().per_image_median, vec![2.5]);
    }

    #[test]
    fn perfect_scores() {
        let scores = Array2::from_shape_vec((4, 2), vec![0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9]).unwrap();
        let r = classification_report(&scores, &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.macro_auc, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.confusion.total(), 4);
    }

    #[test]
    fn single_class_auc_is_flagged() {
        let scores = Array2::from_shape_vec((2, 2), vec![0.9, 0.1, 0.4, 0.6]).unwrap();
        let r = classification_report(&scores, &[0, 0]).unwrap();
        assert!(r.macro_auc.is_nan());
        assert!(r.auc_note.is_some());
    }

    #[test]
    fn unnormalised_scores_are_rejected() {
        let scores = Array2::from_shape_vec((1, 2), vec![0.9, 0.2]).unwrap();
        assert!(classification_report(&scores, &[0]).is_err());
    }

    #[test]
    fn random_scores_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..20_000).map(|_| rng.random_bool(0.5)).collect();
        assert!((roc_auc(&s, &l).unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn csv_layout() {
        let m = ConfusionMatrix::new(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(m.to_csv(), "truth\\predicted,0,1\n0,1,0\n1,1,1\n");
    }

    #[test]
    fn kappa_hand_cases() {
        assert_eq!(quadratic_kappa(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap(), 1.0);
        // O = [[1, 0], [1, 0]]: observed and expected weighted disagreement are both 1.
        assert_eq!(quadratic_kappa(&[0, 1], &[0, 0], 2).unwrap(), 0.0);
        assert_eq!(quadratic_kappa(&[2, 2, 2], &[2, 2, 2], 3).unwrap(), 1.0);
        assert!(quadratic_kappa(&[], &[], 3).is_err());
        assert!(quadratic_kappa(&[0], &[3], 3).is_err());
    }

    #[test]
    fn mcnemar_conventions() {
        let m = mcnemar(&[true, false], &[true, false]).unwrap();
        assert_eq!((m.b, m.c, m.p_value), (0, 0, 1.0));
        assert!(m.exact);
        let m = mcnemar_counts(7, 7);
        assert_eq!(m.p_value, 1.0);
        assert!(m.statistic <= 1.0 / 14.0);
        assert!(!mcnemar_counts(20, 10).exact);
    }

    #[test]
    fn exact_p_matches_binomial_tail() {
        let mut tail = 0.0;
        let mut coef = 1.0;
        for k in 0..=5 {
            tail += coef;
            coef = coef * (20 - k) as f64 / (k + 1) as f64;
        }
        let want = 2.0 * tail / 2f64.powi(20);
        assert_eq!(mcnemar_exact_p(15, 5), want);
        assert_eq!(mcnemar_counts(15, 5).p_value, want);
    }

    #[test]
    fn exact_and_asymptotic_agree_for_many_discordant_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(100..400);
            let b = rng.random_range(n / 3..=2 * n / 3);
            let exact = mcnemar_exact_p(b, n - b);
            let (_, asym) = mcnemar_asymptotic(b, n - b);
            assert!((exact - asym).abs() < 0.02, "b={b} c={} exact {exact} asym {asym}", n - b);
        }
        let p = mcnemar_exact_p(400, 250);
        assert!(p > 0.0 && p < 1e-6);
    }

    proptest! {
        #[test]
        fn kappa_symmetric_and_self_one(seed in 0u64..10_000, n in 1usize..60, c in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            prop_assert_eq!(quadratic_kappa(&a, &a, c).unwrap(), 1.0);
            let (ab, ba) = (quadratic_kappa(&a, &b, c).unwrap(), quadratic_kappa(&b, &a, c).unwrap());
            if !ab.is_nan() {
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
            }
        }

        #[test]
        fn auc_invariant_under_monotone_maps(seed in 0u64..10_000, n in 2usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            let (a, b) = (roc_auc(&s, &l).unwrap(), roc_auc(&t, &l).unwrap());
            prop_assert!(a == b || (a.is_nan() && b.is_nan()));
        }

        #[test]
        fn reversal_keeps_registration_error(seed in 0u64..10_000, pairs in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stack: Vec<Vec<WarpedPair>> = (0..pairs).map(|_| {
                (0..rng.random_range(1..20)).map(|_| ([rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)], [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0)])).collect()
            }).collect();
            let reversed: Vec<Vec<WarpedPair>> = stack.iter().rev().map(|p| p.iter().map(|&(a, b)| (b, a)).collect()).collect();
            let (x, y) = (registration_error(&stack, 0.5).unwrap(), registration_error(&reversed, 0.5).unwrap());
            prop_assert!((x.core_error - y.core_error).abs() < 1e-9);
            prop_assert!(x.core_error >= 0.0);
            prop_assert!((x.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn exact_p_in_unit_interval(b in 0usize..300, c in 0usize..300) {
            let p = mcnemar_exact_p(b, c);
            prop_assert!(p > 0.0 && p <= 1.0);
        }
    }
}
