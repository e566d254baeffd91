//! Threshold metrics for spoof/real scoring: FAR, FRR, HTER, EER, ROC, AUC.
//!
//! Conventions used everywhere: higher score means more real, a sample is
//! accepted as real when `score >= threshold`, FAR is the fraction of attacks
//! accepted, FRR the fraction of reals rejected.

use ndarray::Array1;

use crate::{Error, Result};

/// Scores paired with ground-truth labels (`true` = real face).
#[derive(Debug, Clone)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyInput("scored set has no samples".into()));
        }
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = scores
            .iter()
            .find(|&&s| !s.is_finite() || s <= 0.0 || s >= 1.0)
        {
            return Err(Error::InvalidScore(bad));
        }
        Ok(Self { scores, labels })
    }

    /// Pairs sigmoid outputs with 0/1 labels.
    pub fn from_probs(probs: &Array1<f64>, labels: &Array1<f64>) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores vs {} labels",
                probs.len(),
                labels.len()
            )));
        }
        let mut flags = Vec::with_capacity(labels.len());
        for &y in labels {
            if y == 1.0 {
                flags.push(true);
            } else if y == 0.0 {
                flags.push(false);
            } else {
                return Err(Error::InvalidLabel(y));
            }
        }
        Self::new(probs.to_vec(), flags)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn attack_count(&self) -> usize {
        self.len() - self.real_count()
    }

    /// Concatenates several sets, e.g. dev scores pooled across data centers.
    pub fn pooled(sets: &[ScoredSet]) -> Result<Self> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for s in sets {
            scores.extend_from_slice(&s.scores);
            labels.extend_from_slice(&s.labels);
        }
        Self::new(scores, labels)
    }

    fn require_both_classes(&self, what: &str) -> Result<()> {
        if self.real_count() == 0 || self.attack_count() == 0 {
            return Err(Error::SingleClass {
                context: what.into(),
            });
        }
        Ok(())
    }

    /// Distinct score values, ascending.
    fn distinct_scores(&self) -> Vec<f64> {
        let mut sorted = self.scores.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        sorted
    }
}

/// Error rates of one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub hter: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR, FRR, and their mean at a fixed threshold.
pub fn hter(set: &ScoredSet, threshold: f64) -> Result<OperatingPoint> {
    set.require_both_classes("hter")?;
    let mut accepted_attacks = 0usize;
    let mut rejected_reals = 0usize;
    for (&s, &real) in set.scores().iter().zip(set.labels()) {
        if real {
            if s < threshold {
                rejected_reals += 1;
            }
        } else if s >= threshold {
            accepted_attacks += 1;
        }
    }
    let far = accepted_attacks as f64 / set.attack_count() as f64;
    let frr = rejected_reals as f64 / set.real_count() as f64;
    Ok(OperatingPoint {
        hter: (far + frr) / 2.0,
        far,
        frr,
    })
}

/// ROC points `(FAR, TPR)` swept from the strictest threshold to the most
/// permissive: starts at (0, 0), ends at (1, 1), nondecreasing in both
/// coordinates.
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    set.require_both_classes("roc_curve")?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let attacks = set.attack_count() as f64;
    let reals = set.real_count() as f64;
    let mut points = vec![(0.0, 0.0)];
    let mut acc_attacks = 0usize;
    let mut acc_reals = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == s {
            if set.labels[order[j]] {
                acc_reals += 1;
            } else {
                acc_attacks += 1;
            }
            j += 1;
        }
        points.push((acc_attacks as f64 / attacks, acc_reals as f64 / reals));
        i = j;
    }
    if *points.last().expect("nonempty") != (1.0, 1.0) {
        points.push((1.0, 1.0));
    }
    Ok(points)
}

/// Area under `(FAR, TPR)` points by the trapezoid rule.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Mann-Whitney AUC: the fraction of (real, attack) pairs where the real
/// sample scores higher, ties counted one half. Identical to the trapezoidal
/// area under [`roc_curve`].
pub fn auc(set: &ScoredSet) -> Result<f64> {
    set.require_both_classes("auc")?;
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Rank sum of the real class, ties sharing their average rank.
    let mut real_rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let s = set.scores[order[i]];
        let mut j = i;
        while j < n && set.scores[order[j]] == s {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if set.labels[k] {
                real_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let r = set.real_count() as f64;
    let a = set.attack_count() as f64;
    Ok((real_rank_sum - r * (r + 1.0) / 2.0) / (r * a))
}

/// Equal error rate: the mean of FAR and FRR at the swept threshold where
/// they are closest. Returns `(eer, threshold)`; ties break toward the lower
/// threshold.
pub fn eer(set: &ScoredSet) -> Result<(f64, f64)> {
    set.require_both_classes("eer")?;
    let mut best: Option<(f64, f64, f64)> = None;
    for tau in set.distinct_scores() {
        let op = hter(set, tau)?;
        let gap = (op.far - op.frr).abs();
        let better = match best {
            None => true,
            Some((best_gap, _, _)) => gap < best_gap,
        };
        if better {
            best = Some((gap, op.hter, tau));
        }
    }
    let (_, value, tau) = best.expect("nonempty set");
    Ok((value, tau))
}

/// Decision threshold from a development set: the EER threshold, moved to the
/// midpoint between it and the next lower distinct score when one exists.
/// For a perfectly separated set this lands in the middle of the gap between
/// the classes.
pub fn select_threshold(dev: &ScoredSet) -> Result<f64> {
    let (_, tau) = eer(dev)?;
    let distinct = dev.distinct_scores();
    let below = distinct.iter().rev().find(|&&s| s < tau);
    Ok(match below {
        Some(&prev) => (prev + tau) / 2.0,
        None => tau,
    })
}

/// Full evaluation of a scored test set at a fixed threshold.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
    pub eer: f64,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
}

pub fn evaluate(test: &ScoredSet, threshold: f64) -> Result<MetricsReport> {
    let op = hter(test, threshold)?;
    let (eer_value, _) = eer(test)?;
    Ok(MetricsReport {
        threshold,
        far: op.far,
        frr: op.frr,
        hter: op.hter,
        eer: eer_value,
        auc: auc(test)?,
        roc: roc_curve(test)?,
    })
}

impl MetricsReport {
    /// `key=value` lines in a fixed order.
    pub fn key_value_lines(&self) -> Vec<String> {
        vec![
            format!("threshold={:.6}", self.threshold),
            format!("far={:.6}", self.far),
            format!("frr={:.6}", self.frr),
            format!("hter={:.6}", self.hter),
            format!("eer={:.6}", self.eer),
            format!("auc={:.6}", self.auc),
        ]
    }

    /// One `FAR,TPR` row per ROC point.
    pub fn roc_csv(&self) -> String {
        let mut out = String::new();
        for (far, tpr) in &self.roc {
            out.push_str(&format!("{far},{tpr}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_set() -> ScoredSet {
        ScoredSet::new(
            vec![0.1, 0.4, 0.35, 0.8],
            vec![false, false, true, true],
        )
        .unwrap()
    }

    #[test]
    fn auc_hand_case() {
        assert!((auc(&hand_set()).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn hter_hand_counts() {
        // At 0.2 only the 0.4 attack is accepted and no real is rejected.
        let op = hter(&hand_set(), 0.2).unwrap();
        assert_eq!(op.far, 0.5);
        assert_eq!(op.frr, 0.0);
        assert_eq!(op.hter, 0.25);

        // At 0.375 the 0.35 real is rejected as well.
        let op = hter(&hand_set(), 0.375).unwrap();
        assert_eq!(op.far, 0.5);
        assert_eq!(op.frr, 0.5);
        assert_eq!(op.hter, 0.5);
    }

    #[test]
    fn threshold_below_every_score_accepts_everything() {
        let op = hter(&hand_set(), 0.05).unwrap();
        assert_eq!(op.far, 1.0);
        assert_eq!(op.frr, 0.0);
    }

    #[test]
    fn eer_by_exhaustive_enumeration() {
        // Candidates 0.1/0.35/0.4/0.8 give |FAR-FRR| of 1, 0.5, 0, 0.5, so
        // the winner is 0.4 where FAR = FRR = 0.5.
        let (value, tau) = eer(&hand_set()).unwrap();
        assert_eq!(tau, 0.4);
        assert_eq!(value, 0.5);
    }

    #[test]
    fn roc_matches_hand_sweep() {
        let roc = roc_curve(&hand_set()).unwrap();
        assert_eq!(
            roc,
            vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
        );
        assert!((trapezoid_area(&roc) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identical_scores_collapse_the_curve() {
        let set = ScoredSet::new(vec![0.5; 6], vec![true, false, true, false, true, false])
            .unwrap();
        assert_eq!(roc_curve(&set).unwrap(), vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!((auc(&set).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn separated_dev_threshold_is_the_gap_midpoint() {
        let dev = ScoredSet::new(
            vec![0.1, 0.2, 0.6, 0.9],
            vec![false, false, true, true],
        )
        .unwrap();
        let tau = select_threshold(&dev).unwrap();
        assert!((tau - 0.4).abs() < 1e-15);
        let op = hter(&dev, tau).unwrap();
        assert_eq!(op.hter, 0.0);
    }

    #[test]
    fn single_class_sets_are_rejected() {
        let set = ScoredSet::new(vec![0.2, 0.4], vec![true, true]).unwrap();
        assert!(matches!(
            auc(&set).unwrap_err(),
            Error::SingleClass { .. }
        ));
        assert!(eer(&set).is_err());
        assert!(hter(&set, 0.5).is_err());
        assert!(roc_curve(&set).is_err());
    }

    #[test]
    fn scores_outside_the_open_interval_are_rejected() {
        assert!(ScoredSet::new(vec![0.0], vec![true]).is_err());
        assert!(ScoredSet::new(vec![1.0], vec![false]).is_err());
        assert!(ScoredSet::new(vec![f64::NAN], vec![true]).is_err());
    }

    #[test]
    fn report_is_internally_consistent() {
        let report = evaluate(&hand_set(), 0.2).unwrap();
        assert_eq!(report.hter, (report.far + report.frr) / 2.0);
        assert_eq!(report.roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(report.roc.last(), Some(&(1.0, 1.0)));
        let lines = report.key_value_lines();
        assert!(lines[0].starts_with("threshold="));
        assert!(lines.iter().any(|l| l == "auc=0.750000"));
    }

    #[test]
    fn random_labels_give_chance_level_eer() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.05..0.95)).collect();
        let labels: Vec<bool> = (0..1000).map(|_| rng.gen::<bool>()).collect();
        let set = ScoredSet::new(scores, labels).unwrap();
        let (value, _) = eer(&set).unwrap();
        assert!((value - 0.5).abs() < 0.05, "eer {value}");
        assert!((auc(&set).unwrap() - 0.5).abs() < 0.05);
    }
}
