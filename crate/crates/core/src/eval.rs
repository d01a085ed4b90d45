//! Clustering-accuracy evaluation with optimal assignment, split into
//! All/Old/New per the discovery protocol: one global cluster-to-class
//! matching over every evaluated instance, then per-split averaging.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{GcdError, Result};
use crate::model::{cosine_logits, forward_single, ModelParams};
use crate::numeric::Mat64;

/// Accuracy over all, old-class, and new-class instances under a single
/// optimal permutation of predicted cluster ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GcdMetrics {
    pub all: f64,
    pub old: f64,
    pub new: f64,
    pub n_old: usize,
    pub n_new: usize,
    /// Rows with unknown ground truth, excluded from evaluation.
    pub n_excluded: usize,
    /// Cluster id -> class id under the optimal matching.
    pub permutation: Vec<usize>,
}

impl GcdMetrics {
    pub fn to_csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.6},{},{}", self.all, self.old, self.new, self.n_old, self.n_new)
    }

    pub const CSV_HEADER: &'static str = "all,old,new,n_old,n_new";
}

/// Minimum-cost assignment on an n x n matrix via shortest augmenting paths
/// with potentials. Costs must be finite; integer-valued costs stay exact in
/// f64 arithmetic.
fn assignment_min_cost(cost: &Mat64) -> Vec<usize> {
    let n = cost.rows();
    debug_assert_eq!(n, cost.cols());
    let inf = f64::INFINITY;
    // 1-based with column 0 as the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut min_slack = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let slack = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal cluster-to-class matching maximizing total agreement counts.
/// Rectangular contingencies are zero-padded to square; the returned vector
/// maps each input row (cluster) to a column (class) in the padded square.
pub fn hungarian_match(contingency: &Mat64) -> Result<Vec<usize>> {
    let rows = contingency.rows();
    let cols = contingency.cols();
    if rows == 0 || cols == 0 {
        return Err(GcdError::EmptyInput("contingency matrix"));
    }
    let mut max_entry: f64 = 0.0;
    for &c in contingency.data() {
        if !(c >= 0.0) || !c.is_finite() {
            return Err(GcdError::InvariantViolation(format!("contingency entry {c} not a nonnegative count")));
        }
        max_entry = max_entry.max(c);
    }
    let n = rows.max(cols);
    // Maximize agreement = minimize (max_entry - count), zero-padded.
    let mut cost = Mat64::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let count = if i < rows && j < cols { contingency.get(i, j) } else { 0.0 };
            cost.set(i, j, max_entry - count);
        }
    }
    let assignment = assignment_min_cost(&cost);
    Ok(assignment[..rows].to_vec())
}

/// Clustering accuracy over unlabeled instances: one optimal permutation is
/// computed over all evaluated rows, then correctness is averaged over all
/// rows, rows of old classes, and the rest. Rows with ground truth -1 are
/// excluded (with a warning).
pub fn gcd_accuracy(pred: &[usize], truth: &[i32], old_classes: &BTreeSet<u32>) -> Result<GcdMetrics> {
    if pred.len() != truth.len() {
        return Err(GcdError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    let evaluated: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] >= 0).collect();
    let n_excluded = truth.len() - evaluated.len();
    if n_excluded > 0 {
        log::warn!("{n_excluded} rows without ground truth excluded from accuracy");
    }
    if evaluated.is_empty() {
        return Err(GcdError::EmptyInput("no rows with ground truth"));
    }
    let k = evaluated
        .iter()
        .map(|&i| pred[i] + 1)
        .chain(evaluated.iter().map(|&i| truth[i] as usize + 1))
        .max()
        .unwrap();
    let mut contingency = Mat64::zeros(k, k);
    for &i in &evaluated {
        let slot = contingency.get(pred[i], truth[i] as usize);
        contingency.set(pred[i], truth[i] as usize, slot + 1.0);
    }
    // The matching maximizes total agreement; among tied optima it prefers
    // old-class agreement. The secondary term is folded into the weights at
    // a scale the primary term strictly dominates, which keeps the reported
    // accuracies exactly invariant to any relabeling of cluster ids even
    // when the optimum is not unique.
    let scale = evaluated.len() as f64 + 1.0;
    let mut weighted = Mat64::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            let count = contingency.get(i, j);
            let bonus = if old_classes.contains(&(j as u32)) { count } else { 0.0 };
            weighted.set(i, j, count * scale + bonus);
        }
    }
    let permutation = hungarian_match(&weighted)?;

    let (mut correct_old, mut correct_new, mut n_old, mut n_new) = (0usize, 0usize, 0usize, 0usize);
    for &i in &evaluated {
        let is_old = old_classes.contains(&(truth[i] as u32));
        let hit = permutation[pred[i]] == truth[i] as usize;
        if is_old {
            n_old += 1;
            correct_old += usize::from(hit);
        } else {
            n_new += 1;
            correct_new += usize::from(hit);
        }
    }
    let ratio = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(GcdMetrics {
        all: ratio(correct_old + correct_new, n_old + n_new),
        old: ratio(correct_old, n_old),
        new: ratio(correct_new, n_new),
        n_old,
        n_new,
        n_excluded,
        permutation,
    })
}

/// Argmax cluster assignment from the prototype classifier. The softmax is
/// monotone in the cosine logits, so the temperature does not matter here.
pub fn predict(params: &ModelParams, points: &Mat64) -> Result<Vec<usize>> {
    let cache = forward_single(params, points)?;
    let (logits, _) = cosine_logits(params, &cache.h, 1.0)?;
    let mut pred = Vec::with_capacity(points.rows());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (kk, &v) in row.iter().enumerate() {
            if v > best_value {
                best_value = v;
                best = kk;
            }
        }
        pred.push(best);
    }
    Ok(pred)
}

/// Total agreement achieved by a given cluster-to-class mapping.
pub fn agreement(contingency: &Mat64, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter(|&(_, &j)| j < contingency.cols())
        .map(|(i, &j)| contingency.get(i, j))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn contingency_from(pred: &[usize], truth: &[i32]) -> Mat64 {
        let k = pred
            .iter()
            .map(|&p| p + 1)
            .chain(truth.iter().map(|&t| t as usize + 1))
            .max()
            .unwrap();
        let mut c = Mat64::zeros(k, k);
        for (&p, &t) in pred.iter().zip(truth) {
            c.set(p, t as usize, c.get(p, t as usize) + 1.0);
        }
        c
    }

    /// Factorial enumeration of all cluster-to-class injections.
    fn brute_force_best(contingency: &Mat64) -> f64 {
        let n = contingency.rows().max(contingency.cols());
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = 0.0f64;
        permute(&mut cols, 0, &mut |perm| {
            let score: f64 = (0..contingency.rows())
                .map(|i| if perm[i] < contingency.cols() { contingency.get(i, perm[i]) } else { 0.0 })
                .sum();
            if score > best {
                best = score;
            }
        });
        best
    }

    fn permute(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
        if start == items.len() {
            visit(items);
            return;
        }
        for i in start..items.len() {
            items.swap(start, i);
            permute(items, start + 1, visit);
            items.swap(start, i);
        }
    }

    #[test]
    fn identity_contingency_gives_identity_permutation() {
        let mut c = Mat64::zeros(4, 4);
        for i in 0..4 {
            c.set(i, i, 5.0);
        }
        assert_eq!(hungarian_match(&c).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn swapped_clusters_recover_full_accuracy() {
        let pred = [0usize, 0, 1, 1, 2];
        let truth = [1i32, 1, 0, 0, 2];
        let c = contingency_from(&pred, &truth);
        let assignment = hungarian_match(&c).unwrap();
        assert_eq!(assignment, vec![1, 0, 2]);
        assert_eq!(agreement(&c, &assignment), 5.0);
        assert_eq!(brute_force_best(&c), 5.0);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = Rng::new(71);
        for trial in 0..200 {
            let k = 2 + rng.next_below(6); // up to 7
            let n = 5 + rng.next_below(46); // up to 50
            let pred: Vec<usize> = (0..n).map(|_| rng.next_below(k)).collect();
            let truth: Vec<i32> = (0..n).map(|_| rng.next_below(k) as i32).collect();
            let c = contingency_from(&pred, &truth);
            let assignment = hungarian_match(&c).unwrap();
            let got = agreement(&c, &assignment);
            let best = brute_force_best(&c);
            assert_eq!(got, best, "trial {trial}: hungarian {got} vs brute force {best}");
        }
    }

    #[test]
    fn rectangular_contingency_is_padded() {
        // 2 clusters, 3 classes.
        let c = Mat64::from_rows(&[vec![3.0, 0.0, 1.0], vec![0.0, 2.0, 4.0]]).unwrap();
        let assignment = hungarian_match(&c).unwrap();
        assert_eq!(assignment.len(), 2);
        assert_eq!(agreement(&c, &assignment), 7.0);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0usize, 0, 1, 1, 2, 2];
        let old: BTreeSet<u32> = [0, 1].into_iter().collect();
        let m = gcd_accuracy(&pred, &truth, &old).unwrap();
        assert_eq!((m.all, m.old, m.new), (1.0, 1.0, 1.0));
        assert_eq!((m.n_old, m.n_new), (4, 2));
    }

    #[test]
    fn spec_split_fixture() {
        // truth (0, 0, 1), pred (0, 1, 1), old {0}: identity matching is
        // optimal -> all 2/3, old 1/2, new 1.
        let truth = [0, 0, 1];
        let pred = [0usize, 1, 1];
        let old: BTreeSet<u32> = [0].into_iter().collect();
        let m = gcd_accuracy(&pred, &truth, &old).unwrap();
        assert!((m.all - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.old - 0.5).abs() < 1e-15);
        assert!((m.new - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relabeling_predictions_leaves_metrics_unchanged() {
        let mut rng = Rng::new(73);
        let k = 5;
        let n = 60;
        let truth: Vec<i32> = (0..n).map(|_| rng.next_below(k) as i32).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.next_below(k)).collect();
        let old: BTreeSet<u32> = [0, 2].into_iter().collect();
        let base = gcd_accuracy(&pred, &truth, &old).unwrap();
        // Apply a fixed relabeling of cluster ids.
        let relabel = [3usize, 0, 4, 1, 2];
        let renamed: Vec<usize> = pred.iter().map(|&p| relabel[p]).collect();
        let m = gcd_accuracy(&renamed, &truth, &old).unwrap();
        assert_eq!(base.all, m.all);
        assert_eq!(base.old, m.old);
        assert_eq!(base.new, m.new);
    }

    #[test]
    fn all_accuracy_is_weighted_mean_of_splits() {
        let mut rng = Rng::new(79);
        for _ in 0..20 {
            let k = 2 + rng.next_below(5);
            let n = 10 + rng.next_below(40);
            let truth: Vec<i32> = (0..n).map(|_| rng.next_below(k) as i32).collect();
            let pred: Vec<usize> = (0..n).map(|_| rng.next_below(k)).collect();
            let old: BTreeSet<u32> = [0].into_iter().collect();
            let m = gcd_accuracy(&pred, &truth, &old).unwrap();
            let weighted = (m.n_old as f64 * m.old + m.n_new as f64 * m.new) / (m.n_old + m.n_new) as f64;
            assert!((m.all - weighted).abs() <= 1e-12);
        }
    }

    #[test]
    fn unknown_truth_rows_are_excluded() {
        let truth = [0, -1, 1, -1];
        let pred = [0usize, 3, 1, 2];
        let old: BTreeSet<u32> = [0].into_iter().collect();
        let m = gcd_accuracy(&pred, &truth, &old).unwrap();
        assert_eq!(m.n_excluded, 2);
        assert_eq!(m.n_old + m.n_new, 2);
        assert_eq!(m.all, 1.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let old: BTreeSet<u32> = [0].into_iter().collect();
        assert!(matches!(
            gcd_accuracy(&[0, 1], &[0], &old),
            Err(GcdError::LengthMismatch { .. })
        ));
    }
}
