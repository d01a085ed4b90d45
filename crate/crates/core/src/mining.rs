//! Contextuality extraction: k-nearest and k-reciprocal neighbor sets,
//! pseudo-labels, contextual pair labels, and per-view class prototypes.
//!
//! All tie-breaking is by smaller index so every structure is deterministic
//! for a given input.

use crate::error::{GcdError, Result};
use crate::numeric::{cosine_distance, pairwise_sum, Mat64};

/// Symmetric boolean pair matrix with a false diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLabels {
    n: usize,
    data: Vec<bool>,
}

impl PairLabels {
    pub fn new(n: usize) -> Self {
        PairLabels { n, data: vec![false; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn set_pair(&mut self, i: usize, j: usize, value: bool) {
        if i == j {
            return;
        }
        self.data[i * self.n + j] = value;
        self.data[j * self.n + i] = value;
    }

    pub fn count_positive_pairs(&self) -> usize {
        self.data.iter().filter(|&&b| b).count() / 2
    }
}

/// Ordered k-nearest lists from an explicit distance matrix. Ordering is by
/// (distance, index) ascending; the diagonal is excluded.
pub fn knn_from_distances(distances: &Mat64, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = distances.rows();
    if distances.cols() != n {
        return Err(GcdError::ShapeMismatch {
            expected: format!("{n}x{n} distance matrix"),
            got: format!("{}x{}", n, distances.cols()),
        });
    }
    if n < 2 || k == 0 || k > n - 1 {
        return Err(GcdError::KTooLarge { k, n, max: n.saturating_sub(1) });
    }
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            let da = distances.get(i, a);
            let db = distances.get(i, b);
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        order.truncate(k);
        lists.push(order);
    }
    Ok(lists)
}

/// Pairwise cosine distances between rows.
pub fn cosine_distance_matrix(embeddings: &Mat64) -> Result<Mat64> {
    let n = embeddings.rows();
    let mut d = Mat64::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = cosine_distance(embeddings.row(i), embeddings.row(j))?;
            d.set(i, j, dij);
            d.set(j, i, dij);
        }
    }
    Ok(d)
}

/// k-nearest neighbors in cosine distance over (nominally unit) rows.
pub fn knn(embeddings: &Mat64, k: usize) -> Result<Vec<Vec<usize>>> {
    knn_from_distances(&cosine_distance_matrix(embeddings)?, k)
}

/// Mutual-membership filter: j is kept for i iff each appears in the other's
/// k-nearest list. Output sets are sorted ascending and symmetric by
/// construction.
pub fn k_reciprocal(knn_lists: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = knn_lists.len();
    let mut member = vec![false; n * n];
    for (i, list) in knn_lists.iter().enumerate() {
        for &j in list {
            member[i * n + j] = true;
        }
    }
    let mut reciprocal = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if member[i * n + j] && member[j * n + i] {
                reciprocal[i].push(j);
            }
        }
    }
    reciprocal
}

/// Argmax of the two views' averaged probability rows; ties go to the
/// smaller class index.
pub fn pseudo_labels(p_a: &Mat64, p_b: &Mat64) -> Result<Vec<usize>> {
    if p_a.rows() != p_b.rows() || p_a.cols() != p_b.cols() {
        return Err(GcdError::ShapeMismatch {
            expected: format!("{}x{}", p_a.rows(), p_a.cols()),
            got: format!("{}x{}", p_b.rows(), p_b.cols()),
        });
    }
    let mut labels = Vec::with_capacity(p_a.rows());
    for i in 0..p_a.rows() {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (k, (&a, &b)) in p_a.row(i).iter().zip(p_b.row(i)).enumerate() {
            let avg = 0.5 * (a + b);
            if avg > best_value {
                best_value = avg;
                best = k;
            }
        }
        labels.push(best);
    }
    Ok(labels)
}

/// Contextual pair labels: s_ij = 1 iff j is a k-reciprocal neighbor of i
/// and both carry the same pseudo-label.
pub fn contextual_pairs(reciprocal: &[Vec<usize>], pseudo: &[usize]) -> Result<PairLabels> {
    let n = reciprocal.len();
    if pseudo.len() != n {
        return Err(GcdError::LengthMismatch { left: pseudo.len(), right: n });
    }
    let mut pairs = PairLabels::new(n);
    for (i, neighbors) in reciprocal.iter().enumerate() {
        for &j in neighbors {
            if i != j && pseudo[i] == pseudo[j] {
                pairs.set_pair(i, j, true);
            }
        }
    }
    Ok(pairs)
}

/// Per-class unit prototypes over pseudo-labeled members. Absent classes are
/// masked; a class whose members cancel to (near-)zero norm is masked too,
/// with a warning.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// Unit prototype per present class.
    protos: Vec<Option<Vec<f64>>>,
    /// Norm of the raw member sum, kept for backpropagation.
    sum_norms: Vec<f64>,
    /// Member row indices per class, ascending.
    members: Vec<Vec<usize>>,
    dim: usize,
}

/// Norm threshold below which a member sum counts as degenerate.
pub const DEGENERATE_SUM_EPS: f64 = 1e-12;

pub fn prototypes(z: &Mat64, pseudo: &[usize], k_total: usize) -> Result<PrototypeSet> {
    if k_total == 0 {
        return Err(GcdError::Config("k_total must be positive".into()));
    }
    if pseudo.len() != z.rows() {
        return Err(GcdError::LengthMismatch { left: pseudo.len(), right: z.rows() });
    }
    if let Some(&bad) = pseudo.iter().find(|&&c| c >= k_total) {
        return Err(GcdError::InvariantViolation(format!("pseudo-label {bad} outside [0, {k_total})")));
    }
    let mut members = vec![Vec::new(); k_total];
    for (i, &c) in pseudo.iter().enumerate() {
        members[c].push(i);
    }
    let dim = z.cols();
    let mut protos = Vec::with_capacity(k_total);
    let mut sum_norms = Vec::with_capacity(k_total);
    let mut column = Vec::new();
    for (class, rows) in members.iter().enumerate() {
        if rows.is_empty() {
            protos.push(None);
            sum_norms.push(0.0);
            continue;
        }
        // Pairwise-tree sums keep the reduction insensitive to member order.
        let mut sum = vec![0.0; dim];
        for (d, s) in sum.iter_mut().enumerate() {
            column.clear();
            column.extend(rows.iter().map(|&r| z.get(r, d)));
            *s = pairwise_sum(&column);
        }
        let n = crate::numeric::norm(&sum);
        if n <= DEGENERATE_SUM_EPS {
            log::warn!("prototype for class {class} degenerate: member sum norm {n:.3e}; class masked");
            protos.push(None);
            sum_norms.push(0.0);
            continue;
        }
        for v in &mut sum {
            *v /= n;
        }
        protos.push(Some(sum));
        sum_norms.push(n);
    }
    Ok(PrototypeSet { protos, sum_norms, members, dim })
}

impl PrototypeSet {
    pub fn k_total(&self) -> usize {
        self.protos.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn present(&self, class: usize) -> bool {
        self.protos[class].is_some()
    }

    pub fn proto(&self, class: usize) -> Option<&[f64]> {
        self.protos[class].as_deref()
    }

    pub fn sum_norm(&self, class: usize) -> f64 {
        self.sum_norms[class]
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.k_total()).filter(|&c| self.present(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn unit_rows_at_angles(angles_deg: &[f64]) -> Mat64 {
        let rows: Vec<Vec<f64>> = angles_deg
            .iter()
            .map(|a| {
                let r = a.to_radians();
                vec![r.cos(), r.sin()]
            })
            .collect();
        Mat64::from_rows(&rows).unwrap()
    }

    #[test]
    fn knn_on_circle_matches_brute_force() {
        // Points at 0, 10 and 90 degrees: nearest neighbors are 1, 0, 1.
        let z = unit_rows_at_angles(&[0.0, 10.0, 90.0]);
        let lists = knn(&z, 1).unwrap();
        assert_eq!(lists, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn knn_with_k_equal_n_minus_one_is_exhaustive() {
        let z = unit_rows_at_angles(&[0.0, 30.0, 60.0, 120.0]);
        let lists = knn(&z, 3).unwrap();
        for (i, list) in lists.iter().enumerate() {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            let expected: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(sorted, expected);
        }
    }

    #[test]
    fn duplicated_points_tie_break_by_index() {
        let z = Mat64::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let lists = knn(&z, 1).unwrap();
        // 0 and 1 coincide: each picks the other (distance 0); 2 picks the
        // smaller-index duplicate.
        assert_eq!(lists[0], vec![1]);
        assert_eq!(lists[1], vec![0]);
        assert_eq!(lists[2], vec![0]);
    }

    #[test]
    fn knn_rejects_out_of_range_k() {
        let z = unit_rows_at_angles(&[0.0, 45.0, 90.0]);
        assert!(matches!(knn(&z, 3), Err(GcdError::KTooLarge { .. })));
        assert!(matches!(knn(&z, 0), Err(GcdError::KTooLarge { .. })));
    }

    #[test]
    fn reciprocal_on_collinear_euclidean_fixture() {
        // Coordinates 0, 1, 3, 7 on a line with Euclidean distances and k=1.
        let coords = [0.0f64, 1.0, 3.0, 7.0];
        let mut d = Mat64::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                d.set(i, j, (coords[i] - coords[j]).abs());
            }
        }
        let lists = knn_from_distances(&d, 1).unwrap();
        let r = k_reciprocal(&lists);
        assert_eq!(r[0], vec![1]);
        assert_eq!(r[1], vec![0]);
        assert!(r[2].is_empty());
        assert!(r[3].is_empty());
    }

    #[test]
    fn mutual_duplicates_keep_full_neighborhoods() {
        // Two duplicated points at k=1: each is the other's neighbor.
        let z2 = Mat64::from_rows(&vec![vec![1.0, 0.0]; 2]).unwrap();
        let lists = knn(&z2, 1).unwrap();
        assert_eq!(k_reciprocal(&lists), vec![vec![1], vec![0]]);
        // Four duplicates with exhaustive k: R equals N for every point.
        // (At smaller k, index tie-breaking keeps high-index duplicates out
        // of low-index lists, so mutuality is not guaranteed.)
        let z4 = Mat64::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
        let lists = knn(&z4, 3).unwrap();
        let r = k_reciprocal(&lists);
        for (i, set) in r.iter().enumerate() {
            let mut expected = lists[i].clone();
            expected.sort_unstable();
            assert_eq!(set, &expected);
        }
    }

    #[test]
    fn reciprocal_matches_brute_force_on_random_instance() {
        let mut rng = Rng::new(99);
        let n = 200;
        let k = 7;
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let v = rng.normal_vec(6, 0.0, 1.0);
            rows.push(crate::numeric::l2_normalize(&v).unwrap());
        }
        let z = Mat64::from_rows(&rows).unwrap();
        let lists = knn(&z, k).unwrap();
        let r = k_reciprocal(&lists);
        // Brute force by predicate over all pairs.
        for i in 0..n {
            for j in 0..n {
                let expected = i != j && lists[i].contains(&j) && lists[j].contains(&i);
                assert_eq!(r[i].contains(&j), expected, "pair ({i}, {j})");
            }
        }
    }

    #[test]
    fn pseudo_labels_agreement_and_averaging() {
        let one_hot = Mat64::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(pseudo_labels(&one_hot, &one_hot).unwrap(), vec![2]);

        let p_a = Mat64::from_rows(&[vec![0.6, 0.4]]).unwrap();
        let p_b = Mat64::from_rows(&[vec![0.1, 0.9]]).unwrap();
        // Average (0.35, 0.65) -> class 1.
        assert_eq!(pseudo_labels(&p_a, &p_b).unwrap(), vec![1]);

        let tied = Mat64::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(pseudo_labels(&tied, &tied).unwrap(), vec![0]);
    }

    #[test]
    fn contextual_pairs_follow_definition() {
        let reciprocal = vec![vec![1, 2], vec![0], vec![0], vec![]];
        let pseudo = vec![5, 5, 3, 1];
        let s = contextual_pairs(&reciprocal, &pseudo).unwrap();
        assert!(s.get(0, 1) && s.get(1, 0));
        assert!(!s.get(0, 2) && !s.get(2, 0)); // reciprocal but different label
        assert!(!s.get(0, 3));
        assert!(!s.get(0, 0));
    }

    #[test]
    fn contextual_pairs_match_predicate_on_fixture() {
        let z = unit_rows_at_angles(&[0.0, 5.0, 10.0, 90.0, 95.0, 180.0]);
        let k = 2;
        let lists = knn(&z, k).unwrap();
        let reciprocal = k_reciprocal(&lists);
        let pseudo = vec![0, 0, 1, 1, 1, 0];
        let s = contextual_pairs(&reciprocal, &pseudo).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected =
                    i != j && lists[i].contains(&j) && lists[j].contains(&i) && pseudo[i] == pseudo[j];
                assert_eq!(s.get(i, j), expected, "pair ({i}, {j})");
            }
        }
    }

    #[test]
    fn prototype_of_two_basis_vectors() {
        let z = Mat64::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let set = prototypes(&z, &[0, 0], 2).unwrap();
        let p = set.proto(0).unwrap();
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p[0] - inv_sqrt2).abs() < 1e-15);
        assert!((p[1] - inv_sqrt2).abs() < 1e-15);
        assert!((p[2]).abs() < 1e-15);
        assert!(!set.present(1));
    }

    #[test]
    fn singleton_prototype_is_the_member() {
        let z = Mat64::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let set = prototypes(&z, &[0], 1).unwrap();
        let p = set.proto(0).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cancelling_members_mask_the_class() {
        let z = Mat64::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let set = prototypes(&z, &[0, 0], 1).unwrap();
        assert!(!set.present(0));
    }

    #[test]
    fn prototypes_member_order_invariance() {
        let mut rng = Rng::new(4);
        let n = 37;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| crate::numeric::l2_normalize(&rng.normal_vec(8, 0.0, 1.0)).unwrap())
            .collect();
        let z = Mat64::from_rows(&rows).unwrap();
        let pseudo: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let base = prototypes(&z, &pseudo, 3).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let permuted_pseudo: Vec<usize> = perm.iter().map(|&i| pseudo[i]).collect();
        let permuted = prototypes(&Mat64::from_rows(&permuted_rows).unwrap(), &permuted_pseudo, 3).unwrap();

        for c in 0..3 {
            let a = base.proto(c).unwrap();
            let b = permuted.proto(c).unwrap();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12, "class {c}: {x} vs {y}");
            }
        }
    }

    proptest! {
        #[test]
        fn reciprocal_sets_are_symmetric_and_monotone(seed in 0u64..500, n in 5usize..40) {
            let mut rng = Rng::new(seed);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| crate::numeric::l2_normalize(&rng.normal_vec(4, 0.0, 1.0)).unwrap())
                .collect();
            let z = Mat64::from_rows(&rows).unwrap();
            let k_small = 1 + (seed as usize % (n - 2).max(1)).min(n - 2);
            let k_large = (k_small + 2).min(n - 1);
            let r_small = k_reciprocal(&knn(&z, k_small).unwrap());
            let r_large = k_reciprocal(&knn(&z, k_large).unwrap());
            for i in 0..n {
                for &j in &r_small[i] {
                    prop_assert!(r_small[j].contains(&i), "symmetry broken at ({i}, {j})");
                    prop_assert!(r_large[i].contains(&j), "monotonicity broken at ({i}, {j})");
                }
            }
        }

        #[test]
        fn pair_labels_imply_equal_pseudo_labels(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let n = 20;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| crate::numeric::l2_normalize(&rng.normal_vec(3, 0.0, 1.0)).unwrap())
                .collect();
            let z = Mat64::from_rows(&rows).unwrap();
            let pseudo: Vec<usize> = (0..n).map(|_| rng.next_below(4)).collect();
            let s = contextual_pairs(&k_reciprocal(&knn(&z, 4).unwrap()), &pseudo).unwrap();
            for i in 0..n {
                prop_assert!(!s.get(i, i));
                for j in 0..n {
                    prop_assert_eq!(s.get(i, j), s.get(j, i));
                    if s.get(i, j) {
                        prop_assert_eq!(pseudo[i], pseudo[j]);
                    }
                }
            }
        }
    }
}
