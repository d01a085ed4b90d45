//! Query-anchored mini-batch construction: q random queries, each packed
//! with its nearest neighbors from the per-epoch index, plus M random
//! fillers, all unique within the batch.

use crate::error::{GcdError, Result};
use crate::rng::Rng;

/// One planned mini-batch. `flattened` lists queries first, then the
/// neighbor groups in query order, then the fillers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub queries: Vec<usize>,
    pub neighbor_groups: Vec<Vec<usize>>,
    pub fillers: Vec<usize>,
    pub flattened: Vec<usize>,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.flattened.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flattened.is_empty()
    }
}

/// Builds a plan of exactly `q * k_batch + fillers` unique dataset indices.
///
/// Queries are drawn uniformly without replacement. Each query group walks
/// the query's neighbor list in order, skipping indices already in the batch
/// (a shared neighbor is replaced by the next-nearest unused one). Fillers
/// are drawn uniformly from the remaining indices.
pub fn build_batch(
    neighbor_index: &[Vec<usize>],
    q: usize,
    k_batch: usize,
    fillers: usize,
    rng: &mut Rng,
) -> Result<BatchPlan> {
    let n = neighbor_index.len();
    if q == 0 || k_batch == 0 {
        return Err(GcdError::Config("q and k_batch must be positive".into()));
    }
    let total = q * k_batch + fillers;
    if total > n {
        return Err(GcdError::DatasetTooSmall { needed: total, have: n });
    }
    let mut in_batch = vec![false; n];
    let queries = rng.sample_without_replacement(n, q);
    for &i in &queries {
        in_batch[i] = true;
    }

    let per_group = k_batch - 1;
    let mut neighbor_groups = Vec::with_capacity(q);
    for &query in &queries {
        let mut group = Vec::with_capacity(per_group);
        for &candidate in &neighbor_index[query] {
            if group.len() == per_group {
                break;
            }
            if !in_batch[candidate] {
                in_batch[candidate] = true;
                group.push(candidate);
            }
        }
        if group.len() < per_group {
            return Err(GcdError::DatasetTooSmall {
                needed: neighbor_index[query].len() + (per_group - group.len()),
                have: neighbor_index[query].len(),
            });
        }
        neighbor_groups.push(group);
    }

    let remaining: Vec<usize> = (0..n).filter(|&i| !in_batch[i]).collect();
    let picks = rng.sample_without_replacement(remaining.len(), fillers);
    let filler_indices: Vec<usize> = picks.into_iter().map(|slot| remaining[slot]).collect();

    let mut flattened = Vec::with_capacity(total);
    flattened.extend_from_slice(&queries);
    for group in &neighbor_groups {
        flattened.extend_from_slice(group);
    }
    flattened.extend_from_slice(&filler_indices);
    Ok(BatchPlan { queries, neighbor_groups, fillers: filler_indices, flattened })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::knn_from_distances;
    use crate::numeric::Mat64;

    /// Full-depth neighbor lists over points on a line, where proximity is
    /// known by construction.
    fn line_index(n: usize) -> Vec<Vec<usize>> {
        let mut d = Mat64::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                d.set(i, j, (i as f64 - j as f64).abs());
            }
        }
        knn_from_distances(&d, n - 1).unwrap()
    }

    #[test]
    fn batch_size_is_q_k_plus_m() {
        let index = line_index(20);
        let plan = build_batch(&index, 2, 3, 4, &mut Rng::new(1)).unwrap();
        assert_eq!(plan.len(), 10);
        assert_eq!(plan.queries.len(), 2);
        assert_eq!(plan.neighbor_groups.iter().map(Vec::len).sum::<usize>(), 4);
        assert_eq!(plan.fillers.len(), 4);
    }

    #[test]
    fn singleton_batch_contains_only_the_query() {
        let index = line_index(5);
        let plan = build_batch(&index, 1, 1, 0, &mut Rng::new(2)).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.flattened, plan.queries);
        assert!(plan.neighbor_groups[0].is_empty());
    }

    #[test]
    fn all_indices_are_unique() {
        let index = line_index(64);
        for seed in 0..50 {
            let plan = build_batch(&index, 4, 5, 10, &mut Rng::new(seed)).unwrap();
            let mut seen = plan.flattened.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), plan.len(), "seed {seed}");
        }
    }

    #[test]
    fn groups_follow_the_epoch_index_order() {
        let index = line_index(40);
        for seed in 0..20 {
            let plan = build_batch(&index, 3, 4, 5, &mut Rng::new(seed)).unwrap();
            for (gi, (&query, group)) in plan.queries.iter().zip(&plan.neighbor_groups).enumerate() {
                // Group members appear in the same order as in the index
                // list (next-nearest substitution preserves order).
                let list = &index[query];
                let mut cursor = 0;
                for &member in group {
                    let pos = list[cursor..].iter().position(|&x| x == member);
                    assert!(pos.is_some(), "seed {seed} group {gi}: {member} out of order");
                    cursor += pos.unwrap() + 1;
                }
            }
        }
    }

    #[test]
    fn neighbor_groups_match_brute_force_when_disjoint() {
        // Two far-apart queries on the line: groups are exactly the nearest
        // k-1 indices.
        let index = line_index(100);
        for seed in 0..20 {
            let plan = build_batch(&index, 2, 4, 0, &mut Rng::new(seed)).unwrap();
            let q0 = plan.queries[0];
            let q1 = plan.queries[1];
            if (q0 as i64 - q1 as i64).abs() > 10 {
                for (qi, group) in [(q0, &plan.neighbor_groups[0]), (q1, &plan.neighbor_groups[1])] {
                    let expected: Vec<usize> = index[qi]
                        .iter()
                        .copied()
                        .filter(|&j| j != q0 && j != q1)
                        .take(3)
                        .collect();
                    assert_eq!(group, &expected, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn plans_are_deterministic_per_seed() {
        let index = line_index(30);
        let a = build_batch(&index, 3, 3, 6, &mut Rng::new(7)).unwrap();
        let b = build_batch(&index, 3, 3, 6, &mut Rng::new(7)).unwrap();
        assert_eq!(a, b);
        let c = build_batch(&index, 3, 3, 6, &mut Rng::new(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_plans_are_rejected() {
        let index = line_index(10);
        assert!(matches!(
            build_batch(&index, 3, 3, 2, &mut Rng::new(1)),
            Err(GcdError::DatasetTooSmall { needed: 11, have: 10 })
        ));
    }
}
