//! Source/target pairings: uniform random and exact minibatch OT.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::PointSet;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    Ot,
    Independent,
}

/// A bijection between the rows of two equal-size batches.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Sum of squared Euclidean distances of the matched pairs.
    pub cost: f64,
}

impl CouplingPlan {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_batches(a: &PointSet, b: &PointSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("coupling needs equal batch sizes, got {} and {}", a.len(), b.len())));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("batch dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    Ok(())
}

fn plan_from(a: &PointSet, b: &PointSet, target: Vec<usize>) -> CouplingPlan {
    let cost = target.iter().enumerate().map(|(i, &j)| sq_dist(a.point(i), b.point(j))).sum();
    CouplingPlan { source: (0..a.len()).collect(), target, cost }
}

pub fn independent_pairs(a: &PointSet, b: &PointSet, rng: &mut Rng) -> Result<CouplingPlan> {
    check_batches(a, b)?;
    let mut perm: Vec<usize> = (0..b.len()).collect();
    perm.shuffle(rng);
    Ok(plan_from(a, b, perm))
}

/// Minimum total squared-distance perfect matching.
pub fn ot_pairs(a: &PointSet, b: &PointSet) -> Result<CouplingPlan> {
    check_batches(a, b)?;
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = sq_dist(a.point(i), b.point(j));
        }
    }
    let target = solve_assignment(&cost, n)?;
    Ok(plan_from(a, b, target))
}

/// Square linear assignment by shortest augmenting paths with potentials, O(n³).
///
/// `cost` is row-major n×n. Returns `assignment[row] = column`. Among equal
/// reduced costs the lowest column index wins.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::Shape(format!("cost has {} entries, expected {}", cost.len(), n * n)));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry {i} = {}", cost[i])));
    }
    // 1-based arrays, index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn line(xs: &[f64]) -> PointSet {
        PointSet::from_rows(&xs.iter().map(|&x| [x]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_batches_match_identity() {
        let a = PointSet::from_rows(&[[0.0, 1.0], [3.0, 2.0], [-1.0, 5.0]]).unwrap();
        let plan = ot_pairs(&a, &a).unwrap();
        assert_eq!(plan.target, vec![0, 1, 2]);
        assert_eq!(plan.cost, 0.0);
    }

    #[test]
    fn two_point_line_example() {
        let plan = ot_pairs(&line(&[0.0, 10.0]), &line(&[11.0, 1.0])).unwrap();
        assert_eq!(plan.target, vec![1, 0]);
        assert_eq!(plan.cost, 2.0);
    }

    #[test]
    fn independent_is_a_seeded_permutation() {
        let a = line(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let p1 = independent_pairs(&a, &a, &mut stream(4, "c")).unwrap();
        let p2 = independent_pairs(&a, &a, &mut stream(4, "c")).unwrap();
        assert_eq!(p1, p2);
        let mut seen = p1.target.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        let single = independent_pairs(&line(&[1.0]), &line(&[2.0]), &mut stream(0, "c")).unwrap();
        assert_eq!((single.target, single.cost), (vec![0], 1.0));
    }

    #[test]
    fn errors() {
        assert!(ot_pairs(&line(&[0.0]), &line(&[0.0, 1.0])).is_err());
        assert!(matches!(solve_assignment(&[f64::NAN], 1), Err(Error::NonFinite(_))));
        assert_eq!(solve_assignment(&[], 0).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn ties_prefer_lowest_index() {
        assert_eq!(solve_assignment(&[1.0; 9], 3).unwrap(), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn ot_never_costs_more_than_independent(xs in proptest::collection::vec(-5.0f64..5.0, 16), seed in any::<u64>()) {
            let a = PointSet::from_rows(&xs[..8].chunks(2).collect::<Vec<_>>()).unwrap();
            let b = PointSet::from_rows(&xs[8..].chunks(2).collect::<Vec<_>>()).unwrap();
            let ot = ot_pairs(&a, &b).unwrap();
            let ind = independent_pairs(&a, &b, &mut stream(seed, "p")).unwrap();
            prop_assert!(ot.cost <= ind.cost + 1e-12);
        }

        #[test]
        fn ot_cost_is_invariant_to_target_order(xs in proptest::collection::vec(-5.0f64..5.0, 12), seed in any::<u64>()) {
            let a = PointSet::from_rows(&xs[..6].chunks(1).collect::<Vec<_>>()).unwrap();
            let b = PointSet::from_rows(&xs[6..].chunks(1).collect::<Vec<_>>()).unwrap();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut stream(seed, "perm"));
            let c1 = ot_pairs(&a, &b).unwrap().cost;
            let c2 = ot_pairs(&a, &b.subset(&perm)).unwrap().cost;
            prop_assert!((c1 - c2).abs() <= 1e-12 * c1.max(1.0));
        }
    }
}
