//! Minimum-cost perfect matching on square cost matrices.
//!
//! `costs[i][j]` is the cost of matching label `i` to prediction slot `j`.

use crate::error::{Error, Result};

/// Largest size [`brute_force_assignment`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != n * n {
            return Err(Error::shape("cost matrix", &[n, n], &[costs.len()]));
        }
        if let Some(pos) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::Numeric(format!(
                "cost matrix entry ({}, {})",
                pos / n.max(1),
                pos % n.max(1)
            )));
        }
        Ok(Self { n, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::shape("cost matrix", &[n, n], &[n, bad.len()]));
        }
        Self::new(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.n + j]
    }

    pub fn cost_of(&self, sigma: &[usize]) -> f64 {
        sigma.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `sigma[i]` is the prediction slot matched to label `i`.
    pub sigma: Vec<usize>,
    pub total_cost: f64,
}

/// Hungarian algorithm with row/column potentials (shortest augmenting
/// paths), O(n³).
pub fn solve_assignment(c: &CostMatrix) -> Assignment {
    let n = c.n;
    if n == 0 {
        return Assignment {
            sigma: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based internal indexing; column 0 is the virtual start column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        sigma[row_of[j] - 1] = j - 1;
    }
    let total_cost = c.cost_of(&sigma);
    Assignment { sigma, total_cost }
}

/// Exhaustive minimum over all permutations in lexicographic order; the
/// first (lexicographically smallest) optimum wins ties.
pub fn brute_force_assignment(c: &CostMatrix) -> Result<Assignment> {
    let n = c.n;
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::Refused {
            n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment {
        total_cost: c.cost_of(&perm),
        sigma: perm.clone(),
    };
    while next_permutation(&mut perm) {
        let cost = c.cost_of(&perm);
        if cost < best.total_cost {
            best.total_cost = cost;
            best.sigma.copy_from_slice(&perm);
        }
    }
    Ok(best)
}

/// Advance to the next lexicographic permutation; false once wrapped.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_element() {
        let c = CostMatrix::from_rows(&[vec![7.0]]).unwrap();
        let a = solve_assignment(&c);
        assert_eq!(a.sigma, vec![0]);
        assert_eq!(a.total_cost, 7.0);
    }

    #[test]
    fn two_by_two_prefers_anti_diagonal() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        // brute force: identity costs 1+4=5, swap costs 2+2=4
        assert_eq!(c.cost_of(&[0, 1]), 5.0);
        assert_eq!(c.cost_of(&[1, 0]), 4.0);
        let a = solve_assignment(&c);
        assert_eq!(a.sigma, vec![1, 0]);
        assert_eq!(a.total_cost, 4.0);
    }

    #[test]
    fn brute_force_examples() {
        let mut rows = vec![vec![1.0; 4]; 4];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 0.0;
        }
        let a = brute_force_assignment(&CostMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(a.sigma, vec![0, 1, 2, 3]);
        assert_eq!(a.total_cost, 0.0);

        let flat = CostMatrix::new(5, vec![3.0; 25]).unwrap();
        assert_eq!(brute_force_assignment(&flat).unwrap().sigma, vec![0, 1, 2, 3, 4]);

        let big = CostMatrix::new(9, vec![0.0; 81]).unwrap();
        assert!(matches!(
            brute_force_assignment(&big),
            Err(Error::Refused { n: 9, limit: 8 })
        ));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            CostMatrix::new(2, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(CostMatrix::new(2, vec![0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn permutation_enumeration_counts() {
        let mut p: Vec<usize> = (0..5).collect();
        let mut count = 1;
        while next_permutation(&mut p) {
            count += 1;
        }
        assert_eq!(count, 120);
    }
}
