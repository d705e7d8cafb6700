//! Hard assignments: linear assignment by the Hungarian method, an
//! exhaustive oracle, and bijection utilities.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest set size accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 8;

/// A bijection from elements to positions: element `i` goes to
/// `position_of()[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HardPermutation {
    position_of: Vec<usize>,
}

impl HardPermutation {
    pub fn identity(n: usize) -> Self {
        HardPermutation {
            position_of: (0..n).collect(),
        }
    }

    /// Validates that `position_of` is a bijection on `0..len`.
    pub fn new(position_of: Vec<usize>) -> Result<Self> {
        let n = position_of.len();
        let mut seen = vec![false; n];
        for &p in &position_of {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument(format!(
                    "{position_of:?} is not a permutation of 0..{n}"
                )));
            }
        }
        Ok(HardPermutation { position_of })
    }

    /// The permutation that places element `order[k]` at position `k`.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        Ok(HardPermutation::new(order.to_vec())?.inverse())
    }

    pub fn len(&self) -> usize {
        self.position_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position_of.is_empty()
    }

    pub fn position_of(&self) -> &[usize] {
        &self.position_of
    }

    /// `element_at()[k]` is the element placed at position `k`.
    pub fn element_at(&self) -> Vec<usize> {
        self.inverse().position_of
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &p) in self.position_of.iter().enumerate() {
            inv[p] = i;
        }
        HardPermutation { position_of: inv }
    }

    /// Applying `self` and then `next`.
    pub fn then(&self, next: &HardPermutation) -> Result<Self> {
        if self.len() != next.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot compose permutations of length {} and {}",
                self.len(),
                next.len()
            )));
        }
        Ok(HardPermutation {
            position_of: self.position_of.iter().map(|&p| next.position_of[p]).collect(),
        })
    }

    /// Moves row `i` of `x` to row `position_of[i]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} applied to {} rows",
                self.len(),
                x.rows()
            )));
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(x.rows(), cols);
        for (i, &p) in self.position_of.iter().enumerate() {
            out.data_mut()[p * cols..(p + 1) * cols].copy_from_slice(x.row(i));
        }
        Ok(out)
    }

    /// 0/1 matrix with rows = elements and columns = positions.
    pub fn to_matrix(&self) -> Tensor {
        let n = self.len();
        let mut m = Tensor::zeros(n, n);
        for (i, &p) in self.position_of.iter().enumerate() {
            m.set(i, p, 1.0);
        }
        m
    }
}

fn check_cost(cost: &Tensor) -> Result<()> {
    if !cost.is_square() {
        return Err(Error::InvalidArgument(format!(
            "assignment needs a square cost matrix, got {:?}",
            cost.shape()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::InvalidArgument("non-finite assignment cost".into()));
    }
    Ok(())
}

/// Sum of `cost[i][perm(i)]` in row order.
pub fn assignment_cost(cost: &Tensor, perm: &HardPermutation) -> f64 {
    perm.position_of
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum()
}

/// Minimum-cost assignment of rows to columns.
///
/// Shortest augmenting paths with row/column potentials, O(N³). Rows are
/// inserted in index order; among columns with equal reduced cost a free
/// column wins, then the lowest index, so an all-equal matrix yields the
/// identity.
pub fn hungarian(cost: &Tensor) -> Result<HardPermutation> {
    check_cost(cost)?;
    let n = cost.rows();
    // 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_v = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        min_v.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let row = cost.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = row[j - 1] - u[i0] - v[j];
                if reduced < min_v[j] {
                    min_v[j] = reduced;
                    way[j] = j0;
                }
                let better = min_v[j] < delta
                    || (min_v[j] == delta && row_of[j] == 0 && j1 != 0 && row_of[j1] != 0);
                if better {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
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

    let mut position_of = vec![0usize; n];
    for j in 1..=n {
        position_of[row_of[j] - 1] = j - 1;
    }
    HardPermutation::new(position_of)
}

/// Exhaustive minimum over all `N!` assignments in lexicographic order,
/// keeping the first optimum found.
pub fn brute_force_assignment(cost: &Tensor) -> Result<HardPermutation> {
    check_cost(cost)?;
    let n = cost.rows();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::InvalidArgument(format!(
            "brute force assignment limited to N <= {BRUTE_FORCE_MAX}, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        if total < best_cost {
            best_cost = total;
            best.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    HardPermutation::new(best)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Rounds a soft permutation (rows = elements, columns = positions) to the
/// hard permutation of maximal total weight.
pub fn round_soft(p: &Tensor) -> Result<HardPermutation> {
    hungarian(&p.scale(-1.0))
}
