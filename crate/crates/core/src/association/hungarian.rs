//! Minimum-cost assignment with potentials (O(n²m)), plus the gated variant
//! used by the tracker.

use nalgebra::DMatrix;

use crate::error::{Result, TrackError};

/// Rows ≤ cols. Returns `assignment[row] = col`.
fn solve_wide(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; way[j]: previous column on
    // the augmenting path.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

fn check_finite(costs: &DMatrix<f64>) -> Result<()> {
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(TrackError::NonFinite("cost matrix entry".into()));
    }
    Ok(())
}

/// Minimum-total-cost matching of size `min(rows, cols)`, sorted by row.
pub fn solve_assignment(costs: &DMatrix<f64>) -> Result<Vec<(usize, usize)>> {
    check_finite(costs)?;
    let (r, c) = costs.shape();
    if r == 0 || c == 0 {
        return Ok(Vec::new());
    }
    let mut pairs: Vec<(usize, usize)> = if r <= c {
        solve_wide(costs).into_iter().enumerate().collect()
    } else {
        solve_wide(&costs.transpose())
            .into_iter()
            .enumerate()
            .map(|(col, row)| (row, col))
            .collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Pads to square with dummy entries of cost `gate`, solves, then keeps the
/// real pairs whose cost is strictly below `gate`.
pub fn hungarian(costs: &DMatrix<f64>, gate: f64) -> Result<Vec<(usize, usize)>> {
    check_finite(costs)?;
    if !gate.is_finite() {
        return Err(TrackError::NonFinite("gate".into()));
    }
    let (r, c) = costs.shape();
    let n = r.max(c);
    let padded = DMatrix::from_fn(n, n, |i, j| if i < r && j < c { costs[(i, j)] } else { gate });
    Ok(solve_assignment(&padded)?
        .into_iter()
        .filter(|&(i, j)| i < r && j < c && costs[(i, j)] < gate)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_entry_gating() {
        let below = DMatrix::from_element(1, 1, -0.5);
        assert_eq!(hungarian(&below, 0.1).unwrap(), vec![(0, 0)]);
        let above = DMatrix::from_element(1, 1, 0.5);
        assert!(hungarian(&above, 0.1).unwrap().is_empty());
        let equal = DMatrix::from_element(1, 1, 0.1);
        assert!(hungarian(&equal, 0.1).unwrap().is_empty());
    }

    #[test]
    fn rectangular_both_orientations() {
        let wide = DMatrix::from_row_slice(2, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0]);
        assert_eq!(solve_assignment(&wide).unwrap(), vec![(0, 1), (1, 0)]);
        let tall = wide.transpose();
        assert_eq!(solve_assignment(&tall).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn empty_and_non_finite() {
        assert!(hungarian(&DMatrix::zeros(0, 3), 0.1).unwrap().is_empty());
        let bad = DMatrix::from_element(1, 1, f64::NAN);
        assert!(matches!(hungarian(&bad, 0.1), Err(TrackError::NonFinite(_))));
    }

    #[test]
    fn dummy_beats_expensive_real_pair() {
        // Row 1 would rather stay unmatched than take column 0 at cost 3.
        let m = DMatrix::from_row_slice(2, 1, &[-1.0, 3.0]);
        assert_eq!(hungarian(&m, 0.1).unwrap(), vec![(0, 0)]);
    }
}
