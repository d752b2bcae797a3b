use crate::error::{Error, Result};

/// Minimum-cost one-to-one assignment for a row-major `rows × cols` cost
/// matrix. Returns `min(rows, cols)` pairs `(i, j)` sorted by `i`.
///
/// Rectangular inputs are padded to square with a cost above every real
/// entry, and padded pairs are dropped. Among equal-cost alternatives the
/// solver prefers lower column indices, so results are deterministic.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != rows * cols {
        return Err(Error::shape("hungarian", &[rows, cols], &[cost.len()]));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite assignment cost".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    let n = rows.max(cols);
    let pad = cost.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)).abs() + 1.0;
    let at = |i: usize, j: usize| {
        if i < rows && j < cols {
            cost[i * cols + j]
        } else {
            pad
        }
    };

    // Shortest augmenting paths with row/column potentials, 1-indexed with
    // column 0 as the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .filter(|&(i, j)| i < rows && j < cols)
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}
