//! Minimum-cost bipartite assignment via shortest augmenting paths with
//! dual potentials (Jonker-Volgenant style), O(rows^2 * cols).

/// Solves min-cost assignment for a dense `rows x cols` cost matrix with
/// `rows <= cols`. Returns, for each row, its assigned column. Every row is
/// assigned and no column is used twice.
pub fn min_cost_assignment(rows: usize, cols: usize, cost: &[f64]) -> Vec<usize> {
    assert!(rows <= cols, "assignment needs rows <= cols");
    assert_eq!(cost.len(), rows * cols);

    // column `cols` is the virtual root of each augmenting search
    let mut row_of: Vec<Option<usize>> = vec![None; cols + 1];
    let mut row_potential = vec![0.0f64; rows];
    let mut col_potential = vec![0.0f64; cols + 1];

    for row in 0..rows {
        let mut current_col = cols;
        row_of[current_col] = Some(row);
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut previous = vec![usize::MAX; cols + 1];
        let mut visited = vec![false; cols + 1];

        while let Some(r) = row_of[current_col] {
            visited[current_col] = true;
            let mut delta = f64::INFINITY;
            let mut next_col = cols;
            for col in 0..cols {
                if visited[col] {
                    continue;
                }
                let reduced = cost[r * cols + col] - row_potential[r] - col_potential[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    previous[col] = current_col;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    next_col = col;
                }
            }
            for col in 0..=cols {
                if visited[col] {
                    if let Some(rr) = row_of[col] {
                        row_potential[rr] += delta;
                    }
                    col_potential[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            current_col = next_col;
        }

        // walk the augmenting path back to the root
        while current_col != cols {
            let prev = previous[current_col];
            row_of[current_col] = row_of[prev];
            current_col = prev;
        }
    }

    let mut assignment = vec![usize::MAX; rows];
    for col in 0..cols {
        if let Some(r) = row_of[col] {
            assignment[r] = col;
        }
    }
    debug_assert!(assignment.iter().all(|&c| c != usize::MAX));
    assignment
}

#[cfg(test)]
pub(crate) fn brute_force_assignment(rows: usize, cols: usize, cost: &[f64]) -> f64 {
    fn recurse(row: usize, rows: usize, cols: usize, cost: &[f64], used: &mut Vec<bool>) -> f64 {
        if row == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for col in 0..cols {
            if used[col] {
                continue;
            }
            used[col] = true;
            let total = cost[row * cols + col] + recurse(row + 1, rows, cols, cost, used);
            used[col] = false;
            best = best.min(total);
        }
        best
    }
    recurse(0, rows, cols, cost, &mut vec![false; cols])
}
