use super::AssignError;

/// Minimum-cost one-to-one matching of `queries × targets` costs (row-major,
/// `queries ≥ targets`) covering every target.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(query, target)` pairs sorted by query.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of matched costs, accumulated in pair order.
    pub total_cost: f64,
}

impl Assignment {
    pub fn query_of(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == target).map(|p| p.0)
    }

    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }
}

/// Shortest augmenting path solver; `a` is `n × m` with `n ≤ m`.
/// Returns, for each row, its column and the optimal cost.
fn solve(a: &[f64], n: usize, m: usize) -> (Vec<usize>, f64) {
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[col] = row matched to col (1-based, 0 = free)
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    let cost = (0..n).map(|i| a[i * m + col_of[i]]).sum();
    (col_of, cost)
}

/// Optimal cost of matching every remaining target to an allowed query.
fn restricted_optimum(
    costs: &[f64],
    targets: usize,
    queries: &[usize],
    open_targets: &[usize],
) -> f64 {
    let (n, m) = (open_targets.len(), queries.len());
    let mut a = Vec::with_capacity(n * m);
    for &k in open_targets {
        for &j in queries {
            a.push(costs[j * targets + k]);
        }
    }
    solve(&a, n, m).1
}

/// Optimal assignment with ties resolved toward the lexicographically
/// smallest query-sorted pair sequence.
pub fn hungarian(costs: &[f64], queries: usize, targets: usize) -> Result<Assignment, AssignError> {
    if costs.len() != queries * targets {
        return Err(AssignError::Shape(format!(
            "{} costs for a {queries}×{targets} matrix",
            costs.len()
        )));
    }
    if queries < targets {
        return Err(AssignError::Capacity { queries, targets });
    }
    if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
        return Err(AssignError::NonFinite {
            query: i / targets.max(1),
            target: i % targets.max(1),
        });
    }
    if targets == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let all_queries: Vec<usize> = (0..queries).collect();
    let all_targets: Vec<usize> = (0..targets).collect();
    let best = restricted_optimum(costs, targets, &all_queries, &all_targets);
    let scale = costs.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * scale * targets as f64;

    // Walk queries in order, giving each the smallest target that still admits
    // an optimal completion; otherwise leave it unmatched.
    let mut pairs = Vec::with_capacity(targets);
    let mut fixed = 0.0;
    let mut open: Vec<usize> = all_targets;
    for j in 0..queries {
        if open.is_empty() {
            break;
        }
        let rest: Vec<usize> = (j + 1..queries).collect();
        let mut chosen = None;
        for (pos, &k) in open.iter().enumerate() {
            let remaining: Vec<usize> = open.iter().copied().filter(|&t| t != k).collect();
            if remaining.len() > rest.len() {
                continue;
            }
            let c = fixed
                + costs[j * targets + k]
                + restricted_optimum(costs, targets, &rest, &remaining);
            if c <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        match chosen {
            Some(pos) => {
                let k = open.remove(pos);
                fixed += costs[j * targets + k];
                pairs.push((j, k));
            }
            None => {
                debug_assert!(
                    open.len() <= rest.len(),
                    "skipping query {j} must stay feasible"
                );
            }
        }
    }
    let total_cost = pairs.iter().map(|&(j, k)| costs[j * targets + k]).sum();
    Ok(Assignment { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_optimum() {
        let a = hungarian(&[0.0, 9.0, 9.0, 0.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn tie_prefers_lexicographic_pairs() {
        let a = hungarian(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 5.0);
    }

    #[test]
    fn extra_queries_may_stay_unmatched() {
        // 3 queries, 1 target: query 2 is cheapest
        let a = hungarian(&[5.0, 4.0, 1.0], 3, 1).unwrap();
        assert_eq!(a.pairs, vec![(2, 0)]);
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(
            hungarian(&[1.0, 2.0], 1, 2),
            Err(AssignError::Capacity { .. })
        ));
        assert!(matches!(
            hungarian(&[1.0, f64::NAN], 2, 1),
            Err(AssignError::NonFinite {
                query: 1,
                target: 0
            })
        ));
    }
}
