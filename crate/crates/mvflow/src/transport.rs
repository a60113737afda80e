//! Exact discrete optimal transport on small supports.
//!
//! Two solvers, both exact and deterministic:
//!
//! * [`solve_assignment`] — shortest-augmenting-path assignment (equal-size,
//!   equal-weight supports), O(n^3); ties are broken by lowest index, so the
//!   optimal coupling is reproducible bit for bit.
//! * [`solve_transport`] — successive shortest paths with Johnson potentials
//!   on the dense bipartite network, for general nonnegative weights.

use crate::error::{Error, Result};
use crate::Matrix;

/// Minimum-cost perfect assignment for a square cost matrix.
///
/// Returns `(total_cost, assignment)` where `assignment[row] = col`.
pub fn solve_assignment(cost: &Matrix) -> (f64, Vec<usize>) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    if n == 0 {
        return (0.0, Vec::new());
    }
    // 1-based arrays; p[j] = row matched to column j (0 = unmatched).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
    let mut total = 0.0;
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
        total += cost[(p[j] - 1, j - 1)];
    }
    (total, assignment)
}

/// Exact transportation problem: minimize `sum f[j][l] c[j][l]` over couplings
/// of the weight vectors `a` (rows) and `b` (columns). Returns the optimal
/// total cost.
pub fn solve_transport(cost: &Matrix, a: &[f64], b: &[f64]) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    assert_eq!(cost.nrows(), m);
    assert_eq!(cost.ncols(), n);
    let total_a: f64 = a.iter().sum();
    let total_b: f64 = b.iter().sum();
    if (total_a - total_b).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "transport marginals differ: {total_a} vs {total_b}"
        )));
    }

    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = Matrix::zeros(m, n);
    // Johnson potentials keep reduced costs nonnegative for Dijkstra.
    let mut pot_s = vec![0.0f64; m];
    let mut pot_t = vec![0.0f64; n];
    let eps = 1e-13 * total_a.max(1.0);

    let max_rounds = 4 * (m + n) + 16;
    for _round in 0..max_rounds {
        if supply.iter().all(|&s| s <= eps) {
            // Residual mass is numerically zero; done.
            let mut total = 0.0;
            for j in 0..m {
                for l in 0..n {
                    total += flow[(j, l)] * cost[(j, l)];
                }
            }
            return Ok(total);
        }

        // Dense multi-source Dijkstra. Nodes 0..m are sources, m..m+n sinks.
        let nn = m + n;
        let mut dist = vec![f64::INFINITY; nn];
        let mut prev = vec![usize::MAX; nn];
        let mut done = vec![false; nn];
        for (j, &s) in supply.iter().enumerate() {
            if s > eps {
                dist[j] = 0.0;
            }
        }
        loop {
            let mut best = f64::INFINITY;
            let mut node = usize::MAX;
            for (x, &d) in dist.iter().enumerate() {
                if !done[x] && d < best {
                    best = d;
                    node = x;
                }
            }
            if node == usize::MAX {
                break;
            }
            done[node] = true;
            if node < m {
                let j = node;
                for l in 0..n {
                    let rc = cost[(j, l)] - pot_s[j] - pot_t[l];
                    let nd = dist[j] + rc.max(0.0);
                    if nd < dist[m + l] {
                        dist[m + l] = nd;
                        prev[m + l] = j;
                    }
                }
            } else {
                let l = node - m;
                for j in 0..m {
                    if flow[(j, l)] > eps {
                        let rc = -(cost[(j, l)] - pot_s[j] - pot_t[l]);
                        let nd = dist[m + l] + rc.max(0.0);
                        if nd < dist[j] {
                            dist[j] = nd;
                            prev[j] = m + l;
                        }
                    }
                }
            }
        }

        // Lowest-distance sink with remaining demand; ties -> lowest index.
        let mut sink = usize::MAX;
        let mut best = f64::INFINITY;
        for (l, &d) in demand.iter().enumerate() {
            if d > eps && dist[m + l] < best {
                best = dist[m + l];
                sink = l;
            }
        }
        if sink == usize::MAX {
            return Err(Error::InvalidInput("transport: no augmenting path found".into()));
        }

        // Bottleneck along the path.
        let mut bottleneck = demand[sink];
        let mut x = m + sink;
        loop {
            let p = prev[x];
            if p == usize::MAX {
                bottleneck = bottleneck.min(supply[x]);
                break;
            }
            if p >= m {
                // Backward arc sink(p) -> source(x): capacity is current flow.
                bottleneck = bottleneck.min(flow[(x, p - m)]);
            }
            x = p;
        }

        // Augment.
        let mut x = m + sink;
        loop {
            let p = prev[x];
            if p == usize::MAX {
                supply[x] -= bottleneck;
                if supply[x] < eps {
                    supply[x] = 0.0;
                }
                break;
            }
            if p < m {
                flow[(p, x - m)] += bottleneck;
            } else {
                flow[(x, p - m)] -= bottleneck;
                if flow[(x, p - m)] < eps {
                    flow[(x, p - m)] = 0.0;
                }
            }
            x = p;
        }
        demand[sink] -= bottleneck;
        if demand[sink] < eps {
            demand[sink] = 0.0;
        }

        // Potential update keeps reduced costs nonnegative.
        let cap = dist[m + sink];
        for j in 0..m {
            if dist[j].is_finite() {
                pot_s[j] += cap - dist[j].min(cap);
            }
        }
        for l in 0..n {
            if dist[m + l].is_finite() {
                pot_t[l] -= cap - dist[m + l].min(cap);
            }
        }
    }
    Err(Error::InvalidInput("transport solver exceeded augmentation bound".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_cost(m: usize, n: usize, rng: &mut CounterRng) -> Matrix {
        Matrix::from_fn(m, n, |_, _| rng.uniform())
    }

    fn brute_force_assignment(cost: &Matrix) -> f64 {
        fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.nrows() {
                *best = best.min(acc);
                return;
            }
            for c in 0..cost.ncols() {
                if !used[c] {
                    used[c] = true;
                    go(cost, row + 1, used, acc + cost[(row, c)], best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
        best
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = CounterRng::new(99, 0);
        for _ in 0..40 {
            let cost = random_cost(5, 5, &mut rng);
            let (got, perm) = solve_assignment(&cost);
            let expect = brute_force_assignment(&cost);
            assert!((got - expect).abs() < 1e-12);
            // Permutation is valid.
            let mut seen = vec![false; 5];
            for &c in &perm {
                assert!(!seen[c]);
                seen[c] = true;
            }
        }
    }

    #[test]
    fn transport_equals_assignment_on_uniform_weights() {
        let mut rng = CounterRng::new(7, 1);
        for n in [3usize, 6, 10] {
            let cost = random_cost(n, n, &mut rng);
            let w = vec![1.0 / n as f64; n];
            let (asg, _) = solve_assignment(&cost);
            let tr = solve_transport(&cost, &w, &w).unwrap();
            assert!((tr - asg / n as f64).abs() < 1e-12, "n={n}: {tr} vs {}", asg / n as f64);
        }
    }

    #[test]
    fn transport_matches_weight_duplication() {
        // Weighted problem vs the equivalent duplicated equal-weight problem.
        let mut rng = CounterRng::new(13, 2);
        let cost = random_cost(3, 3, &mut rng);
        let a = [2.0 / 6.0, 3.0 / 6.0, 1.0 / 6.0];
        let b = [1.0 / 6.0, 1.0 / 6.0, 4.0 / 6.0];
        let got = solve_transport(&cost.clone(), &a, &b).unwrap();

        let reps_a = [2usize, 3, 1];
        let reps_b = [1usize, 1, 4];
        let mut big = Matrix::zeros(6, 6);
        let mut ri = 0;
        for (i, &ra) in reps_a.iter().enumerate() {
            for _ in 0..ra {
                let mut ci = 0;
                for (j, &rb) in reps_b.iter().enumerate() {
                    for _ in 0..rb {
                        big[(ri, ci)] = cost[(i, j)];
                        ci += 1;
                    }
                }
                ri += 1;
            }
        }
        let (expect, _) = solve_assignment(&big);
        assert!((got - expect / 6.0).abs() < 1e-12);
    }

    #[test]
    fn transport_rejects_unbalanced() {
        let cost = Matrix::zeros(2, 2);
        assert!(solve_transport(&cost, &[0.7, 0.2], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn transport_handles_unequal_sizes() {
        // One supplier to two consumers: cost is the weighted average.
        let cost = Matrix::from_row_slice(1, 2, &[1.0, 3.0]);
        let got = solve_transport(&cost, &[1.0], &[0.25, 0.75]).unwrap();
        assert!((got - (0.25 + 2.25)).abs() < 1e-12);
    }
}
