//! Exact discrete optimal transport.
//!
//! [`solve_transport`] runs the transportation simplex on a spanning-tree
//! basis: northwest-corner start, dual pricing, cycle pivots. Degenerate
//! pivots fall back to Bland's rule so termination is guaranteed.
//! [`wasserstein_p`] wraps it with ground-metric costs between two discrete
//! marginals and returns the p-th power of the Wasserstein distance.

use thiserror::Error;

use crate::metric::{MetricError, StagewiseMetric};
use crate::tree::{StageMarginal, TreeError};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport problem has no {side}")]
    Empty { side: &'static str },
    #[error("cost matrix row {row} has {got} entries, expected {expected}")]
    CostShape { row: usize, got: usize, expected: usize },
    #[error("cost matrix has {rows} rows, expected {expected}")]
    CostRows { rows: usize, expected: usize },
    #[error("cost at ({i}, {j}) is {cost}, costs must be finite and nonnegative")]
    BadCost { i: usize, j: usize, cost: f64 },
    #[error("{side} mass {mass} at index {index} must be finite and nonnegative")]
    BadMass { side: &'static str, index: usize, mass: f64 },
    #[error("total supply {supply} and demand {demand} are unbalanced")]
    Unbalanced { supply: f64, demand: f64 },
    #[error("pivot limit exceeded, the instance is numerically degenerate")]
    IterationLimit,
    #[error("linear program solve failed: {status}")]
    Solver { status: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Marginal(#[from] TreeError),
}

/// Balanced transportation instance: `flow[i][j] >= 0` moving `supply` onto
/// `demand` at unit costs `cost[i][j]`.
#[derive(Debug, Clone)]
pub struct TransportProblem {
    pub cost: Vec<Vec<f64>>,
    pub supply: Vec<f64>,
    pub demand: Vec<f64>,
}

/// An optimal basic flow and its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub flow: Vec<Vec<f64>>,
    pub objective: f64,
}

const EPS_FLOW: f64 = 1e-13;
const BLAND_AFTER: usize = 6;

fn validate_problem(problem: &TransportProblem) -> Result<(), TransportError> {
    let m = problem.supply.len();
    let n = problem.demand.len();
    if m == 0 {
        return Err(TransportError::Empty { side: "supplies" });
    }
    if n == 0 {
        return Err(TransportError::Empty { side: "demands" });
    }
    if problem.cost.len() != m {
        return Err(TransportError::CostRows { rows: problem.cost.len(), expected: m });
    }
    for (i, row) in problem.cost.iter().enumerate() {
        if row.len() != n {
            return Err(TransportError::CostShape { row: i, got: row.len(), expected: n });
        }
        for (j, &c) in row.iter().enumerate() {
            if !c.is_finite() || c < 0.0 {
                return Err(TransportError::BadCost { i, j, cost: c });
            }
        }
    }
    for (index, &mass) in problem.supply.iter().enumerate() {
        if !mass.is_finite() || mass < 0.0 {
            return Err(TransportError::BadMass { side: "supply", index, mass });
        }
    }
    for (index, &mass) in problem.demand.iter().enumerate() {
        if !mass.is_finite() || mass < 0.0 {
            return Err(TransportError::BadMass { side: "demand", index, mass });
        }
    }

    let total_supply: f64 = problem.supply.iter().sum();
    let total_demand: f64 = problem.demand.iter().sum();
    if (total_supply - total_demand).abs() > 1e-9 * total_supply.max(total_demand).max(1.0) {
        return Err(TransportError::Unbalanced {
            supply: total_supply,
            demand: total_demand,
        });
    }
    Ok(())
}

/// Solves the balanced transportation problem exactly. Zero-mass rows and
/// columns are carried through with zero flow. Total supply and demand must
/// agree within `1e-9` relative; the demand side is rescaled to balance
/// exactly.
pub fn solve_transport(problem: &TransportProblem) -> Result<TransportPlan, TransportError> {
    validate_problem(problem)?;
    let m = problem.supply.len();
    let n = problem.demand.len();
    let total_supply: f64 = problem.supply.iter().sum();
    let total_demand: f64 = problem.demand.iter().sum();

    let rows: Vec<usize> = (0..m).filter(|&i| problem.supply[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n).filter(|&j| problem.demand[j] > 0.0).collect();
    let mut flow = vec![vec![0.0; n]; m];
    if rows.is_empty() || cols.is_empty() {
        return Ok(TransportPlan { flow, objective: 0.0 });
    }

    let a: Vec<f64> = rows.iter().map(|&i| problem.supply[i]).collect();
    let scale = if total_demand > 0.0 { total_supply / total_demand } else { 1.0 };
    let b: Vec<f64> = cols.iter().map(|&j| problem.demand[j] * scale).collect();
    let cost: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| problem.cost[i][j]))
        .collect();

    let cells = transportation_simplex(&a, &b, &cost)?;
    let mut objective = 0.0;
    for &(ci, cj, f) in &cells {
        let f = f.max(0.0);
        flow[rows[ci]][cols[cj]] = f;
        objective += problem.cost[rows[ci]][cols[cj]] * f;
    }
    Ok(TransportPlan { flow, objective })
}

/// `W_p^p` between two discrete marginals under the stage-`t` ground metric.
pub fn wasserstein_p(
    p: &StageMarginal,
    q: &StageMarginal,
    metric: &StagewiseMetric,
    t: usize,
) -> Result<f64, TransportError> {
    Ok(wasserstein_plan(p, q, metric, t)?.objective)
}

/// As [`wasserstein_p`], keeping the optimal coupling.
pub fn wasserstein_plan(
    p: &StageMarginal,
    q: &StageMarginal,
    metric: &StagewiseMetric,
    t: usize,
) -> Result<TransportPlan, TransportError> {
    p.check(1e-9)?;
    q.check(1e-9)?;
    let mut cost = Vec::with_capacity(p.len());
    for x in &p.points {
        let mut row = Vec::with_capacity(q.len());
        for y in &q.points {
            row.push(metric.ground_distance_p(t, x, y)?);
        }
        cost.push(row);
    }
    solve_transport(&TransportProblem {
        cost,
        supply: p.probs.clone(),
        demand: q.probs.clone(),
    })
}

/// Outcome of [`check_mass_row_redundancy`].
#[derive(Debug, Clone)]
pub struct RedundancyReport {
    pub value_marginals_only: f64,
    pub value_with_total: f64,
    pub gap: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Solves the transportation program as an explicit equality linear
/// program twice, with the marginal constraints alone and with the total
/// mass row appended, and confirms both optima agree. The marginal rows
/// already sum to the total, making the extra row redundant.
pub fn check_mass_row_redundancy(
    problem: &TransportProblem,
) -> Result<RedundancyReport, TransportError> {
    use crate::lp::{solve_equality_lp, EqualityLp, LpOutcome};

    validate_problem(problem)?;
    let m = problem.supply.len();
    let n = problem.demand.len();
    let total_supply: f64 = problem.supply.iter().sum();
    let total_demand: f64 = problem.demand.iter().sum();
    let scale = if total_demand > 0.0 { total_supply / total_demand } else { 1.0 };

    let build = |with_total: bool| {
        let mut cols = Vec::with_capacity(m * n);
        let mut cost = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let mut col = vec![(i, 1.0), (m + j, 1.0)];
                if with_total {
                    col.push((m + n, 1.0));
                }
                cols.push(col);
                cost.push(problem.cost[i][j]);
            }
        }
        let mut rhs: Vec<f64> = problem.supply.clone();
        rhs.extend(problem.demand.iter().map(|&d| d * scale));
        if with_total {
            rhs.push(total_supply);
        }
        EqualityLp { num_vars: m * n, cols, rhs, cost }
    };

    let solve = |with_total: bool| match solve_equality_lp(&build(with_total)) {
        LpOutcome::Optimal(sol) => Ok(sol.objective),
        LpOutcome::Infeasible { residual } => Err(TransportError::Solver {
            status: format!("infeasible (residual {residual:e})"),
        }),
        LpOutcome::Unbounded => Err(TransportError::Solver { status: "unbounded".into() }),
        LpOutcome::IterationLimit => Err(TransportError::Solver {
            status: "iteration limit".into(),
        }),
    };

    let value_marginals_only = solve(false)?;
    let value_with_total = solve(true)?;
    let gap = (value_marginals_only - value_with_total).abs();
    let tol = 1e-9 * (1.0 + value_marginals_only.abs());
    Ok(RedundancyReport {
        value_marginals_only,
        value_with_total,
        gap,
        tol,
        pass: gap <= tol,
    })
}

/// Core simplex over strictly positive masses. Returns the basic cells.
fn transportation_simplex(
    a: &[f64],
    b: &[f64],
    cost: &[f64],
) -> Result<Vec<(usize, usize, f64)>, TransportError> {
    let m = a.len();
    let n = b.len();
    let mut basis = northwest_corner(a, b);
    let mut in_basis = vec![false; m * n];
    for &(i, j, _) in &basis {
        in_basis[i * n + j] = true;
    }

    let cost_scale = 1.0 + cost.iter().fold(0.0f64, |acc, c| acc.max(c.abs()));
    let eps_rc = 1e-11 * cost_scale;
    let max_pivots = 50 * m * n + 500;
    let mut degenerate_streak = 0usize;

    for _ in 0..max_pivots {
        let (u, v) = duals(m, n, &basis, cost);

        let bland = degenerate_streak >= BLAND_AFTER;
        let mut entering = None;
        let mut best = -eps_rc;
        'scan: for i in 0..m {
            for j in 0..n {
                if in_basis[i * n + j] {
                    continue;
                }
                let rc = cost[i * n + j] - u[i] - v[j];
                if rc < -eps_rc {
                    if bland {
                        entering = Some((i, j));
                        break 'scan;
                    }
                    if rc < best {
                        best = rc;
                        entering = Some((i, j));
                    }
                }
            }
        }
        let Some((ei, ej)) = entering else {
            return Ok(basis);
        };

        let path = cycle_path(m, n, &basis, ei, ej);
        // Path edges alternate -, +, -, ... walking from the entering row.
        let minus: Vec<usize> = path.iter().step_by(2).copied().collect();
        let mut theta = f64::INFINITY;
        for &e in &minus {
            theta = theta.min(basis[e].2);
        }
        let theta = theta.max(0.0);
        let mut leaving = minus[0];
        let mut leave_key = (basis[minus[0]].0, basis[minus[0]].1);
        for &e in &minus {
            if basis[e].2 <= theta {
                let key = (basis[e].0, basis[e].1);
                if basis[e].2 < basis[leaving].2 || (basis[e].2 == basis[leaving].2 && key < leave_key)
                {
                    leaving = e;
                    leave_key = key;
                }
            }
        }

        for (pos, &e) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis[e].2 = (basis[e].2 - theta).max(0.0);
            } else {
                basis[e].2 += theta;
            }
        }
        let (li, lj, _) = basis[leaving];
        in_basis[li * n + lj] = false;
        in_basis[ei * n + ej] = true;
        basis[leaving] = (ei, ej, theta);

        if theta <= EPS_FLOW {
            degenerate_streak += 1;
        } else {
            degenerate_streak = 0;
        }
    }
    Err(TransportError::IterationLimit)
}

/// Northwest-corner initial basis: exactly `m + n - 1` cells forming a
/// spanning tree, zero-flow cells included on ties.
fn northwest_corner(a: &[f64], b: &[f64]) -> Vec<(usize, usize, f64)> {
    let m = a.len();
    let n = b.len();
    let mut cells = Vec::with_capacity(m + n - 1);
    let mut i = 0;
    let mut j = 0;
    let mut ra = a[0];
    let mut rb = b[0];
    loop {
        let f = ra.min(rb).max(0.0);
        cells.push((i, j, f));
        ra -= f;
        rb -= f;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if ra <= 0.0 && i < m - 1 {
            i += 1;
            ra = a[i];
        } else {
            j += 1;
            rb = b[j];
        }
    }
    cells
}

/// Dual potentials from the spanning-tree basis, rooted at row 0.
fn duals(m: usize, n: usize, basis: &[(usize, usize, f64)], cost: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut row_edges: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut col_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(i, j, _)) in basis.iter().enumerate() {
        row_edges[i].push(e);
        col_edges[j].push(e);
    }
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    let mut queue = vec![0usize];
    // Nodes 0..m are rows, m..m+n are columns.
    while let Some(node) = queue.pop() {
        if node < m {
            for &e in &row_edges[node] {
                let (i, j, _) = basis[e];
                if v[j].is_nan() {
                    v[j] = cost[i * n + j] - u[i];
                    queue.push(m + j);
                }
            }
        } else {
            let jn = node - m;
            for &e in &col_edges[jn] {
                let (i, j, _) = basis[e];
                if u[i].is_nan() {
                    u[i] = cost[i * n + j] - v[j];
                    queue.push(i);
                }
            }
        }
    }
    for x in u.iter_mut().chain(v.iter_mut()) {
        if x.is_nan() {
            *x = 0.0;
        }
    }
    (u, v)
}

/// Basis edges on the tree path from row `ei` to column `ej`, in walking
/// order starting at the row.
fn cycle_path(m: usize, n: usize, basis: &[(usize, usize, f64)], ei: usize, ej: usize) -> Vec<usize> {
    let mut row_edges: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut col_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(i, j, _)) in basis.iter().enumerate() {
        row_edges[i].push(e);
        col_edges[j].push(e);
    }
    let total = m + n;
    let mut parent_edge = vec![usize::MAX; total];
    let mut parent_node = vec![usize::MAX; total];
    let mut seen = vec![false; total];
    seen[ei] = true;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(ei);
    let target = m + ej;
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        let edges = if node < m { &row_edges[node] } else { &col_edges[node - m] };
        for &e in edges {
            let (i, j, _) = basis[e];
            let other = if node < m { m + j } else { i };
            if !seen[other] {
                seen[other] = true;
                parent_edge[other] = e;
                parent_node[other] = node;
                queue.push_back(other);
            }
        }
    }
    debug_assert!(seen[target], "basis must span all nodes");
    let mut path = Vec::new();
    let mut cur = target;
    while cur != ei {
        path.push(parent_edge[cur]);
        cur = parent_node[cur];
    }
    path.reverse();
    path
}
