//! Dense two-phase revised simplex for equality-form programs
//! `min c'x  s.t.  Ax = b, x >= 0`.
//!
//! Columns are stored sparse, the basis inverse dense. Phase 1 minimizes
//! artificial mass; zero-level artificials are pivoted out afterwards and
//! rows that resist the pivot are treated as redundant. Entering variables
//! follow Dantzig pricing; the leaving row is chosen by the lexicographic
//! rule, which terminates on degenerate bases under any pricing. Done and
//! Unbounded verdicts are only accepted after pricing on a freshly rebuilt
//! basis inverse, so accumulated drift cannot end a solve early.

/// Equality-form program. `cols[j]` lists `(row, coefficient)` pairs.
#[derive(Debug, Clone)]
pub(crate) struct EqualityLp {
    pub num_vars: usize,
    pub cols: Vec<Vec<(usize, f64)>>,
    pub rhs: Vec<f64>,
    pub cost: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) enum LpOutcome {
    Optimal(LpSolution),
    /// Phase 1 could not clear artificial mass; the residual is what stayed.
    Infeasible { residual: f64 },
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub(crate) struct LpSolution {
    pub objective: f64,
    pub x: Vec<f64>,
}

const EPS_PIVOT: f64 = 1e-10;
const EPS_LEX: f64 = 1e-9;
const EPS_DRIVE_OUT: f64 = 1e-7;
const REFACTOR_EVERY: usize = 100;

pub(crate) fn solve_equality_lp(lp: &EqualityLp) -> LpOutcome {
    let m = lp.rhs.len();
    let n = lp.num_vars;
    assert!(m >= 1 && n >= 1, "degenerate program shape");
    assert_eq!(lp.cols.len(), n);
    assert_eq!(lp.cost.len(), n);

    // Flip rows to make the right-hand side nonnegative, so the identity
    // columns of the artificials form a feasible starting basis.
    let mut sign = vec![1.0f64; m];
    let mut rhs = lp.rhs.clone();
    for i in 0..m {
        if rhs[i] < 0.0 {
            sign[i] = -1.0;
            rhs[i] = -rhs[i];
        }
    }
    let cols: Vec<Vec<(usize, f64)>> = lp
        .cols
        .iter()
        .map(|col| col.iter().map(|&(r, v)| (r, v * sign[r])).collect())
        .collect();

    let mut state = Simplex {
        m,
        n,
        cols: &cols,
        rhs: &rhs,
        binv: identity(m),
        basis: (n..n + m).collect(),
        in_basis: {
            let mut f = vec![false; n + m];
            for j in n..n + m {
                f[j] = true;
            }
            f
        },
        xb: rhs.clone(),
        pivots: 0,
    };

    // Phase 1.
    let phase1_cost: Vec<f64> = vec![0.0; n];
    let art_cost = 1.0;
    match state.run(&phase1_cost, art_cost, usize::MAX) {
        PhaseEnd::Done => {}
        PhaseEnd::Unbounded => return LpOutcome::Unbounded,
        PhaseEnd::IterationLimit => return LpOutcome::IterationLimit,
    }
    let residual: f64 = (0..m)
        .filter(|&i| state.basis[i] >= n)
        .map(|i| state.xb[i].max(0.0))
        .sum();
    let feas_tol = 1e-8 * (1.0 + rhs.iter().map(|v| v.abs()).fold(0.0, f64::max));
    if residual > feas_tol {
        return LpOutcome::Infeasible { residual };
    }
    state.drive_out_artificials();
    state.refactor();

    // Phase 2.
    match state.run(&lp.cost, 0.0, usize::MAX) {
        PhaseEnd::Done => {}
        PhaseEnd::Unbounded => return LpOutcome::Unbounded,
        PhaseEnd::IterationLimit => return LpOutcome::IterationLimit,
    }

    let mut x = vec![0.0; n];
    for i in 0..m {
        if state.basis[i] < n {
            x[state.basis[i]] = state.xb[i].max(0.0);
        }
    }
    let objective = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
    LpOutcome::Optimal(LpSolution { objective, x })
}

/// Max row residual `|Ax - b|` of a candidate solution.
#[cfg(test)]
pub(crate) fn residual_inf(lp: &EqualityLp, x: &[f64]) -> f64 {
    let mut ax = vec![0.0; lp.rhs.len()];
    for (j, col) in lp.cols.iter().enumerate() {
        for &(r, v) in col {
            ax[r] += v * x[j];
        }
    }
    ax.iter()
        .zip(&lp.rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

enum PhaseEnd {
    Done,
    Unbounded,
    IterationLimit,
}

struct Simplex<'a> {
    m: usize,
    n: usize,
    cols: &'a [Vec<(usize, f64)>],
    rhs: &'a [f64],
    binv: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    xb: Vec<f64>,
    pivots: usize,
}

impl Simplex<'_> {
    fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.cols[j]
    }

    /// `binv * a_j` for a structural column.
    fn direction(&self, j: usize) -> Vec<f64> {
        let mut d = vec![0.0; self.m];
        for &(r, v) in self.column(j) {
            if v == 0.0 {
                continue;
            }
            for i in 0..self.m {
                d[i] += self.binv[i * self.m + r] * v;
            }
        }
        d
    }

    fn run(&mut self, cost: &[f64], art_cost: f64, max_iters: usize) -> PhaseEnd {
        let m = self.m;
        let n = self.n;
        let cost_scale = 1.0 + cost.iter().map(|c| c.abs()).fold(art_cost.abs(), f64::max);
        let eps_rc = 1e-9 * cost_scale;
        let iter_cap = max_iters.min(60 * (m + n) + 10_000);

        let mut pivots_done = 0usize;
        // The maintained inverse drifts under long degenerate runs, so a
        // Done or Unbounded verdict only stands when pricing was computed
        // on a freshly rebuilt factorization.
        let mut fresh = false;
        while pivots_done < iter_cap {
            // Simplex multipliers y = cB' * binv.
            let mut y = vec![0.0; m];
            for i in 0..m {
                let cb = if self.basis[i] < n {
                    cost[self.basis[i]]
                } else {
                    art_cost
                };
                if cb == 0.0 {
                    continue;
                }
                for r in 0..m {
                    y[r] += cb * self.binv[i * m + r];
                }
            }

            let mut entering = None;
            let mut best_rc = -eps_rc;
            for j in 0..n {
                if self.in_basis[j] {
                    continue;
                }
                let mut rc = cost[j];
                for &(r, v) in self.column(j) {
                    rc -= y[r] * v;
                }
                if rc < best_rc {
                    best_rc = rc;
                    entering = Some(j);
                }
            }
            let Some(entering) = entering else {
                if fresh {
                    return PhaseEnd::Done;
                }
                self.refactor();
                fresh = true;
                continue;
            };

            let d = self.direction(entering);

            // Basic artificials sit at level zero in phase 2 and must not
            // move, so any pivotable artificial row leaves first, at ratio
            // zero; the largest pivot element wins among them.
            let mut leave: Option<usize> = None;
            if art_cost == 0.0 {
                for i in 0..m {
                    if self.basis[i] >= n && d[i].abs() > EPS_PIVOT {
                        let better = match leave {
                            None => true,
                            Some(cur) => d[i].abs() > d[cur].abs(),
                        };
                        if better {
                            leave = Some(i);
                        }
                    }
                }
            }
            if leave.is_none() {
                for i in 0..m {
                    if d[i] > EPS_PIVOT {
                        let better = match leave {
                            None => true,
                            Some(cur) => self.lex_less(i, cur, &d),
                        };
                        if better {
                            leave = Some(i);
                        }
                    }
                }
            }
            let Some(row) = leave else {
                if fresh {
                    return PhaseEnd::Unbounded;
                }
                self.refactor();
                fresh = true;
                continue;
            };

            self.pivot(row, entering, &d);
            fresh = false;
            pivots_done += 1;
            if self.pivots % REFACTOR_EVERY == 0 {
                self.refactor();
            }
        }
        PhaseEnd::IterationLimit
    }

    /// Lexicographic ratio comparison: row `a` beats row `b` when the
    /// vector `(xb[a], binv[a, :]) / d[a]` precedes `(xb[b], binv[b, :]) /
    /// d[b]`. Unique in exact arithmetic because basis inverse rows are
    /// independent, which is what rules out cycling.
    fn lex_less(&self, a: usize, b: usize, d: &[f64]) -> bool {
        let m = self.m;
        let (da, db) = (d[a], d[b]);
        let ra = self.xb[a].max(0.0) / da;
        let rb = self.xb[b].max(0.0) / db;
        if (ra - rb).abs() > EPS_LEX * (1.0 + ra.abs().max(rb.abs())) {
            return ra < rb;
        }
        for c in 0..m {
            let va = self.binv[a * m + c] / da;
            let vb = self.binv[b * m + c] / db;
            if (va - vb).abs() > EPS_LEX * (1.0 + va.abs().max(vb.abs())) {
                return va < vb;
            }
        }
        a < b
    }

    fn pivot(&mut self, row: usize, entering: usize, d: &[f64]) {
        let m = self.m;
        let piv = d[row];
        debug_assert!(piv.abs() > 0.0, "zero pivot element");
        let theta = self.xb[row].max(0.0) / piv;

        let inv = 1.0 / piv;
        for r in 0..m {
            self.binv[row * m + r] *= inv;
        }
        for i in 0..m {
            if i == row || d[i] == 0.0 {
                continue;
            }
            let f = d[i];
            for r in 0..m {
                self.binv[i * m + r] -= f * self.binv[row * m + r];
            }
            self.xb[i] -= theta * f;
        }
        self.xb[row] = theta;
        self.in_basis[self.basis[row]] = false;
        self.in_basis[entering] = true;
        self.basis[row] = entering;
        self.pivots += 1;
    }

    /// Replaces zero-level basic artificials with structural columns where a
    /// usable pivot exists; rows without one are redundant and keep their
    /// artificial frozen at zero.
    fn drive_out_artificials(&mut self) {
        let m = self.m;
        for row in 0..m {
            if self.basis[row] < self.n {
                continue;
            }
            let mut found = None;
            for j in 0..self.n {
                if self.in_basis[j] {
                    continue;
                }
                let mut alpha = 0.0;
                for &(r, v) in self.column(j) {
                    alpha += self.binv[row * m + r] * v;
                }
                if alpha.abs() > EPS_DRIVE_OUT {
                    found = Some(j);
                    break;
                }
            }
            if let Some(j) = found {
                let d = self.direction(j);
                self.xb[row] = 0.0;
                self.pivot(row, j, &d);
            }
        }
    }

    /// Rebuilds the basis inverse and basic values from scratch.
    fn refactor(&mut self) {
        let m = self.m;
        let mut b = vec![0.0; m * m];
        for (i, &var) in self.basis.iter().enumerate() {
            if var < self.n {
                for &(r, v) in self.column(var) {
                    b[r * m + i] = v;
                }
            } else {
                b[(var - self.n) * m + i] = 1.0;
            }
        }
        if let Some(inv) = invert(&b, m) {
            self.binv = inv;
            let mut xb = vec![0.0; m];
            for i in 0..m {
                for r in 0..m {
                    xb[i] += self.binv[i * m + r] * self.rhs[r];
                }
            }
            self.xb = xb;
        }
    }
}

fn identity(m: usize) -> Vec<f64> {
    let mut e = vec![0.0; m * m];
    for i in 0..m {
        e[i * m + i] = 1.0;
    }
    e
}

/// Gauss-Jordan inverse with partial pivoting; `None` on singularity.
fn invert(mat: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut a = mat.to_vec();
    let mut inv = identity(m);
    for col in 0..m {
        let mut best = col;
        for r in col + 1..m {
            if a[r * m + col].abs() > a[best * m + col].abs() {
                best = r;
            }
        }
        if a[best * m + col].abs() < 1e-12 {
            return None;
        }
        if best != col {
            for c in 0..m {
                a.swap(col * m + c, best * m + c);
                inv.swap(col * m + c, best * m + c);
            }
        }
        let piv = a[col * m + col];
        let scale = 1.0 / piv;
        for c in 0..m {
            a[col * m + c] *= scale;
            inv[col * m + c] *= scale;
        }
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = a[r * m + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..m {
                a[r * m + c] -= f * a[col * m + c];
                inv[r * m + c] -= f * inv[col * m + c];
            }
        }
    }
    Some(inv)
}
