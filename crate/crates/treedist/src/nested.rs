//! Nested distance between probability trees.
//!
//! Two exact routes to the same value: [`nested_lp`] solves one linear
//! program over leaf couplings whose conditional-marginal constraints run
//! across every stage, and [`nested_dp`] runs the backward recursion that
//! solves a small transportation problem per node pair, stage by stage. The
//! LP is exponential in depth and kept behind a size cap; the recursion is
//! the workhorse. [`check_constraint_equivalence`] and [`check_homogeneity`]
//! verify, on concrete instances, the two structural facts that make the
//! recursion valid: both constraint systems pin down the same transport
//! value, and the stage subproblem scales linearly in the mass entering a
//! node pair.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::lp::{solve_equality_lp, EqualityLp, LpOutcome};
use crate::metric::{MetricError, StagewiseMetric};
use crate::transport::{solve_transport, TransportError, TransportPlan, TransportProblem};
use crate::tree::{NodeId, ProbabilityTree, TreeError};

/// Default bound on `leaves(A) * leaves(B)` for the monolithic LP.
pub const DEFAULT_LP_CAP: usize = 10_000;
/// Bound on leaf pair count for the cross-validation routines.
pub const CHECK_CAP: usize = 2_000;

const PAR_THRESHOLD: usize = 64;

#[derive(Debug, Error)]
pub enum NestedError {
    #[error("trees have {a} and {b} stages, nested distance needs equal depth")]
    StageMismatch { a: usize, b: usize },
    #[error("metric covers {metric} stages, trees have {trees}")]
    MetricStages { metric: usize, trees: usize },
    #[error("nodes sit at stages {a} and {b}, a node pair needs equal stages")]
    PairStage { a: usize, b: usize },
    #[error("node pair must be interior, stage {stage} is the final stage")]
    NotInterior { stage: usize },
    #[error("node pair carries no mass (probabilities {a} and {b})")]
    NullMass { a: f64, b: f64 },
    #[error("scale alpha must be finite and nonnegative, got {alpha}")]
    BadScale { alpha: f64 },
    #[error("node index {index} out of range for a tree of {count} nodes")]
    NodeRange { index: usize, count: usize },
    #[error("{product} leaf pairs exceed the cap of {cap}")]
    SizeCap { product: usize, cap: usize },
    #[error("linear program reported {status}")]
    Solver { status: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// How a nested distance value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lp,
    Dp,
    Swi,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lp => "lp",
            Method::Dp => "dp",
            Method::Swi => "swi",
        }
    }
}

/// Distance table for one stage: values over `a_nodes x b_nodes`, row-major.
/// `mass_free` marks pairs where one side has zero probability; their values
/// come from uniform fallback conditionals and never influence ancestors.
/// Interior stages keep the optimal child coupling per pair.
#[derive(Debug, Clone)]
pub struct StagePairTable {
    pub stage: usize,
    pub a_nodes: Vec<NodeId>,
    pub b_nodes: Vec<NodeId>,
    pub values: Vec<f64>,
    pub mass_free: Vec<bool>,
    pub plans: Option<Vec<TransportPlan>>,
}

impl StagePairTable {
    pub fn value_at(&self, ai: usize, bi: usize) -> f64 {
        self.values[ai * self.b_nodes.len() + bi]
    }
}

/// Stage-indexed node pair tables from the backward recursion.
#[derive(Debug, Clone)]
pub struct NodePairTable {
    pub stages: Vec<StagePairTable>,
}

impl NodePairTable {
    pub fn stage_table(&self, t: usize) -> &StagePairTable {
        &self.stages[t - 1]
    }

    /// Table value for a concrete node pair, `None` if stages differ.
    pub fn value_for(
        &self,
        a: &ProbabilityTree,
        b: &ProbabilityTree,
        k: NodeId,
        l: NodeId,
    ) -> Option<f64> {
        let t = a.node(k).stage;
        if b.node(l).stage != t {
            return None;
        }
        Some(self.stage_table(t).value_at(a.stage_position(k), b.stage_position(l)))
    }
}

/// Result of a nested distance computation. `value_p` is the p-power value,
/// `value_root` its p-th root. The table is present for the recursion, the
/// leaf coupling for the LP, the per-stage terms for the stagewise fast
/// path.
#[derive(Debug, Clone)]
pub struct NestedResult {
    pub value_p: f64,
    pub value_root: f64,
    pub method: Method,
    pub table: Option<NodePairTable>,
    pub leaf_coupling: Option<Vec<Vec<f64>>>,
    pub stage_terms: Option<Vec<f64>>,
}

pub(crate) fn check_compatible(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<(), NestedError> {
    if a.stages() != b.stages() {
        return Err(NestedError::StageMismatch { a: a.stages(), b: b.stages() });
    }
    if metric.stages() != a.stages() {
        return Err(NestedError::MetricStages { metric: metric.stages(), trees: a.stages() });
    }
    Ok(())
}

fn check_node(tree: &ProbabilityTree, id: NodeId) -> Result<(), NestedError> {
    if id.0 >= tree.node_count() {
        return Err(NestedError::NodeRange { index: id.0, count: tree.node_count() });
    }
    Ok(())
}

/// Cumulative pair distances per stage: entry `(k, l)` of table `t` is
/// `sum_{tau <= t} w_tau * d_tau(outcome path of k, outcome path of l)^p`.
/// The final table holds full scenario distances for every leaf pair, summed
/// in the same order as `StagewiseMetric::path_distance_p`.
fn cumulative_tables(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<Vec<Vec<f64>>, NestedError> {
    let stages = a.stages();
    let mut tables: Vec<Vec<f64>> = Vec::with_capacity(stages);
    for t in 1..=stages {
        let a_nodes = a.stage_nodes(t);
        let b_nodes = b.stage_nodes(t);
        let nb = b_nodes.len();
        let w = metric.weight(t);
        let mut table = vec![0.0; a_nodes.len() * nb];
        for (ai, &k) in a_nodes.iter().enumerate() {
            let ka = a.node(k);
            for (bi, &l) in b_nodes.iter().enumerate() {
                let lb = b.node(l);
                let step = w * metric.ground_distance_p(t, &ka.outcome, &lb.outcome)?;
                let prev = if t == 1 {
                    0.0
                } else {
                    let pa = a.stage_position(ka.parent.expect("interior stage"));
                    let pb = b.stage_position(lb.parent.expect("interior stage"));
                    tables[t - 2][pa * b.stage_nodes(t - 1).len() + pb]
                };
                table[ai * nb + bi] = prev + step;
            }
        }
        tables.push(table);
    }
    Ok(tables)
}

/// Nested distance by backward recursion over node pairs.
///
/// Stage `T` entries are exact scenario distances; each earlier entry is the
/// optimal transport of the child values under the pair's conditional
/// marginals. The root entry is the nested distance to the p-th power.
pub fn nested_dp(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<NestedResult, NestedError> {
    check_compatible(a, b, metric)?;
    let stages = a.stages();
    let cum = cumulative_tables(a, b, metric)?;

    let mut tables: Vec<StagePairTable> = Vec::with_capacity(stages);
    {
        let a_nodes = a.leaves().to_vec();
        let b_nodes = b.leaves().to_vec();
        let mass_free = pair_mass_flags(a, b, &a_nodes, &b_nodes);
        tables.push(StagePairTable {
            stage: stages,
            a_nodes,
            b_nodes,
            values: cum[stages - 1].clone(),
            mass_free,
            plans: None,
        });
    }

    for t in (1..stages).rev() {
        let a_nodes = a.stage_nodes(t).to_vec();
        let b_nodes = b.stage_nodes(t).to_vec();
        let nb = b_nodes.len();
        let next = &tables[tables.len() - 1];
        let next_nb = next.b_nodes.len();
        let next_values = &next.values;

        let solve_pair = |idx: usize| -> Result<(f64, TransportPlan), NestedError> {
            let k = a_nodes[idx / nb];
            let l = b_nodes[idx % nb];
            let ka = a.children(k);
            let lb = b.children(l);
            let supply = conditional_weights(a, k);
            let demand = conditional_weights(b, l);
            let cost: Vec<Vec<f64>> = ka
                .iter()
                .map(|&r| {
                    let ra = a.stage_position(r);
                    lb.iter()
                        .map(|&s| next_values[ra * next_nb + b.stage_position(s)])
                        .collect()
                })
                .collect();
            let plan = solve_transport(&TransportProblem { cost, supply, demand })?;
            Ok((plan.objective, plan))
        };

        let count = a_nodes.len() * nb;
        let solved: Result<Vec<(f64, TransportPlan)>, NestedError> = if count >= PAR_THRESHOLD {
            (0..count).into_par_iter().map(solve_pair).collect()
        } else {
            (0..count).map(solve_pair).collect()
        };
        let solved = solved?;

        let mut values = Vec::with_capacity(count);
        let mut plans = Vec::with_capacity(count);
        for (v, plan) in solved {
            values.push(v);
            plans.push(plan);
        }
        let mass_free = pair_mass_flags(a, b, &a_nodes, &b_nodes);
        tables.push(StagePairTable {
            stage: t,
            a_nodes,
            b_nodes,
            values,
            mass_free,
            plans: Some(plans),
        });
    }

    tables.reverse();
    let value_p = tables[0].values[0];
    Ok(NestedResult {
        value_p,
        value_root: metric.root_of(value_p),
        method: Method::Dp,
        table: Some(NodePairTable { stages: tables }),
        leaf_coupling: None,
        stage_terms: None,
    })
}

/// Conditional child masses of `k`, renormalized to unit sum. Zero-mass
/// parents fall back to uniform weights; such entries are flagged mass-free
/// in the tables and cannot influence ancestor values, because the parent
/// level conditionals assign them zero mass.
fn conditional_weights(tree: &ProbabilityTree, k: NodeId) -> Vec<f64> {
    let children = tree.children(k);
    let pk = tree.node(k).prob;
    if pk > 0.0 {
        let raw: Vec<f64> = children.iter().map(|&c| tree.node(c).prob / pk).collect();
        let sum: f64 = raw.iter().sum();
        if sum > 0.0 {
            return raw.iter().map(|w| w / sum).collect();
        }
    }
    vec![1.0 / children.len() as f64; children.len()]
}

fn pair_mass_flags(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    a_nodes: &[NodeId],
    b_nodes: &[NodeId],
) -> Vec<bool> {
    let mut flags = Vec::with_capacity(a_nodes.len() * b_nodes.len());
    for &k in a_nodes {
        for &l in b_nodes {
            flags.push(a.node(k).prob <= 0.0 || b.node(l).prob <= 0.0);
        }
    }
    flags
}

/// Leaf positions below each node, ascending.
fn leaves_under(tree: &ProbabilityTree) -> Vec<Vec<usize>> {
    let mut under = vec![Vec::new(); tree.node_count()];
    for (pos, &leaf) in tree.leaves().iter().enumerate() {
        for id in tree.path_nodes(leaf) {
            under[id.0].push(pos);
        }
    }
    under
}

struct LeafFormLp {
    lp: EqualityLp,
    n_b: usize,
}

/// Monolithic program over leaf couplings. One variable per leaf pair; for
/// every interior node pair `(k, l)` carrying mass and every leaf `i` below
/// `k`, the mass sent from `i` into the subtree of `l` must be the
/// conditional share `P(i|k)` of the total mass coupled under `(k, l)`, and
/// symmetrically for leaves below `l`. A single normalization row closes the
/// system.
fn leaf_form_lp(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<LeafFormLp, NestedError> {
    let la = leaves_under(a);
    let lb = leaves_under(b);
    let n_a = a.leaves().len();
    let n_b = b.leaves().len();
    let num_vars = n_a * n_b;
    let cum = cumulative_tables(a, b, metric)?;
    let cost = cum[a.stages() - 1].clone();

    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); num_vars];
    let mut rhs: Vec<f64> = Vec::new();
    // Ordered rows keep column assembly deterministic.
    let mut push_row = |entries: &BTreeMap<usize, f64>, value: f64, rhs: &mut Vec<f64>| {
        let row = rhs.len();
        for (&var, &coef) in entries {
            if coef != 0.0 {
                cols[var].push((row, coef));
            }
        }
        rhs.push(value);
    };

    for t in 1..a.stages() {
        for &k in a.stage_nodes(t) {
            let pk = a.node(k).prob;
            if pk <= 0.0 {
                continue;
            }
            for &l in b.stage_nodes(t) {
                if b.node(l).prob <= 0.0 {
                    continue;
                }
                let ql = b.node(l).prob;
                for &i in &la[k.0] {
                    let share = a.node(a.leaves()[i]).prob / pk;
                    let mut entries: BTreeMap<usize, f64> = BTreeMap::new();
                    for &j in &lb[l.0] {
                        *entries.entry(i * n_b + j).or_insert(0.0) += 1.0;
                    }
                    for &i2 in &la[k.0] {
                        for &j2 in &lb[l.0] {
                            *entries.entry(i2 * n_b + j2).or_insert(0.0) -= share;
                        }
                    }
                    push_row(&entries, 0.0, &mut rhs);
                }
                for &j in &lb[l.0] {
                    let share = b.node(b.leaves()[j]).prob / ql;
                    let mut entries: BTreeMap<usize, f64> = BTreeMap::new();
                    for &i in &la[k.0] {
                        *entries.entry(i * n_b + j).or_insert(0.0) += 1.0;
                    }
                    for &i2 in &la[k.0] {
                        for &j2 in &lb[l.0] {
                            *entries.entry(i2 * n_b + j2).or_insert(0.0) -= share;
                        }
                    }
                    push_row(&entries, 0.0, &mut rhs);
                }
            }
        }
    }
    let all: BTreeMap<usize, f64> = (0..num_vars).map(|v| (v, 1.0)).collect();
    push_row(&all, 1.0, &mut rhs);

    Ok(LeafFormLp {
        lp: EqualityLp { num_vars, cols, rhs, cost },
        n_b,
    })
}

fn solve_or_status(lp: &EqualityLp) -> Result<crate::lp::LpSolution, NestedError> {
    match solve_equality_lp(lp) {
        LpOutcome::Optimal(s) => Ok(s),
        LpOutcome::Infeasible { residual } => Err(NestedError::Solver {
            status: format!("infeasible (residual {residual:e})"),
        }),
        LpOutcome::Unbounded => Err(NestedError::Solver { status: "unbounded".into() }),
        LpOutcome::IterationLimit => Err(NestedError::Solver {
            status: "iteration limit".into(),
        }),
    }
}

/// Nested distance from the monolithic leaf-coupling program, with the
/// default size cap.
pub fn nested_lp(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<NestedResult, NestedError> {
    nested_lp_with_cap(a, b, metric, DEFAULT_LP_CAP)
}

/// As [`nested_lp`] with an explicit bound on `leaves(A) * leaves(B)`.
pub fn nested_lp_with_cap(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
    cap: usize,
) -> Result<NestedResult, NestedError> {
    check_compatible(a, b, metric)?;
    let product = a.leaves().len() * b.leaves().len();
    if product > cap {
        return Err(NestedError::SizeCap { product, cap });
    }
    let built = leaf_form_lp(a, b, metric)?;
    let sol = solve_or_status(&built.lp)?;
    let n_b = built.n_b;
    let coupling: Vec<Vec<f64>> = sol
        .x
        .chunks(n_b)
        .map(|row| row.to_vec())
        .collect();
    Ok(NestedResult {
        value_p: sol.objective,
        value_root: metric.root_of(sol.objective),
        method: Method::Lp,
        table: None,
        leaf_coupling: Some(coupling),
        stage_terms: None,
    })
}

/// Distance between the subtrees rooted at `k` and `l`, conditional on
/// arriving there: the p-power value from the backward recursion table.
pub fn subtree_distance(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
    k: NodeId,
    l: NodeId,
) -> Result<f64, NestedError> {
    check_compatible(a, b, metric)?;
    check_node(a, k)?;
    check_node(b, l)?;
    let (sa, sb) = (a.node(k).stage, b.node(l).stage);
    if sa != sb {
        return Err(NestedError::PairStage { a: sa, b: sb });
    }
    let result = nested_dp(a, b, metric)?;
    let table = result.table.expect("recursion returns a table");
    Ok(table.value_for(a, b, k, l).expect("stages checked"))
}

/// Successor-form program over node-pair masses, restricted to the pair
/// subtree below `(root_a, root_b)` with `root_mass` entering at the top.
/// Variables are node pairs; each interior pair constrains its child-pair
/// masses to conditional marginals on both sides, plus one aggregation row
/// that is implied by either side but kept deliberately.
struct SuccessorLp {
    lp: EqualityLp,
    var_of: HashMap<(usize, usize), usize>,
}

fn successor_lp(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
    root_a: NodeId,
    root_b: NodeId,
    root_mass: f64,
) -> Result<SuccessorLp, NestedError> {
    let stages = a.stages();
    let mut pairs: Vec<(NodeId, NodeId)> = vec![(root_a, root_b)];
    let mut var_of: HashMap<(usize, usize), usize> = HashMap::new();
    var_of.insert((root_a.0, root_b.0), 0);
    let mut frontier = vec![(root_a, root_b)];
    let mut cost_by_var: Vec<f64> = vec![0.0];
    let root_stage = a.node(root_a).stage;

    let path_outcomes_a = |id: NodeId| -> Vec<Vec<f64>> {
        a.path_nodes(id).into_iter().map(|n| a.node(n).outcome.clone()).collect()
    };
    let path_outcomes_b = |id: NodeId| -> Vec<Vec<f64>> {
        b.path_nodes(id).into_iter().map(|n| b.node(n).outcome.clone()).collect()
    };

    for _ in root_stage..stages {
        let mut next = Vec::new();
        for &(k, l) in &frontier {
            for &r in a.children(k) {
                for &s in b.children(l) {
                    let var = pairs.len();
                    pairs.push((r, s));
                    var_of.insert((r.0, s.0), var);
                    cost_by_var.push(0.0);
                    next.push((r, s));
                }
            }
        }
        frontier = next;
    }
    // Leaf pairs carry the full scenario distance; interior pairs cost zero.
    for (var, &(k, l)) in pairs.iter().enumerate() {
        if a.node(k).stage == stages {
            cost_by_var[var] =
                metric.path_distance_p(&path_outcomes_a(k), &path_outcomes_b(l))?;
        }
    }

    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); pairs.len()];
    let mut rhs: Vec<f64> = Vec::new();
    {
        cols[0].push((0, 1.0));
        rhs.push(root_mass);
    }
    for (var, &(k, l)) in pairs.iter().enumerate() {
        if a.node(k).stage == stages {
            continue;
        }
        let pk = a.node(k).prob;
        let ql = b.node(l).prob;
        if pk <= 0.0 || ql <= 0.0 {
            continue;
        }
        for &r in a.children(k) {
            let share = a.node(r).prob / pk;
            let row = rhs.len();
            for &s in b.children(l) {
                cols[var_of[&(r.0, s.0)]].push((row, 1.0));
            }
            cols[var].push((row, -share));
            rhs.push(0.0);
        }
        for &s in b.children(l) {
            let share = b.node(s).prob / ql;
            let row = rhs.len();
            for &r in a.children(k) {
                cols[var_of[&(r.0, s.0)]].push((row, 1.0));
            }
            cols[var].push((row, -share));
            rhs.push(0.0);
        }
        let row = rhs.len();
        for &r in a.children(k) {
            for &s in b.children(l) {
                cols[var_of[&(r.0, s.0)]].push((row, 1.0));
            }
        }
        cols[var].push((row, -1.0));
        rhs.push(0.0);
    }

    Ok(SuccessorLp {
        lp: EqualityLp { num_vars: pairs.len(), cols, rhs, cost: cost_by_var },
        var_of,
    })
}

/// Deterministically shuffles constraint rows; diversifies the pivot order
/// without changing the program.
fn permute_rows(lp: &mut EqualityLp, rng: &mut impl rand::Rng) {
    let m = lp.rhs.len();
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    for col in lp.cols.iter_mut() {
        for entry in col.iter_mut() {
            entry.0 = perm[entry.0];
        }
    }
    let mut rhs = vec![0.0; m];
    for (old, &new) in perm.iter().enumerate() {
        rhs[new] = lp.rhs[old];
    }
    lp.rhs = rhs;
}

/// Outcome of cross-validating the two nested distance programs.
#[derive(Debug, Clone)]
pub struct ConstraintEquivalenceReport {
    pub value_leaf_form: f64,
    pub value_successor_form: f64,
    pub value_gap: f64,
    /// Successor-form row residual of the leaf-form optimum.
    pub residual_in_successor: f64,
    /// Leaf-form row residual of the successor-form optimum.
    pub residual_in_leaf: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Solves both formulations, each under a seeded row shuffle, and checks
/// that the optima agree and that each optimum satisfies the other
/// formulation's constraints.
pub fn check_constraint_equivalence(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
    seed: u64,
) -> Result<ConstraintEquivalenceReport, NestedError> {
    use rand::SeedableRng;
    check_compatible(a, b, metric)?;
    let product = a.leaves().len() * b.leaves().len();
    if product > CHECK_CAP {
        return Err(NestedError::SizeCap { product, cap: CHECK_CAP });
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut leaf_built = leaf_form_lp(a, b, metric)?;
    permute_rows(&mut leaf_built.lp, &mut rng);
    let leaf_sol = solve_or_status(&leaf_built.lp)?;

    let mut succ_built = successor_lp(a, b, metric, a.root(), b.root(), 1.0)?;
    permute_rows(&mut succ_built.lp, &mut rng);
    let succ_sol = solve_or_status(&succ_built.lp)?;

    let n_b = b.leaves().len();
    let la = leaves_under(a);
    let lb = leaves_under(b);

    // Node-pair masses induced by the leaf coupling.
    let pair_mass = |k: NodeId, l: NodeId, x: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut total = 0.0;
        for &i in &la[k.0] {
            for &j in &lb[l.0] {
                total += x(i, j);
            }
        }
        total
    };
    let leaf_x = |i: usize, j: usize| leaf_sol.x[i * n_b + j];
    let succ_leaf_x = |i: usize, j: usize| {
        let (li, lj) = (a.leaves()[i], b.leaves()[j]);
        succ_sol.x[succ_built.var_of[&(li.0, lj.0)]]
    };

    let mut residual_in_successor: f64 = 0.0;
    let mut residual_in_leaf: f64 = 0.0;
    for t in 1..a.stages() {
        for &k in a.stage_nodes(t) {
            let pk = a.node(k).prob;
            if pk <= 0.0 {
                continue;
            }
            for &l in b.stage_nodes(t) {
                let ql = b.node(l).prob;
                if ql <= 0.0 {
                    continue;
                }
                for (mass_fn, acc) in [
                    (&leaf_x as &dyn Fn(usize, usize) -> f64, &mut residual_in_successor),
                    (&succ_leaf_x, &mut residual_in_leaf),
                ] {
                    let here = pair_mass(k, l, mass_fn);
                    let mut agg = 0.0;
                    for &r in a.children(k) {
                        let share = a.node(r).prob / pk;
                        let mut sum = 0.0;
                        for &s in b.children(l) {
                            sum += pair_mass(r, s, mass_fn);
                        }
                        agg += sum;
                        *acc = acc.max((sum - share * here).abs());
                    }
                    for &s in b.children(l) {
                        let share = b.node(s).prob / ql;
                        let mut sum = 0.0;
                        for &r in a.children(k) {
                            sum += pair_mass(r, s, mass_fn);
                        }
                        *acc = acc.max((sum - share * here).abs());
                    }
                    *acc = acc.max((agg - here).abs());
                }
            }
        }
    }
    let leaf_total: f64 = leaf_sol.x.iter().sum();
    residual_in_successor = residual_in_successor.max((leaf_total - 1.0).abs());
    let succ_total: f64 = (0..a.leaves().len())
        .flat_map(|i| (0..n_b).map(move |j| (i, j)))
        .map(|(i, j)| succ_leaf_x(i, j))
        .sum();
    residual_in_leaf = residual_in_leaf.max((succ_total - 1.0).abs());

    let value_gap = (leaf_sol.objective - succ_sol.objective).abs();
    let tol = 1e-8;
    let scale = 1.0f64.max(leaf_sol.objective.abs());
    let pass = value_gap <= tol * scale
        && residual_in_successor <= tol
        && residual_in_leaf <= tol;
    Ok(ConstraintEquivalenceReport {
        value_leaf_form: leaf_sol.objective,
        value_successor_form: succ_sol.objective,
        value_gap,
        residual_in_successor,
        residual_in_leaf,
        tol,
        pass,
    })
}

/// Outcome of the mass-scaling check at one node pair.
#[derive(Debug, Clone)]
pub struct HomogeneityReport {
    pub alpha: f64,
    pub phi_alpha: f64,
    pub phi_one: f64,
    pub residual: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Solves the stage subproblem below `(k, l)` twice, with mass `alpha` and
/// mass 1 entering the pair, and verifies the optimal values scale linearly.
/// Both solves are independent programs; no scaling shortcut is taken.
pub fn check_homogeneity(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
    k: NodeId,
    l: NodeId,
    alpha: f64,
) -> Result<HomogeneityReport, NestedError> {
    check_compatible(a, b, metric)?;
    check_node(a, k)?;
    check_node(b, l)?;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(NestedError::BadScale { alpha });
    }
    let (sa, sb) = (a.node(k).stage, b.node(l).stage);
    if sa != sb {
        return Err(NestedError::PairStage { a: sa, b: sb });
    }
    if sa == a.stages() {
        return Err(NestedError::NotInterior { stage: sa });
    }
    let (pk, ql) = (a.node(k).prob, b.node(l).prob);
    if pk <= 0.0 || ql <= 0.0 {
        return Err(NestedError::NullMass { a: pk, b: ql });
    }
    let product = count_leaves_below(a, k) * count_leaves_below(b, l);
    if product > CHECK_CAP {
        return Err(NestedError::SizeCap { product, cap: CHECK_CAP });
    }

    let scaled = successor_lp(a, b, metric, k, l, alpha)?;
    let unit = successor_lp(a, b, metric, k, l, 1.0)?;
    let phi_alpha = solve_or_status(&scaled.lp)?.objective;
    let phi_one = solve_or_status(&unit.lp)?.objective;
    let residual = (phi_alpha - alpha * phi_one).abs();
    let tol = 1e-9 * 1.0f64.max(alpha);
    Ok(HomogeneityReport {
        alpha,
        phi_alpha,
        phi_one,
        residual,
        tol,
        pass: residual <= tol,
    })
}

fn count_leaves_below(tree: &ProbabilityTree, k: NodeId) -> usize {
    tree.leaves()
        .iter()
        .filter(|&&leaf| tree.is_descendant(leaf, k))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::Ground;
    use crate::transport::wasserstein_p;
    use crate::tree::TreeBuilder;

    fn metric_for(stages: usize) -> StagewiseMetric {
        StagewiseMetric::new(2.0, vec![1.0; stages], Ground::Euclidean).unwrap()
    }

    fn tree_a() -> ProbabilityTree {
        let mut t = TreeBuilder::new(1);
        let r = t.root(vec![0.0], 1.0);
        let k = t.child(r, vec![1.0], 0.4);
        let k2 = t.child(r, vec![2.0], 0.6);
        t.child(k, vec![1.0], 0.08);
        t.child(k, vec![2.0], 0.32);
        t.child(k2, vec![1.0], 0.3);
        t.child(k2, vec![3.0], 0.3);
        t.build().unwrap()
    }

    fn tree_b() -> ProbabilityTree {
        let mut t = TreeBuilder::new(1);
        let r = t.root(vec![0.0], 1.0);
        let k = t.child(r, vec![0.5], 0.5);
        let k2 = t.child(r, vec![2.5], 0.5);
        t.child(k, vec![0.5], 0.25);
        t.child(k, vec![1.5], 0.25);
        t.child(k2, vec![2.0], 0.2);
        t.child(k2, vec![3.5], 0.3);
        t.build().unwrap()
    }

    #[test]
    fn two_stage_nested_is_plain_transport() {
        let mut ta = TreeBuilder::new(1);
        let r = ta.root(vec![0.0], 1.0);
        ta.child(r, vec![0.0], 0.3);
        ta.child(r, vec![1.0], 0.7);
        let a = ta.build().unwrap();

        let mut tb = TreeBuilder::new(1);
        let r = tb.root(vec![0.0], 1.0);
        tb.child(r, vec![0.5], 0.5);
        tb.child(r, vec![2.0], 0.5);
        let b = tb.build().unwrap();

        let metric = metric_for(2);
        let dp = nested_dp(&a, &b, &metric).unwrap();
        let w = wasserstein_p(
            &a.stage_marginal(2).unwrap(),
            &b.stage_marginal(2).unwrap(),
            &metric,
            2,
        )
        .unwrap();
        assert!((dp.value_p - w).abs() < 1e-12, "{} vs {w}", dp.value_p);
        assert_eq!(dp.value_root, dp.value_p.sqrt());
    }

    #[test]
    fn dp_and_lp_agree_on_three_stage_trees() {
        let (a, b) = (tree_a(), tree_b());
        let metric = metric_for(3);
        let dp = nested_dp(&a, &b, &metric).unwrap();
        let lp = nested_lp(&a, &b, &metric).unwrap();
        assert!(
            (dp.value_p - lp.value_p).abs() <= 1e-8 * (1.0 + dp.value_p.abs()),
            "dp {} vs lp {}",
            dp.value_p,
            lp.value_p
        );
        let coupling = lp.leaf_coupling.as_ref().unwrap();
        let total: f64 = coupling.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-9);
        // Leaf marginals of the coupling match the leaf masses.
        for (i, &leaf) in a.leaves().iter().enumerate() {
            let s: f64 = coupling[i].iter().sum();
            assert!((s - a.node(leaf).prob).abs() < 1e-8);
        }
        for (j, &leaf) in b.leaves().iter().enumerate() {
            let s: f64 = coupling.iter().map(|row| row[j]).sum();
            assert!((s - b.node(leaf).prob).abs() < 1e-8);
        }
    }

    #[test]
    fn dp_base_row_is_exact_scenario_distance() {
        let (a, b) = (tree_a(), tree_b());
        let metric = metric_for(3);
        let dp = nested_dp(&a, &b, &metric).unwrap();
        let table = dp.table.unwrap();
        let base = table.stage_table(3);
        for (ai, sa) in a.scenarios().iter().enumerate() {
            for (bi, sb) in b.scenarios().iter().enumerate() {
                let want = metric.scenario_distance_p(sa, sb).unwrap();
                assert_eq!(base.value_at(ai, bi), want);
            }
        }
    }

    #[test]
    fn identical_trees_have_zero_distance() {
        let a = tree_a();
        let metric = metric_for(3);
        let dp = nested_dp(&a, &a, &metric).unwrap();
        assert_eq!(dp.value_p, 0.0);
        let lp = nested_lp(&a, &a, &metric).unwrap();
        assert!(lp.value_p.abs() < 1e-12);
    }

    #[test]
    fn subtree_distance_reads_the_table() {
        let (a, b) = (tree_a(), tree_b());
        let metric = metric_for(3);
        let dp = nested_dp(&a, &b, &metric).unwrap();
        let table = dp.table.unwrap();
        let v = subtree_distance(&a, &b, &metric, NodeId(1), NodeId(2)).unwrap();
        assert_eq!(v, table.value_for(&a, &b, NodeId(1), NodeId(2)).unwrap());
        assert!(matches!(
            subtree_distance(&a, &b, &metric, NodeId(0), NodeId(3)),
            Err(NestedError::PairStage { a: 1, b: 3 })
        ));
    }

    #[test]
    fn constraint_forms_agree() {
        let (a, b) = (tree_a(), tree_b());
        let metric = metric_for(3);
        for seed in [0u64, 7, 99] {
            let report = check_constraint_equivalence(&a, &b, &metric, seed).unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
            let dp = nested_dp(&a, &b, &metric).unwrap();
            assert!((report.value_leaf_form - dp.value_p).abs() < 1e-8);
        }
    }

    #[test]
    fn homogeneity_scales_the_stage_subproblem() {
        let (a, b) = (tree_a(), tree_b());
        let metric = metric_for(3);
        for alpha in [0.0, 0.3, 1.0, 2.5, 10.0] {
            let report =
                check_homogeneity(&a, &b, &metric, NodeId(1), NodeId(2), alpha).unwrap();
            assert!(report.pass, "alpha {alpha}: {report:?}");
        }
        assert!(matches!(
            check_homogeneity(&a, &b, &metric, NodeId(3), NodeId(3), 1.0),
            Err(NestedError::NotInterior { stage: 3 })
        ));
        assert!(matches!(
            check_homogeneity(&a, &b, &metric, NodeId(1), NodeId(2), -1.0),
            Err(NestedError::BadScale { .. })
        ));
    }

    #[test]
    fn zero_mass_branches_do_not_disturb_values() {
        // Same shape as tree_a but one branch carries no mass.
        let mut t = TreeBuilder::new(1);
        let r = t.root(vec![0.0], 1.0);
        let k = t.child(r, vec![1.0], 1.0);
        let k2 = t.child(r, vec![2.0], 0.0);
        t.child(k, vec![1.0], 0.2);
        t.child(k, vec![2.0], 0.8);
        t.child(k2, vec![1.0], 0.0);
        let zeroed = t.build().unwrap();

        let b = tree_b();
        let metric = metric_for(3);
        let dp = nested_dp(&zeroed, &b, &metric).unwrap();
        let lp = nested_lp(&zeroed, &b, &metric).unwrap();
        assert!((dp.value_p - lp.value_p).abs() < 1e-8);
        let table = dp.table.unwrap();
        let stage2 = table.stage_table(2);
        // The dead pair is flagged, and the live part still prices normally.
        assert!(stage2.mass_free[stage2.b_nodes.len()]);
        assert!(!stage2.mass_free[0]);
        assert!(dp.value_p.is_finite());
    }

    #[test]
    fn shape_errors_are_reported() {
        let a = tree_a();
        let mut tb = TreeBuilder::new(1);
        let r = tb.root(vec![0.0], 1.0);
        tb.child(r, vec![1.0], 1.0);
        let b2 = tb.build().unwrap();
        let metric = metric_for(3);
        assert!(matches!(
            nested_dp(&a, &b2, &metric),
            Err(NestedError::StageMismatch { a: 3, b: 2 })
        ));
        let short = metric_for(2);
        assert!(matches!(
            nested_dp(&a, &tree_b(), &short),
            Err(NestedError::MetricStages { metric: 2, trees: 3 })
        ));
        assert!(matches!(
            nested_lp_with_cap(&a, &tree_b(), &metric, 3),
            Err(NestedError::SizeCap { product: 16, cap: 3 })
        ));
    }

    #[test]
    fn equivalence_check_survives_row_shuffles() {
        // Shuffled row orders force very different pivot sequences through
        // the same two programs; the optima must keep agreeing.
        let (a, b) = (tree_a(), tree_b());
        let metric = metric_for(3);
        let mut first = None;
        for seed in 0..8u64 {
            let report = check_constraint_equivalence(&a, &b, &metric, seed).unwrap();
            assert!(report.pass, "seed {seed}: {report:?}");
            let value = *first.get_or_insert(report.value_leaf_form);
            assert!((report.value_leaf_form - value).abs() < 1e-9, "seed {seed}");
        }
    }
}
