//! Stagewise independence: detection, the fast nested distance, and
//! support reduction.
//!
//! A tree is stagewise independent when every node of a stage branches into
//! the same child outcomes with the same conditional probabilities. For two
//! such trees the nested distance collapses: it equals the weighted sum of
//! plain Wasserstein distances between the per-stage marginals, one small
//! transport solve per stage instead of one per node pair. That identity is
//! what [`nested_swi`] computes, [`subtree_identity_check`] verifies against
//! the backward recursion, and [`reduce_swi`] exploits to shrink per-stage
//! supports while reporting the exact induced distance.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metric::{Ground, MetricError, StagewiseMetric};
use crate::nested::{nested_dp, Method, NestedError, NestedResult, NodePairTable};
use crate::transport::{wasserstein_p, TransportError};
use crate::tree::{
    outcome_key, NodeId, ProbabilityTree, StageMarginal, TreeBuilder, TreeError,
};

/// Default tolerance on conditional probabilities when detecting stagewise
/// independence.
pub const DEFAULT_SWI_TOL: f64 = 1e-9;

/// Hard bound on nodes materialized by [`build_swi_tree`].
pub const BUILD_NODE_CAP: usize = 5_000_000;

const KMEANS_MAX_ITER: usize = 200;
const SWAP_MAX_SWEEPS: usize = 200;

/// Why a tree failed the stagewise independence test.
#[derive(Debug, Clone)]
pub struct SwiViolation {
    pub stage: usize,
    pub reference: i64,
    pub node: i64,
    pub detail: String,
}

impl fmt::Display for SwiViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage {}: node {} disagrees with node {}: {}",
            self.stage, self.node, self.reference, self.detail
        )
    }
}

#[derive(Debug, Error)]
pub enum SwiError {
    #[error("specification has no stages")]
    EmptySpec,
    #[error("stage 1 must hold a single point, found {count}")]
    RootSupport { count: usize },
    #[error("stage {stage} marginal invalid: {source}")]
    BadStage { stage: usize, source: TreeError },
    #[error("stage {stage} has dimension {got}, stage 1 has {expected}")]
    StageDimension { stage: usize, got: usize, expected: usize },
    #[error("specification would build {nodes} nodes, cap is {cap}")]
    TooLarge { nodes: usize, cap: usize },
    #[error("tree is not stagewise independent: {0}")]
    NotSwi(SwiViolation),
    #[error("{tree} tree is not stagewise independent: {violation}")]
    NotSwiIn {
        tree: &'static str,
        violation: SwiViolation,
    },
    #[error("{targets} reduction targets supplied for {stages} stages")]
    TargetCount { targets: usize, stages: usize },
    #[error("stage {stage} target {target} out of range 1..={support}")]
    TargetRange { stage: usize, target: usize, support: usize },
    #[error("clustering could not keep stage {stage} centroids distinct")]
    DegenerateClustering { stage: usize },
    #[error(transparent)]
    Nested(#[from] NestedError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Per-stage marginals defining a stagewise independent tree. Stage 1 is the
/// deterministic root.
#[derive(Debug, Clone, PartialEq)]
pub struct SwiSpec {
    pub stages: Vec<StageMarginal>,
}

impl SwiSpec {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn dimension(&self) -> usize {
        self.stages.first().map_or(0, |m| m.dimension())
    }

    pub fn support_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|m| m.len()).collect()
    }

    /// Structural and mass checks for every stage.
    pub fn check(&self, tol: f64) -> Result<(), SwiError> {
        if self.stages.is_empty() {
            return Err(SwiError::EmptySpec);
        }
        if self.stages[0].len() != 1 {
            return Err(SwiError::RootSupport { count: self.stages[0].len() });
        }
        let dim = self.stages[0].dimension();
        for (i, marginal) in self.stages.iter().enumerate() {
            marginal
                .check(tol)
                .map_err(|source| SwiError::BadStage { stage: i + 1, source })?;
            if marginal.dimension() != dim {
                return Err(SwiError::StageDimension {
                    stage: i + 1,
                    got: marginal.dimension(),
                    expected: dim,
                });
            }
        }
        Ok(())
    }
}

/// Materializes the stagewise independent tree of a specification: every
/// node of stage `t` fans out into the full stage `t+1` support.
pub fn build_swi_tree(spec: &SwiSpec) -> Result<ProbabilityTree, SwiError> {
    spec.check(DEFAULT_SWI_TOL)?;
    let mut nodes = 1usize;
    let mut level = 1usize;
    for marginal in &spec.stages[1..] {
        level = level.saturating_mul(marginal.len());
        nodes = nodes.saturating_add(level);
        if nodes > BUILD_NODE_CAP {
            return Err(SwiError::TooLarge { nodes, cap: BUILD_NODE_CAP });
        }
    }

    let mut builder = TreeBuilder::new(spec.dimension());
    let root = builder.root(spec.stages[0].points[0].clone(), spec.stages[0].probs[0]);
    let mut frontier = vec![(root, spec.stages[0].probs[0])];
    for marginal in &spec.stages[1..] {
        let mut next = Vec::with_capacity(frontier.len() * marginal.len());
        for &(parent, mass) in &frontier {
            for (point, &q) in marginal.points.iter().zip(&marginal.probs) {
                let child = builder.child(parent, point.clone(), mass * q);
                next.push((child, mass * q));
            }
        }
        frontier = next;
    }
    Ok(builder.build()?)
}

/// Child outcome distribution of one node: distinct outcomes with summed
/// conditional masses, first-seen order.
fn child_signature(
    tree: &ProbabilityTree,
    k: NodeId,
) -> (Vec<(Vec<f64>, f64)>, HashMap<Vec<u64>, usize>) {
    let pk = tree.node(k).prob;
    let mut entries: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    for &c in tree.children(k) {
        let node = tree.node(c);
        let key = outcome_key(&node.outcome);
        let cond = node.prob / pk;
        match index.get(&key) {
            Some(&i) => entries[i].1 += cond,
            None => {
                index.insert(key, entries.len());
                entries.push((node.outcome.clone(), cond));
            }
        }
    }
    (entries, index)
}

/// Tests stagewise independence: within each stage, all positive-mass nodes
/// must branch into identical child outcomes (bit-exact) with conditional
/// probabilities equal within `tol`. Zero-mass nodes are skipped. On success
/// the recovered per-stage distributions are returned.
pub fn detect_swi(tree: &ProbabilityTree, tol: f64) -> Result<SwiSpec, SwiError> {
    let root = tree.node(tree.root());
    let mut stages = vec![StageMarginal::new(
        vec![root.outcome.clone()],
        vec![root.prob],
    )?];

    for t in 1..tree.stages() {
        let positives: Vec<NodeId> = tree
            .stage_nodes(t)
            .iter()
            .copied()
            .filter(|&k| tree.node(k).prob > 0.0)
            .collect();
        let Some(&reference) = positives.first() else {
            let first = tree.stage_nodes(t)[0];
            return Err(SwiError::NotSwi(SwiViolation {
                stage: t,
                reference: tree.node(first).id,
                node: tree.node(first).id,
                detail: "stage carries no positive-probability node".into(),
            }));
        };
        let (ref_entries, ref_index) = child_signature(tree, reference);
        let ref_id = tree.node(reference).id;

        for &k in &positives[1..] {
            let (entries, index) = child_signature(tree, k);
            let node_id = tree.node(k).id;
            for (outcome, cond) in &entries {
                match ref_index.get(&outcome_key(outcome)) {
                    None => {
                        return Err(SwiError::NotSwi(SwiViolation {
                            stage: t + 1,
                            reference: ref_id,
                            node: node_id,
                            detail: format!(
                                "child outcome {outcome:?} does not occur below node {ref_id}"
                            ),
                        }));
                    }
                    Some(&i) => {
                        let want = ref_entries[i].1;
                        if (cond - want).abs() > tol {
                            return Err(SwiError::NotSwi(SwiViolation {
                                stage: t + 1,
                                reference: ref_id,
                                node: node_id,
                                detail: format!(
                                    "child outcome {outcome:?} has conditional probability \
                                     {cond} here but {want} below node {ref_id}"
                                ),
                            }));
                        }
                    }
                }
            }
            if entries.len() != ref_entries.len() {
                let missing = ref_entries
                    .iter()
                    .find(|(outcome, _)| !index.contains_key(&outcome_key(outcome)))
                    .expect("some reference outcome is missing");
                return Err(SwiError::NotSwi(SwiViolation {
                    stage: t + 1,
                    reference: ref_id,
                    node: node_id,
                    detail: format!(
                        "child outcome {:?} below node {ref_id} is missing here",
                        missing.0
                    ),
                }));
            }
        }

        let (points, probs) = ref_entries.into_iter().unzip();
        stages.push(StageMarginal::new(points, probs)?);
    }
    Ok(SwiSpec { stages })
}

/// Weighted sum of per-stage Wasserstein p-power distances between the two
/// trees' stage marginals, with the per-stage weighted terms. No
/// independence check; equals the nested distance only for stagewise
/// independent inputs.
pub fn stagewise_wasserstein_sum(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<(f64, Vec<f64>), SwiError> {
    crate::nested::check_compatible(a, b, metric)?;
    let mut terms = Vec::with_capacity(a.stages());
    let mut total = 0.0;
    for t in 1..=a.stages() {
        let pm = a.stage_marginal(t)?;
        let qm = b.stage_marginal(t)?;
        let w = metric.weight(t) * wasserstein_p(&pm, &qm, metric, t)?;
        terms.push(w);
        total += w;
    }
    Ok((total, terms))
}

/// Nested distance along the stagewise independent fast path: both trees
/// must pass [`detect_swi`]; the value is the weighted sum of per-stage
/// Wasserstein distances.
pub fn nested_swi(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<NestedResult, SwiError> {
    crate::nested::check_compatible(a, b, metric)?;
    detect_swi(a, DEFAULT_SWI_TOL).map_err(|e| tag_side(e, "first"))?;
    detect_swi(b, DEFAULT_SWI_TOL).map_err(|e| tag_side(e, "second"))?;
    let (value_p, terms) = stagewise_wasserstein_sum(a, b, metric)?;
    Ok(NestedResult {
        value_p,
        value_root: metric.root_of(value_p),
        method: Method::Swi,
        table: None,
        leaf_coupling: None,
        stage_terms: Some(terms),
    })
}

fn tag_side(e: SwiError, tree: &'static str) -> SwiError {
    match e {
        SwiError::NotSwi(violation) => SwiError::NotSwiIn { tree, violation },
        other => other,
    }
}

/// One node pair's subtree identity: the recursion table value against the
/// split into realized head distance plus stagewise tail.
#[derive(Debug, Clone)]
pub struct SubtreeIdentityReport {
    pub stage: usize,
    pub a_node: i64,
    pub b_node: i64,
    pub table_value: f64,
    pub split_value: f64,
    pub residual: f64,
    pub tol: f64,
    pub pass: bool,
}

struct IdentityContext {
    table: NodePairTable,
    /// `tail[t]` is the weighted stagewise sum over stages strictly after
    /// `t`, so `tail[stages]` is zero.
    tail: Vec<f64>,
}

fn identity_context(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<IdentityContext, SwiError> {
    detect_swi(a, DEFAULT_SWI_TOL).map_err(|e| tag_side(e, "first"))?;
    detect_swi(b, DEFAULT_SWI_TOL).map_err(|e| tag_side(e, "second"))?;
    let (_, terms) = stagewise_wasserstein_sum(a, b, metric)?;
    let stages = a.stages();
    let mut tail = vec![0.0; stages + 1];
    for t in (1..=stages).rev() {
        tail[t - 1] = tail[t] + terms[t - 1];
    }
    let result = nested_dp(a, b, metric)?;
    Ok(IdentityContext {
        table: result.table.expect("recursion returns a table"),
        tail: tail[1..].to_vec(),
    })
}

fn identity_report(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
    ctx: &IdentityContext,
    k: NodeId,
    l: NodeId,
) -> Result<SubtreeIdentityReport, SwiError> {
    let t = a.node(k).stage;
    let mut head = 0.0;
    let pa = a.path_nodes(k);
    let pb = b.path_nodes(l);
    for tau in 1..=t {
        head += metric.weight(tau)
            * metric.ground_distance_p(
                tau,
                &a.node(pa[tau - 1]).outcome,
                &b.node(pb[tau - 1]).outcome,
            )?;
    }
    // tail[t - 1] sums the weighted stage terms for stages t+1..=T because
    // the slice dropped the leading entry.
    let split_value = head + ctx.tail[t - 1];
    let table_value = ctx
        .table
        .value_for(a, b, k, l)
        .expect("stages checked before lookup");
    let residual = (table_value - split_value).abs();
    let tol = 1e-8;
    Ok(SubtreeIdentityReport {
        stage: t,
        a_node: a.node(k).id,
        b_node: b.node(l).id,
        table_value,
        split_value,
        residual,
        tol,
        pass: residual <= tol,
    })
}

/// For stagewise independent trees, checks at one node pair that the
/// recursion table value equals the distance already realized on the paths
/// to `(k, l)` plus the stagewise sum over the remaining stages.
pub fn subtree_identity_check(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
    k: NodeId,
    l: NodeId,
) -> Result<SubtreeIdentityReport, SwiError> {
    crate::nested::check_compatible(a, b, metric)?;
    let (sa, sb) = (a.node(k).stage, b.node(l).stage);
    if sa != sb {
        return Err(SwiError::Nested(NestedError::PairStage { a: sa, b: sb }));
    }
    let ctx = identity_context(a, b, metric)?;
    identity_report(a, b, metric, &ctx, k, l)
}

/// [`subtree_identity_check`] over every node pair of every stage.
pub fn subtree_identity_check_all(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
) -> Result<Vec<SubtreeIdentityReport>, SwiError> {
    crate::nested::check_compatible(a, b, metric)?;
    let ctx = identity_context(a, b, metric)?;
    let mut reports = Vec::new();
    for t in 1..=a.stages() {
        for &k in a.stage_nodes(t) {
            for &l in b.stage_nodes(t) {
                reports.push(identity_report(a, b, metric, &ctx, k, l)?);
            }
        }
    }
    Ok(reports)
}

/// Weighted Lloyd clustering outcome.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub cluster_weights: Vec<f64>,
    /// Weighted objective recorded after every assignment step;
    /// non-increasing by construction.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted k-means with greedy farthest-point seeding from a seeded random
/// first pick. Deterministic for a fixed seed. Requires distinct points and
/// `1 <= k <= points.len()`.
pub fn weighted_kmeans(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    seed: u64,
) -> KmeansResult {
    assert!(!points.is_empty(), "no points to cluster");
    assert_eq!(points.len(), weights.len(), "one weight per point");
    assert!(k >= 1 && k <= points.len(), "cluster count out of range");
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let total: f64 = weights.iter().sum();
    let first = if total > 0.0 {
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = n - 1;
        for (i, &w) in weights.iter().enumerate() {
            pick -= w;
            if pick <= 0.0 {
                chosen = i;
                break;
            }
        }
        chosen
    } else {
        0
    };

    let mut centroids: Vec<Vec<f64>> = vec![points[first].clone()];
    let mut min_d2: Vec<f64> = points.iter().map(|p| d2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for i in 1..n {
            if min_d2[i] > min_d2[far] {
                far = i;
            }
        }
        centroids.push(points[far].clone());
        let newest = centroids.last().expect("just pushed");
        for i in 0..n {
            min_d2[i] = min_d2[i].min(d2(&points[i], newest));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for iter in 0..KMEANS_MAX_ITER {
        iterations = iter + 1;
        let mut objective = 0.0;
        let mut changed = iter == 0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = d2(&points[i], &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = d2(&points[i], centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
            objective += weights[i] * best_d;
        }
        trace.push(objective);
        if !changed {
            converged = true;
            break;
        }

        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        for i in 0..n {
            let c = assignment[i];
            mass[c] += weights[i];
            for (s, &x) in sums[c].iter_mut().zip(&points[i]) {
                *s += weights[i] * x;
            }
        }
        let mut empties = Vec::new();
        for c in 0..k {
            if mass[c] > 0.0 {
                for (v, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *v = s / mass[c];
                }
            } else {
                empties.push(c);
            }
        }
        // A starved cluster restarts on the heaviest outlier; moving an
        // unused centroid cannot raise the objective measured at the next
        // assignment.
        for c in empties {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..n {
                let contrib = weights[i] * d2(&points[i], &centroids[assignment[i]]);
                let taken = centroids
                    .iter()
                    .any(|cent| outcome_key(cent) == outcome_key(&points[i]));
                if taken {
                    continue;
                }
                if best.map_or(true, |(_, b)| contrib > b) {
                    best = Some((i, contrib));
                }
            }
            if let Some((i, _)) = best {
                centroids[c] = points[i].clone();
            }
        }
    }

    let mut cluster_weights = vec![0.0; k];
    for i in 0..n {
        cluster_weights[assignment[i]] += weights[i];
    }
    KmeansResult {
        centroids,
        assignment,
        cluster_weights,
        objective_trace: trace,
        iterations,
        converged,
    }
}

/// Outcome of [`reduce_swi`]: the reduced specification, unweighted
/// per-stage Wasserstein p-power values against the originals, and their
/// weighted total.
#[derive(Debug, Clone)]
pub struct ReductionResult {
    pub reduced: SwiSpec,
    pub stage_values: Vec<f64>,
    pub total_p: f64,
}

/// Shrinks each stage marginal to `targets[t]` support points. Quadratic
/// Euclidean stages use weighted k-means on the support; any other
/// order or ground metric falls back to best-improvement swap search over
/// support subsets. Every per-stage value is an exact transport solve
/// between the original and reduced marginals, so the weighted total is the
/// nested distance between the induced trees.
pub fn reduce_swi(
    spec: &SwiSpec,
    targets: &[usize],
    metric: &StagewiseMetric,
    seed: u64,
) -> Result<ReductionResult, SwiError> {
    spec.check(DEFAULT_SWI_TOL)?;
    let stages = spec.stage_count();
    if metric.stages() != stages {
        return Err(SwiError::Nested(NestedError::MetricStages {
            metric: metric.stages(),
            trees: stages,
        }));
    }
    if targets.len() != stages {
        return Err(SwiError::TargetCount { targets: targets.len(), stages });
    }
    for (i, (&target, marginal)) in targets.iter().zip(&spec.stages).enumerate() {
        if target == 0 || target > marginal.len() {
            return Err(SwiError::TargetRange {
                stage: i + 1,
                target,
                support: marginal.len(),
            });
        }
    }

    let mut reduced = Vec::with_capacity(stages);
    let mut stage_values = Vec::with_capacity(stages);
    for t in 1..=stages {
        let marginal = &spec.stages[t - 1];
        let target = targets[t - 1];
        if target == marginal.len() {
            reduced.push(marginal.clone());
            stage_values.push(0.0);
            continue;
        }
        let small = if metric.p() == 2.0 && metric.ground(t) == Ground::Euclidean {
            kmeans_stage(marginal, target, stage_seed(seed, t))
                .ok_or(SwiError::DegenerateClustering { stage: t })?
        } else {
            swap_stage(marginal, target, metric, t, stage_seed(seed, t))?
        };
        let value = wasserstein_p(marginal, &small, metric, t)?;
        reduced.push(small);
        stage_values.push(value);
    }
    let total_p = stage_values
        .iter()
        .enumerate()
        .map(|(i, v)| metric.weight(i + 1) * v)
        .sum();
    Ok(ReductionResult {
        reduced: SwiSpec { stages: reduced },
        stage_values,
        total_p,
    })
}

fn stage_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// K-means reduction of one marginal: several reseeded restarts, keeping
/// the lowest final objective among runs with distinct centroids. `None` if
/// every run collapses centroids.
fn kmeans_stage(marginal: &StageMarginal, target: usize, seed: u64) -> Option<StageMarginal> {
    let mut best: Option<(f64, StageMarginal)> = None;
    for attempt in 0..8 {
        let km = weighted_kmeans(
            &marginal.points,
            &marginal.probs,
            target,
            seed.wrapping_add(attempt),
        );
        let mut keys: Vec<Vec<u64>> = km.centroids.iter().map(|c| outcome_key(c)).collect();
        keys.sort();
        keys.dedup();
        if keys.len() != km.centroids.len() {
            continue;
        }
        let objective = *km.objective_trace.last().expect("trace is never empty");
        if best.as_ref().map_or(true, |(b, _)| objective < *b) {
            if let Ok(m) = StageMarginal::new(km.centroids, km.cluster_weights) {
                best = Some((objective, m));
            }
        }
    }
    best.map(|(_, m)| m)
}

/// Subset selection by best-improvement swaps under the stage ground
/// metric; kept for orders and grounds where the mean is not the right
/// representative.
fn swap_stage(
    marginal: &StageMarginal,
    target: usize,
    metric: &StagewiseMetric,
    t: usize,
    seed: u64,
) -> Result<StageMarginal, SwiError> {
    let n = marginal.len();
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            cost[i][j] = metric.ground_distance_p(t, &marginal.points[i], &marginal.points[j])?;
        }
    }
    let objective = |members: &[usize]| -> f64 {
        (0..n)
            .map(|i| {
                let best = members
                    .iter()
                    .map(|&s| cost[i][s])
                    .fold(f64::INFINITY, f64::min);
                marginal.probs[i] * best
            })
            .sum()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = marginal.probs.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut first = n - 1;
    for (i, &w) in marginal.probs.iter().enumerate() {
        pick -= w;
        if pick <= 0.0 {
            first = i;
            break;
        }
    }
    let mut members = vec![first];
    let mut in_set = vec![false; n];
    in_set[first] = true;
    while members.len() < target {
        let mut far = usize::MAX;
        let mut far_d = -1.0;
        for i in 0..n {
            if in_set[i] {
                continue;
            }
            let d = members
                .iter()
                .map(|&s| cost[i][s])
                .fold(f64::INFINITY, f64::min);
            if d > far_d {
                far_d = d;
                far = i;
            }
        }
        members.push(far);
        in_set[far] = true;
    }
    members.sort_unstable();

    let mut current = objective(&members);
    for _ in 0..SWAP_MAX_SWEEPS {
        let mut best: Option<(usize, usize, f64)> = None;
        for mi in 0..members.len() {
            for cand in 0..n {
                if in_set[cand] {
                    continue;
                }
                let mut trial = members.clone();
                trial[mi] = cand;
                let value = objective(&trial);
                if value < current - 1e-15 && best.map_or(true, |(_, _, b)| value < b) {
                    best = Some((mi, cand, value));
                }
            }
        }
        let Some((mi, cand, value)) = best else {
            break;
        };
        in_set[members[mi]] = false;
        in_set[cand] = true;
        members[mi] = cand;
        members.sort_unstable();
        current = value;
    }

    let mut probs = vec![0.0; target];
    for i in 0..n {
        let mut assigned = 0;
        let mut best = f64::INFINITY;
        for (mi, &s) in members.iter().enumerate() {
            if cost[i][s] < best {
                best = cost[i][s];
                assigned = mi;
            }
        }
        probs[assigned] += marginal.probs[i];
    }
    let points = members.iter().map(|&s| marginal.points[s].clone()).collect();
    Ok(StageMarginal::new(points, probs)?)
}
