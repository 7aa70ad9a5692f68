//! Staged probability trees.
//!
//! A tree with `T` stages has its root at stage 1 and every leaf at stage
//! `T`. Each node carries an outcome vector in `R^d` and an unconditional
//! probability. Structural invariants (single root, stage increments, leaf
//! depth, dimensions, finiteness) are enforced at construction; probability
//! mass invariants are checked separately by [`ProbabilityTree::validate`]
//! so that defective inputs can still be loaded and reported on.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Index of a node within its tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("tree must have at least one stage")]
    ZeroStages,
    #[error("outcome dimension must be at least 1")]
    ZeroDimension,
    #[error("tree has no nodes")]
    Empty,
    #[error("duplicate node id {id}")]
    DuplicateId { id: i64 },
    #[error("node {id} references unknown parent {parent}")]
    UnknownParent { id: i64, parent: i64 },
    #[error("expected exactly one root node, found {count}")]
    RootCount { count: usize },
    #[error("root node {id} must be at stage 1, found stage {stage}")]
    RootStage { id: i64, stage: usize },
    #[error("node {id} at stage {stage} does not directly follow parent at stage {parent_stage}")]
    StageOrder {
        id: i64,
        stage: usize,
        parent_stage: usize,
    },
    #[error("node {id} at stage {stage} exceeds declared stage count {stages}")]
    StageBound {
        id: i64,
        stage: usize,
        stages: usize,
    },
    #[error("node {id} is a leaf at stage {stage}, but all leaves must sit at stage {stages}")]
    LeafDepth {
        id: i64,
        stage: usize,
        stages: usize,
    },
    #[error("node {id} outcome has dimension {got}, tree dimension is {expected}")]
    OutcomeDimension { id: i64, got: usize, expected: usize },
    #[error("node {id} carries a non-finite probability or outcome")]
    NonFinite { id: i64 },
    #[error("stage {stage} out of range 1..={stages}")]
    StageRange { stage: usize, stages: usize },
    #[error("conditioning on node {id} with probability {prob}")]
    NullConditioning { id: i64, prob: f64 },
    #[error("tree product requires equal outcome dimensions, got {a} and {b}")]
    ProductDimension { a: usize, b: usize },
    #[error("marginal has {points} points but {probs} probabilities")]
    MarginalShape { points: usize, probs: usize },
    #[error("marginal is empty")]
    MarginalEmpty,
    #[error("marginal point {index} has dimension {got}, expected {expected}")]
    MarginalDimension {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("marginal entry {index} is non-finite")]
    MarginalNonFinite { index: usize },
    #[error("marginal probability {prob} at entry {index} is negative")]
    MarginalNegative { index: usize, prob: f64 },
    #[error("marginal probabilities sum to {sum}, off by more than {tol}")]
    MarginalMass { sum: f64, tol: f64 },
    #[error("marginal points {first} and {second} coincide")]
    MarginalDuplicate { first: usize, second: usize },
}

/// Node data as supplied by a caller, with external ids instead of indices.
#[derive(Debug, Clone)]
pub struct RawNode {
    pub id: i64,
    pub parent: Option<i64>,
    pub stage: usize,
    pub outcome: Vec<f64>,
    pub prob: f64,
}

/// A materialized tree node. `prob` is unconditional mass, `id` the external
/// label preserved from input.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: i64,
    pub parent: Option<NodeId>,
    pub stage: usize,
    pub outcome: Vec<f64>,
    pub prob: f64,
}

/// A staged probability tree with all structural invariants established.
#[derive(Debug, Clone)]
pub struct ProbabilityTree {
    stages: usize,
    dimension: usize,
    nodes: Vec<Node>,
    children: Vec<Vec<NodeId>>,
    stage_nodes: Vec<Vec<NodeId>>,
    stage_pos: Vec<usize>,
    root: NodeId,
}

impl ProbabilityTree {
    /// Builds a tree from raw nodes, checking every structural invariant.
    /// Node order is preserved; parents may appear after children.
    pub fn from_parts(
        stages: usize,
        dimension: usize,
        raw: Vec<RawNode>,
    ) -> Result<Self, TreeError> {
        if stages == 0 {
            return Err(TreeError::ZeroStages);
        }
        if dimension == 0 {
            return Err(TreeError::ZeroDimension);
        }
        if raw.is_empty() {
            return Err(TreeError::Empty);
        }

        let mut index_of: HashMap<i64, NodeId> = HashMap::with_capacity(raw.len());
        for (i, node) in raw.iter().enumerate() {
            if index_of.insert(node.id, NodeId(i)).is_some() {
                return Err(TreeError::DuplicateId { id: node.id });
            }
        }

        let mut nodes = Vec::with_capacity(raw.len());
        let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); raw.len()];
        let mut root = None;
        for (i, node) in raw.iter().enumerate() {
            if !node.prob.is_finite() || node.outcome.iter().any(|x| !x.is_finite()) {
                return Err(TreeError::NonFinite { id: node.id });
            }
            if node.outcome.len() != dimension {
                return Err(TreeError::OutcomeDimension {
                    id: node.id,
                    got: node.outcome.len(),
                    expected: dimension,
                });
            }
            if node.stage == 0 || node.stage > stages {
                return Err(TreeError::StageBound {
                    id: node.id,
                    stage: node.stage,
                    stages,
                });
            }
            let parent = match node.parent {
                None => {
                    if node.stage != 1 {
                        return Err(TreeError::RootStage {
                            id: node.id,
                            stage: node.stage,
                        });
                    }
                    if root.replace(NodeId(i)).is_some() {
                        return Err(TreeError::RootCount { count: 2 });
                    }
                    None
                }
                Some(pid) => {
                    let p = *index_of
                        .get(&pid)
                        .ok_or(TreeError::UnknownParent { id: node.id, parent: pid })?;
                    children[p.0].push(NodeId(i));
                    Some(p)
                }
            };
            nodes.push(Node {
                id: node.id,
                parent,
                stage: node.stage,
                outcome: node.outcome.clone(),
                prob: node.prob,
            });
        }
        let root = root.ok_or(TreeError::RootCount { count: 0 })?;

        for (i, node) in nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                let ps = nodes[p.0].stage;
                if node.stage != ps + 1 {
                    return Err(TreeError::StageOrder {
                        id: node.id,
                        stage: node.stage,
                        parent_stage: ps,
                    });
                }
            }
            if children[i].is_empty() && node.stage != stages {
                return Err(TreeError::LeafDepth {
                    id: node.id,
                    stage: node.stage,
                    stages,
                });
            }
        }

        let mut stage_nodes = vec![Vec::new(); stages];
        let mut stage_pos = vec![0usize; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            stage_pos[i] = stage_nodes[node.stage - 1].len();
            stage_nodes[node.stage - 1].push(NodeId(i));
        }

        Ok(ProbabilityTree {
            stages,
            dimension,
            nodes,
            children,
            stage_nodes,
            stage_pos,
            root,
        })
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.0]
    }

    /// Nodes at stage `t` (1-based), in input order.
    ///
    /// Panics when `t` is out of range; use [`ProbabilityTree::stages`] to
    /// bound it.
    pub fn stage_nodes(&self, t: usize) -> &[NodeId] {
        assert!(
            t >= 1 && t <= self.stages,
            "stage {t} out of range 1..={}",
            self.stages
        );
        &self.stage_nodes[t - 1]
    }

    /// Position of a node within its own stage.
    pub fn stage_position(&self, id: NodeId) -> usize {
        self.stage_pos[id.0]
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.stage_nodes[self.stages - 1]
    }

    /// Ancestor of `node` at stage `t`; requires `t <= stage(node)`.
    pub fn ancestor_at_stage(&self, node: NodeId, t: usize) -> NodeId {
        let mut cur = node;
        while self.nodes[cur.0].stage > t {
            cur = self.nodes[cur.0]
                .parent
                .expect("non-root node has a parent");
        }
        assert_eq!(self.nodes[cur.0].stage, t, "stage {t} above node");
        cur
    }

    /// Whether `m` lies in the subtree rooted at `k` (including `m == k`).
    pub fn is_descendant(&self, m: NodeId, k: NodeId) -> bool {
        let ks = self.nodes[k.0].stage;
        if self.nodes[m.0].stage < ks {
            return false;
        }
        self.ancestor_at_stage(m, ks) == k
    }

    /// Conditional probability `P(m)/P(k)` when `m` is a descendant of `k`,
    /// otherwise 0. Errors when `P(k)` is not positive.
    pub fn conditional_probability(&self, m: NodeId, k: NodeId) -> Result<f64, TreeError> {
        let pk = self.nodes[k.0].prob;
        if pk <= 0.0 {
            return Err(TreeError::NullConditioning {
                id: self.nodes[k.0].id,
                prob: pk,
            });
        }
        if self.is_descendant(m, k) {
            Ok(self.nodes[m.0].prob / pk)
        } else {
            Ok(0.0)
        }
    }

    /// Nodes on the root path to `node`, root first, `node` last.
    pub fn path_nodes(&self, node: NodeId) -> Vec<NodeId> {
        let mut path = Vec::with_capacity(self.nodes[node.0].stage);
        let mut cur = Some(node);
        while let Some(id) = cur {
            path.push(id);
            cur = self.nodes[id.0].parent;
        }
        path.reverse();
        path
    }

    /// All scenarios, in leaf order.
    pub fn scenarios(&self) -> Vec<ScenarioPath> {
        self.leaves()
            .iter()
            .map(|&leaf| ScenarioPath {
                leaf,
                outcomes: self
                    .path_nodes(leaf)
                    .into_iter()
                    .map(|id| self.nodes[id.0].outcome.clone())
                    .collect(),
                probability: self.nodes[leaf.0].prob,
            })
            .collect()
    }

    /// Marginal distribution of the process at stage `t`: node masses grouped
    /// over identical outcomes, first-seen order.
    pub fn stage_marginal(&self, t: usize) -> Result<StageMarginal, TreeError> {
        if t == 0 || t > self.stages {
            return Err(TreeError::StageRange {
                stage: t,
                stages: self.stages,
            });
        }
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut probs: Vec<f64> = Vec::new();
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for &id in &self.stage_nodes[t - 1] {
            let node = &self.nodes[id.0];
            match seen.entry(outcome_key(&node.outcome)) {
                std::collections::hash_map::Entry::Occupied(e) => probs[*e.get()] += node.prob,
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(points.len());
                    points.push(node.outcome.clone());
                    probs.push(node.prob);
                }
            }
        }
        StageMarginal::new(points, probs)
    }

    /// Checks probability mass invariants against `tol` and reports every
    /// violation found.
    pub fn validate(&self, tol: f64) -> ValidationReport {
        let mut violations = Vec::new();
        let root = &self.nodes[self.root.0];
        if (root.prob - 1.0).abs() > tol {
            violations.push(MassViolation::RootProb {
                node: root.id,
                prob: root.prob,
            });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.prob < -tol {
                violations.push(MassViolation::NegativeProb {
                    node: node.id,
                    prob: node.prob,
                });
            }
            if !self.children[i].is_empty() {
                let sum: f64 = self.children[i].iter().map(|c| self.nodes[c.0].prob).sum();
                if (sum - node.prob).abs() > tol {
                    violations.push(MassViolation::ChildSum {
                        node: node.id,
                        sum,
                        prob: node.prob,
                    });
                }
            }
        }
        let leaf_sum: f64 = self.leaves().iter().map(|l| self.nodes[l.0].prob).sum();
        if (leaf_sum - 1.0).abs() > tol {
            violations.push(MassViolation::LeafSum { sum: leaf_sum });
        }
        ValidationReport { tol, violations }
    }

    /// The conditional tree seen from node `k`: the root path down to `k`
    /// carries probability 1 stage by stage, the subtree below `k` carries
    /// probabilities conditional on `k`. Stage count and outcome values are
    /// unchanged. Errors when `P(k)` is not positive.
    pub fn path_extended_subtree(&self, k: NodeId) -> Result<ProbabilityTree, TreeError> {
        let pk = self.nodes[k.0].prob;
        if pk <= 0.0 {
            return Err(TreeError::NullConditioning {
                id: self.nodes[k.0].id,
                prob: pk,
            });
        }
        let mut raw = Vec::new();
        let mut next_id = 0i64;
        let mut map: HashMap<NodeId, i64> = HashMap::new();
        for id in self.path_nodes(k) {
            let node = &self.nodes[id.0];
            raw.push(RawNode {
                id: next_id,
                parent: if node.stage == 1 { None } else { Some(next_id - 1) },
                stage: node.stage,
                outcome: node.outcome.clone(),
                prob: 1.0,
            });
            map.insert(id, next_id);
            next_id += 1;
        }
        for t in self.nodes[k.0].stage + 1..=self.stages {
            for &id in &self.stage_nodes[t - 1] {
                if !self.is_descendant(id, k) {
                    continue;
                }
                let node = &self.nodes[id.0];
                let parent = map[&node.parent.expect("descendant has a parent")];
                raw.push(RawNode {
                    id: next_id,
                    parent: Some(parent),
                    stage: t,
                    outcome: node.outcome.clone(),
                    prob: node.prob / pk,
                });
                map.insert(id, next_id);
                next_id += 1;
            }
        }
        ProbabilityTree::from_parts(self.stages, self.dimension, raw)
    }
}

/// Grafts tree `b` below every leaf of tree `a`.
///
/// The root of `b` is a placeholder whose outcome is discarded: each child
/// subtree of `b`'s root is attached directly under every leaf of `a`, with
/// unconditional probabilities scaled by the leaf mass. The result has
/// `stages(a) + stages(b) - 1` stages, and its scenarios are exactly the
/// concatenations of an `a`-scenario with a `b`-scenario minus `b`'s root
/// outcome. A single-node `b` is the identity.
pub fn tree_product(a: &ProbabilityTree, b: &ProbabilityTree) -> Result<ProbabilityTree, TreeError> {
    if a.dimension != b.dimension {
        return Err(TreeError::ProductDimension {
            a: a.dimension,
            b: b.dimension,
        });
    }
    let stages = a.stages + b.stages - 1;
    let mut raw = Vec::with_capacity(a.node_count() + a.leaves().len() * b.node_count());
    let mut next_id = 0i64;
    let mut a_map: HashMap<NodeId, i64> = HashMap::new();
    for (i, node) in a.nodes.iter().enumerate() {
        raw.push(RawNode {
            id: next_id,
            parent: node.parent.map(|p| a_map[&p]),
            stage: node.stage,
            outcome: node.outcome.clone(),
            prob: node.prob,
        });
        a_map.insert(NodeId(i), next_id);
        next_id += 1;
    }
    for &leaf in a.leaves() {
        let leaf_prob = a.nodes[leaf.0].prob;
        let mut b_map: HashMap<NodeId, i64> = HashMap::new();
        b_map.insert(b.root, a_map[&leaf]);
        for t in 2..=b.stages {
            for &id in b.stage_nodes(t) {
                let node = &b.nodes[id.0];
                raw.push(RawNode {
                    id: next_id,
                    parent: Some(b_map[&node.parent.expect("non-root node has a parent")]),
                    stage: a.stages + t - 1,
                    outcome: node.outcome.clone(),
                    prob: leaf_prob * node.prob,
                });
                b_map.insert(id, next_id);
                next_id += 1;
            }
        }
    }
    ProbabilityTree::from_parts(stages, a.dimension, raw)
}

/// Incremental tree construction; all validation happens in
/// [`TreeBuilder::build`].
#[derive(Debug, Default)]
pub struct TreeBuilder {
    dimension: usize,
    raw: Vec<RawNode>,
}

impl TreeBuilder {
    pub fn new(dimension: usize) -> Self {
        TreeBuilder {
            dimension,
            raw: Vec::new(),
        }
    }

    pub fn root(&mut self, outcome: Vec<f64>, prob: f64) -> NodeId {
        self.push(None, 1, outcome, prob)
    }

    /// `parent` must be an id returned by this builder.
    pub fn child(&mut self, parent: NodeId, outcome: Vec<f64>, prob: f64) -> NodeId {
        let stage = self.raw[parent.0].stage + 1;
        self.push(Some(parent.0 as i64), stage, outcome, prob)
    }

    fn push(&mut self, parent: Option<i64>, stage: usize, outcome: Vec<f64>, prob: f64) -> NodeId {
        let id = self.raw.len();
        self.raw.push(RawNode {
            id: id as i64,
            parent,
            stage,
            outcome,
            prob,
        });
        NodeId(id)
    }

    /// Finishes the tree; the stage count is the deepest stage added.
    pub fn build(self) -> Result<ProbabilityTree, TreeError> {
        let stages = self.raw.iter().map(|n| n.stage).max().unwrap_or(0);
        ProbabilityTree::from_parts(stages, self.dimension, self.raw)
    }
}

/// One root-to-leaf path: the stage outcomes and the leaf mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPath {
    pub leaf: NodeId,
    pub outcomes: Vec<Vec<f64>>,
    pub probability: f64,
}

/// A discrete distribution on `R^d`: distinct support points with masses.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMarginal {
    pub points: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

impl StageMarginal {
    /// Shape checks only; mass checks live in [`StageMarginal::check`].
    pub fn new(points: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self, TreeError> {
        if points.len() != probs.len() {
            return Err(TreeError::MarginalShape {
                points: points.len(),
                probs: probs.len(),
            });
        }
        if points.is_empty() {
            return Err(TreeError::MarginalEmpty);
        }
        let dim = points[0].len();
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(TreeError::MarginalDimension {
                    index: i,
                    got: p.len(),
                    expected: dim,
                });
            }
        }
        Ok(StageMarginal { points, probs })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.points.first().map_or(0, |p| p.len())
    }

    /// Verifies finiteness, nonnegativity, unit mass within `tol`, and
    /// distinct support points.
    pub fn check(&self, tol: f64) -> Result<(), TreeError> {
        let mut sum = 0.0;
        for (i, (point, &prob)) in self.points.iter().zip(&self.probs).enumerate() {
            if !prob.is_finite() || point.iter().any(|x| !x.is_finite()) {
                return Err(TreeError::MarginalNonFinite { index: i });
            }
            if prob < 0.0 {
                return Err(TreeError::MarginalNegative { index: i, prob });
            }
            sum += prob;
        }
        if (sum - 1.0).abs() > tol {
            return Err(TreeError::MarginalMass { sum, tol });
        }
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for (i, point) in self.points.iter().enumerate() {
            if let Some(&first) = seen.get(&outcome_key(point)) {
                return Err(TreeError::MarginalDuplicate { first, second: i });
            }
            seen.insert(outcome_key(point), i);
        }
        Ok(())
    }
}

/// A single probability mass violation discovered by validation.
#[derive(Debug, Clone, PartialEq)]
pub enum MassViolation {
    RootProb { node: i64, prob: f64 },
    ChildSum { node: i64, sum: f64, prob: f64 },
    NegativeProb { node: i64, prob: f64 },
    LeafSum { sum: f64 },
}

impl MassViolation {
    pub fn kind(&self) -> &'static str {
        match self {
            MassViolation::RootProb { .. } => "root_prob",
            MassViolation::ChildSum { .. } => "child_sum",
            MassViolation::NegativeProb { .. } => "negative_prob",
            MassViolation::LeafSum { .. } => "leaf_sum",
        }
    }

    /// Magnitude of the violation.
    pub fn residual(&self) -> f64 {
        match self {
            MassViolation::RootProb { prob, .. } => (prob - 1.0).abs(),
            MassViolation::ChildSum { sum, prob, .. } => (sum - prob).abs(),
            MassViolation::NegativeProb { prob, .. } => prob.abs(),
            MassViolation::LeafSum { sum } => (sum - 1.0).abs(),
        }
    }

    /// External id of the offending node, if the violation is node-local.
    pub fn node(&self) -> Option<i64> {
        match self {
            MassViolation::RootProb { node, .. }
            | MassViolation::ChildSum { node, .. }
            | MassViolation::NegativeProb { node, .. } => Some(*node),
            MassViolation::LeafSum { .. } => None,
        }
    }
}

impl fmt::Display for MassViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MassViolation::RootProb { node, prob } => {
                write!(f, "root node {node} has probability {prob}, expected 1")
            }
            MassViolation::ChildSum { node, sum, prob } => {
                write!(f, "children of node {node} sum to {sum}, node mass is {prob}")
            }
            MassViolation::NegativeProb { node, prob } => {
                write!(f, "node {node} has negative probability {prob}")
            }
            MassViolation::LeafSum { sum } => {
                write!(f, "leaf probabilities sum to {sum}, expected 1")
            }
        }
    }
}

/// Outcome of [`ProbabilityTree::validate`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub tol: f64,
    pub violations: Vec<MassViolation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            write!(f, "probability mass invariants hold within {}", self.tol)
        } else {
            writeln!(f, "{} violation(s) at tolerance {}:", self.violations.len(), self.tol)?;
            for v in &self.violations {
                writeln!(f, "  {v}")?;
            }
            Ok(())
        }
    }
}

/// Hash key identifying an outcome vector bit-exactly, with both zero signs
/// collapsed.
pub(crate) fn outcome_key(xs: &[f64]) -> Vec<u64> {
    xs.iter()
        .map(|&x| if x == 0.0 { 0.0f64.to_bits() } else { x.to_bits() })
        .collect()
}
