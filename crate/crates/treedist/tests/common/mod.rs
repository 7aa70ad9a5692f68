//! Seeded generators shared by the integration suites. Every instance is a
//! pure function of its seed, so a failing case reproduces from the message.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use treedist::metric::{Ground, StagewiseMetric};
use treedist::swi::SwiSpec;
use treedist::tree::{ProbabilityTree, StageMarginal, TreeBuilder};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Positive masses summing to one, bounded away from zero.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// General tree with the root at stage 1 and random fan-outs in
/// `1..=max_children` below it.
pub fn random_tree(
    rng: &mut ChaCha8Rng,
    stages: usize,
    max_children: usize,
    dim: usize,
) -> ProbabilityTree {
    assert!(stages >= 1 && max_children >= 1);
    let mut builder = TreeBuilder::new(dim);
    let root = builder.root(random_point(rng, dim), 1.0);
    let mut frontier = vec![(root, 1.0f64)];
    for _ in 2..=stages {
        let mut next = Vec::new();
        for &(parent, mass) in &frontier {
            let fan = rng.gen_range(1..=max_children);
            for share in random_probs(rng, fan) {
                let prob = mass * share;
                let child = builder.child(parent, random_point(rng, dim), prob);
                next.push((child, prob));
            }
        }
        frontier = next;
    }
    builder.build().expect("generated tree is well formed")
}

/// Stagewise independent specification: a deterministic root marginal
/// followed by stages of `1..=max_support` distinct random points.
pub fn random_swi_spec(
    rng: &mut ChaCha8Rng,
    stages: usize,
    max_support: usize,
    dim: usize,
) -> SwiSpec {
    assert!(stages >= 1 && max_support >= 1);
    let mut out = Vec::with_capacity(stages);
    out.push(StageMarginal::new(vec![random_point(rng, dim)], vec![1.0]).unwrap());
    for _ in 2..=stages {
        let support = rng.gen_range(1..=max_support);
        let points: Vec<Vec<f64>> = (0..support).map(|_| random_point(rng, dim)).collect();
        let probs = random_probs(rng, support);
        out.push(StageMarginal::new(points, probs).unwrap());
    }
    SwiSpec { stages: out }
}

/// Order drawn from {1, 2}, positive per-stage weights, mixed grounds.
pub fn random_metric(rng: &mut ChaCha8Rng, stages: usize) -> StagewiseMetric {
    let p = if rng.gen_bool(0.5) { 1.0 } else { 2.0 };
    let weights: Vec<f64> = (0..stages).map(|_| rng.gen_range(0.5..2.0)).collect();
    let ground = if rng.gen_bool(0.25) { Ground::Abs } else { Ground::Euclidean };
    StagewiseMetric::new(p, weights, ground).unwrap()
}
