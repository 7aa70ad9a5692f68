//! Acceptance gate: ten end-to-end criteria, one test and one printed
//! PASS line each. Run with `cargo test --test acceptance -- --nocapture`
//! to see the per-criterion summaries.

mod common;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use treedist::json::{load_tree, tree_to_json};
use treedist::metric::{Ground, StagewiseMetric};
use treedist::nested::{
    check_constraint_equivalence, check_homogeneity, nested_dp, nested_lp,
};
use treedist::swi::{
    build_swi_tree, detect_swi, nested_swi, reduce_swi, stagewise_wasserstein_sum,
    subtree_identity_check_all, weighted_kmeans, SwiSpec,
};
use treedist::transport::{
    check_mass_row_redundancy, solve_transport, wasserstein_p, TransportProblem,
};
use treedist::tree::{ProbabilityTree, StageMarginal};

/// Criterion 2 and 3 share these instances: general (not necessarily
/// stagewise independent) pairs small enough for the monolithic programs.
fn capped_pair(seed: u64) -> (ProbabilityTree, ProbabilityTree, StagewiseMetric) {
    let mut r = common::rng(0xC2_0000 + seed);
    loop {
        let stages = r.gen_range(2..=4usize);
        let dim = r.gen_range(1..=2usize);
        let a = common::random_tree(&mut r, stages, 3, dim);
        let b = common::random_tree(&mut r, stages, 3, dim);
        if a.leaves().len() * b.leaves().len() <= 2_000 {
            let metric = common::random_metric(&mut r, stages);
            return (a, b, metric);
        }
    }
}

#[test]
fn criterion_01_swi_collapse_matches_dp() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut r = common::rng(0xC1_0000 + seed);
        let stages = *[3usize, 4, 5].choose(&mut r).unwrap();
        let dim = r.gen_range(1..=2usize);
        let a = build_swi_tree(&common::random_swi_spec(&mut r, stages, 4, dim)).unwrap();
        let b = build_swi_tree(&common::random_swi_spec(&mut r, stages, 4, dim)).unwrap();
        let metric = common::random_metric(&mut r, stages);

        let fast = nested_swi(&a, &b, &metric).unwrap().value_p;
        let slow = nested_dp(&a, &b, &metric).unwrap().value_p;
        let gap = (fast - slow).abs();
        let tol = 1e-8 * 1.0f64.max(slow.abs());
        assert!(gap <= tol, "seed {seed}: swi {fast} vs dp {slow}, gap {gap:.3e}");
        worst = worst.max(gap);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, budget 60 s");
    println!(
        "criterion 01 stagewise sum vs dp on 100 pairs: PASS (worst gap {worst:.3e}, {elapsed:.2?})"
    );
}

#[test]
fn criterion_02_dp_matches_monolithic_lp() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..30u64 {
        let (a, b, metric) = capped_pair(seed);
        let dp = nested_dp(&a, &b, &metric).unwrap().value_p;
        let lp = nested_lp(&a, &b, &metric).unwrap().value_p;
        let gap = (dp - lp).abs();
        let tol = 1e-8 * 1.0f64.max(dp.abs());
        assert!(gap <= tol, "seed {seed}: dp {dp} vs lp {lp}, gap {gap:.3e}");
        worst = worst.max(gap);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, budget 120 s");
    println!(
        "criterion 02 dp vs monolithic lp on 30 pairs: PASS (worst gap {worst:.3e}, {elapsed:.2?})"
    );
}

#[test]
fn criterion_03_leaf_and_successor_forms_are_equivalent() {
    let mut worst_gap = 0.0f64;
    let mut worst_residual = 0.0f64;
    for seed in 0..30u64 {
        let (a, b, metric) = capped_pair(seed);
        let report = check_constraint_equivalence(&a, &b, &metric, seed).unwrap();
        assert!(
            report.value_gap <= 1e-8 * 1.0f64.max(report.value_leaf_form.abs()),
            "seed {seed}: optima differ by {:.3e}",
            report.value_gap
        );
        assert!(
            report.residual_in_successor <= 1e-8 && report.residual_in_leaf <= 1e-8,
            "seed {seed}: cross residuals {:.3e} / {:.3e}",
            report.residual_in_successor,
            report.residual_in_leaf
        );
        assert!(report.pass, "seed {seed}: report failed");
        worst_gap = worst_gap.max(report.value_gap);
        worst_residual = worst_residual
            .max(report.residual_in_successor)
            .max(report.residual_in_leaf);
    }
    println!(
        "criterion 03 constraint equivalence on 30 pairs: PASS (worst gap {worst_gap:.3e}, worst residual {worst_residual:.3e})"
    );
}

#[test]
fn criterion_04_local_problems_are_positively_homogeneous() {
    let alphas = [0.0, 0.37, 1.0, 2.5];
    let mut checked = 0usize;
    for seed in 0..20u64 {
        let mut r = common::rng(0xC4_0000 + seed);
        let stages = r.gen_range(2..=4usize);
        let dim = r.gen_range(1..=2usize);
        let a = common::random_tree(&mut r, stages, 3, dim);
        let b = common::random_tree(&mut r, stages, 3, dim);
        let metric = common::random_metric(&mut r, stages);

        let t = r.gen_range(1..stages);
        let k = *a.stage_nodes(t).choose(&mut r).unwrap();
        let l = *b.stage_nodes(t).choose(&mut r).unwrap();
        for alpha in alphas {
            let report = check_homogeneity(&a, &b, &metric, k, l, alpha).unwrap();
            assert!(
                report.pass,
                "seed {seed}, stage {t}, alpha {alpha}: residual {:.3e} over {:.3e}",
                report.residual, report.tol
            );
            checked += 1;
        }
    }
    println!("criterion 04 positive homogeneity at {checked} scaled solves: PASS");
}

#[test]
fn criterion_05_subtree_identity_holds_everywhere() {
    let mut pairs_checked = 0usize;
    for seed in 0..20u64 {
        let mut r = common::rng(0xC5_0000 + seed);
        let stages = r.gen_range(2..=4usize);
        let dim = r.gen_range(1..=2usize);
        let a = build_swi_tree(&common::random_swi_spec(&mut r, stages, 3, dim)).unwrap();
        let b = build_swi_tree(&common::random_swi_spec(&mut r, stages, 3, dim)).unwrap();
        let metric = common::random_metric(&mut r, stages);

        for report in subtree_identity_check_all(&a, &b, &metric).unwrap() {
            assert!(
                report.pass,
                "seed {seed}, stage {}, pair ({}, {}): table {} vs split {}",
                report.stage, report.a_node, report.b_node, report.table_value,
                report.split_value
            );
            pairs_checked += 1;
        }
    }
    println!("criterion 05 subtree identity at {pairs_checked} node pairs: PASS");
}

fn for_each_permutation(k: usize, idx: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if k == idx.len() {
        f(idx);
        return;
    }
    for i in k..idx.len() {
        idx.swap(k, i);
        for_each_permutation(k + 1, idx, f);
        idx.swap(k, i);
    }
}

#[test]
fn criterion_06_solver_matches_permutation_oracle() {
    let mut r = common::rng(0xC6_0000);
    let mut worst = 0.0f64;
    for round in 0..50 {
        let n = r.gen_range(1..=6usize);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| r.gen_range(0.0..5.0)).collect())
            .collect();
        let uniform = vec![1.0 / n as f64; n];
        let problem = TransportProblem {
            cost: cost.clone(),
            supply: uniform.clone(),
            demand: uniform,
        };

        let plan = solve_transport(&problem).unwrap();
        // At uniform equal marginals the polytope's vertices are the
        // permutation matrices, so the optimum is a cheapest permutation.
        let mut best = f64::INFINITY;
        let mut idx: Vec<usize> = (0..n).collect();
        for_each_permutation(0, &mut idx, &mut |perm| {
            let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            best = best.min(total);
        });
        best /= n as f64;

        let gap = (plan.objective - best).abs();
        assert!(gap <= 1e-10, "round {round}: solver {} vs oracle {best}", plan.objective);
        worst = worst.max(gap);

        let redundancy = check_mass_row_redundancy(&problem).unwrap();
        assert!(
            redundancy.pass,
            "round {round}: optimum moved by {:.3e} when the total mass row was added",
            redundancy.gap
        );
    }
    println!("criterion 06 permutation oracle and redundant row on 50 problems: PASS (worst gap {worst:.3e})");
}

#[test]
fn criterion_07_two_stage_nested_reduces_to_wasserstein() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut r = common::rng(0xC7_0000 + seed);
        let dim = r.gen_range(1..=2usize);
        let p = if r.gen_bool(0.5) { 1.0 } else { 2.0 };
        let metric = StagewiseMetric::new(p, vec![1.0, 1.0], Ground::Euclidean).unwrap();

        // Shared root outcome: all distance lives in the second stage.
        let root = common::random_point(&mut r, dim);
        let build = |r: &mut rand_chacha::ChaCha8Rng| {
            let fan = r.gen_range(1..=6usize);
            let mut builder = treedist::tree::TreeBuilder::new(dim);
            let top = builder.root(root.clone(), 1.0);
            for share in common::random_probs(r, fan) {
                builder.child(top, common::random_point(r, dim), share);
            }
            builder.build().unwrap()
        };
        let a = build(&mut r);
        let b = build(&mut r);

        let nested = nested_dp(&a, &b, &metric).unwrap().value_p;
        let flat = wasserstein_p(
            &a.stage_marginal(2).unwrap(),
            &b.stage_marginal(2).unwrap(),
            &metric,
            2,
        )
        .unwrap();
        let gap = (nested - flat).abs();
        assert!(gap <= 1e-10, "seed {seed}: nested {nested} vs wasserstein {flat}");
        worst = worst.max(gap);
    }
    println!("criterion 07 two-stage collapse on 20 pairs: PASS (worst gap {worst:.3e})");
}

#[test]
fn criterion_08_perturbed_fixture_defeats_the_stagewise_sum() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let independent = load_tree(&dir.join("independent.json")).unwrap();
    let perturbed = load_tree(&dir.join("perturbed.json")).unwrap();
    let metric = StagewiseMetric::default_for(3).unwrap();

    detect_swi(&independent, 1e-9).unwrap();
    assert!(
        detect_swi(&perturbed, 1e-9).is_err(),
        "perturbed fixture must fail detection"
    );

    let dp = nested_dp(&independent, &perturbed, &metric).unwrap().value_p;
    let (sum, _) = stagewise_wasserstein_sum(&independent, &perturbed, &metric).unwrap();
    let gap = (dp - sum).abs();
    assert!(gap > 1e-3, "dp {dp} vs stagewise sum {sum}: gap {gap:.3e} too small");
    println!(
        "criterion 08 dependence witness: PASS (dp {dp:.6}, stagewise sum {sum:.6}, gap {gap:.3e})"
    );
}

/// Cheapest 2-cluster split by full enumeration: every nonempty proper
/// subset against its complement, clusters replaced by weighted means.
fn two_partition_oracle(points: &[f64], weights: &[f64]) -> f64 {
    let n = points.len();
    let sse = |mask: u32| -> f64 {
        let mut mass = 0.0;
        let mut mean = 0.0;
        for i in 0..n {
            if mask & (1 << i) != 0 {
                mass += weights[i];
                mean += weights[i] * points[i];
            }
        }
        mean /= mass;
        (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| weights[i] * (points[i] - mean) * (points[i] - mean))
            .sum()
    };
    let full = (1u32 << n) - 1;
    let mut best = f64::INFINITY;
    for mask in 1..full {
        best = best.min(sse(mask) + sse(full & !mask));
    }
    best
}

#[test]
fn criterion_09_reduction_is_exact_and_monotone() {
    // Uniform four-point stage reduced to two points under the quadratic
    // Euclidean metric.
    let points = [0.0, 1.0, 2.0, 3.0];
    let weights = [0.25; 4];
    let spec = SwiSpec {
        stages: vec![
            StageMarginal::new(vec![vec![0.0]], vec![1.0]).unwrap(),
            StageMarginal::new(points.iter().map(|&x| vec![x]).collect(), weights.to_vec())
                .unwrap(),
        ],
    };
    let metric = StagewiseMetric::new(2.0, vec![1.0, 1.0], Ground::Euclidean).unwrap();

    let oracle = two_partition_oracle(&points, &weights);
    assert!((oracle - 0.25).abs() <= 1e-12, "oracle gave {oracle}");

    let result = reduce_swi(&spec, &[1, 2], &metric, 7).unwrap();
    let stage_value = result.stage_values[1];
    assert!(
        (stage_value - oracle).abs() <= 1e-9,
        "stage value {stage_value} vs oracle {oracle}"
    );

    // The clustering path must never let the objective rise.
    let kpoints: Vec<Vec<f64>> = points.iter().map(|&x| vec![x]).collect();
    for seed in 0..10u64 {
        let km = weighted_kmeans(&kpoints, &weights, 2, seed);
        for pair in km.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "trace rose: {:?}", km.objective_trace);
        }
    }

    // The reported total must be the nested distance between the trees the
    // original and reduced specifications induce.
    let mut worst = 0.0f64;
    let mut check_total = |spec: &SwiSpec, targets: &[usize], seed: u64| {
        let result = reduce_swi(spec, targets, &metric_for_spec(spec, seed), seed).unwrap();
        let a = build_swi_tree(spec).unwrap();
        let b = build_swi_tree(&result.reduced).unwrap();
        let dp = nested_dp(&a, &b, &metric_for_spec(spec, seed)).unwrap().value_p;
        let gap = (result.total_p - dp).abs();
        assert!(
            gap <= 1e-8 * 1.0f64.max(dp.abs()),
            "total {} vs rebuilt nested {dp}",
            result.total_p
        );
        worst = worst.max(gap);
    };
    check_total(&spec, &[1, 2], 7);
    for seed in 0..5u64 {
        let mut r = common::rng(0xC9_0000 + seed);
        let random_spec = common::random_swi_spec(&mut r, 3, 4, 2);
        let targets: Vec<usize> = random_spec
            .support_sizes()
            .iter()
            .map(|&s| r.gen_range(1..=s))
            .collect();
        check_total(&random_spec, &targets, seed);
    }

    println!(
        "criterion 09 reduction oracle 0.25, monotone k-means, rebuilt nested total: PASS (worst total gap {worst:.3e})"
    );
}

fn metric_for_spec(spec: &SwiSpec, seed: u64) -> StagewiseMetric {
    let mut r = common::rng(0x9C_0000 + seed);
    common::random_metric(&mut r, spec.stage_count())
}

#[test]
fn criterion_10_swi_is_an_order_of_magnitude_faster() {
    let mut r = common::rng(0xCA_0000);
    let dim = 2;
    let stages = 7;
    let make_spec = |r: &mut rand_chacha::ChaCha8Rng| {
        let mut out = vec![StageMarginal::new(vec![common::random_point(r, dim)], vec![1.0]).unwrap()];
        for _ in 2..=stages {
            let points: Vec<Vec<f64>> = (0..3).map(|_| common::random_point(r, dim)).collect();
            out.push(StageMarginal::new(points, common::random_probs(r, 3)).unwrap());
        }
        SwiSpec { stages: out }
    };
    let a = build_swi_tree(&make_spec(&mut r)).unwrap();
    let b = build_swi_tree(&make_spec(&mut r)).unwrap();
    assert_eq!(a.leaves().len(), 729);

    let dir = tempfile::tempdir().unwrap();
    let a_path = dir.path().join("a.json");
    let b_path = dir.path().join("b.json");
    std::fs::write(&a_path, tree_to_json(&a).render()).unwrap();
    std::fs::write(&b_path, tree_to_json(&b).render()).unwrap();

    let output = std::process::Command::new(env!("CARGO_BIN_EXE_treedist"))
        .arg("nested")
        .arg(&a_path)
        .arg(&b_path)
        .arg("--bench")
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "bench run failed: {}",
        String::from_utf8_lossy(&output.stdout)
    );
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let bench = &report["bench"];
    let speedup = bench["speedup"].as_f64().unwrap();
    let dp_value = bench["dp_value_p"].as_f64().unwrap();
    let swi_value = bench["swi_value_p"].as_f64().unwrap();
    assert!(
        (dp_value - swi_value).abs() <= 1e-8 * 1.0f64.max(dp_value.abs()),
        "bench values disagree: dp {dp_value} vs swi {swi_value}"
    );
    assert!(speedup >= 10.0, "speedup {speedup:.1} below 10x");
    println!(
        "criterion 10 bench on branching-3 pair with {} leaves: PASS (speedup {speedup:.0}x)",
        a.leaves().len()
    );
}
