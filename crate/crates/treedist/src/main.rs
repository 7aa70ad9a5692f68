//! Command-line driver. Every command reads JSON files, prints one JSON
//! report to stdout, and signals the failure class through the exit code:
//! 0 success, 2 invalid input, 3 solver failure, 4 stage mismatch, 5
//! stagewise independence required but absent.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use treedist::json::{
    load_marginal, load_metric, load_swi_spec, load_tree, spec_to_json, tree_to_json, write_json,
    JsonError, JsonVal,
};
use treedist::metric::{MetricError, StagewiseMetric};
use treedist::nested::{
    check_constraint_equivalence, check_homogeneity, nested_dp, nested_lp_with_cap, NestedError,
    NestedResult, NodePairTable, DEFAULT_LP_CAP,
};
use treedist::swi::{
    detect_swi, nested_swi, reduce_swi, subtree_identity_check_all, SwiError, DEFAULT_SWI_TOL,
};
use treedist::transport::{wasserstein_p, wasserstein_plan, TransportError};
use treedist::tree::{NodeId, ProbabilityTree, TreeError, ValidationReport};

#[derive(Parser)]
#[command(name = "treedist", version, about = "Distances between scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check probability mass consistency of a tree file.
    Validate {
        tree: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Wasserstein distance between two marginal files.
    Wasserstein {
        p: PathBuf,
        q: PathBuf,
        #[arg(long)]
        metric: Option<PathBuf>,
        /// Include the optimal transport plan in the report.
        #[arg(long)]
        plan: bool,
    },
    /// Nested distance between two tree files.
    Nested {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        metric: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
        method: MethodArg,
        /// Force the backward recursion regardless of --method.
        #[arg(long)]
        force_dp: bool,
        /// Time the recursion against the stagewise fast path.
        #[arg(long)]
        bench: bool,
        /// Include the per-stage node pair tables (dp method only).
        #[arg(long)]
        table: bool,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Verify stagewise independence and related structural properties.
    SwiCheck {
        a: PathBuf,
        b: Option<PathBuf>,
        #[arg(long)]
        metric: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Attach tree B below every leaf of tree A.
    Product {
        a: PathBuf,
        b: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Shrink the per-stage supports of a stagewise independent
    /// specification.
    Reduce {
        spec: PathBuf,
        /// Target support size per stage, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<usize>,
        #[arg(long)]
        metric: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Auto,
    Lp,
    Dp,
    Swi,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Json(#[from] JsonError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Nested(#[from] NestedError),
    #[error(transparent)]
    Swi(#[from] SwiError),
    #[error("{file} fails validation: {report}")]
    Validation { file: String, report: ValidationReport },
    #[error("{0}")]
    Usage(String),
}

struct CmdOutput {
    report: JsonVal,
    code: i32,
}

fn main() {
    let cli = Cli::parse();
    let out = run(cli.command).unwrap_or_else(|err| {
        let (code, report) = error_report(&err);
        CmdOutput { report, code }
    });
    print!("{}", out.report.render());
    std::process::exit(out.code);
}

fn run(command: Command) -> Result<CmdOutput, CliError> {
    match command {
        Command::Validate { tree, tol } => cmd_validate(&tree, tol),
        Command::Wasserstein { p, q, metric, plan } => {
            cmd_wasserstein(&p, &q, metric.as_deref(), plan)
        }
        Command::Nested { a, b, metric, method, force_dp, bench, table, tol } => {
            cmd_nested(&a, &b, metric.as_deref(), method, force_dp, bench, table, tol)
        }
        Command::SwiCheck { a, b, metric, seed, tol } => {
            cmd_swi_check(&a, b.as_deref(), metric.as_deref(), seed, tol)
        }
        Command::Product { a, b, output, tol } => cmd_product(&a, &b, &output, tol),
        Command::Reduce { spec, targets, metric, seed, output } => {
            cmd_reduce(&spec, &targets, metric.as_deref(), seed, &output)
        }
    }
}

/// Exit code and error report for every failure the commands can surface.
fn error_report(err: &CliError) -> (i32, JsonVal) {
    let mut fields = vec![
        ("error", JsonVal::str(error_kind(err))),
        ("message", JsonVal::str(err.to_string())),
    ];
    match err {
        CliError::Validation { report, .. } => {
            fields.push(("violations", violations_json(report)));
        }
        CliError::Transport(TransportError::Unbalanced { supply, demand }) => {
            fields.push(("residual", JsonVal::Float((supply - demand).abs())));
        }
        CliError::Swi(SwiError::NotSwi(v)) | CliError::Swi(SwiError::NotSwiIn { violation: v, .. }) => {
            fields.push((
                "violation",
                JsonVal::obj(vec![
                    ("stage", JsonVal::Int(v.stage as i64)),
                    ("reference", JsonVal::Int(v.reference)),
                    ("node", JsonVal::Int(v.node)),
                    ("detail", JsonVal::str(&v.detail)),
                ]),
            ));
        }
        _ => {}
    }
    (exit_code(err), JsonVal::obj(fields))
}

fn error_kind(err: &CliError) -> &'static str {
    match err {
        CliError::Json(_) => "input",
        CliError::Tree(_) => "tree",
        CliError::Metric(_) => "metric",
        CliError::Transport(_) => "transport",
        CliError::Nested(e) => nested_kind(e),
        CliError::Swi(SwiError::Nested(e)) => nested_kind(e),
        CliError::Swi(SwiError::Transport(_)) => "transport",
        CliError::Swi(_) => "swi",
        CliError::Validation { .. } => "validation",
        CliError::Usage(_) => "usage",
    }
}

fn nested_kind(err: &NestedError) -> &'static str {
    match err {
        NestedError::Transport(_) => "transport",
        _ => "nested",
    }
}

fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Json(_)
        | CliError::Tree(_)
        | CliError::Metric(_)
        | CliError::Validation { .. }
        | CliError::Usage(_) => 2,
        CliError::Transport(e) => transport_code(e),
        CliError::Nested(e) => nested_code(e),
        CliError::Swi(e) => swi_code(e),
    }
}

fn transport_code(err: &TransportError) -> i32 {
    match err {
        TransportError::IterationLimit { .. } | TransportError::Solver { .. } => 3,
        _ => 2,
    }
}

fn nested_code(err: &NestedError) -> i32 {
    match err {
        NestedError::StageMismatch { .. }
        | NestedError::MetricStages { .. }
        | NestedError::PairStage { .. } => 4,
        NestedError::Solver { .. } => 3,
        NestedError::Transport(e) => transport_code(e),
        _ => 2,
    }
}

fn swi_code(err: &SwiError) -> i32 {
    match err {
        SwiError::NotSwi(_) | SwiError::NotSwiIn { .. } => 5,
        SwiError::Nested(e) => nested_code(e),
        SwiError::Transport(e) => transport_code(e),
        _ => 2,
    }
}

fn violations_json(report: &ValidationReport) -> JsonVal {
    JsonVal::Arr(
        report
            .violations
            .iter()
            .map(|v| {
                JsonVal::obj(vec![
                    ("kind", JsonVal::str(v.kind())),
                    ("node", v.node().map_or(JsonVal::Null, JsonVal::Int)),
                    ("residual", JsonVal::Float(v.residual())),
                ])
            })
            .collect(),
    )
}

fn check_tol(tol: f64) -> Result<(), CliError> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(CliError::Usage(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// Loads a tree and rejects it unless its probability mass is consistent.
fn load_valid_tree(path: &Path, tol: f64) -> Result<ProbabilityTree, CliError> {
    let tree = load_tree(path)?;
    let report = tree.validate(tol);
    if !report.is_ok() {
        return Err(CliError::Validation { file: path.display().to_string(), report });
    }
    Ok(tree)
}

fn metric_or_default(
    path: Option<&Path>,
    stages: usize,
) -> Result<StagewiseMetric, CliError> {
    match path {
        Some(p) => Ok(load_metric(p)?),
        None => Ok(StagewiseMetric::default_for(stages)?),
    }
}

fn cmd_validate(path: &Path, tol: f64) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let tree = load_tree(path)?;
    let report = tree.validate(tol);
    let valid = report.is_ok();
    let doc = JsonVal::obj(vec![
        ("file", JsonVal::str(path.display().to_string())),
        ("stages", JsonVal::Int(tree.stages() as i64)),
        ("dimension", JsonVal::Int(tree.dimension() as i64)),
        ("nodes", JsonVal::Int(tree.node_count() as i64)),
        ("leaves", JsonVal::Int(tree.leaves().len() as i64)),
        ("tol", JsonVal::Float(tol)),
        ("valid", JsonVal::Bool(valid)),
        ("violations", violations_json(&report)),
    ]);
    Ok(CmdOutput { report: doc, code: if valid { 0 } else { 2 } })
}

fn cmd_wasserstein(
    p_path: &Path,
    q_path: &Path,
    metric_path: Option<&Path>,
    include_plan: bool,
) -> Result<CmdOutput, CliError> {
    let p = load_marginal(p_path)?;
    let q = load_marginal(q_path)?;
    let metric = metric_or_default(metric_path, 1)?;
    let mut fields = Vec::new();
    let value_p;
    if include_plan {
        let plan = wasserstein_plan(&p, &q, &metric, 1)?;
        value_p = plan.objective;
        fields.push((
            "plan",
            JsonVal::Arr(plan.flow.iter().map(|row| JsonVal::floats(row)).collect()),
        ));
    } else {
        value_p = wasserstein_p(&p, &q, &metric, 1)?;
    }
    let mut doc = vec![
        ("value_p", JsonVal::Float(value_p)),
        ("value_root", JsonVal::Float(metric.root_of(value_p))),
        ("p", JsonVal::Float(metric.p())),
        ("ground", JsonVal::str(metric.ground(1).as_str())),
    ];
    doc.extend(fields);
    Ok(CmdOutput { report: JsonVal::obj(doc), code: 0 })
}

fn lp_cap() -> Result<usize, CliError> {
    match std::env::var("TREEDIST_LP_CAP") {
        Ok(s) => s
            .parse()
            .map_err(|_| CliError::Usage(format!("TREEDIST_LP_CAP must be an integer, got {s:?}"))),
        Err(_) => Ok(DEFAULT_LP_CAP),
    }
}

fn table_json(a: &ProbabilityTree, b: &ProbabilityTree, table: &NodePairTable) -> JsonVal {
    JsonVal::Arr(
        table
            .stages
            .iter()
            .map(|st| {
                let rows = st
                    .a_nodes
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        JsonVal::Arr(
                            (0..st.b_nodes.len())
                                .map(|j| JsonVal::Float(st.value_at(i, j)))
                                .collect(),
                        )
                    })
                    .collect();
                JsonVal::obj(vec![
                    ("stage", JsonVal::Int(st.stage as i64)),
                    (
                        "a_nodes",
                        JsonVal::Arr(
                            st.a_nodes.iter().map(|&k| JsonVal::Int(a.node(k).id)).collect(),
                        ),
                    ),
                    (
                        "b_nodes",
                        JsonVal::Arr(
                            st.b_nodes.iter().map(|&l| JsonVal::Int(b.node(l).id)).collect(),
                        ),
                    ),
                    ("values", JsonVal::Arr(rows)),
                ])
            })
            .collect(),
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_nested(
    a_path: &Path,
    b_path: &Path,
    metric_path: Option<&Path>,
    method: MethodArg,
    force_dp: bool,
    bench: bool,
    include_table: bool,
    tol: f64,
) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let a = load_valid_tree(a_path, tol)?;
    let b = load_valid_tree(b_path, tol)?;
    let metric = metric_or_default(metric_path, a.stages())?;

    let resolved = if force_dp {
        MethodArg::Dp
    } else if method == MethodArg::Auto {
        let swi = detect_swi(&a, DEFAULT_SWI_TOL).is_ok() && detect_swi(&b, DEFAULT_SWI_TOL).is_ok();
        if swi {
            MethodArg::Swi
        } else {
            MethodArg::Dp
        }
    } else {
        method
    };
    if include_table && resolved != MethodArg::Dp {
        return Err(CliError::Usage("--table requires the dp method".into()));
    }

    let mut extra = Vec::new();
    let result: NestedResult = match resolved {
        MethodArg::Dp => nested_dp(&a, &b, &metric)?,
        MethodArg::Swi => nested_swi(&a, &b, &metric)?,
        MethodArg::Lp => nested_lp_with_cap(&a, &b, &metric, lp_cap()?)?,
        MethodArg::Auto => unreachable!("auto resolved above"),
    };
    if bench {
        let start = Instant::now();
        let dp = nested_dp(&a, &b, &metric)?;
        let dp_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let swi = nested_swi(&a, &b, &metric)?;
        let swi_seconds = start.elapsed().as_secs_f64();
        extra.push((
            "bench",
            JsonVal::obj(vec![
                ("dp_seconds", JsonVal::Float(dp_seconds)),
                ("swi_seconds", JsonVal::Float(swi_seconds)),
                ("speedup", JsonVal::Float(dp_seconds / swi_seconds)),
                ("dp_value_p", JsonVal::Float(dp.value_p)),
                ("swi_value_p", JsonVal::Float(swi.value_p)),
            ]),
        ));
    }

    let mut doc = vec![
        ("value_p", JsonVal::Float(result.value_p)),
        ("value_root", JsonVal::Float(result.value_root)),
        ("method", JsonVal::str(result.method.as_str())),
    ];
    if let Some(terms) = &result.stage_terms {
        doc.push(("stage_terms", JsonVal::floats(terms)));
    }
    if include_table {
        let table = result.table.as_ref().expect("dp result carries a table");
        doc.push(("table", table_json(&a, &b, table)));
    }
    doc.extend(extra);
    Ok(CmdOutput { report: JsonVal::obj(doc), code: 0 })
}

struct Property {
    name: &'static str,
    pass: bool,
    skipped: bool,
    detail: String,
}

impl Property {
    fn json(&self) -> JsonVal {
        JsonVal::obj(vec![
            ("property", JsonVal::str(self.name)),
            ("pass", JsonVal::Bool(self.pass)),
            ("skipped", JsonVal::Bool(self.skipped)),
            ("detail", JsonVal::str(&self.detail)),
        ])
    }
}

fn swi_property(name: &'static str, tree: &ProbabilityTree, tol: f64) -> Property {
    match detect_swi(tree, tol) {
        Ok(spec) => Property {
            name,
            pass: true,
            skipped: false,
            detail: format!(
                "stagewise independent, support sizes {:?}",
                spec.support_sizes()
            ),
        },
        Err(e) => Property { name, pass: false, skipped: false, detail: e.to_string() },
    }
}

fn cmd_swi_check(
    a_path: &Path,
    b_path: Option<&Path>,
    metric_path: Option<&Path>,
    seed: u64,
    tol: f64,
) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let a = load_valid_tree(a_path, tol)?;
    let mut properties = vec![swi_property("swi_first", &a, DEFAULT_SWI_TOL)];

    if let Some(b_path) = b_path {
        let b = load_valid_tree(b_path, tol)?;
        let metric = metric_or_default(metric_path, a.stages())?;
        properties.push(swi_property("swi_second", &b, DEFAULT_SWI_TOL));
        let both_swi = properties.iter().all(|p| p.pass);

        properties.push(match check_constraint_equivalence(&a, &b, &metric, seed) {
            Ok(r) => Property {
                name: "constraint_equivalence",
                pass: r.pass,
                skipped: false,
                detail: format!(
                    "value gap {:.3e}, cross residuals {:.3e} and {:.3e}",
                    r.value_gap, r.residual_in_successor, r.residual_in_leaf
                ),
            },
            Err(NestedError::SizeCap { product, cap }) => Property {
                name: "constraint_equivalence",
                pass: true,
                skipped: true,
                detail: format!("skipped: {product} leaf pairs exceed cap {cap}"),
            },
            Err(e) => return Err(e.into()),
        });

        properties.push(homogeneity_property(&a, &b, &metric, seed)?);

        if both_swi {
            let reports = subtree_identity_check_all(&a, &b, &metric)?;
            let worst = reports
                .iter()
                .map(|r| r.residual)
                .fold(0.0, f64::max);
            properties.push(Property {
                name: "subtree_identity",
                pass: reports.iter().all(|r| r.pass),
                skipped: false,
                detail: format!("{} node pairs, max residual {worst:.3e}", reports.len()),
            });
        } else {
            properties.push(Property {
                name: "subtree_identity",
                pass: true,
                skipped: true,
                detail: "skipped: requires two stagewise independent trees".into(),
            });
        }
    }

    let pass = properties.iter().all(|p| p.skipped || p.pass);
    let doc = JsonVal::obj(vec![
        ("pass", JsonVal::Bool(pass)),
        (
            "properties",
            JsonVal::Arr(properties.iter().map(Property::json).collect()),
        ),
    ]);
    Ok(CmdOutput { report: doc, code: 0 })
}

/// Scale invariance of the stage subproblems at a seeded sample of interior
/// node pairs.
fn homogeneity_property(
    a: &ProbabilityTree,
    b: &ProbabilityTree,
    metric: &StagewiseMetric,
    seed: u64,
) -> Result<Property, CliError> {
    let mut pairs: Vec<(NodeId, NodeId)> = Vec::new();
    for t in 1..a.stages() {
        for &k in a.stage_nodes(t) {
            for &l in b.stage_nodes(t) {
                pairs.push((k, l));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    pairs.truncate(12);

    let mut worst = 0.0f64;
    let mut pass = true;
    let mut checked = 0usize;
    for (k, l) in pairs {
        for &alpha in &[0.0, 0.37, 2.5] {
            match check_homogeneity(a, b, metric, k, l, alpha) {
                Ok(r) => {
                    worst = worst.max(r.residual);
                    pass &= r.pass;
                    checked += 1;
                }
                Err(NestedError::SizeCap { .. }) => {}
                Err(NestedError::NullMass { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(if checked == 0 {
        Property {
            name: "positive_homogeneity",
            pass: true,
            skipped: true,
            detail: "skipped: no tractable interior pair".into(),
        }
    } else {
        Property {
            name: "positive_homogeneity",
            pass,
            skipped: false,
            detail: format!("{checked} scaled solves, max residual {worst:.3e}"),
        }
    })
}

fn cmd_product(
    a_path: &Path,
    b_path: &Path,
    output: &Path,
    tol: f64,
) -> Result<CmdOutput, CliError> {
    check_tol(tol)?;
    let a = load_valid_tree(a_path, tol)?;
    let b = load_valid_tree(b_path, tol)?;
    let product = treedist::tree::tree_product(&a, &b)?;
    write_json(output, &tree_to_json(&product))?;
    let doc = JsonVal::obj(vec![
        ("stages", JsonVal::Int(product.stages() as i64)),
        ("dimension", JsonVal::Int(product.dimension() as i64)),
        ("nodes", JsonVal::Int(product.node_count() as i64)),
        ("leaves", JsonVal::Int(product.leaves().len() as i64)),
        ("output", JsonVal::str(output.display().to_string())),
    ]);
    Ok(CmdOutput { report: doc, code: 0 })
}

fn cmd_reduce(
    spec_path: &Path,
    targets: &[usize],
    metric_path: Option<&Path>,
    seed: u64,
    output: &Path,
) -> Result<CmdOutput, CliError> {
    let spec = load_swi_spec(spec_path)?;
    let metric = metric_or_default(metric_path, spec.stage_count())?;
    let result = reduce_swi(&spec, targets, &metric, seed)?;
    let reduced_doc = spec_to_json(&result.reduced);
    write_json(output, &reduced_doc)?;
    let stages_field = match reduced_doc {
        JsonVal::Obj(fields) => fields.into_iter().next().expect("spec json has stages").1,
        _ => unreachable!("spec json is an object"),
    };
    let doc = JsonVal::obj(vec![
        ("stages", stages_field),
        ("stage_values", JsonVal::floats(&result.stage_values)),
        ("total_p", JsonVal::Float(result.total_p)),
        (
            "support_sizes",
            JsonVal::Arr(spec.support_sizes().iter().map(|&n| JsonVal::Int(n as i64)).collect()),
        ),
        (
            "targets",
            JsonVal::Arr(targets.iter().map(|&n| JsonVal::Int(n as i64)).collect()),
        ),
        ("seed", JsonVal::Int(seed as i64)),
        ("output", JsonVal::str(output.display().to_string())),
    ]);
    Ok(CmdOutput { report: doc, code: 0 })
}
