//! File formats and deterministic report emission.
//!
//! Input files are strict JSON parsed with serde; unknown fields are
//! rejected so format drift fails loudly. Output goes through [`JsonVal`],
//! a small ordered document model whose printer writes every float with 17
//! significant digits. That many digits round-trips an `f64` exactly, which
//! makes byte-identical reports a meaningful determinism check.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::metric::{Ground, MetricError, StagewiseMetric};
use crate::swi::SwiSpec;
use crate::tree::{ProbabilityTree, RawNode, StageMarginal, TreeError};

#[derive(Debug, Error)]
pub enum JsonError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{path}: unknown ground metric {name:?}")]
    UnknownGround { path: String, name: String },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    stages: usize,
    dimension: usize,
    nodes: Vec<NodeFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    id: i64,
    parent: Option<i64>,
    stage: usize,
    outcome: Vec<f64>,
    prob: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricFile {
    p: f64,
    weights: Vec<f64>,
    ground: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PointMass {
    point: Vec<f64>,
    prob: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SwiSpecFile {
    stages: Vec<Vec<PointMass>>,
}

fn read_to_string(path: &Path) -> Result<String, JsonError> {
    fs::read_to_string(path).map_err(|source| JsonError::Read {
        path: path.display().to_string(),
        source,
    })
}

fn parse<T: for<'de> Deserialize<'de>>(label: &str, text: &str) -> Result<T, JsonError> {
    serde_json::from_str(text).map_err(|source| JsonError::Parse {
        path: label.to_string(),
        source,
    })
}

const INLINE: &str = "<string>";

/// Parses a tree from JSON text. Structure is checked on construction;
/// probability mass is not, run [`ProbabilityTree::validate`] for that.
pub fn parse_tree_str(text: &str) -> Result<ProbabilityTree, JsonError> {
    let file: TreeFile = parse(INLINE, text)?;
    let raw = file
        .nodes
        .into_iter()
        .map(|n| RawNode {
            id: n.id,
            parent: n.parent,
            stage: n.stage,
            outcome: n.outcome,
            prob: n.prob,
        })
        .collect();
    Ok(ProbabilityTree::from_parts(file.stages, file.dimension, raw)?)
}

/// Reads a tree file; see [`parse_tree_str`].
pub fn load_tree(path: &Path) -> Result<ProbabilityTree, JsonError> {
    let text = read_to_string(path)?;
    parse_tree_str(&text).map_err(|e| relabel(e, path))
}

fn relabel(err: JsonError, path: &Path) -> JsonError {
    match err {
        JsonError::Parse { source, .. } => JsonError::Parse {
            path: path.display().to_string(),
            source,
        },
        JsonError::UnknownGround { name, .. } => JsonError::UnknownGround {
            path: path.display().to_string(),
            name,
        },
        other => other,
    }
}

/// Reads a marginal file: an array of `{"point": [...], "prob": x}`.
pub fn load_marginal(path: &Path) -> Result<StageMarginal, JsonError> {
    let text = read_to_string(path)?;
    let masses: Vec<PointMass> = parse(&path.display().to_string(), &text)?;
    let (points, probs) = masses.into_iter().map(|m| (m.point, m.prob)).unzip();
    Ok(StageMarginal::new(points, probs)?)
}

/// Reads a metric file `{"p", "weights", "ground"?}`. A missing ground
/// defaults to Euclidean and applies to every stage.
pub fn load_metric(path: &Path) -> Result<StagewiseMetric, JsonError> {
    let text = read_to_string(path)?;
    let file: MetricFile = parse(&path.display().to_string(), &text)?;
    let ground = match file.ground.as_deref() {
        None | Some("euclidean") => Ground::Euclidean,
        Some("abs") => Ground::Abs,
        Some(other) => {
            return Err(JsonError::UnknownGround {
                path: path.display().to_string(),
                name: other.to_string(),
            });
        }
    };
    Ok(StagewiseMetric::new(file.p, file.weights, ground)?)
}

/// Parses a stagewise independent specification
/// `{"stages": [[{"point", "prob"}, ...], ...]}` from JSON text. Mass
/// checks are left to [`SwiSpec::check`].
pub fn parse_swi_spec_str(text: &str) -> Result<SwiSpec, JsonError> {
    let file: SwiSpecFile = parse(INLINE, text)?;
    let mut stages = Vec::with_capacity(file.stages.len());
    for masses in file.stages {
        let (points, probs) = masses.into_iter().map(|m| (m.point, m.prob)).unzip();
        stages.push(StageMarginal::new(points, probs)?);
    }
    Ok(SwiSpec { stages })
}

/// Reads a specification file; see [`parse_swi_spec_str`].
pub fn load_swi_spec(path: &Path) -> Result<SwiSpec, JsonError> {
    let text = read_to_string(path)?;
    parse_swi_spec_str(&text).map_err(|e| relabel(e, path))
}

/// Ordered JSON document for reports and output files.
#[derive(Debug, Clone)]
pub enum JsonVal {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Arr(Vec<JsonVal>),
    Obj(Vec<(String, JsonVal)>),
}

impl JsonVal {
    pub fn obj(fields: Vec<(&str, JsonVal)>) -> JsonVal {
        JsonVal::Obj(fields.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn floats(values: &[f64]) -> JsonVal {
        JsonVal::Arr(values.iter().map(|&v| JsonVal::Float(v)).collect())
    }

    pub fn str(s: impl Into<String>) -> JsonVal {
        JsonVal::Str(s.into())
    }

    /// Pretty form, two-space indent, trailing newline.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.write(&mut out, 0);
        out.push('\n');
        out
    }

    fn write(&self, out: &mut String, indent: usize) {
        match self {
            JsonVal::Null => out.push_str("null"),
            JsonVal::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            JsonVal::Int(i) => {
                let _ = write!(out, "{i}");
            }
            JsonVal::Float(x) => write_float(out, *x),
            JsonVal::Str(s) => write_string(out, s),
            JsonVal::Arr(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    push_indent(out, indent + 1);
                    item.write(out, indent + 1);
                }
                out.push('\n');
                push_indent(out, indent);
                out.push(']');
            }
            JsonVal::Obj(fields) => {
                if fields.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push('{');
                for (i, (key, value)) in fields.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    push_indent(out, indent + 1);
                    write_string(out, key);
                    out.push_str(": ");
                    value.write(out, indent + 1);
                }
                out.push('\n');
                push_indent(out, indent);
                out.push('}');
            }
        }
    }
}

fn push_indent(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push_str("  ");
    }
}

/// 17 significant digits in scientific notation; enough to reproduce the
/// exact bit pattern on re-parse. Non-finite values have no JSON number
/// form and become null.
fn write_float(out: &mut String, x: f64) {
    if x.is_finite() {
        let _ = write!(out, "{x:.16e}");
    } else {
        out.push_str("null");
    }
}

fn write_string(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Tree in the input file format, nodes in internal storage order.
pub fn tree_to_json(tree: &ProbabilityTree) -> JsonVal {
    let nodes = tree
        .nodes()
        .iter()
        .map(|node| {
            JsonVal::obj(vec![
                ("id", JsonVal::Int(node.id)),
                (
                    "parent",
                    node.parent
                        .map_or(JsonVal::Null, |p| JsonVal::Int(tree.node(p).id)),
                ),
                ("stage", JsonVal::Int(node.stage as i64)),
                ("outcome", JsonVal::floats(&node.outcome)),
                ("prob", JsonVal::Float(node.prob)),
            ])
        })
        .collect();
    JsonVal::obj(vec![
        ("stages", JsonVal::Int(tree.stages() as i64)),
        ("dimension", JsonVal::Int(tree.dimension() as i64)),
        ("nodes", JsonVal::Arr(nodes)),
    ])
}

/// Specification in the input file format.
pub fn spec_to_json(spec: &SwiSpec) -> JsonVal {
    let stages = spec
        .stages
        .iter()
        .map(|marginal| {
            JsonVal::Arr(
                marginal
                    .points
                    .iter()
                    .zip(&marginal.probs)
                    .map(|(point, &prob)| {
                        JsonVal::obj(vec![
                            ("point", JsonVal::floats(point)),
                            ("prob", JsonVal::Float(prob)),
                        ])
                    })
                    .collect(),
            )
        })
        .collect();
    JsonVal::obj(vec![("stages", JsonVal::Arr(stages))])
}

/// Writes a rendered document to disk.
pub fn write_json(path: &Path, value: &JsonVal) -> Result<(), JsonError> {
    fs::write(path, value.render()).map_err(|source| JsonError::Write {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swi::build_swi_tree;
    use crate::tree::TreeBuilder;

    #[test]
    fn float_rendering_round_trips_exactly() {
        for &x in &[
            0.0,
            -0.0,
            0.25,
            1.0 / 3.0,
            -17.125,
            1e-300,
            2.2250738585072014e-308,
            f64::MAX,
            0.1 + 0.2,
            0.98329242574731079,
            0.050689393384261379,
        ] {
            let mut s = String::new();
            write_float(&mut s, x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
            // The deserializer must agree with the standard parser to the bit.
            let loaded: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(loaded.to_bits(), x.to_bits(), "{s}");
        }
        let mut s = String::new();
        write_float(&mut s, f64::NAN);
        assert_eq!(s, "null");
    }

    #[test]
    fn rendered_reports_are_valid_json() {
        let doc = JsonVal::obj(vec![
            ("value_p", JsonVal::Float(0.25)),
            ("note", JsonVal::str("line\nbreak \"quoted\"")),
            ("empty", JsonVal::Arr(vec![])),
            (
                "rows",
                JsonVal::Arr(vec![JsonVal::floats(&[1.0, 2.0]), JsonVal::Null]),
            ),
        ]);
        let text = doc.render();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["value_p"], 0.25);
        assert_eq!(parsed["note"], "line\nbreak \"quoted\"");
    }

    #[test]
    fn tree_file_round_trip_preserves_everything() {
        let mut b = TreeBuilder::new(2);
        let r = b.root(vec![0.1, -0.2], 1.0);
        let u = b.child(r, vec![1.0 / 3.0, 0.0], 0.25);
        let v = b.child(r, vec![0.5, 2.0], 0.75);
        b.child(u, vec![0.0, 0.0], 0.25);
        b.child(v, vec![1e-17, -3.5], 0.75);
        let tree = b.build().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        write_json(&path, &tree_to_json(&tree)).unwrap();
        let back = load_tree(&path).unwrap();
        assert_eq!(back.stages(), tree.stages());
        assert_eq!(back.node_count(), tree.node_count());
        for (x, y) in tree.nodes().iter().zip(back.nodes()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.stage, y.stage);
            assert_eq!(x.prob.to_bits(), y.prob.to_bits());
            for (a, b) in x.outcome.iter().zip(&y.outcome) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn spec_file_round_trip_preserves_everything() {
        let spec = SwiSpec {
            stages: vec![
                StageMarginal::new(vec![vec![0.0]], vec![1.0]).unwrap(),
                StageMarginal::new(vec![vec![-1.5], vec![1.0 / 7.0]], vec![0.3, 0.7]).unwrap(),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        write_json(&path, &spec_to_json(&spec)).unwrap();
        let back = load_swi_spec(&path).unwrap();
        assert_eq!(back, spec);
        assert!(build_swi_tree(&back).is_ok());
    }

    #[test]
    fn strict_parsing_rejects_unknown_fields_and_bad_grounds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, r#"{"stages": 1, "dimension": 1, "nodes": [], "extra": 1}"#).unwrap();
        assert!(matches!(load_tree(&path), Err(JsonError::Parse { .. })));
        fs::write(&path, r#"{"p": 2.0, "weights": [1.0], "ground": "manhattan"}"#).unwrap();
        assert!(matches!(load_metric(&path), Err(JsonError::UnknownGround { .. })));
        fs::write(&path, r#"{"p": 1.0, "weights": [1.0, 0.5]}"#).unwrap();
        let metric = load_metric(&path).unwrap();
        assert_eq!(metric.stages(), 2);
        assert_eq!(metric.ground(1), Ground::Euclidean);
    }
}
