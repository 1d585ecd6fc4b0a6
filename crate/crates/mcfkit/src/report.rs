//! Report model: the versioned, deterministic JSON artifact a scenario run
//! produces, plus the human-readable summary rendering.
//!
//! Determinism contract: the serialized report depends only on the scenario
//! content and the seed — never on wall-clock time, worker count, or file
//! paths. Exact integers are serialized as decimal strings so no consumer
//! silently rounds them; floating-point values use the shortest
//! round-tripping form. Timings are deliberately excluded (the runner writes
//! them to a sidecar file).

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::conley::{
    FlowMapReport, IsolatedMapReport, IsolationCertificate, LyapunovCertificate, Verdict,
};
use crate::duality::CountSymmetryPair;
use crate::flow::{CriticalPoint, MorseData, UnionRegion};
use crate::inducedmaps::{InducedMapResult, MapCount};
use crate::moduli::{CountResult, MorseComplexResult};
use crate::zalgebra::{GradedComplex, GradedIntMap, Homology, HomologyMap, IntMat};
use crate::F;

pub const REPORT_SCHEMA: &str = "mcfkit-report/1";

/// One pass/fail expectation evaluated by a task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub label: String,
    pub pass: bool,
    pub detail: String,
}

/// Outcome of one scenario task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub op: String,
    /// Echo of the resolved arguments.
    pub inputs: Value,
    /// "pass" | "fail" | "info" (info: computed, nothing to verify).
    pub verdict: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub checks: Vec<CheckReport>,
    pub outputs: Value,
}

impl TaskReport {
    pub fn passed(&self) -> bool {
        self.verdict != "fail"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub info: usize,
}

/// The full report artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub scenario: String,
    pub seed: u64,
    pub tasks: Vec<TaskReport>,
    pub summary: Summary,
}

impl Report {
    pub fn new(scenario: String, seed: u64, tasks: Vec<TaskReport>) -> Self {
        let total = tasks.len();
        let failed = tasks.iter().filter(|t| t.verdict == "fail").count();
        let info = tasks.iter().filter(|t| t.verdict == "info").count();
        let passed = total - failed - info;
        Report {
            schema: REPORT_SCHEMA.to_string(),
            scenario,
            seed,
            tasks,
            summary: Summary { total, passed, failed, info },
        }
    }

    /// Exit code contract: zero iff no verdict-bearing task failed.
    pub fn exit_code(&self) -> i32 {
        i32::from(self.summary.failed > 0)
    }

    /// Canonical serialized form; identical runs produce identical bytes.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes =
            serde_json::to_vec_pretty(self).expect("report serialization cannot fail");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, String> {
        let report: Report =
            serde_json::from_slice(bytes).map_err(|e| format!("invalid report JSON: {e}"))?;
        if report.schema != REPORT_SCHEMA {
            return Err(format!(
                "unsupported report schema {:?} (expected {REPORT_SCHEMA:?})",
                report.schema
            ));
        }
        Ok(report)
    }
}

/// A float as JSON, representable even when non-finite.
pub fn json_f(x: F) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        Value::String("nan".into())
    } else if x > 0.0 {
        Value::String("inf".into())
    } else {
        Value::String("-inf".into())
    }
}

pub fn json_point(p: &[F]) -> Value {
    Value::Array(p.iter().map(|&x| json_f(x)).collect())
}

pub fn json_verdict(v: Verdict) -> Value {
    Value::String(
        match v {
            Verdict::Certified => "certified",
            Verdict::Refuted => "refuted",
            Verdict::Inconclusive => "inconclusive",
        }
        .into(),
    )
}

/// Integer matrix with entries as decimal strings (exactness survives JSON).
pub fn json_matrix(m: &IntMat) -> Value {
    let entries: Vec<Value> = (0..m.rows)
        .map(|r| {
            Value::Array(
                (0..m.cols).map(|c| Value::String(m[(r, c)].to_string())).collect(),
            )
        })
        .collect();
    json!({ "rows": m.rows, "cols": m.cols, "entries": entries })
}

pub fn json_graded_map(m: &GradedIntMap) -> Value {
    Value::Array(m.matrices.iter().map(json_matrix).collect())
}

pub fn json_complex(cx: &GradedComplex) -> Value {
    let boundaries: Vec<Value> =
        (0..=cx.top_degree()).map(|k| json_matrix(&cx.boundary_from(k))).collect();
    json!({
        "generators": cx.generators,
        "boundaries": boundaries,
    })
}

pub fn json_homology(h: &Homology) -> Value {
    let torsion: Vec<Value> = h
        .degrees
        .iter()
        .map(|d| {
            Value::Array(d.torsion.iter().map(|t| Value::String(t.to_string())).collect())
        })
        .collect();
    json!({
        "betti": h.betti(),
        "torsion": torsion,
        "groups": h.describe(),
    })
}

pub fn json_homology_map(hm: &HomologyMap) -> Value {
    json!({
        "free": hm.free.iter().map(json_matrix).collect::<Vec<_>>(),
        "source_torsion": hm.source_torsion.iter().map(|d| {
            d.iter().map(|t| t.to_string()).collect::<Vec<_>>()
        }).collect::<Vec<_>>(),
        "target_torsion": hm.target_torsion.iter().map(|d| {
            d.iter().map(|t| t.to_string()).collect::<Vec<_>>()
        }).collect::<Vec<_>>(),
    })
}

pub fn json_critical_point(p: &CriticalPoint) -> Value {
    json!({
        "label": p.label,
        "position": json_point(&p.position),
        "value": json_f(p.value),
        "index": p.index,
        "orientation": p.orientation_sign,
    })
}

pub fn json_points(data: &MorseData) -> Value {
    Value::Array(data.points.iter().map(json_critical_point).collect())
}

pub fn json_counts(counts: &[CountResult]) -> Value {
    Value::Array(
        counts
            .iter()
            .map(|c| {
                json!({
                    "source": c.source,
                    "target": c.target,
                    "count": c.eps_sum,
                    "witnesses": c.witnesses.len(),
                })
            })
            .collect(),
    )
}

pub fn json_morse_complex(cx: &MorseComplexResult) -> Value {
    json!({
        "complex": json_complex(&cx.complex),
        "counts": json_counts(&cx.counts),
    })
}

pub fn json_map_counts(counts: &[MapCount]) -> Value {
    Value::Array(
        counts
            .iter()
            .map(|c| {
                json!({
                    "source": c.source,
                    "target": c.target,
                    "count": c.eps_sum,
                    "witnesses": c.witnesses.len(),
                })
            })
            .collect(),
    )
}

pub fn json_induced_map(res: &InducedMapResult) -> Value {
    json!({
        "matrices": json_graded_map(&res.map),
        "counts": json_map_counts(&res.counts),
    })
}

pub fn json_region(region: &UnionRegion) -> Value {
    Value::Array(
        region
            .boxes
            .iter()
            .map(|b| json!({ "lo": json_point(&b.lo), "hi": json_point(&b.hi) }))
            .collect(),
    )
}

pub fn json_isolation(cert: &IsolationCertificate) -> Value {
    json!({
        "verdict": json_verdict(cert.verdict),
        "t_max": json_f(cert.t_max),
        "boundary_points": cert.boundary_points,
        "interior_points": cert.interior_points,
        "invariant_samples": cert.s_samples.len(),
        "min_sample_depth": cert.min_s_depth.map(json_f).unwrap_or(Value::Null),
        "worst_point": cert.worst_point.as_deref().map(json_point).unwrap_or(Value::Null),
        "detail": cert.detail,
    })
}

pub fn json_lyapunov(cert: &LyapunovCertificate) -> Value {
    json!({
        "verdict": json_verdict(cert.verdict),
        "variation": json_f(cert.variation),
        "margin": json_f(cert.margin),
        "worst_point": cert.worst_point.as_deref().map(json_point).unwrap_or(Value::Null),
        "checked_points": cert.checked_points,
        "detail": cert.detail,
    })
}

pub fn json_flow_map(rep: &FlowMapReport) -> Value {
    json!({
        "verdict": json_verdict(rep.verdict),
        "max_residual": json_f(rep.max_residual),
        "worst": rep.worst.as_ref().map(|(t, p)| {
            json!({ "time": json_f(*t), "point": json_point(p) })
        }).unwrap_or(Value::Null),
        "proper": rep.proper,
        "samples": rep.samples,
    })
}

pub fn json_isolated_map(rep: &IsolatedMapReport) -> Value {
    json!({
        "verdict": json_verdict(rep.verdict),
        "s_h_samples": rep.s_h.len(),
        "offenders": rep.offenders.len(),
        "t_max": json_f(rep.t_max),
    })
}

pub fn json_duality_pairs(pairs: &[CountSymmetryPair]) -> Value {
    Value::Array(
        pairs
            .iter()
            .map(|p| {
                json!({
                    "degree": p.degree,
                    "source": p.source,
                    "target": p.target,
                    "n_base": p.n_base.to_string(),
                    "n_dual": p.n_dual.to_string(),
                    "match": p.matches(),
                })
            })
            .collect(),
    )
}

/// Ordered-map builder for task inputs/outputs.
pub fn object(entries: Vec<(&str, Value)>) -> Value {
    let mut map = Map::new();
    for (k, v) in entries {
        map.insert(k.to_string(), v);
    }
    Value::Object(map)
}

fn matrix_lines(v: &Value) -> Vec<String> {
    let empty = Vec::new();
    let entries = v.get("entries").and_then(Value::as_array).unwrap_or(&empty);
    if entries.is_empty() {
        return vec!["(empty)".to_string()];
    }
    entries
        .iter()
        .map(|row| {
            let cells: Vec<String> = row
                .as_array()
                .map(|r| {
                    r.iter()
                        .map(|c| c.as_str().unwrap_or("?").to_string())
                        .collect()
                })
                .unwrap_or_default();
            format!("[ {} ]", cells.join(" "))
        })
        .collect()
}

fn graded_map_lines(v: &Value, indent: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(mats) = v.as_array() {
        for (k, m) in mats.iter().enumerate() {
            let rows = m.get("rows").and_then(Value::as_u64).unwrap_or(0);
            let cols = m.get("cols").and_then(Value::as_u64).unwrap_or(0);
            if rows == 0 && cols == 0 {
                continue;
            }
            out.push(format!("{indent}degree {k}:"));
            for line in matrix_lines(m) {
                out.push(format!("{indent}  {line}"));
            }
        }
    }
    if out.is_empty() {
        out.push(format!("{indent}(zero in every degree)"));
    }
    out
}

fn groups_of(outputs: &Value, key: &str) -> Option<String> {
    outputs
        .get(key)
        .and_then(|h| h.get("groups"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

/// Render one task as a short paragraph.
fn explain_task(t: &TaskReport) -> String {
    let mut lines = Vec::new();
    lines.push(format!("{} ({}): {}", t.name, t.op, t.verdict.to_uppercase()));
    if let Some(err) = &t.error {
        lines.push(format!("  error: {err}"));
    }
    if let Some(groups) = groups_of(&t.outputs, "homology") {
        lines.push(format!("  {groups}"));
    }
    if let Some(groups) = groups_of(&t.outputs, "dual_homology") {
        lines.push(format!("  dual: {groups}"));
    }
    if let Some(cert) = t.outputs.get("isolation") {
        let verdict = cert.get("verdict").and_then(Value::as_str).unwrap_or("?");
        let depth = cert
            .get("min_sample_depth")
            .map(|d| format!("{d}"))
            .unwrap_or_else(|| "null".into());
        lines.push(format!(
            "  isolation {verdict}, worst sample depth {depth}"
        ));
    }
    if let Some(lyap) = t.outputs.get("lyapunov") {
        let verdict = lyap.get("verdict").and_then(Value::as_str).unwrap_or("?");
        let margin = lyap.get("margin").map(|m| format!("{m}")).unwrap_or_default();
        lines.push(format!("  Lyapunov {verdict}, decrease margin {margin}"));
    }
    if let Some(map) = t.outputs.get("on_homology").and_then(|m| m.get("free")) {
        lines.push("  induced map on homology (free parts):".to_string());
        lines.extend(graded_map_lines(map, "    "));
    }
    for key in ["composite", "composite_r0", "product"] {
        if let Some(m) = t.outputs.get(key).and_then(|m| m.get("on_homology")) {
            lines.push(format!("  {key} on homology:"));
            lines.extend(graded_map_lines(m, "    "));
        }
    }
    if let Some(family) = t.outputs.get("family") {
        let constant = family.get("constant").and_then(Value::as_bool).unwrap_or(false);
        if constant {
            lines.push("  flow-duration family: constant on homology".to_string());
        } else if let Some(breach) = family.get("breach").filter(|b| !b.is_null()) {
            lines.push(format!(
                "  flow-duration family: isolation fails inside r bracket {breach}"
            ));
        }
    }
    if let Some(pairs) = t.outputs.get("count_symmetry").and_then(Value::as_array) {
        let total = pairs.len();
        let ok = pairs
            .iter()
            .filter(|p| p.get("match").and_then(Value::as_bool).unwrap_or(false))
            .count();
        lines.push(format!("  count symmetry: {ok}/{total} pairs match"));
        for p in pairs.iter().filter(|p| {
            !p.get("match").and_then(Value::as_bool).unwrap_or(false)
        }) {
            lines.push(format!("    mismatch: {p}"));
        }
    }
    if let Some(violations) = t.outputs.get("violations").and_then(Value::as_array) {
        if violations.is_empty() {
            lines.push("  homotopy family: countable at every sample".to_string());
        } else {
            for v in violations {
                lines.push(format!("  family violation inside bracket {v}"));
            }
        }
    }
    for c in &t.checks {
        lines.push(format!(
            "  check {}: {} ({})",
            c.label,
            if c.pass { "pass" } else { "FAIL" },
            c.detail
        ));
    }
    lines.join("\n")
}

/// Human-readable rendering of a whole report.
pub fn explain(report: &Report) -> String {
    if report.tasks.is_empty() {
        return format!(
            "scenario {} (seed {}): no tasks\n",
            report.scenario, report.seed
        );
    }
    let mut out = String::new();
    out.push_str(&format!(
        "scenario {} (seed {}): {} tasks, {} passed, {} failed, {} informational\n\n",
        report.scenario,
        report.seed,
        report.summary.total,
        report.summary.passed,
        report.summary.failed,
        report.summary.info
    ));
    for t in &report.tasks {
        out.push_str(&explain_task(t));
        out.push_str("\n\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zalgebra::GradedComplex;

    fn demo_complex() -> GradedComplex {
        let d1 = IntMat::from_rows_i64(&[&[0, 0]]);
        GradedComplex::new(
            vec![vec!["m".into()], vec!["a".into(), "b".into()]],
            vec![d1],
        )
        .unwrap()
    }

    #[test]
    fn report_roundtrips_through_json() {
        let tasks = vec![TaskReport {
            name: "demo".into(),
            op: "morse_homology".into(),
            inputs: object(vec![("field", json!("f"))]),
            verdict: "pass".into(),
            error: None,
            checks: vec![CheckReport {
                label: "betti".into(),
                pass: true,
                detail: "[1, 2]".into(),
            }],
            outputs: object(vec![("homology", json!({"groups": "H_0 = Z"}))]),
        }];
        let report = Report::new("demo.toml".into(), 7, tasks);
        let bytes = report.to_json_bytes();
        let back = Report::from_json(&bytes).unwrap();
        assert_eq!(back.to_json_bytes(), bytes);
        assert_eq!(back.summary.passed, 1);
        assert_eq!(back.exit_code(), 0);
    }

    #[test]
    fn failed_checks_drive_the_exit_code() {
        let tasks = vec![TaskReport {
            name: "bad".into(),
            op: "verify_isolating_neighborhood".into(),
            inputs: Value::Null,
            verdict: "fail".into(),
            error: None,
            checks: vec![],
            outputs: Value::Null,
        }];
        let report = Report::new("s".into(), 0, tasks);
        assert_eq!(report.exit_code(), 1);
        assert_eq!(report.summary.failed, 1);
    }

    #[test]
    fn integer_matrices_serialize_as_decimal_strings() {
        let cx = demo_complex();
        let v = json_complex(&cx);
        let entries = v["boundaries"][1]["entries"].as_array().unwrap();
        assert_eq!(entries[0][0], Value::String("0".into()));
    }

    #[test]
    fn empty_report_explains_as_no_tasks() {
        let report = Report::new("empty.toml".into(), 0, vec![]);
        let text = explain(&report);
        assert!(text.contains("no tasks"));
    }

    #[test]
    fn non_finite_floats_serialize_as_strings() {
        assert_eq!(json_f(F::INFINITY), Value::String("inf".into()));
        assert_eq!(json_f(F::NEG_INFINITY), Value::String("-inf".into()));
        assert_eq!(json_f(1.5), json!(1.5));
    }
}
