use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::PatientGraphExplanation;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Dot,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ExportFormat::Dot),
            "json" => Ok(ExportFormat::Json),
            _ => Err(Error::Usage(format!("unknown export format {s:?}"))),
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

fn to_dot(expl: &PatientGraphExplanation) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph {} {{", quote(&expl.patient_id));
    let _ = writeln!(out, "  rankdir=LR;");
    let mut by_module: BTreeMap<usize, Vec<&super::GraphNode>> = BTreeMap::new();
    for n in &expl.nodes {
        by_module.entry(n.module).or_default().push(n);
    }
    for (m, nodes) in &by_module {
        let _ = writeln!(out, "  subgraph cluster_m{m} {{");
        let label = match expl.module_weights.get(*m) {
            Some(a) => format!("module {m} (alpha={a:.3})"),
            None => format!("module {m}"),
        };
        let _ = writeln!(out, "    label={};", quote(&label));
        for n in nodes {
            let _ = writeln!(out, "    n{} [label={}];", n.position, quote(&format!("{} @E{}", n.code, n.encounter)));
        }
        let _ = writeln!(out, "  }}");
    }
    for e in &expl.edges {
        let _ = writeln!(out, "  n{} -> n{} [penwidth={:.3}, label=\"{:.3}\"];", e.from, e.to, 5.0 * e.weight, e.weight);
    }
    out.push_str("}\n");
    out
}

/// Serialises an explanation. DOT groups nodes into one cluster per module
/// with pen width proportional to edge weight; JSON is lossless.
pub fn export_graph(expl: &PatientGraphExplanation, format: ExportFormat) -> Result<Vec<u8>> {
    match format {
        ExportFormat::Dot => Ok(to_dot(expl).into_bytes()),
        ExportFormat::Json => Ok(serde_json::to_vec_pretty(expl)?),
    }
}
