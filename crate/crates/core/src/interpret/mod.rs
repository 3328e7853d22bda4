//! Per-patient trajectory graphs, population edge statistics, co-cluster
//! rankings and graph export.

mod export;
mod stats;

pub use export::{export_graph, ExportFormat};
pub use stats::{co_cluster_statistics, edge_statistics, EdgeStat, EdgeStatistics, Relation};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cmd::PoolChain;
use crate::corpus::{EncodedPatient, Vocabulary};
use crate::error::{input_err, Error, Result};
use crate::head::Prediction;

pub const DEFAULT_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub position: usize,
    pub code: String,
    pub encounter: usize,
    pub module: usize,
}

/// Directed edge `from → to`; `from` is never in a later encounter than `to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterInterval {
    pub encounter: usize,
    /// Hours since the first kept encounter.
    pub t_hours: f64,
    pub hours_since_previous: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientGraphExplanation {
    pub patient_id: String,
    pub threshold: f64,
    pub prob_positive: f64,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub module_weights: Vec<f64>,
    pub encounters: Vec<EncounterInterval>,
}

/// Module of every valid position: argmax of its composed assignment row,
/// ties to the lowest cluster index.
pub fn module_assignments(chain: &PoolChain) -> Result<BTreeMap<usize, usize>> {
    if chain.is_empty() {
        return Err(Error::Usage("module assignments need a prediction with pooling".into()));
    }
    let pi = &chain.composed;
    let mut out = BTreeMap::new();
    for (i, _) in chain.valid.iter().enumerate().filter(|(_, &v)| v) {
        let row = pi.row(i);
        let mut best = 0;
        for (q, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = q;
            }
        }
        out.insert(i, best);
    }
    Ok(out)
}

/// Builds the trajectory graph of one patient from the last attention block.
///
/// Self-loops are left out: they carry no relation between codes.
pub fn extract_patient_graph(
    pred: &Prediction,
    enc: &EncodedPatient,
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<PatientGraphExplanation> {
    let modules = module_assignments(&pred.chain)?;
    let a = &pred.gsl.adjacency;
    let n = enc.seq_len();
    if a.rows() != n || pred.chain.valid.len() != n {
        return Err(input_err!("prediction does not belong to patient {}", enc.id));
    }
    if let Some(&bad) = enc.code_ids.iter().find(|&&c| c >= vocab.len()) {
        return Err(input_err!("code id {bad} outside the vocabulary"));
    }
    let nodes = modules
        .iter()
        .map(|(&i, &m)| GraphNode {
            position: i,
            code: vocab.code(enc.code_ids[i]).to_string(),
            encounter: enc.enc_index[i],
            module: m,
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let w = a.get(i, j);
            if i == j || enc.is_pad[i] || enc.is_pad[j] || enc.enc_index[j] > enc.enc_index[i] {
                continue;
            }
            if w >= threshold {
                edges.push(GraphEdge { from: j, to: i, weight: w });
            }
        }
    }
    let mut encounters = Vec::with_capacity(enc.n_encounters);
    for p in 0..enc.n_encounters {
        let t = enc.time[p * enc.c_max];
        let prev = encounters.last().map(|e: &EncounterInterval| t - e.t_hours);
        encounters.push(EncounterInterval { encounter: p, t_hours: t, hours_since_previous: prev });
    }
    Ok(PatientGraphExplanation {
        patient_id: enc.id.clone(),
        threshold,
        prob_positive: pred.prob_positive,
        nodes,
        edges,
        module_weights: pred.module_weights.clone(),
        encounters,
    })
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Returns 1.0 when both labelings are trivial in the same way (all one
/// cluster, or all singletons).
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(input_err!("labelings of {} and {} items", a.len(), b.len()));
    }
    let pairs = |x: u64| x * x.saturating_sub(1) / 2;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| pairs(c) as f64).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c) as f64).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c) as f64).sum();
    let total = pairs(a.len() as u64) as f64;
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
