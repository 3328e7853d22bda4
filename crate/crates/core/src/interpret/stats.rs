use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::module_assignments;
use crate::corpus::{CoOccurrenceMatrix, EncodedPatient, Vocabulary};
use crate::error::{input_err, Result};
use crate::head::{forward, DeepJ, LossWeights, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Both codes in the same encounter.
    Intra,
    /// Source code in a strictly earlier encounter.
    Inter,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Intra => "intra",
            Relation::Inter => "inter",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeStat {
    pub src: String,
    pub dst: String,
    pub relation: Relation,
    /// Patients with at least one position pair in the required relation.
    pub eligible: usize,
    /// Eligible patients whose edge weight reaches the threshold.
    pub hits: usize,
    pub prevalence: f64,
    /// Mean of the qualifying weights (0 when there are none).
    pub mean_w: f64,
    /// Population standard deviation of the qualifying weights.
    pub std_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeStatistics {
    pub threshold: f64,
    /// Sorted by relation, then source and destination code.
    pub rows: Vec<EdgeStat>,
}

impl EdgeStatistics {
    pub fn get(&self, src: &str, dst: &str, relation: Relation) -> Option<&EdgeStat> {
        self.rows.iter().find(|r| r.src == src && r.dst == dst && r.relation == relation)
    }

    /// Most prevalent pairs of one relation; ties by hits, mean weight, then codes.
    pub fn top_k(&self, relation: Relation, k: usize) -> Vec<&EdgeStat> {
        let mut rows: Vec<&EdgeStat> = self.rows.iter().filter(|r| r.relation == relation).collect();
        rows.sort_by(|a, b| {
            b.prevalence
                .total_cmp(&a.prevalence)
                .then(b.hits.cmp(&a.hits))
                .then(b.mean_w.total_cmp(&a.mean_w))
                .then_with(|| (&a.src, &a.dst).cmp(&(&b.src, &b.dst)))
        });
        rows.truncate(k);
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("src_code,dst_code,relation,prevalence,mean_w,std_w\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.src, r.dst, r.relation.as_str(), r.prevalence, r.mean_w, r.std_w);
        }
        out
    }
}

type PairKey = (Relation, usize, usize);

/// Per-patient edge weight for each code pair: the maximum over matching position pairs.
fn patient_edges(enc: &EncodedPatient, adjacency: &crate::numerics::Tensor) -> BTreeMap<PairKey, f64> {
    let mut out: BTreeMap<PairKey, f64> = BTreeMap::new();
    let n = enc.seq_len();
    for i in (0..n).filter(|&i| !enc.is_pad[i]) {
        for j in (0..n).filter(|&j| !enc.is_pad[j] && j != i) {
            let relation = match enc.enc_index[j].cmp(&enc.enc_index[i]) {
                std::cmp::Ordering::Equal => Relation::Intra,
                std::cmp::Ordering::Less => Relation::Inter,
                std::cmp::Ordering::Greater => continue,
            };
            let w = adjacency.get(i, j);
            let slot = out.entry((relation, enc.code_ids[j], enc.code_ids[i])).or_insert(f64::NEG_INFINITY);
            *slot = slot.max(w);
        }
    }
    out
}

/// Population edge statistics from the final attention block.
pub fn edge_statistics(
    corpus: &[EncodedPatient],
    model: &DeepJ,
    co: &CoOccurrenceMatrix,
    vocab: &Vocabulary,
    mode: Mode,
    threshold: f64,
) -> Result<EdgeStatistics> {
    if corpus.is_empty() {
        return Err(input_err!("edge statistics need at least one patient"));
    }
    let w = LossWeights::default();
    let per_patient: Vec<BTreeMap<PairKey, f64>> = corpus
        .par_iter()
        .map(|enc| forward(model, enc, co, mode, &w).map(|(pred, _)| patient_edges(enc, &pred.gsl.adjacency)))
        .collect::<Result<_>>()?;

    let mut acc: BTreeMap<PairKey, (usize, Vec<f64>)> = BTreeMap::new();
    for edges in &per_patient {
        for (&key, &weight) in edges {
            let slot = acc.entry(key).or_default();
            slot.0 += 1;
            if weight >= threshold {
                slot.1.push(weight);
            }
        }
    }
    let rows = acc
        .into_iter()
        .map(|((relation, src, dst), (eligible, hits))| {
            let k = hits.len() as f64;
            let (mean_w, std_w) = if hits.is_empty() {
                (0.0, 0.0)
            } else {
                let mean = hits.iter().sum::<f64>() / k;
                (mean, (hits.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / k).sqrt())
            };
            EdgeStat {
                src: vocab.code(src).to_string(),
                dst: vocab.code(dst).to_string(),
                relation,
                eligible,
                hits: hits.len(),
                prevalence: hits.len() as f64 / eligible as f64,
                mean_w,
                std_w,
            }
        })
        .collect();
    Ok(EdgeStatistics { threshold, rows })
}

/// Codes most often assigned to the same module as `target`.
///
/// Each patient containing `target` adds at most one count per other code
/// that shares a module with any occurrence of `target`.
pub fn co_cluster_statistics(
    corpus: &[EncodedPatient],
    model: &DeepJ,
    co: &CoOccurrenceMatrix,
    vocab: &Vocabulary,
    target: &str,
    k: usize,
) -> Result<Vec<(String, usize)>> {
    let t = vocab.index_of(target).filter(|&i| i != 0).ok_or_else(|| input_err!("unknown code {target:?}"))?;
    let w = LossWeights::default();
    let per_patient: Vec<BTreeSet<usize>> = corpus
        .par_iter()
        .filter(|enc| enc.code_ids.iter().zip(&enc.is_pad).any(|(&c, &pad)| !pad && c == t))
        .map(|enc| {
            let (pred, _) = forward(model, enc, co, Mode::Full, &w)?;
            let modules = module_assignments(&pred.chain)?;
            let target_modules: BTreeSet<usize> =
                modules.iter().filter(|(&i, _)| enc.code_ids[i] == t).map(|(_, &m)| m).collect();
            Ok(modules
                .iter()
                .filter(|(&i, m)| enc.code_ids[i] != t && target_modules.contains(m))
                .map(|(&i, _)| enc.code_ids[i])
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for codes in &per_patient {
        for &c in codes {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(c, n)| (vocab.code(c).to_string(), n)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}
