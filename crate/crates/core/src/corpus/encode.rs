use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::record::{PatientRecord, Vocabulary};
use crate::error::{input_err, Result};

/// Fixed-length flattened view of one patient.
///
/// Position `p·c_max + k` holds the `k`-th code of the `p`-th kept encounter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedPatient {
    pub id: String,
    pub code_ids: Vec<usize>,
    pub enc_index: Vec<usize>,
    pub time: Vec<f64>,
    pub is_pad: Vec<bool>,
    pub label: u8,
    pub p_max: usize,
    pub c_max: usize,
    /// Number of encounters that survived truncation.
    pub n_encounters: usize,
}

impl EncodedPatient {
    pub fn seq_len(&self) -> usize {
        self.code_ids.len()
    }

    /// Per-position validity (the negation of `is_pad`).
    pub fn valid(&self) -> Vec<bool> {
        self.is_pad.iter().map(|&p| !p).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.is_pad.iter().filter(|&&p| !p).count()
    }

    /// Applies `perm` to the positions: new position `i` takes old position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> EncodedPatient {
        assert_eq!(perm.len(), self.seq_len());
        let pick = |v: &Vec<usize>| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        EncodedPatient {
            id: self.id.clone(),
            code_ids: pick(&self.code_ids),
            enc_index: pick(&self.enc_index),
            time: perm.iter().map(|&i| self.time[i]).collect(),
            is_pad: perm.iter().map(|&i| self.is_pad[i]).collect(),
            label: self.label,
            p_max: self.p_max,
            c_max: self.c_max,
            n_encounters: self.n_encounters,
        }
    }
}

/// Pads and truncates `record` to `p_max` encounters of `c_max` codes.
///
/// The most recent `p_max` encounters are kept and their times re-based so the
/// first kept encounter is at 0. An encounter with more than `c_max` codes keeps
/// the codes that occur in the most kept encounters (ties by vocabulary index),
/// in their original order.
pub fn encode_patient(
    record: &PatientRecord,
    p_max: usize,
    c_max: usize,
    vocab: &Vocabulary,
) -> Result<EncodedPatient> {
    if record.encounters.is_empty() {
        return Err(input_err!("patient {} has no encounters", record.id));
    }
    if p_max == 0 || c_max == 0 {
        return Err(input_err!("p_max and c_max must be positive"));
    }
    let start = record.encounters.len().saturating_sub(p_max);
    let kept = &record.encounters[start..];
    let base = kept[0].t_hours;

    let mut ids: Vec<Vec<usize>> = Vec::with_capacity(kept.len());
    for enc in kept {
        let row = enc
            .codes
            .iter()
            .map(|c| {
                vocab
                    .index_of(c)
                    .filter(|&i| i != 0)
                    .ok_or_else(|| input_err!("patient {}: unknown code {c:?}", record.id))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(row);
    }

    let mut freq: HashMap<usize, usize> = HashMap::new();
    for row in &ids {
        for &c in row {
            *freq.entry(c).or_default() += 1;
        }
    }

    let seq_len = p_max * c_max;
    let mut out = EncodedPatient {
        id: record.id.clone(),
        code_ids: vec![0; seq_len],
        enc_index: (0..seq_len).map(|i| i / c_max).collect(),
        time: vec![0.0; seq_len],
        is_pad: vec![true; seq_len],
        label: record.label,
        p_max,
        c_max,
        n_encounters: kept.len(),
    };
    for (p, (enc, row)) in kept.iter().zip(&ids).enumerate() {
        let t = enc.t_hours - base;
        let selected: Vec<usize> = if row.len() > c_max {
            let mut ranked: Vec<(usize, usize)> = row.iter().map(|&c| (c, freq[&c])).collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let keep: Vec<usize> = ranked[..c_max].iter().map(|&(c, _)| c).collect();
            row.iter().copied().filter(|c| keep.contains(c)).collect()
        } else {
            row.clone()
        };
        for k in 0..c_max {
            let pos = p * c_max + k;
            out.time[pos] = t;
            if let Some(&c) = selected.get(k) {
                out.code_ids[pos] = c;
                out.is_pad[pos] = false;
            }
        }
    }
    Ok(out)
}
