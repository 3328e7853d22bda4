use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::encode::EncodedPatient;
use super::record::{PatientRecord, Vocabulary};
use crate::error::{input_err, Error, Result};
use crate::gsl::AttentionMask;
use crate::numerics::Tensor;

/// Conditional temporal co-occurrence `CO[i][j] = P(c_i at p2 | c_j at p1)`, `p1 ≤ p2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrenceMatrix {
    size: usize,
    values: Vec<f64>,
    /// `pair_counts[i*size + j]`: ordered pairs with `c_j` earlier-or-same and `c_i` later-or-same.
    pair_counts: Vec<u64>,
    /// Number of (patient, encounter) occurrences of each code.
    occurrences: Vec<u64>,
    vocab_hash: String,
}

impl CoOccurrenceMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, later: usize, earlier: usize) -> f64 {
        self.values[later * self.size + earlier]
    }

    pub fn pair_count(&self, later: usize, earlier: usize) -> u64 {
        self.pair_counts[later * self.size + earlier]
    }

    pub fn occurrences(&self, code: usize) -> u64 {
        self.occurrences[code]
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(self.size, self.size, self.values.clone()).expect("square")
    }

    /// CSV dump: two `#` header lines (vocabulary hash, size) then one row per code.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# vocab_sha256={}", self.vocab_hash)?;
        writeln!(out, "# size={}", self.size)?;
        for i in 0..self.size {
            let row: Vec<String> =
                self.values[i * self.size..(i + 1) * self.size].iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads a CSV dump, verifying the header hash against `vocab`.
    ///
    /// Counts are not stored in the dump and come back as zero.
    pub fn read_csv<R: Read>(input: R, vocab: &Vocabulary) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| input_err!("missing {key} header"))??;
            line.strip_prefix(&format!("# {key}="))
                .map(str::to_string)
                .ok_or_else(|| input_err!("malformed {key} header"))
        };
        let hash = header("vocab_sha256")?;
        if hash != vocab.hash() {
            return Err(Error::Integrity("co-occurrence matrix was built on another vocabulary".into()));
        }
        let size: usize = header("size")?.parse().map_err(|_| input_err!("bad size header"))?;
        if size != vocab.len() {
            return Err(input_err!("matrix size {size} vs vocabulary {}", vocab.len()));
        }
        let mut values = Vec::with_capacity(size * size);
        for line in lines {
            let line = line?;
            for cell in line.split(',') {
                values.push(cell.trim().parse::<f64>().map_err(|_| input_err!("bad value {cell:?}"))?);
            }
        }
        if values.len() != size * size {
            return Err(input_err!("expected {} values, got {}", size * size, values.len()));
        }
        Ok(Self {
            size,
            values,
            pair_counts: vec![0; size * size],
            occurrences: vec![0; size],
            vocab_hash: hash,
        })
    }
}

/// Estimates the co-occurrence matrix from training records.
///
/// For every patient and encounter pair `p1 ≤ p2`, each code `c_j` in `p1` and
/// `c_i` in `p2` adds one to the `(i, j)` pair count, except the pairing of an
/// occurrence with itself. The denominator counts every occurrence of `c_j`.
pub fn estimate_co_occurrence(records: &[PatientRecord], vocab: &Vocabulary) -> Result<CoOccurrenceMatrix> {
    if records.is_empty() {
        return Err(input_err!("cannot estimate co-occurrence from an empty split"));
    }
    let size = vocab.len();
    let mut pair_counts = vec![0u64; size * size];
    let mut occurrences = vec![0u64; size];
    for r in records {
        let ids = r
            .encounters
            .iter()
            .map(|e| {
                e.codes
                    .iter()
                    .map(|c| vocab.index_of(c).ok_or_else(|| input_err!("unknown code {c:?}")))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for (p1, earlier) in ids.iter().enumerate() {
            for &j in earlier {
                occurrences[j] += 1;
            }
            for (offset, later) in ids[p1..].iter().enumerate() {
                let same = offset == 0;
                for &j in earlier {
                    for &i in later {
                        if same && i == j {
                            continue;
                        }
                        pair_counts[i * size + j] += 1;
                    }
                }
            }
        }
    }
    let mut values = vec![0.0; size * size];
    for i in 1..size {
        for j in 1..size {
            if occurrences[j] > 0 {
                values[i * size + j] = (pair_counts[i * size + j] as f64 / occurrences[j] as f64).clamp(0.0, 1.0);
            }
        }
    }
    Ok(CoOccurrenceMatrix { size, values, pair_counts, occurrences, vocab_hash: vocab.hash() })
}

/// Position-level attention seed for one patient.
///
/// `G[i][j] = CO[code(i)][code(j)]` on allowed entries, each non-empty row
/// renormalised (uniform when the gathered row is all zero).
pub fn gather_co_attention(co: &CoOccurrenceMatrix, enc: &EncodedPatient, mask: &AttentionMask) -> Tensor {
    let n = enc.seq_len();
    let mut g = Tensor::zeros(n, n);
    for i in 0..n {
        let allowed: Vec<usize> = (0..n).filter(|&j| mask.allowed(i, j)).collect();
        if allowed.is_empty() {
            continue;
        }
        let ci = enc.code_ids[i];
        let total: f64 = allowed.iter().map(|&j| co.get(ci, enc.code_ids[j])).sum();
        let row = g.row_mut(i);
        if total > 0.0 {
            for &j in &allowed {
                row[j] = co.get(ci, enc.code_ids[j]) / total;
            }
        } else {
            let u = 1.0 / allowed.len() as f64;
            for &j in &allowed {
                row[j] = u;
            }
        }
    }
    g
}
