use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, Error, Result};

/// Reserved padding token; always vocabulary index 0.
pub const PAD: &str = "PAD";

/// Ordered code vocabulary with `PAD` at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from real codes; `PAD` is prepended.
    pub fn from_codes<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD.to_string()];
        all.extend(codes.into_iter().map(Into::into));
        Self::from_full(all)
    }

    /// Builds from a list that already starts with `PAD`.
    pub fn from_full(codes: Vec<String>) -> Result<Self> {
        if codes.first().map(String::as_str) != Some(PAD) {
            return Err(input_err!("vocabulary must start with {PAD}"));
        }
        let mut index = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if index.insert(c.clone(), i).is_some() {
                return Err(input_err!("duplicate code {c:?} in vocabulary"));
            }
        }
        Ok(Self { codes, index })
    }

    /// Size including `PAD`.
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.len() <= 1
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, index: usize) -> &str {
        &self.codes[index]
    }

    /// Hex SHA-256 over the newline-joined code list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.codes {
            h.update(c.as_bytes());
            h.update(b"\n");
        }
        to_hex(&h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.codes)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let codes: Vec<String> = serde_json::from_str(text)?;
        Self::from_full(codes)
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One encounter: a set of codes sharing a timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub t_hours: f64,
    pub codes: Vec<String>,
}

/// A patient's ordered encounter history with a binary outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub label: u8,
    pub encounters: Vec<Encounter>,
    /// Generator ground truth: code → latent module.
    pub planted: Option<BTreeMap<String, usize>>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.encounters.is_empty() {
            return Err(input_err!("patient {} has no encounters", self.id));
        }
        if self.label > 1 {
            return Err(input_err!("patient {} has non-binary label {}", self.id, self.label));
        }
        if self.encounters[0].t_hours != 0.0 {
            return Err(input_err!("patient {}: first encounter must have t = 0", self.id));
        }
        for w in self.encounters.windows(2) {
            if !(w[1].t_hours >= w[0].t_hours) {
                return Err(input_err!("patient {}: encounter times decrease", self.id));
            }
        }
        for (p, enc) in self.encounters.iter().enumerate() {
            if !enc.t_hours.is_finite() {
                return Err(input_err!("patient {}: non-finite time", self.id));
            }
            let mut seen = HashSet::new();
            for c in &enc.codes {
                if c == PAD {
                    return Err(input_err!("patient {}: {PAD} used as a code", self.id));
                }
                if !seen.insert(c) {
                    return Err(input_err!("patient {}: code {c} repeated in encounter {p}", self.id));
                }
            }
        }
        Ok(())
    }

    /// Encounter ordinals containing `code`.
    pub fn encounters_with(&self, code: &str) -> Vec<usize> {
        self.encounters
            .iter()
            .enumerate()
            .filter(|(_, e)| e.codes.iter().any(|c| c == code))
            .map(|(p, _)| p)
            .collect()
    }
}

/// Writes one JSON object per line.
pub fn write_corpus<W: Write>(mut out: W, records: &[PatientRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus<R: Read>(input: R) -> Result<Vec<PatientRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("corpus line {}: {e}", lineno + 1)))?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(times: &[f64]) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            label: 0,
            encounters: times
                .iter()
                .map(|&t| Encounter { t_hours: t, codes: vec!["a".into()] })
                .collect(),
            planted: None,
        }
    }

    #[test]
    fn vocabulary_rules() {
        let v = Vocabulary::from_codes(["a", "b"]).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.index_of(PAD), Some(0));
        assert_eq!(v.index_of("b"), Some(2));
        assert!(Vocabulary::from_codes(["a", "a"]).is_err());
        assert!(Vocabulary::from_full(vec!["a".into()]).is_err());
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn record_validation() {
        assert!(rec(&[0.0, 5.0, 5.0]).validate().is_ok());
        assert!(rec(&[1.0]).validate().is_err());
        assert!(rec(&[0.0, 5.0, 4.0]).validate().is_err());
        assert!(rec(&[]).validate().is_err());
        let mut dup = rec(&[0.0]);
        dup.encounters[0].codes.push("a".into());
        assert!(dup.validate().is_err());
    }

    #[test]
    fn jsonl_schema() {
        let mut r = rec(&[0.0, 12.5]);
        r.planted = Some([("a".to_string(), 1usize)].into_iter().collect());
        let mut buf = Vec::new();
        write_corpus(&mut buf, &[r.clone(), rec(&[0.0])]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["encounters"][1]["t_hours"], 12.5);
        assert_eq!(first["planted"]["a"], 1);
        assert!(text.lines().nth(1).unwrap().contains("\"planted\":null"));
        let back = read_corpus(buf.as_slice()).unwrap();
        assert_eq!(back[0], r);
    }
}
