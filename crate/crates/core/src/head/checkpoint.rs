use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DeepJ, Mode, ModelConfig};
use crate::corpus::{CoOccurrenceMatrix, Vocabulary};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialised trained model, including the co-occurrence matrix it was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub mode: Mode,
    pub vocab_hash: String,
    pub params: crate::numerics::ParamStore,
    pub co: CoOccurrenceMatrix,
}

impl Checkpoint {
    pub fn new(model: &DeepJ, mode: Mode, vocab: &Vocabulary, co: &CoOccurrenceMatrix) -> Result<Self> {
        let vocab_hash = vocab.hash();
        if co.vocab_hash() != vocab_hash {
            return Err(Error::Integrity("co-occurrence matrix was built on another vocabulary".into()));
        }
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            mode,
            vocab_hash,
            params: model.params.clone(),
            co: co.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Rebuilds the model, checking the stored parameters against the config's layout.
    pub fn model(&self) -> Result<DeepJ> {
        let mut model = DeepJ::new(self.config.clone(), 0)?;
        model.params.check_layout(&self.params)?;
        if self.params.values().iter().any(|t| t.data().len() != t.rows() * t.cols()) {
            return Err(Error::Integrity("parameter tensor with inconsistent length".into()));
        }
        model.params = self.params.clone();
        Ok(model)
    }

    pub fn verify_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.vocab_hash != vocab.hash() || self.co.vocab_hash() != self.vocab_hash {
            return Err(Error::Integrity("checkpoint was trained on another vocabulary".into()));
        }
        Ok(())
    }
}
