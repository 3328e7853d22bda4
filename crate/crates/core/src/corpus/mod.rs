//! Synthetic corpus generation, patient encoding, co-occurrence estimation and splits.

mod cooccurrence;
mod encode;
mod generate;
mod record;
mod split;

pub use cooccurrence::{estimate_co_occurrence, gather_co_attention, CoOccurrenceMatrix};
pub use encode::{encode_patient, EncodedPatient};
pub use generate::{
    generate_synthetic_corpus, module_code, risk_rule, synthetic_vocabulary, GenConfig, RISK_MODULE,
};
pub use record::{read_corpus, write_corpus, Encounter, PatientRecord, Vocabulary, PAD};
pub use split::{kfold_split, stratified_holdout, Fold};
