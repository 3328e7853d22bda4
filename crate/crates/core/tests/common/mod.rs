#![allow(dead_code)]

pub mod grad;
pub mod oracle;

use deepj_core::cmd::CmdConfig;
use deepj_core::corpus::{
    encode_patient, estimate_co_occurrence, CoOccurrenceMatrix, EncodedPatient, Encounter, PatientRecord, Vocabulary,
};
use deepj_core::gsl::GslConfig;
use deepj_core::head::{DeepJ, ModelConfig};
use deepj_core::numerics::Tensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn toy_vocab(n: usize) -> Vocabulary {
    Vocabulary::from_codes((0..n).map(|i| format!("c{i:02}"))).unwrap()
}

/// Random record with up to `max_enc` encounters of up to `max_codes` distinct codes.
pub fn random_record(rng: &mut impl Rng, id: &str, vocab: &Vocabulary, max_enc: usize, max_codes: usize) -> PatientRecord {
    let real: Vec<&String> = vocab.codes()[1..].iter().collect();
    let n_enc = rng.random_range(1..=max_enc);
    let mut t = 0.0;
    let encounters = (0..n_enc)
        .map(|_| {
            let k = rng.random_range(1..=max_codes.min(real.len()));
            let codes = real.choose_multiple(rng, k).map(|c| c.to_string()).collect();
            let e = Encounter { t_hours: t, codes };
            t += rng.random_range(1.0..72.0);
            e
        })
        .collect();
    PatientRecord { id: id.to_string(), label: rng.random_range(0..2u8), encounters, planted: None }
}

pub fn random_corpus(seed: u64, n: usize, vocab: &Vocabulary, max_enc: usize, max_codes: usize) -> Vec<PatientRecord> {
    let mut r = rng(seed);
    (0..n).map(|i| random_record(&mut r, &format!("p{i}"), vocab, max_enc, max_codes)).collect()
}

pub fn small_config(vocab: &Vocabulary, d: usize, p_max: usize, c_max: usize, clusters: Vec<usize>) -> ModelConfig {
    ModelConfig {
        gsl: GslConfig { d_model: d, n_blocks: 2, t_max: 100.0, p_max, c_max, ffn_hidden: 2 * d },
        cmd: CmdConfig { clusters },
        vocab_size: vocab.len(),
        classifier_hidden: 0,
    }
}

/// A model, a co-occurrence matrix and encoded patients drawn from one seed.
pub struct Fixture {
    pub vocab: Vocabulary,
    pub records: Vec<PatientRecord>,
    pub encoded: Vec<EncodedPatient>,
    pub co: CoOccurrenceMatrix,
    pub model: DeepJ,
}

pub fn fixture(seed: u64, n: usize, d: usize, p_max: usize, c_max: usize, clusters: Vec<usize>) -> Fixture {
    let vocab = toy_vocab(10);
    let records = random_corpus(seed, n, &vocab, p_max + 1, c_max + 1);
    let encoded = records.iter().map(|r| encode_patient(r, p_max, c_max, &vocab).unwrap()).collect();
    let co = estimate_co_occurrence(&records, &vocab).unwrap();
    let model = DeepJ::new(small_config(&vocab, d, p_max, c_max, clusters), seed).unwrap();
    Fixture { vocab, records, encoded, co, model }
}

/// Random permutation of positions that only moves codes within their encounter.
pub fn within_encounter_shuffle(rng: &mut impl Rng, enc: &EncodedPatient) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..enc.seq_len()).collect();
    for block in perm.chunks_mut(enc.c_max) {
        block.shuffle(rng);
    }
    perm
}
