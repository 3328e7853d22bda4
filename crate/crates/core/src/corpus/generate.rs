use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{Encounter, PatientRecord, Vocabulary};
use crate::error::{config_err, Result};

/// Parameters of the planted-structure generator.
///
/// Module 0 is the risk module: a patient's rule label is positive iff
/// risk-module codes appear in two or more encounters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub modules: usize,
    pub codes_per_module: usize,
    /// Number of real codes; those not owned by a module are background codes.
    pub vocab_size: usize,
    pub patients: usize,
    pub p_max: usize,
    pub c_max: usize,
    pub positive_rate: f64,
    /// Probability that a label is redrawn from Bernoulli(positive_rate)
    /// instead of following the rule.
    pub noise_rate: f64,
    /// Probability that a rule-negative patient carries the risk module in
    /// exactly one encounter.
    pub decoy_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            modules: 8,
            codes_per_module: 6,
            vocab_size: 72,
            patients: 2000,
            p_max: 4,
            c_max: 16,
            positive_rate: 0.075,
            noise_rate: 0.1,
            decoy_rate: 0.3,
            seed: 7,
        }
    }
}

pub const RISK_MODULE: usize = 0;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modules < 2 {
            return Err(config_err!("need at least 2 modules, got {}", self.modules));
        }
        if self.codes_per_module < 2 {
            return Err(config_err!("need at least 2 codes per module"));
        }
        if self.vocab_size < self.modules * self.codes_per_module {
            return Err(config_err!(
                "vocabulary of {} cannot hold {} modules of {} codes",
                self.vocab_size,
                self.modules,
                self.codes_per_module
            ));
        }
        if self.patients == 0 {
            return Err(config_err!("patient count must be positive"));
        }
        if self.p_max < 2 {
            return Err(config_err!("p_max must be at least 2 to express the risk rule"));
        }
        if self.c_max < 4 {
            return Err(config_err!("c_max must be at least 4"));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(config_err!("positive rate must lie in (0, 1)"));
        }
        for (name, v) in [("noise rate", self.noise_rate), ("decoy rate", self.decoy_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn background_count(&self) -> usize {
        self.vocab_size - self.modules * self.codes_per_module
    }
}

pub fn module_code(module: usize, index: usize) -> String {
    format!("m{module}c{index}")
}

fn background_code(index: usize) -> String {
    format!("bg{index}")
}

/// The generator's vocabulary: module codes first, then background codes.
pub fn synthetic_vocabulary(cfg: &GenConfig) -> Result<Vocabulary> {
    cfg.validate()?;
    let mut codes = Vec::with_capacity(cfg.vocab_size);
    for m in 0..cfg.modules {
        for c in 0..cfg.codes_per_module {
            codes.push(module_code(m, c));
        }
    }
    for b in 0..cfg.background_count() {
        codes.push(background_code(b));
    }
    Vocabulary::from_codes(codes)
}

/// True iff risk-module codes appear in two or more encounters.
pub fn risk_rule(record: &PatientRecord) -> bool {
    let prefix = format!("m{RISK_MODULE}c");
    record
        .encounters
        .iter()
        .filter(|enc| enc.codes.iter().any(|c| c.starts_with(&prefix)))
        .count()
        >= 2
}

/// Generates a deterministic corpus with planted module structure.
pub fn generate_synthetic_corpus(cfg: &GenConfig) -> Result<(Vec<PatientRecord>, Vocabulary)> {
    let vocab = synthetic_vocabulary(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let records = (0..cfg.patients).map(|i| generate_patient(cfg, i, &mut rng)).collect();
    Ok((records, vocab))
}

fn generate_patient(cfg: &GenConfig, index: usize, rng: &mut ChaCha8Rng) -> PatientRecord {
    let risky = rng.random_bool(cfg.positive_rate);
    let n_enc = if risky || rng.random_bool(0.9) { rng.random_range(2..=cfg.p_max) } else { 1 };
    let others: Vec<usize> = (0..cfg.modules).filter(|&m| m != RISK_MODULE).collect();

    // (module, encounters it appears in)
    let mut plan: Vec<(usize, BTreeSet<usize>)> = Vec::new();
    let all: Vec<usize> = (0..n_enc).collect();
    let spread = |rng: &mut ChaCha8Rng| -> BTreeSet<usize> {
        let mut set: BTreeSet<usize> = all.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
        if set.is_empty() {
            set.insert(rng.random_range(0..n_enc));
        }
        set
    };
    if risky {
        let k = rng.random_range(2..=n_enc);
        let chosen: BTreeSet<usize> = all.choose_multiple(rng, k).copied().collect();
        plan.push((RISK_MODULE, chosen));
        let other = *others.choose(rng).expect("at least one non-risk module");
        plan.push((other, spread(rng)));
    } else if rng.random_bool(cfg.decoy_rate) {
        plan.push((RISK_MODULE, BTreeSet::from([rng.random_range(0..n_enc)])));
        let other = *others.choose(rng).expect("at least one non-risk module");
        plan.push((other, spread(rng)));
    } else {
        let count = if rng.random_bool(0.5) { 1 } else { 2 }.min(others.len());
        for m in others.choose_multiple(rng, count).copied().collect::<Vec<_>>() {
            plan.push((m, spread(rng)));
        }
    }

    let mut encounters = Vec::with_capacity(n_enc);
    let mut planted = BTreeMap::new();
    let mut t = 0.0;
    let per_module_max = cfg.codes_per_module.min(4);
    let backgrounds = cfg.background_count();
    for p in 0..n_enc {
        if p > 0 {
            t += rng.random_range(6.0..240.0_f64).round();
        }
        let mut codes: Vec<String> = Vec::new();
        for (m, present) in &plan {
            if !present.contains(&p) {
                continue;
            }
            let k = rng.random_range(2..=per_module_max);
            let picks: Vec<usize> =
                (0..cfg.codes_per_module).collect::<Vec<_>>().choose_multiple(rng, k).copied().collect();
            for c in picks {
                let code = module_code(*m, c);
                planted.insert(code.clone(), *m);
                codes.push(code);
            }
        }
        if backgrounds > 0 {
            let min_bg = usize::from(codes.is_empty());
            let n_bg = rng.random_range(min_bg..=2).min(backgrounds);
            let picks: Vec<usize> =
                (0..backgrounds).collect::<Vec<_>>().choose_multiple(rng, n_bg).copied().collect();
            codes.extend(picks.into_iter().map(background_code));
        }
        codes.truncate(cfg.c_max);
        codes.shuffle(rng);
        encounters.push(Encounter { t_hours: t, codes });
    }

    let mut record = PatientRecord { id: format!("p{index:05}"), label: 0, encounters, planted: None };
    planted.retain(|code, _| record.encounters.iter().any(|e| e.codes.contains(code)));
    record.planted = Some(planted);
    let rule = risk_rule(&record);
    let label = if rng.random_bool(cfg.noise_rate) { rng.random_bool(cfg.positive_rate) } else { rule };
    record.label = u8::from(label);
    record
}
