use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{classify, module_weighting, total_loss, HeadParams, LossWeights};
use crate::cmd::{cmd_forward, entropy_loss, link_prediction_loss, CmdConfig, DiffPoolParams, PoolChain, PoolVars};
use crate::corpus::{gather_co_attention, CoOccurrenceMatrix, EncodedPatient};
use crate::error::{config_err, input_err, Result};
use crate::gsl::{build_mask, gsl_forward, kld_continuity_loss, GslConfig, GslOutput, GslParams, GslVars};
use crate::numerics::{GradBuffer, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub gsl: GslConfig,
    pub cmd: CmdConfig,
    /// Vocabulary size including `PAD`.
    pub vocab_size: usize,
    /// Classifier hidden width; `0` means `d_model`.
    #[serde(default)]
    pub classifier_hidden: usize,
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        if self.classifier_hidden == 0 {
            self.gsl.d_model
        } else {
            self.classifier_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gsl.validate()?;
        self.cmd.validate(self.gsl.seq_len())?;
        if self.vocab_size < 2 {
            return Err(config_err!("vocabulary needs at least one real code"));
        }
        Ok(())
    }
}

/// Which ablation the forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    /// Co-occurrence attention in every block.
    NoGsl,
    /// Mean pooling over valid positions instead of pooling and weighting.
    NoCmd,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoGsl => "no_gsl",
            Mode::NoCmd => "no_cmd",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Mode::Full),
            "no_gsl" => Ok(Mode::NoGsl),
            "no_cmd" => Ok(Mode::NoCmd),
            _ => Err(crate::Error::Usage(format!("unknown mode {s:?}"))),
        }
    }
}

/// Model parameters together with the handles that address them.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepJ {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub gsl: GslParams,
    pub cmd: Vec<DiffPoolParams>,
    pub head: HeadParams,
}

impl DeepJ {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.gsl.d_model;
        let gsl = GslParams::init(&mut params, &config.gsl, config.vocab_size, &mut rng);
        let cmd = config
            .cmd
            .clusters
            .iter()
            .enumerate()
            .map(|(m, &g)| DiffPoolParams::init(&mut params, &format!("cmd.block{m}"), d, g, &mut rng))
            .collect();
        let head = HeadParams::init(&mut params, d, config.hidden(), &mut rng);
        Ok(Self { config, params, gsl, cmd, head })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentLosses {
    pub nll: f64,
    pub kld: f64,
    pub lp: f64,
    pub ent: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mode: Mode,
    pub log_probs: [f64; 2],
    pub prob_positive: f64,
    pub g_final: Vec<f64>,
    /// `α` over final clusters; empty without pooling.
    pub module_weights: Vec<f64>,
    pub gsl: GslOutput,
    pub chain: PoolChain,
}

struct ForwardVars {
    log_probs: Var,
    nll: Var,
    kld: Var,
    lp: Var,
    ent: Var,
    total: Var,
    g_final: Var,
    alpha: Option<Var>,
    gsl: GslVars,
    chain: Option<PoolVars>,
}

fn record(
    tape: &mut Tape,
    model: &DeepJ,
    enc: &EncodedPatient,
    co: &CoOccurrenceMatrix,
    mode: Mode,
    weights: &LossWeights,
) -> Result<ForwardVars> {
    let cfg = &model.config;
    if co.size() != cfg.vocab_size {
        return Err(input_err!("co-occurrence matrix of size {} for a vocabulary of {}", co.size(), cfg.vocab_size));
    }
    if enc.p_max != cfg.gsl.p_max || enc.c_max != cfg.gsl.c_max {
        return Err(input_err!(
            "patient {} encoded as {}x{}, model expects {}x{}",
            enc.id,
            enc.p_max,
            enc.c_max,
            cfg.gsl.p_max,
            cfg.gsl.c_max
        ));
    }
    if enc.n_valid() == 0 {
        return Err(input_err!("patient {} has no codes", enc.id));
    }
    let store = &model.params;
    let mask = build_mask(enc);
    let gathered = gather_co_attention(co, enc, &mask);
    let gsl = gsl_forward(tape, store, &model.gsl, &cfg.gsl, enc, &gathered, mode == Mode::NoGsl)?;
    let valid = enc.valid();
    let kld = kld_continuity_loss(tape, &gsl.stack, &valid)?;

    let (g_final, alpha, chain, lp, ent) = match mode {
        Mode::Full | Mode::NoGsl => {
            let chain = cmd_forward(tape, store, &model.cmd, &cfg.cmd, gsl.adjacency, gsl.x, &valid)?;
            let lp = link_prediction_loss(tape, &chain)?;
            let ent = entropy_loss(tape, &chain)?;
            let w = tape.param(store, model.head.attention);
            let (alpha, g_final) = module_weighting(tape, chain.final_features(), w)?;
            (g_final, Some(alpha), Some(chain), lp, ent)
        }
        Mode::NoCmd => {
            let g_final = tape.mean_rows(gsl.x, &valid)?;
            let lp = tape.constant(Tensor::scalar(0.0));
            let ent = tape.constant(Tensor::scalar(0.0));
            (g_final, None, None, lp, ent)
        }
    };
    let log_probs = classify(tape, store, g_final, &model.head)?;
    let (nll, total) = total_loss(tape, log_probs, enc.label, kld, lp, ent, weights)?;
    Ok(ForwardVars { log_probs, nll, kld, lp, ent, total, g_final, alpha, gsl, chain })
}

fn losses(tape: &Tape, v: &ForwardVars) -> ComponentLosses {
    ComponentLosses {
        nll: tape.value(v.nll).item(),
        kld: tape.value(v.kld).item(),
        lp: tape.value(v.lp).item(),
        ent: tape.value(v.ent).item(),
        total: tape.value(v.total).item(),
    }
}

/// Runs one patient through the selected pipeline.
pub fn forward(
    model: &DeepJ,
    enc: &EncodedPatient,
    co: &CoOccurrenceMatrix,
    mode: Mode,
    weights: &LossWeights,
) -> Result<(Prediction, ComponentLosses)> {
    let mut tape = Tape::new();
    let v = record(&mut tape, model, enc, co, mode, weights)?;
    let lp = tape.value(v.log_probs);
    let log_probs = [lp.get(0, 0), lp.get(0, 1)];
    let prediction = Prediction {
        mode,
        log_probs,
        prob_positive: log_probs[1].exp().clamp(0.0, 1.0),
        g_final: tape.value(v.g_final).data().to_vec(),
        module_weights: v.alpha.map(|a| tape.value(a).data().to_vec()).unwrap_or_default(),
        gsl: v.gsl.materialize(&tape),
        chain: v.chain.as_ref().map(|c| c.materialize(&tape)).unwrap_or_else(PoolChain::empty),
    };
    Ok((prediction, losses(&tape, &v)))
}

/// Loss components and the gradient of the total loss for one patient.
pub fn loss_and_grads(
    model: &DeepJ,
    enc: &EncodedPatient,
    co: &CoOccurrenceMatrix,
    mode: Mode,
    weights: &LossWeights,
) -> Result<(ComponentLosses, GradBuffer)> {
    let mut tape = Tape::new();
    let v = record(&mut tape, model, enc, co, mode, weights)?;
    let grads = tape.backward(v.total)?;
    Ok((losses(&tape, &v), grads.param_grads(&tape, &model.params)))
}
