//! Module weighting, the outcome classifier, the combined objective and the
//! end-to-end forward pass.

mod checkpoint;
mod model;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use model::{forward, loss_and_grads, ComponentLosses, DeepJ, Mode, ModelConfig, Prediction};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// Module attention vector, `1 × d_model`.
    pub attention: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    pub fn init<R: Rng>(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            attention: store.xavier("head.attention", 1, d, rng),
            w1: store.xavier("head.w1", d, hidden, rng),
            b1: store.constant("head.b1", 1, hidden, 0.0),
            w2: store.xavier("head.w2", hidden, 2, rng),
            b2: store.constant("head.b2", 1, 2, 0.0),
        }
    }
}

/// Trade-off weights of the auxiliary losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub kld: f64,
    pub lp: f64,
    pub ent: f64,
    /// Multiplier on the NLL of positive patients; 1.0 disables re-weighting.
    pub positive_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kld: 1.0, lp: 1.0, ent: 1.0, positive_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn nll_only() -> Self {
        Self { kld: 0.0, lp: 0.0, ent: 0.0, positive_weight: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kld", self.kld), ("lp", self.lp), ("ent", self.ent)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("loss weight {name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.positive_weight > 0.0 && self.positive_weight.is_finite()) {
            return Err(config_err!("positive class weight must be positive, got {}", self.positive_weight));
        }
        Ok(())
    }
}

/// `α = softmax(X·wᵀ)` over clusters and `g_final = α·X`.
pub fn module_weighting(tape: &mut Tape, x_final: Var, w: Var) -> Result<(Var, Var)> {
    let (x, wv) = (tape.value(x_final), tape.value(w));
    if x.rows() == 0 || wv.rows() != 1 || wv.cols() != x.cols() {
        return Err(shape_err!("module weighting of {:?} by {:?}", x.shape(), wv.shape()));
    }
    let scores = tape.matmul_t(w, x_final)?;
    let alpha = tape.softmax_rows(scores);
    let g_final = tape.matmul(alpha, x_final)?;
    Ok((alpha, g_final))
}

/// One ReLU hidden layer, then log-softmax over the two classes.
pub fn classify(tape: &mut Tape, store: &ParamStore, g_final: Var, params: &HeadParams) -> Result<Var> {
    let w1 = tape.param(store, params.w1);
    let b1 = tape.param(store, params.b1);
    let w2 = tape.param(store, params.w2);
    let b2 = tape.param(store, params.b2);
    let h = tape.matmul(g_final, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let logits = tape.matmul(h, w2)?;
    let logits = tape.add_row(logits, b2)?;
    Ok(tape.log_softmax_rows(logits))
}

/// `NLL + λ_KLD·l_kld + λ_LP·l_lp + λ_Ent·l_ent`. Returns `(nll, total)`.
pub fn total_loss(
    tape: &mut Tape,
    log_probs: Var,
    label: u8,
    l_kld: Var,
    l_lp: Var,
    l_ent: Var,
    weights: &LossWeights,
) -> Result<(Var, Var)> {
    let mut nll = tape.nll_loss(log_probs, usize::from(label))?;
    if label == 1 && weights.positive_weight != 1.0 {
        nll = tape.scale(nll, weights.positive_weight);
    }
    let mut total = nll;
    for (term, lambda) in [(l_kld, weights.kld), (l_lp, weights.lp), (l_ent, weights.ent)] {
        let scaled = tape.scale(term, lambda);
        total = tape.add(total, scaled)?;
    }
    Ok((nll, total))
}
