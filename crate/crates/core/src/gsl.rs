//! Graph structure learning: embeddings with time encoding, the causal
//! padding mask, stacked attention blocks and the attention continuity loss.
//!
//! Block 1 takes its attention weights from the gathered co-occurrence
//! matrix; later blocks learn single-head scaled dot-product attention. The
//! last block's attention is the learned adjacency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedPatient;
use crate::error::{config_err, input_err, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GslConfig {
    pub d_model: usize,
    /// Number of attention blocks, including the co-occurrence block.
    pub n_blocks: usize,
    /// Time normaliser in hours.
    pub t_max: f64,
    pub p_max: usize,
    pub c_max: usize,
    pub ffn_hidden: usize,
}

impl Default for GslConfig {
    fn default() -> Self {
        Self { d_model: 64, n_blocks: 3, t_max: 1.0, p_max: 4, c_max: 16, ffn_hidden: 256 }
    }
}

impl GslConfig {
    pub fn seq_len(&self) -> usize {
        self.p_max * self.c_max
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(config_err!("d_model must be even and positive, got {}", self.d_model));
        }
        if self.n_blocks < 2 {
            return Err(config_err!("need at least 2 blocks, got {}", self.n_blocks));
        }
        if !(self.t_max > 0.0) || !self.t_max.is_finite() {
            return Err(config_err!("t_max must be positive, got {}", self.t_max));
        }
        if self.p_max == 0 || self.c_max == 0 || self.ffn_hidden == 0 {
            return Err(config_err!("p_max, c_max and ffn_hidden must be positive"));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of an elapsed time in hours.
///
/// Pair `k` (1-based, `k = 1..=d_model/2`) occupies slots `2k−2` (sine) and
/// `2k−1` (cosine) with argument `t / t_max^(2k/d_model)`, so the slowest pair
/// sees `t / t_max`.
pub fn time_encode(t: f64, cfg: &GslConfig) -> Result<Vec<f64>> {
    if !(cfg.t_max > 0.0) {
        return Err(config_err!("t_max must be positive, got {}", cfg.t_max));
    }
    if t < 0.0 {
        return Err(input_err!("elapsed time {t} is negative"));
    }
    let d = cfg.d_model;
    let mut out = vec![0.0; d];
    for k in 1..=d / 2 {
        let arg = t / cfg.t_max.powf(2.0 * k as f64 / d as f64);
        out[2 * k - 2] = arg.sin();
        out[2 * k - 1] = arg.cos();
    }
    Ok(out)
}

/// Additive attention mask: entry `(i, j)` is `−∞` iff `enc(i) < enc(j)` or
/// either position is padding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    /// The additive value: `0` or `−∞`.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        if self.allowed(i, j) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Row-major allowed flags.
    pub fn as_flags(&self) -> &[bool] {
        &self.allowed
    }
}

pub fn build_mask(enc: &EncodedPatient) -> AttentionMask {
    let n = enc.seq_len();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        if enc.is_pad[i] {
            continue;
        }
        for j in 0..n {
            allowed[i * n + j] = !enc.is_pad[j] && enc.enc_index[i] >= enc.enc_index[j];
        }
    }
    AttentionMask { n, allowed }
}

/// Parameter handles of one attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgctParams {
    /// Absent on the co-occurrence block.
    pub w_q: Option<ParamId>,
    pub w_k: Option<ParamId>,
    pub w_v: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl EgctParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        learned_attention: bool,
        rng: &mut R,
    ) -> Self {
        let (w_q, w_k) = if learned_attention {
            (
                Some(store.xavier(format!("{prefix}.w_q"), d, d, rng)),
                Some(store.xavier(format!("{prefix}.w_k"), d, d, rng)),
            )
        } else {
            (None, None)
        };
        Self {
            w_q,
            w_k,
            w_v: store.xavier(format!("{prefix}.w_v"), d, d, rng),
            ffn_w1: store.xavier(format!("{prefix}.ffn_w1"), d, hidden, rng),
            ffn_b1: store.constant(format!("{prefix}.ffn_b1"), 1, hidden, 0.0),
            ffn_w2: store.xavier(format!("{prefix}.ffn_w2"), hidden, d, rng),
            ffn_b2: store.constant(format!("{prefix}.ffn_b2"), 1, d, 0.0),
            ln1_gain: store.constant(format!("{prefix}.ln1_gain"), 1, d, 1.0),
            ln1_bias: store.constant(format!("{prefix}.ln1_bias"), 1, d, 0.0),
            ln2_gain: store.constant(format!("{prefix}.ln2_gain"), 1, d, 1.0),
            ln2_bias: store.constant(format!("{prefix}.ln2_bias"), 1, d, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GslParams {
    /// `|C| × d_model`; row 0 is `PAD` and stays zero.
    pub embedding: ParamId,
    pub blocks: Vec<EgctParams>,
}

impl GslParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &GslConfig, vocab_size: usize, rng: &mut R) -> Self {
        let embedding = store.normal("gsl.embedding", vocab_size, cfg.d_model, 1.0, rng);
        store.get_mut(embedding).row_mut(0).fill(0.0);
        let blocks = (0..cfg.n_blocks)
            .map(|b| EgctParams::init(store, &format!("gsl.block{b}"), cfg.d_model, cfg.ffn_hidden, b > 0, rng))
            .collect();
        Self { embedding, blocks }
    }
}

/// `Z = E + TE(V)` with padding rows exactly zero.
pub fn embed_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncodedPatient,
    embedding: ParamId,
    cfg: &GslConfig,
) -> Result<Var> {
    let vocab = store.get(embedding).rows();
    if let Some(&bad) = enc.code_ids.iter().find(|&&c| c >= vocab) {
        return Err(input_err!("code id {bad} outside a vocabulary of {vocab}"));
    }
    let index: Vec<Option<usize>> =
        enc.code_ids.iter().zip(&enc.is_pad).map(|(&c, &pad)| (!pad).then_some(c)).collect();
    let table = tape.param(store, embedding);
    let e = tape.gather_rows(table, &index)?;
    let mut te = Tensor::zeros(enc.seq_len(), cfg.d_model);
    for i in (0..enc.seq_len()).filter(|&i| !enc.is_pad[i]) {
        te.row_mut(i).copy_from_slice(&time_encode(enc.time[i], cfg)?);
    }
    let te = tape.constant(te);
    tape.add(e, te)
}

/// One attention block. Returns the updated embeddings and the attention matrix.
///
/// With `weights_override` the attention matrix is taken verbatim; otherwise
/// it is `masked_softmax(q·kᵀ/√d)`.
pub fn egct_block(
    tape: &mut Tape,
    store: &ParamStore,
    z: Var,
    mask: &AttentionMask,
    params: &EgctParams,
    weights_override: Option<Var>,
) -> Result<(Var, Var)> {
    let n = tape.value(z).rows();
    let d = tape.value(z).cols();
    if mask.size() != n {
        return Err(input_err!("mask of size {} for {n} positions", mask.size()));
    }
    let valid: Vec<bool> = (0..n).map(|i| (0..n).any(|j| mask.allowed(i, j))).collect();

    let attention = match weights_override {
        Some(w) => {
            let wv = tape.value(w);
            if wv.shape() != [n, n] {
                return Err(input_err!("attention override of shape {:?} for {n} positions", wv.shape()));
            }
            for i in 0..n {
                for j in 0..n {
                    if !mask.allowed(i, j) && wv.get(i, j) != 0.0 {
                        return Err(input_err!("attention override is nonzero at masked entry ({i}, {j})"));
                    }
                }
            }
            w
        }
        None => {
            let (Some(wq), Some(wk)) = (params.w_q, params.w_k) else {
                return Err(input_err!("block has no query/key weights and no attention override"));
            };
            let wq = tape.param(store, wq);
            let wk = tape.param(store, wk);
            let q = tape.matmul(z, wq)?;
            let k = tape.matmul(z, wk)?;
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
            tape.masked_softmax(scores, mask.as_flags())?
        }
    };

    let wv = tape.param(store, params.w_v);
    let v = tape.matmul(z, wv)?;
    let mixed = tape.matmul(attention, v)?;
    let res1 = tape.add(z, mixed)?;
    let (g1, b1) = (tape.param(store, params.ln1_gain), tape.param(store, params.ln1_bias));
    let h1 = tape.layer_norm(res1, g1, b1)?;
    let h1 = tape.mask_rows(h1, &valid)?;

    let w1 = tape.param(store, params.ffn_w1);
    let bias1 = tape.param(store, params.ffn_b1);
    let w2 = tape.param(store, params.ffn_w2);
    let bias2 = tape.param(store, params.ffn_b2);
    let f = tape.matmul(h1, w1)?;
    let f = tape.add_row(f, bias1)?;
    let f = tape.relu(f);
    let f = tape.matmul(f, w2)?;
    let f = tape.add_row(f, bias2)?;
    let res2 = tape.add(h1, f)?;
    let (g2, b2) = (tape.param(store, params.ln2_gain), tape.param(store, params.ln2_bias));
    let out = tape.layer_norm(res2, g2, b2)?;
    let out = tape.mask_rows(out, &valid)?;
    Ok((out, attention))
}

/// Tape handles produced by [`gsl_forward`].
#[derive(Clone, Debug)]
pub struct GslVars {
    /// Node representations `X`.
    pub x: Var,
    /// Learned adjacency: the last block's attention.
    pub adjacency: Var,
    pub stack: Vec<Var>,
}

/// Materialised graph-structure output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GslOutput {
    pub x: Tensor,
    pub adjacency: Tensor,
    pub stack: Vec<Tensor>,
}

impl GslVars {
    pub fn materialize(&self, tape: &Tape) -> GslOutput {
        GslOutput {
            x: tape.value(self.x).clone(),
            adjacency: tape.value(self.adjacency).clone(),
            stack: self.stack.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// Runs every block. Block 1 always uses `co_gathered`; with `ablate` every block does.
pub fn gsl_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GslParams,
    cfg: &GslConfig,
    enc: &EncodedPatient,
    co_gathered: &Tensor,
    ablate: bool,
) -> Result<GslVars> {
    cfg.validate()?;
    if params.blocks.len() != cfg.n_blocks {
        return Err(config_err!("{} block parameter sets for {} blocks", params.blocks.len(), cfg.n_blocks));
    }
    let mask = build_mask(enc);
    let mut z = embed_sequence(tape, store, enc, params.embedding, cfg)?;
    let co = tape.constant(co_gathered.clone());
    let mut stack = Vec::with_capacity(cfg.n_blocks);
    for (b, block) in params.blocks.iter().enumerate() {
        let over = (b == 0 || ablate).then_some(co);
        let (next, attention) = egct_block(tape, store, z, &mask, block, over)?;
        z = next;
        stack.push(attention);
    }
    Ok(GslVars { x: z, adjacency: *stack.last().expect("n_blocks >= 2"), stack })
}

/// `Σ_{n≥2} KL(A^(n−1) ‖ A^(n))`, each term averaged over valid rows.
pub fn kld_continuity_loss(tape: &mut Tape, stack: &[Var], valid: &[bool]) -> Result<Var> {
    if stack.len() < 2 {
        return Err(config_err!("continuity loss needs at least 2 attention matrices"));
    }
    let mut total = tape.kl_divergence_rowwise(stack[0], stack[1], valid)?;
    for w in stack.windows(2).skip(1) {
        let term = tape.kl_divergence_rowwise(w[0], w[1], valid)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}
