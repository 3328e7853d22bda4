//! Clinical module discovery: stacked differentiable pooling over the
//! learned graph, with link-prediction and assignment-entropy losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, shape_err, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Cluster counts `g^(2)..g^(M+1)`; `g^(1)` is the sequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmdConfig {
    pub clusters: Vec<usize>,
}

impl Default for CmdConfig {
    fn default() -> Self {
        Self { clusters: vec![12, 4] }
    }
}

impl CmdConfig {
    pub fn blocks(&self) -> usize {
        self.clusters.len()
    }

    pub fn final_clusters(&self) -> usize {
        *self.clusters.last().unwrap_or(&0)
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(config_err!("need at least one pooling block"));
        }
        let mut prev = seq_len;
        for &g in &self.clusters {
            if g >= prev {
                return Err(config_err!("cluster sizes must shrink strictly: {g} after {prev}"));
            }
            prev = g;
        }
        if self.final_clusters() < 2 {
            return Err(config_err!("final level needs at least 2 clusters"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// `act((a + I)·x·w)` with invalid rows zeroed.
pub fn gcn_layer(
    tape: &mut Tape,
    a: Var,
    x: Var,
    w: Var,
    valid: &[bool],
    activation: Activation,
) -> Result<Var> {
    let (av, xv, wv) = (tape.value(a), tape.value(x), tape.value(w));
    if av.rows() != av.cols() || av.rows() != xv.rows() || xv.cols() != wv.rows() {
        return Err(shape_err!(
            "gcn_layer adjacency {:?}, features {:?}, weights {:?}",
            av.shape(),
            xv.shape(),
            wv.shape()
        ));
    }
    if valid.len() != xv.rows() {
        return Err(shape_err!("{} validity flags for {} nodes", valid.len(), xv.rows()));
    }
    let ax = tape.matmul(a, x)?;
    let agg = tape.add(ax, x)?;
    let out = tape.matmul(agg, w)?;
    let out = match activation {
        Activation::Relu => tape.relu(out),
        Activation::Identity => out,
    };
    tape.mask_rows(out, valid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffPoolParams {
    pub embed_w: ParamId,
    pub pool_w: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl DiffPoolParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, clusters: usize, rng: &mut R) -> Self {
        Self {
            embed_w: store.xavier(format!("{prefix}.embed_w"), d, d, rng),
            pool_w: store.xavier(format!("{prefix}.pool_w"), d, clusters, rng),
            norm_gain: store.constant(format!("{prefix}.norm_gain"), 1, d, 1.0),
            norm_bias: store.constant(format!("{prefix}.norm_bias"), 1, d, 0.0),
        }
    }

    pub fn clusters(&self, store: &ParamStore) -> usize {
        store.get(self.pool_w).cols()
    }
}

/// Tape handles of one pooling block.
#[derive(Clone, Debug)]
pub struct PoolLevel {
    /// Input adjacency `𝒜^(m)`.
    pub input_adjacency: Var,
    /// Node validity of the input graph.
    pub valid: Vec<bool>,
    /// Soft assignment `S^(m)`, `g^(m) × g^(m+1)`.
    pub assignment: Var,
    pub pooled_features: Var,
    pub pooled_adjacency: Var,
}

/// One pooling step. Returns `(a', x', s)`.
pub fn diffpool_block(
    tape: &mut Tape,
    store: &ParamStore,
    a: Var,
    x: Var,
    params: &DiffPoolParams,
    valid: &[bool],
) -> Result<(Var, Var, Var)> {
    let g = tape.value(x).rows();
    let g_next = params.clusters(store);
    if g_next >= g {
        return Err(config_err!("pooling {g} nodes into {g_next} clusters does not shrink"));
    }
    let embed_w = tape.param(store, params.embed_w);
    let pool_w = tape.param(store, params.pool_w);

    let h = gcn_layer(tape, a, x, embed_w, valid, Activation::Relu)?;
    let h = tape.graph_norm(h, valid)?;
    let gain = tape.param(store, params.norm_gain);
    let bias = tape.param(store, params.norm_bias);
    let h = tape.mul_row(h, gain)?;
    let h = tape.add_row(h, bias)?;
    let h = tape.mask_rows(h, valid)?;
    let h = tape.add(h, x)?;

    let logits = gcn_layer(tape, a, x, pool_w, valid, Activation::Identity)?;
    // per-cluster normalisation keeps one cluster from absorbing every node
    let logits = tape.graph_norm(logits, valid)?;
    let allowed: Vec<bool> = valid.iter().flat_map(|&v| std::iter::repeat_n(v, g_next)).collect();
    let s = tape.masked_softmax(logits, &allowed)?;

    let x_next = tape.t_matmul(s, h)?;
    let sa = tape.t_matmul(s, a)?;
    let a_next = tape.matmul(sa, s)?;
    Ok((a_next, x_next, s))
}

/// Tape handles for the whole pooling chain.
#[derive(Clone, Debug)]
pub struct PoolVars {
    pub levels: Vec<PoolLevel>,
    /// `Π = S^(1)·…·S^(M)`.
    pub composed: Var,
}

impl PoolVars {
    pub fn final_features(&self) -> Var {
        self.levels.last().expect("at least one level").pooled_features
    }

    pub fn materialize(&self, tape: &Tape) -> PoolChain {
        PoolChain {
            assignments: self.levels.iter().map(|l| tape.value(l.assignment).clone()).collect(),
            features: self.levels.iter().map(|l| tape.value(l.pooled_features).clone()).collect(),
            adjacencies: self.levels.iter().map(|l| tape.value(l.pooled_adjacency).clone()).collect(),
            composed: tape.value(self.composed).clone(),
            valid: self.levels.first().map(|l| l.valid.clone()).unwrap_or_default(),
        }
    }
}

/// Materialised pooling chain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolChain {
    /// `S^(m)` per block.
    pub assignments: Vec<Tensor>,
    /// `X^(m+1)` per block.
    pub features: Vec<Tensor>,
    /// `𝒜^(m+1)` per block.
    pub adjacencies: Vec<Tensor>,
    /// Composed assignment from original positions to final clusters.
    pub composed: Tensor,
    /// Validity of the original positions.
    pub valid: Vec<bool>,
}

impl PoolChain {
    pub fn empty() -> Self {
        Self { composed: Tensor::zeros(0, 0), ..Self::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Chains every pooling block starting from the learned graph `(adjacency, x)`.
pub fn cmd_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &[DiffPoolParams],
    cfg: &CmdConfig,
    adjacency: Var,
    x: Var,
    valid: &[bool],
) -> Result<PoolVars> {
    let n = tape.value(x).rows();
    let av = tape.value(adjacency);
    if av.rows() != av.cols() || av.rows() != n {
        return Err(input_err!("adjacency {:?} does not match {n} nodes", av.shape()));
    }
    cfg.validate(n)?;
    if params.len() != cfg.blocks() {
        return Err(config_err!("{} pooling parameter sets for {} blocks", params.len(), cfg.blocks()));
    }
    for (p, &g) in params.iter().zip(&cfg.clusters) {
        if p.clusters(store) != g {
            return Err(config_err!("pooling weights produce {} clusters, config says {g}", p.clusters(store)));
        }
    }
    let mut levels = Vec::with_capacity(params.len());
    let (mut a, mut h, mut flags) = (adjacency, x, valid.to_vec());
    let mut composed: Option<Var> = None;
    for p in params {
        let (a_next, x_next, s) = diffpool_block(tape, store, a, h, p, &flags)?;
        composed = Some(match composed {
            None => s,
            Some(c) => tape.matmul(c, s)?,
        });
        levels.push(PoolLevel {
            input_adjacency: a,
            valid: flags.clone(),
            assignment: s,
            pooled_features: x_next,
            pooled_adjacency: a_next,
        });
        flags = vec![true; tape.value(x_next).rows()];
        a = a_next;
        h = x_next;
    }
    Ok(PoolVars { levels, composed: composed.expect("at least one block") })
}

/// `Σ_m ‖𝒜^(m) − S^(m)S^(m)ᵀ‖_F / n_valid(m)²`.
pub fn link_prediction_loss(tape: &mut Tape, chain: &PoolVars) -> Result<Var> {
    let mut total: Option<Var> = None;
    for level in &chain.levels {
        let n_valid = level.valid.iter().filter(|&&v| v).count();
        let recon = tape.matmul_t(level.assignment, level.assignment)?;
        let diff = tape.sub(level.input_adjacency, recon)?;
        let norm = tape.frobenius_norm(diff);
        let term = tape.scale(norm, 1.0 / (n_valid.max(1) * n_valid.max(1)) as f64);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| input_err!("empty pooling chain"))
}

/// `Σ_m` mean row entropy of `S^(m)` over its valid rows.
pub fn entropy_loss(tape: &mut Tape, chain: &PoolVars) -> Result<Var> {
    let mut total: Option<Var> = None;
    for level in &chain.levels {
        let term = tape.row_entropy_sum(level.assignment, &level.valid)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or_else(|| input_err!("empty pooling chain"))
}
