//! Central finite-difference checks for tape operations and model objectives.

use std::collections::BTreeMap;

use deepj_core::cmd::{
    cmd_forward, diffpool_block, entropy_loss, gcn_layer, link_prediction_loss, Activation, CmdConfig, DiffPoolParams,
};
use deepj_core::head::{forward, loss_and_grads, LossWeights, Mode};
use deepj_core::numerics::{finite_difference_check, ParamStore, Tape, Tensor, Var};
use deepj_core::Result;
use rand::Rng;

use super::{fixture, random_tensor, rng};

pub const MAX_REL_ERR: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Coordinates where both estimates are below this are skipped as round-off.
pub const FLOOR: f64 = 1e-6;

/// Loss `Σ out ⊙ r` for a fixed random `r`, as a function of the flattened inputs.
pub fn check_op(seed: u64, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let shapes: Vec<[usize; 2]> = inputs.iter().map(Tensor::shape).collect();
    let eval = |flat: &[f64], keep: bool| -> (f64, Option<Vec<f64>>) {
        let mut tape = Tape::new();
        let mut offset = 0;
        let leaves: Vec<Var> = shapes
            .iter()
            .map(|&[r, c]| {
                let t = Tensor::from_vec(r, c, flat[offset..offset + r * c].to_vec()).unwrap();
                offset += r * c;
                tape.leaf(t)
            })
            .collect();
        let out = build(&mut tape, &leaves).unwrap();
        let [r, c] = tape.value(out).shape();
        let weights = tape.constant(random_tensor(&mut rng(seed), r, c));
        let prod = tape.mul(out, weights).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let grads = keep.then(|| {
            let g = tape.backward(loss).unwrap();
            leaves
                .iter()
                .zip(&shapes)
                .flat_map(|(&v, &[r, c])| g.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(r, c)).into_data())
                .collect()
        });
        (value, grads)
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let analytic = eval(&flat, true).1.unwrap();
    let report = finite_difference_check(|x| eval(x, false).0, &flat, &analytic, STEP, FLOOR);
    assert!(report.checked > 0, "nothing checked");
    report.max_rel_err
}

/// Worst relative error seen per named check.
#[derive(Default, Debug)]
pub struct GradLog(pub BTreeMap<String, f64>);

impl GradLog {
    pub fn record(&mut self, name: &str, err: f64) {
        let e = self.0.entry(name.to_string()).or_insert(0.0);
        *e = e.max(err);
    }

    pub fn op(&mut self, name: &str, seed: u64, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        self.record(name, check_op(seed, inputs, build));
    }

    pub fn worst(&self) -> (String, f64) {
        self.0.iter().fold((String::new(), 0.0), |b, (k, &v)| if v > b.1 { (k.clone(), v) } else { b })
    }
}

pub fn elementwise_and_linear_ops(log: &mut GradLog) {
    for seed in 0..5 {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, 3, 4);
        let b = random_tensor(&mut r, 3, 4);
        let c = random_tensor(&mut r, 4, 2);
        let row = random_tensor(&mut r, 1, 4);
        log.op("matmul", seed, &[a.clone(), c.clone()], |t, v| t.matmul(v[0], v[1]));
        log.op("matmul_t", seed, &[a.clone(), b.clone()], |t, v| t.matmul_t(v[0], v[1]));
        log.op("t_matmul", seed, &[a.clone(), b.clone()], |t, v| t.t_matmul(v[0], v[1]));
        log.op("transpose", seed, &[a.clone()], |t, v| Ok(t.transpose(v[0])));
        log.op("add", seed, &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        log.op("sub", seed, &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        log.op("mul", seed, &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        log.op("scale", seed, &[a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
        log.op("add_row", seed, &[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
        log.op("mul_row", seed, &[a.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]));
        log.op("relu", seed, &[a.clone()], |t, v| Ok(t.relu(v[0])));
        log.op("sum", seed, &[a.clone()], |t, v| Ok(t.sum(v[0])));
        log.op("mask_rows", seed, &[a.clone()], |t, v| t.mask_rows(v[0], &[true, false, true]));
        log.op("gather_rows", seed, &[a.clone()], |t, v| t.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)]));
        log.op("mean_rows", seed, &[a.clone()], |t, v| t.mean_rows(v[0], &[true, true, false]));
    }
}

pub fn normalisation_and_softmax_ops(log: &mut GradLog) {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let x = random_tensor(&mut r, 4, 5);
        let gain = random_tensor(&mut r, 1, 5);
        let bias = random_tensor(&mut r, 1, 5);
        let allowed: Vec<bool> = (0..20).map(|k| k % 5 <= k / 5 || k % 7 == 0).collect();
        log.op("masked_softmax", seed, &[x.clone()], |t, v| t.masked_softmax(v[0], &allowed));
        log.op("softmax_rows", seed, &[x.clone()], |t, v| Ok(t.softmax_rows(v[0])));
        log.op("log_softmax_rows", seed, &[x.clone()], |t, v| Ok(t.log_softmax_rows(v[0])));
        log.op("layer_norm", seed, &[x.clone(), gain.clone(), bias.clone()], |t, v| t.layer_norm(v[0], v[1], v[2]));
        log.op("graph_norm", seed, &[x.clone()], |t, v| t.graph_norm(v[0], &[true, false, true, true]));
    }
}

pub fn loss_primitives(log: &mut GradLog) {
    for seed in 0..5 {
        let mut r = rng(200 + seed);
        let p = random_tensor(&mut r, 3, 4);
        let q = random_tensor(&mut r, 3, 4);
        let valid = [true, true, false];
        log.op("kl_divergence_rowwise", seed, &[p.clone(), q.clone()], |t, v| {
            let (p, q) = (t.softmax_rows(v[0]), t.softmax_rows(v[1]));
            t.kl_divergence_rowwise(p, q, &valid)
        });
        log.op("frobenius_norm", seed, &[p.clone()], |t, v| Ok(t.frobenius_norm(v[0])));
        log.op("row_entropy_sum", seed, &[p.clone()], |t, v| {
            let s = t.softmax_rows(v[0]);
            t.row_entropy_sum(s, &valid)
        });
        let logits = random_tensor(&mut r, 1, 2);
        for label in 0..2 {
            log.op("nll_loss", seed, &[logits.clone()], |t, v| {
                let lp = t.log_softmax_rows(v[0]);
                t.nll_loss(lp, label)
            });
        }
    }
}

fn stochastic(r: &mut impl rand::Rng, n: usize, valid: &[bool]) -> Tensor {
    let mut a = random_tensor(r, n, n).map(f64::exp);
    for i in 0..n {
        let s: f64 = (0..n).filter(|&j| valid[i] && valid[j]).map(|j| a.get(i, j)).sum();
        for j in 0..n {
            let v = if valid[i] && valid[j] { a.get(i, j) / s } else { 0.0 };
            a.set(i, j, v);
        }
    }
    a
}

pub fn pooling_ops_and_auxiliary_losses(log: &mut GradLog) {
    for seed in 0..5 {
        let mut r = rng(300 + seed);
        let n = 6;
        let d = 4;
        let valid = [true, true, true, false, true, false];
        let a = stochastic(&mut r, n, &valid);
        let mut x = random_tensor(&mut r, n, d);
        for i in (0..n).filter(|&i| !valid[i]) {
            x.row_mut(i).fill(0.0);
        }
        let w = random_tensor(&mut r, d, 3);
        log.op("gcn_layer relu", seed, &[a.clone(), x.clone(), w.clone()], |t, v| {
            gcn_layer(t, v[0], v[1], v[2], &valid, Activation::Relu)
        });
        log.op("gcn_layer identity", seed, &[a.clone(), x.clone(), w.clone()], |t, v| {
            gcn_layer(t, v[0], v[1], v[2], &valid, Activation::Identity)
        });

        // every CMD parameter against the auxiliary losses and pooled outputs
        let mut store = ParamStore::new();
        let cfg = CmdConfig { clusters: vec![4, 2] };
        let params: Vec<DiffPoolParams> = cfg
            .clusters
            .iter()
            .enumerate()
            .map(|(m, &g)| DiffPoolParams::init(&mut store, &format!("b{m}"), d, g, &mut r))
            .collect();
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += 0.1 * r.random_range(-1.0..1.0);
            }
        }
        let eval = |flat: &[f64], keep: bool| {
            let mut s = store.clone();
            s.assign_flat(flat).unwrap();
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let xv = tape.constant(x.clone());
            let chain = cmd_forward(&mut tape, &s, &params, &cfg, av, xv, &valid).unwrap();
            let lp = link_prediction_loss(&mut tape, &chain).unwrap();
            let ent = entropy_loss(&mut tape, &chain).unwrap();
            let feats = tape.sum(chain.final_features());
            let sq = tape.mul(feats, feats).unwrap();
            let l = tape.add(lp, ent).unwrap();
            let l = tape.add(l, sq).unwrap();
            let value = tape.value(l).item();
            let grads = keep.then(|| tape.backward(l).unwrap().param_grads(&tape, &s).flatten());
            (value, grads)
        };
        let flat = store.flatten();
        let analytic = eval(&flat, true).1.unwrap();
        let report = finite_difference_check(|p| eval(p, false).0, &flat, &analytic, STEP, FLOOR);
        assert!(report.checked > 0);
        log.record("cmd chain", report.max_rel_err);

        // the block itself, differentiated through its inputs
        log.op("diffpool_block", seed, &[a.clone(), x.clone()], |t, v| {
            let (a2, x2, s) = diffpool_block(t, &store, v[0], v[1], &params[0], &valid)?;
            let a2 = t.sum(a2);
            let x2 = t.sum(x2);
            let s = t.frobenius_norm(s);
            let out = t.add(a2, x2)?;
            t.add(out, s)
        });
    }
}


/// Full objective on two patients of a toy instance: SeqLen 12, d_model 8, one pooling block.
pub fn full_objective(log: &mut GradLog, seed: u64) {
    let fx = fixture(400 + seed, 6, 8, 3, 4, vec![3]);
    let weights = LossWeights { positive_weight: 2.0, ..LossWeights::default() };
    for enc in fx.encoded.iter().take(2) {
        let (_, grads) = loss_and_grads(&fx.model, enc, &fx.co, Mode::Full, &weights).unwrap();
        let f = |flat: &[f64]| {
            let mut m = fx.model.clone();
            m.params.assign_flat(flat).unwrap();
            forward(&m, enc, &fx.co, Mode::Full, &weights).unwrap().1.total
        };
        let report = finite_difference_check(f, &fx.model.params.flatten(), &grads.flatten(), STEP, FLOOR);
        assert!(report.checked > 100, "{report:?}");
        log.record("full objective", report.max_rel_err);
    }
}

pub fn ablated_objectives(log: &mut GradLog) {
    let fx = fixture(500, 4, 6, 2, 4, vec![3]);
    let weights = LossWeights::default();
    for mode in [Mode::NoGsl, Mode::NoCmd] {
        let enc = &fx.encoded[0];
        let (_, grads) = loss_and_grads(&fx.model, enc, &fx.co, mode, &weights).unwrap();
        let f = |flat: &[f64]| {
            let mut m = fx.model.clone();
            m.params.assign_flat(flat).unwrap();
            forward(&m, enc, &fx.co, mode, &weights).unwrap().1.total
        };
        let report = finite_difference_check(f, &fx.model.params.flatten(), &grads.flatten(), STEP, FLOOR);
        log.record(&format!("{} objective", mode.as_str()), report.max_rel_err);
    }
}
