//! Independent naive-loop and brute-force references. Each `*_gap` function
//! returns the largest absolute discrepancy against the library, or infinity
//! when the structure (counts, keys, rankings) differs.

use std::collections::{BTreeMap, BTreeSet};

use deepj_core::cmd::{diffpool_block, DiffPoolParams};
use deepj_core::corpus::{estimate_co_occurrence, PatientRecord, Vocabulary};
use deepj_core::head::{forward, LossWeights, Mode};
use deepj_core::interpret::{co_cluster_statistics, edge_statistics, Relation};
use deepj_core::numerics::{ParamStore, Tape, Tensor, LOG_EPS, NORM_EPS};
use deepj_core::train::evaluate;

use super::{random_tensor, rng, Fixture};

pub fn co_oracle(records: &[PatientRecord], vocab: &Vocabulary) -> (Vec<Vec<u64>>, Vec<u64>) {
    let n = vocab.len();
    let mut pairs = vec![vec![0u64; n]; n];
    let mut occ = vec![0u64; n];
    for r in records {
        // (encounter, slot, code id) for every occurrence
        let all: Vec<(usize, usize, usize)> = r
            .encounters
            .iter()
            .enumerate()
            .flat_map(|(p, e)| e.codes.iter().enumerate().map(move |(k, c)| (p, k, c)))
            .map(|(p, k, c)| (p, k, vocab.index_of(c).unwrap()))
            .collect();
        for &(_, _, j) in &all {
            occ[j] += 1;
        }
        for &(p1, k1, j) in &all {
            for &(p2, k2, i) in &all {
                if p1 <= p2 && (p1, k1) != (p2, k2) {
                    pairs[i][j] += 1;
                }
            }
        }
    }
    (pairs, occ)
}


pub struct Brute {
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
}

pub fn brute_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Brute {
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for class in [0u8, 1] {
        let predicted = |p: f64| u8::from(p >= threshold) == class;
        let tp = probs.iter().zip(labels).filter(|&(&p, &l)| l == class && predicted(p)).count() as f64;
        let actual = labels.iter().filter(|&&l| l == class).count() as f64;
        let called = probs.iter().filter(|&&p| predicted(p)).count() as f64;
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let p = if called > 0.0 { tp / called } else { 0.0 };
        recall += r / 2.0;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 } / 2.0;
    }
    // all positive-negative pairs, ties count half
    let mut wins = 0.0;
    let mut total = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                total += 1.0;
                wins += if probs[i] > probs[j] {
                    1.0
                } else if probs[i] == probs[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    // sweep every distinct score as a threshold, highest first
    let mut cuts: Vec<f64> = probs.to_vec();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for &t in &cuts {
        let called: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= t).collect();
        let tp = called.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let r = tp / pos;
        ap += (r - prev_recall) * tp / called.len() as f64;
        prev_recall = r;
    }
    Brute { recall, f1, auroc: wins / total, auprc: ap }
}


pub fn naive_graph_norm(x: &[Vec<f64>], valid: &[bool]) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let count = valid.iter().filter(|&&v| v).count() as f64;
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            if valid[i] {
                mean += x[i][j];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for i in 0..n {
            if valid[i] {
                var += (x[i][j] - mean) * (x[i][j] - mean);
            }
        }
        var /= count;
        for i in 0..n {
            if valid[i] {
                out[i][j] = (x[i][j] - mean) / (var + NORM_EPS).sqrt();
            }
        }
    }
    out
}

/// `(a + I)·x·w` by explicit loops, invalid rows zero.
pub fn naive_gcn(a: &Tensor, x: &Tensor, w: &Tensor, valid: &[bool]) -> Vec<Vec<f64>> {
    let n = a.rows();
    let mut out = vec![vec![0.0; w.cols()]; n];
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        for c in 0..w.cols() {
            let mut s = 0.0;
            for j in 0..n {
                let aij = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
                for k in 0..x.cols() {
                    s += aij * x.get(j, k) * w.get(k, c);
                }
            }
            out[i][c] = s;
        }
    }
    out
}

pub struct NaivePool {
    pub a_next: Vec<Vec<f64>>,
    pub x_next: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
}

pub fn naive_diffpool(a: &Tensor, x: &Tensor, store: &ParamStore, p: &DiffPoolParams, valid: &[bool]) -> NaivePool {
    let n = a.rows();
    let d = x.cols();
    let relu: Vec<Vec<f64>> =
        naive_gcn(a, x, store.get(p.embed_w), valid).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    let normed = naive_graph_norm(&relu, valid);
    let (gain, bias) = (store.get(p.norm_gain), store.get(p.norm_bias));
    let mut h = vec![vec![0.0; d]; n];
    for i in 0..n {
        for k in 0..d {
            let affine = if valid[i] { normed[i][k] * gain.get(0, k) + bias.get(0, k) } else { 0.0 };
            h[i][k] = affine + x.get(i, k);
        }
    }
    let logits = naive_graph_norm(&naive_gcn(a, x, store.get(p.pool_w), valid), valid);
    let g = logits[0].len();
    let mut s = vec![vec![0.0; g]; n];
    for i in (0..n).filter(|&i| valid[i]) {
        let m = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits[i].iter().map(|v| (v - m).exp()).sum();
        for c in 0..g {
            s[i][c] = (logits[i][c] - m).exp() / z;
        }
    }
    let mut x_next = vec![vec![0.0; d]; g];
    for c in 0..g {
        for k in 0..d {
            for i in 0..n {
                x_next[c][k] += s[i][c] * h[i][k];
            }
        }
    }
    let mut a_next = vec![vec![0.0; g]; g];
    for c in 0..g {
        for e in 0..g {
            for i in 0..n {
                for j in 0..n {
                    a_next[c][e] += s[i][c] * a.get(i, j) * s[j][e];
                }
            }
        }
    }
    NaivePool { a_next, x_next, s }
}


pub fn naive_entropy(s: &Tensor, valid: &[bool]) -> f64 {
    let rows: Vec<usize> = (0..s.rows()).filter(|&i| valid[i]).collect();
    let mut total = 0.0;
    for &i in &rows {
        for &v in s.row(i) {
            if v > 0.0 {
                total -= v * (v + LOG_EPS).ln();
            }
        }
    }
    total / rows.len() as f64
}

pub fn naive_kl(p: &Tensor, q: &Tensor, valid: &[bool]) -> f64 {
    let rows: Vec<usize> = (0..p.rows()).filter(|&i| valid[i]).collect();
    let mut total = 0.0;
    for &i in &rows {
        for j in 0..p.cols() {
            let (a, b) = (p.get(i, j), q.get(i, j));
            if a > 0.0 {
                total += a * ((a + LOG_EPS) / (b + LOG_EPS)).ln();
            }
        }
    }
    total / rows.len() as f64
}

pub fn naive_lp(a: &Tensor, s: &Tensor, valid: &[bool]) -> f64 {
    let n = a.rows();
    let mut sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut ss = 0.0;
            for c in 0..s.cols() {
                ss += s.get(i, c) * s.get(j, c);
            }
            sq += (a.get(i, j) - ss).powi(2);
        }
    }
    let k = valid.iter().filter(|&&v| v).count() as f64;
    sq.sqrt() / (k * k)
}


fn gap(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

pub fn co_gap(records: &[PatientRecord], vocab: &Vocabulary) -> f64 {
    let co = estimate_co_occurrence(records, vocab).unwrap();
    let (pairs, occ) = co_oracle(records, vocab);
    let mut worst: f64 = 0.0;
    for i in 1..vocab.len() {
        if co.occurrences(i) != occ[i] {
            return f64::INFINITY;
        }
        for j in 1..vocab.len() {
            if co.pair_count(i, j) != pairs[i][j] {
                return f64::INFINITY;
            }
            let expected = if occ[j] == 0 { 0.0 } else { (pairs[i][j] as f64 / occ[j] as f64).min(1.0) };
            worst = worst.max(gap(co.get(i, j), expected));
        }
    }
    worst
}

pub fn metrics_gap(probs: &[f64], labels: &[u8]) -> f64 {
    let m = evaluate(probs, labels, 0.5).unwrap();
    let b = brute_metrics(probs, labels, 0.5);
    [gap(m.recall, b.recall), gap(m.f1, b.f1), gap(m.auroc, b.auroc), gap(m.auprc, b.auprc)].into_iter().fold(0.0, f64::max)
}

fn tensor_gap(t: &Tensor, want: &[Vec<f64>]) -> f64 {
    if t.rows() != want.len() || want.iter().any(|r| r.len() != t.cols()) {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (i, row) in want.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            worst = worst.max(gap(t.get(i, j), v));
        }
    }
    worst
}

/// One random pooling block with padding at positions 2 and 6.
pub fn diffpool_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 7;
    let d = 5;
    let valid: Vec<bool> = (0..n).map(|i| i != 2 && i != 6).collect();
    let mut a = random_tensor(&mut r, n, n).map(f64::abs);
    let mut x = random_tensor(&mut r, n, d);
    for i in 0..n {
        for j in 0..n {
            if !valid[i] || !valid[j] {
                a.set(i, j, 0.0);
            }
        }
        if !valid[i] {
            x.row_mut(i).fill(0.0);
        }
    }
    let mut store = ParamStore::new();
    let params = DiffPoolParams::init(&mut store, "p", d, 3, &mut r);
    for id in [params.norm_gain, params.norm_bias] {
        for v in store.get_mut(id).data_mut() {
            *v += 0.5;
        }
    }
    let mut tape = Tape::new();
    let (av, xv) = (tape.constant(a.clone()), tape.constant(x.clone()));
    let (a2, x2, s) = diffpool_block(&mut tape, &store, av, xv, &params, &valid).unwrap();
    let want = naive_diffpool(&a, &x, &store, &params, &valid);
    tensor_gap(tape.value(s), &want.s).max(tensor_gap(tape.value(x2), &want.x_next)).max(tensor_gap(tape.value(a2), &want.a_next))
}

/// KLD, LP, Ent and the total objective for every patient of the fixture.
pub fn aux_loss_gap(fx: &Fixture) -> f64 {
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for enc in &fx.encoded {
        let valid = enc.valid();
        let (pred, losses) = forward(&fx.model, enc, &fx.co, Mode::Full, &w).unwrap();
        let kld: f64 = pred.gsl.stack.windows(2).map(|p| naive_kl(&p[0], &p[1], &valid)).sum();
        let chain = &pred.chain;
        let m = chain.assignments.len();
        let mut inputs = vec![pred.gsl.adjacency.clone()];
        inputs.extend(chain.adjacencies.iter().take(m - 1).cloned());
        let mut flags = vec![valid.clone()];
        flags.extend(chain.assignments.iter().take(m - 1).map(|s| vec![true; s.cols()]));
        let (mut lp, mut ent) = (0.0, 0.0);
        for ((a, s), v) in inputs.iter().zip(&chain.assignments).zip(&flags) {
            lp += naive_lp(a, s, v);
            ent += naive_entropy(s, v);
        }
        let nll = -pred.log_probs[usize::from(enc.label)];
        for (got, want) in [(losses.kld, kld), (losses.lp, lp), (losses.ent, ent), (losses.total, nll + kld + lp + ent)] {
            worst = worst.max(gap(got, want));
        }
    }
    worst
}

pub fn edge_stats_gap(fx: &Fixture, threshold: f64) -> f64 {
    let stats = edge_statistics(&fx.encoded, &fx.model, &fx.co, &fx.vocab, Mode::Full, threshold).unwrap();
    let w = LossWeights::default();
    let adjacency: Vec<Tensor> =
        fx.encoded.iter().map(|e| forward(&fx.model, e, &fx.co, Mode::Full, &w).unwrap().0.gsl.adjacency).collect();
    let mut worst: f64 = 0.0;
    let mut seen = 0;
    for src in 1..fx.vocab.len() {
        for dst in 1..fx.vocab.len() {
            for relation in [Relation::Intra, Relation::Inter] {
                let mut eligible = 0usize;
                let mut weights = Vec::new();
                for (enc, a) in fx.encoded.iter().zip(&adjacency) {
                    let mut best: Option<f64> = None;
                    for j in 0..enc.seq_len() {
                        for i in 0..enc.seq_len() {
                            if i == j || enc.is_pad[i] || enc.is_pad[j] {
                                continue;
                            }
                            if enc.code_ids[j] != src || enc.code_ids[i] != dst {
                                continue;
                            }
                            let ok = match relation {
                                Relation::Intra => enc.enc_index[j] == enc.enc_index[i],
                                Relation::Inter => enc.enc_index[j] < enc.enc_index[i],
                            };
                            if ok {
                                best = Some(best.map_or(a.get(i, j), |b: f64| b.max(a.get(i, j))));
                            }
                        }
                    }
                    if let Some(b) = best {
                        eligible += 1;
                        if b >= threshold {
                            weights.push(b);
                        }
                    }
                }
                let row = stats.get(fx.vocab.code(src), fx.vocab.code(dst), relation);
                let Some(row) = row else {
                    if eligible > 0 {
                        return f64::INFINITY;
                    }
                    continue;
                };
                seen += 1;
                if row.eligible != eligible || row.hits != weights.len() {
                    return f64::INFINITY;
                }
                worst = worst.max(gap(row.prevalence, weights.len() as f64 / eligible as f64));
                if !weights.is_empty() {
                    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
                    let var = weights.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / weights.len() as f64;
                    worst = worst.max(gap(row.mean_w, mean)).max(gap(row.std_w, var.sqrt()));
                }
            }
        }
    }
    if seen != stats.rows.len() {
        return f64::INFINITY;
    }
    worst
}

/// Compares the top-5 co-cluster ranking of every code; 0 when all agree.
pub fn co_cluster_gap(fx: &Fixture) -> f64 {
    let w = LossWeights::default();
    let modules: Vec<Vec<Option<usize>>> = fx
        .encoded
        .iter()
        .map(|e| {
            let pi = forward(&fx.model, e, &fx.co, Mode::Full, &w).unwrap().0.chain.composed;
            (0..e.seq_len())
                .map(|i| {
                    (!e.is_pad[i]).then(|| {
                        let row = pi.row(i);
                        (0..row.len()).fold(0, |b, q| if row[q] > row[b] { q } else { b })
                    })
                })
                .collect()
        })
        .collect();
    for target in 1..fx.vocab.len() {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (enc, mods) in fx.encoded.iter().zip(&modules) {
            let target_mods: BTreeSet<usize> =
                (0..enc.seq_len()).filter(|&i| enc.code_ids[i] == target).filter_map(|i| mods[i]).collect();
            if target_mods.is_empty() {
                continue;
            }
            let mut hit: BTreeSet<usize> = BTreeSet::new();
            for i in 0..enc.seq_len() {
                if let Some(m) = mods[i] {
                    if enc.code_ids[i] != target && target_mods.contains(&m) {
                        hit.insert(enc.code_ids[i]);
                    }
                }
            }
            for c in hit {
                *counts.entry(fx.vocab.code(c).to_string()).or_default() += 1;
            }
        }
        let mut want: Vec<(String, usize)> = counts.into_iter().collect();
        want.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(5);
        let got = co_cluster_statistics(&fx.encoded, &fx.model, &fx.co, &fx.vocab, fx.vocab.code(target), 5).unwrap();
        if got != want {
            return f64::INFINITY;
        }
    }
    0.0
}
