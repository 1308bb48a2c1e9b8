//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use camalign_core::decode::StepModel;
use camalign_core::model::{Example, ForwardOptions, LossWeights, ReportModel};
use camalign_core::tape::Var;
use camalign_core::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Largest relative error between the analytic gradient of
/// `sum(f(inputs) * R)` (fixed random `R`) and central differences, over
/// every entry of every input.
pub fn check_primitive(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var, seed: u64) -> f64 {
    let record = |values: &[Tensor]| -> (Tape, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
        let out = f(&mut tape, &vars);
        (tape, out, vars)
    };
    let shape = {
        let (tape, out, _) = record(inputs);
        tape.value(out).shape().to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    let r = Tensor::new(shape, (0..numel).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
    let loss_of = |tape: &mut Tape, out: Var| -> Var {
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        tape.sum(prod)
    };
    let value = |values: &[Tensor]| -> f64 {
        let (mut tape, out, _) = record(values);
        let l = loss_of(&mut tape, out);
        tape.value(l).item()
    };
    let (mut tape, out, vars) = record(inputs);
    let loss = loss_of(&mut tape, out);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Options that pin the gradient-stopped quantities (`d^v`, selected words)
/// at their unperturbed values.
pub fn frozen_options(model: &ReportModel, store: &ParamStore, ex: &Example<f64>, w: &LossWeights) -> ForwardOptions<f64> {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, store, ex, w, &ForwardOptions::default()).unwrap();
    ForwardOptions {
        fixed_vdm: f.vdm,
        fixed_selection: f.selection.map(|s| s.indices),
        ..ForwardOptions::default()
    }
}

fn total(model: &ReportModel, store: &ParamStore, ex: &Example<f64>, w: &LossWeights, opts: &ForwardOptions<f64>) -> f64 {
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, store, ex, w, opts).unwrap();
    tape.value(f.total).item()
}

/// Compares analytic and central-difference gradients of the composite loss
/// for `per_tensor` random entries of every parameter tensor.
pub fn model_gradcheck(
    model: &ReportModel,
    store: &ParamStore,
    ex: &Example<f64>,
    w: &LossWeights,
    per_tensor: usize,
    seed: u64,
) -> Vec<GradSample> {
    let opts = frozen_options(model, store, ex, w);
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, store, ex, w, &opts).unwrap();
    let grads = tape.backward(f.total).unwrap().param_grads(&tape, store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        let n = p.value.numel();
        for _ in 0..per_tensor.min(n) {
            let index = rng.gen_range(0..n);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[index]);
            let mut s = store.clone();
            s.get_mut(id).data_mut()[index] += FD_STEP;
            let lp = total(model, &s, ex, w, &opts);
            s.get_mut(id).data_mut()[index] -= 2.0 * FD_STEP;
            let lm = total(model, &s, ex, w, &opts);
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            out.push(GradSample {
                name: p.name.clone(),
                index,
                analytic,
                numeric,
                rel: rel_err(analytic, numeric),
            });
        }
    }
    out
}

/// Deterministic micro example with content words at positions 1..=4.
pub fn micro_example(image_size: usize, seed: u64) -> Example<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Example {
        id: format!("micro{seed}"),
        images: vec![(0..image_size * image_size).map(|_| rng.gen_range(0.0..1.0)).collect()],
        tokens: vec![1, 4, 7, 5, 9, 2],
        labels: vec![1.0, 0.0, 1.0],
    }
}

// ---- metric oracles: plain loops, no shared code with the library ----

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn all_ngrams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn oracle_bleu(cands: &[&str], refs: &[Vec<&str>], max_n: usize) -> f64 {
    let mut log_p = 0.0;
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, rs) in cands.iter().zip(refs) {
        let c = toks(c);
        c_len += c.len();
        let mut best: Option<usize> = None;
        for r in rs {
            let l = toks(r).len();
            let better = match best {
                None => true,
                Some(b) => {
                    let (dl, db) = ((l as i64 - c.len() as i64).abs(), (b as i64 - c.len() as i64).abs());
                    dl < db || (dl == db && l < b)
                }
            };
            if better {
                best = Some(l);
            }
        }
        r_len += best.unwrap_or(0);
    }
    if c_len == 0 {
        return 0.0;
    }
    for n in 1..=max_n {
        let (mut hit, mut tot) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = all_ngrams(&toks(c), n);
            tot += cg.len();
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                let cap = rs.iter().map(|r| occurrences(&all_ngrams(&toks(r), n), g)).max().unwrap_or(0);
                hit += occurrences(&cg, g).min(cap);
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / tot as f64).ln() / max_n as f64;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * log_p.exp()
}

fn lcs_rec(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs_rec(a, b, i + 1, j + 1, memo)
    } else {
        lcs_rec(a, b, i + 1, j, memo).max(lcs_rec(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

pub fn oracle_rouge_l(cands: &[&str], refs: &[Vec<&str>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut sum = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let c = toks(c);
        let mut best = 0.0f64;
        for r in rs {
            let r = toks(r);
            let l = lcs_rec(&c, &r, 0, 0, &mut HashMap::new()) as f64;
            if l > 0.0 {
                let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
                best = best.max((1.0 + beta2) * p * rec / (rec + beta2 * p));
            }
        }
        sum += best;
    }
    sum / cands.len() as f64
}

/// Dense TF-IDF vectors over the explicit list of all corpus n-grams.
pub fn oracle_cider(cands: &[&str], refs: &[Vec<&str>]) -> f64 {
    let n_docs = cands.len() as f64;
    let sigma = 6.0f64;
    let mut per_sample = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut vocab: Vec<Vec<String>> = Vec::new();
        for (c, rs) in cands.iter().zip(refs) {
            for s in std::iter::once(c).chain(rs.iter()) {
                for g in all_ngrams(&toks(s), n) {
                    if !vocab.contains(&g) {
                        vocab.push(g);
                    }
                }
            }
        }
        let df: Vec<f64> = vocab
            .iter()
            .map(|g| {
                refs.iter()
                    .filter(|rs| rs.iter().any(|r| occurrences(&all_ngrams(&toks(r), n), g) > 0))
                    .count() as f64
            })
            .collect();
        let vec_of = |s: &str| -> Vec<f64> {
            let grams = all_ngrams(&toks(s), n);
            vocab
                .iter()
                .zip(&df)
                .map(|(g, &d)| occurrences(&grams, g) as f64 * (n_docs.ln() - d.max(1.0).ln()))
                .collect()
        };
        for (i, (c, rs)) in cands.iter().zip(refs).enumerate() {
            let vc = vec_of(c);
            let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in rs {
                let vr = vec_of(r);
                let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a * b).sum();
                    let d = toks(c).len() as f64 - toks(r).len() as f64;
                    acc += dot / (nc * nr) * (-d * d / (2.0 * sigma * sigma)).exp();
                }
            }
            per_sample[i] += acc / rs.len() as f64;
        }
    }
    per_sample.iter().map(|s| 10.0 * s / 4.0).sum::<f64>() / n_docs
}

/// Best length-normalized sequence by enumerating every continuation.
pub fn exhaustive_best(model: &impl StepModel, bos: usize, eos: usize, max_len: usize) -> (Vec<usize>, f64) {
    fn walk(
        model: &impl StepModel,
        prefix: &mut Vec<usize>,
        lp: f64,
        eos: usize,
        max_len: usize,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        let generated = prefix.len() - 1;
        let done = generated > 0 && (prefix[prefix.len() - 1] == eos || generated == max_len);
        if done {
            let score = lp / generated as f64;
            let seq = prefix[1..].to_vec();
            let better = match best {
                None => true,
                Some((s, b)) => score > *b || (score == *b && seq < *s),
            };
            if better {
                *best = Some((seq, score));
            }
            return;
        }
        let dist = model.next_log_probs(prefix).unwrap();
        for (t, &v) in dist.iter().enumerate() {
            if v == f64::NEG_INFINITY {
                continue;
            }
            prefix.push(t);
            walk(model, prefix, lp + v, eos, max_len, best);
            prefix.pop();
        }
    }
    let mut best = None;
    walk(model, &mut vec![bos], 0.0, eos, max_len, &mut best);
    best.unwrap()
}

/// Next-token toy LM over {EOS=0, a=1, b=2} with BOS=3 where greedy
/// decoding is suboptimal.
pub fn toy_lm(prefix: &[usize]) -> Vec<f64> {
    let p: [f64; 4] = match prefix {
        [3] => [0.1, 0.5, 0.4, 0.0],
        [3, 1] => [0.3, 0.35, 0.35, 0.0],
        [3, 2] => [0.9, 0.05, 0.05, 0.0],
        [3, 1, 1] => [0.6, 0.2, 0.2, 0.0],
        [3, 2, 1] => [0.2, 0.4, 0.4, 0.0],
        _ => [0.5, 0.25, 0.25, 0.0],
    };
    p.iter().map(|v| v.ln()).collect()
}

/// Ten short reports for the metric oracle comparisons.
pub const MICRO_CORPUS: [(&str, &[&str]); 10] = [
    ("there is a square in the upper left .", &["there is a square in the upper left ."]),
    ("there is a circle .", &["there is a circle in the lower right .", "a circle is present ."]),
    ("there is no cross .", &["there is no cross ."]),
    ("the the the", &["the cat"]),
    ("a ring in the middle center", &["there is a ring in the middle center ."]),
    ("there is a dot in the upper right . there is no bar .", &["there is a dot in the upper right . there is no bar ."]),
    ("bar bar bar bar", &["there is a bar in the lower left ."]),
    ("there is a plus in the lower center .", &["there is a plus in the upper center .", "a plus sits low ."]),
    ("nothing here", &["there is no square ."]),
    ("there is a square and a circle .", &["there is a circle and a square .", "square . circle ."]),
];
