//! Corpus BLEU-1..4, ROUGE-L and CIDEr over whitespace-tokenized text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::vocab::normalize_text;
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 6] = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr"];

    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider]
    }
}

/// Lowercased whitespace tokens.
pub fn tokens(text: &str) -> Vec<String> {
    normalize_text(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn ngrams(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU-`max_n` without smoothing; zero when any precision is zero.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::Invalid(format!("BLEU order {max_n} outside 1..=4")));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid("candidate and reference counts differ".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += closest_length(cand.len(), refs);
        for n in 1..=max_n {
            let counts = ngrams(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
            for (g, c) in counts {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_length(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weight `beta`, maximized over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs_length(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub fn corpus_rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Ok(0.0);
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid("candidate and reference counts differ".into()));
    }
    let s: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum();
    Ok(s / candidates.len() as f64)
}

type Vector<'a> = HashMap<&'a [String], f64>;

fn tfidf<'a>(toks: &'a [String], n: usize, df: &HashMap<&[String], usize>, log_docs: f64) -> (Vector<'a>, f64) {
    let v: Vector = ngrams(toks, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (log_docs - d.ln()))
        })
        .collect();
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

/// Plain CIDEr: per order, TF-IDF cosine between candidate and each
/// reference with a Gaussian length penalty, averaged over references and
/// orders, scaled by 10, then averaged over samples. Document frequency is
/// the number of samples whose references contain the n-gram.
pub fn corpus_cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("CIDEr corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid("candidate and reference counts differ".into()));
    }
    let log_docs = (candidates.len() as f64).ln();
    let mut total = 0.0;
    let mut per_sample = vec![0.0; candidates.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for refs in references {
            let mut seen: HashMap<&[String], ()> = HashMap::new();
            for r in refs {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_default() += 1;
            }
        }
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            if refs.is_empty() {
                continue;
            }
            let (vc, nc) = tfidf(cand, n, &df, log_docs);
            let mut acc = 0.0;
            for r in refs {
                let (vr, nr) = tfidf(r, n, &df, log_docs);
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                let delta = cand.len() as f64 - r.len() as f64;
                acc += dot / (nc * nr) * (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
            per_sample[i] += acc / refs.len() as f64;
        }
    }
    for s in &per_sample {
        total += 10.0 * s / CIDER_MAX_N as f64;
    }
    Ok(total / candidates.len() as f64)
}

/// All six scores for a corpus of raw strings.
pub fn evaluate(candidates: &[String], references: &[Vec<String>]) -> Result<MetricReport> {
    let c: Vec<Vec<String>> = candidates.iter().map(|s| tokens(s)).collect();
    let r: Vec<Vec<Vec<String>>> = references
        .iter()
        .map(|refs| refs.iter().map(|s| tokens(s)).collect())
        .collect();
    Ok(MetricReport {
        bleu1: corpus_bleu(&c, &r, 1)?,
        bleu2: corpus_bleu(&c, &r, 2)?,
        bleu3: corpus_bleu(&c, &r, 3)?,
        bleu4: corpus_bleu(&c, &r, 4)?,
        rouge_l: corpus_rouge_l(&c, &r)?,
        cider: corpus_cider(&c, &r)?,
    })
}
