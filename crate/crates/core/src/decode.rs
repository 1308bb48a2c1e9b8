//! Greedy and beam-search generation over any next-token model.

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::ReportModel;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Anything that scores the next token given a prefix.
pub trait StepModel {
    /// Log-probabilities over the vocabulary for the token after `prefix`.
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepModel for F {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self(prefix))
    }
}

/// Framing tokens and the generation budget (tokens generated, EOS included).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeLimits {
    pub bos: usize,
    pub eos: usize,
    pub max_len: usize,
}

impl DecodeLimits {
    pub fn new(max_len: usize) -> Self {
        Self { bos: BOS, eos: EOS, max_len }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    /// Generated tokens after BOS, EOS included when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Beam {
    /// Mean log-probability per generated token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn check(limits: &DecodeLimits) -> Result<()> {
    if limits.max_len == 0 {
        return Err(Error::Invalid("max_len must be positive".into()));
    }
    Ok(())
}

fn prefix_of(limits: &DecodeLimits, tokens: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(limits.bos);
    p.extend_from_slice(tokens);
    p
}

/// First index of the maximum; NaN never wins.
fn best_token(lp: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in lp.iter().enumerate() {
        if best.map_or(!v.is_nan(), |b| v > lp[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::Empty("next-token distribution"))
}

/// Argmax decoding until EOS or `max_len` tokens.
pub fn greedy(model: &impl StepModel, limits: &DecodeLimits) -> Result<Beam> {
    check(limits)?;
    let mut beam = Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while beam.tokens.len() < limits.max_len {
        let lp = model.next_log_probs(&prefix_of(limits, &beam.tokens))?;
        let t = best_token(&lp)?;
        beam.tokens.push(t);
        beam.log_prob += lp[t];
        if t == limits.eos {
            beam.finished = true;
            break;
        }
    }
    Ok(beam)
}

fn rank(a: &Beam, b: &Beam) -> std::cmp::Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search ranked by length-normalized log-probability. Finished beams
/// compete with open ones; equal scores go to the lexicographically smaller
/// token sequence.
pub fn beam_search(model: &impl StepModel, width: usize, limits: &DecodeLimits) -> Result<Beam> {
    check(limits)?;
    if width == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..limits.max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let lp = model.next_log_probs(&prefix_of(limits, &beam.tokens))?;
            for (t, &v) in lp.iter().enumerate() {
                if v.is_nan() || v == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                candidates.push(Beam {
                    tokens,
                    log_prob: beam.log_prob + v,
                    finished: t == limits.eos,
                });
            }
        }
        if candidates.is_empty() {
            return Err(Error::Empty("beam candidates"));
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        beams = candidates;
    }
    Ok(beams.into_iter().min_by(rank).expect("width >= 1"))
}

/// A trained model bound to one encoded sample.
pub struct Generator<'a, T> {
    model: &'a ReportModel,
    store: &'a ParamStore<T>,
    memory: Tensor<T>,
}

impl<'a, T: Scalar> Generator<'a, T> {
    pub fn new(model: &'a ReportModel, store: &'a ParamStore<T>, images: &[Vec<T>]) -> Result<Self> {
        let memory = model.encode(store, images)?;
        Ok(Self { model, store, memory })
    }
}

impl<T: Scalar> StepModel for Generator<'_, T> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let m = tape.constant(self.memory.clone());
        let out = self.model.decoder.forward(&mut tape, self.store, m, prefix)?;
        let lp = tape.value(out.log_probs);
        Ok(lp.row_slice(lp.rows() - 1).iter().map(|v| v.as_f64()).collect())
    }
}

/// Generates token ids (EOS stripped) with the given beam width.
pub fn generate<T: Scalar>(
    model: &ReportModel,
    store: &ParamStore<T>,
    images: &[Vec<T>],
    width: usize,
) -> Result<Vec<usize>> {
    let g = Generator::new(model, store, images)?;
    let limits = DecodeLimits::new(model.config.max_len + 1);
    let beam = if width == 1 {
        greedy(&g, &limits)?
    } else {
        beam_search(&g, width, &limits)?
    };
    Ok(beam.content(limits.eos).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    // tokens: 0 = EOS, 1 = a, 2 = b, 3 = BOS
    fn toy(prefix: &[usize]) -> Vec<f64> {
        let p: [f64; 4] = match prefix {
            [3] => [0.1, 0.5, 0.4, 0.0],
            [3, 1] => [0.3, 0.35, 0.35, 0.0],
            [3, 2] => [0.9, 0.05, 0.05, 0.0],
            _ => [0.5, 0.25, 0.25, 0.0],
        };
        p.iter().map(|v| v.ln()).collect()
    }

    const LIMITS: DecodeLimits = DecodeLimits {
        bos: 3,
        eos: 0,
        max_len: 4,
    };

    #[test]
    fn greedy_follows_argmax() {
        let g = greedy(&toy, &LIMITS).unwrap();
        assert_eq!(g.tokens, vec![1, 1, 0]);
    }

    #[test]
    fn width_one_is_greedy() {
        assert_eq!(beam_search(&toy, 1, &LIMITS).unwrap(), greedy(&toy, &LIMITS).unwrap());
    }

    #[test]
    fn width_three_finds_better_sequence() {
        let b = beam_search(&toy, 3, &LIMITS).unwrap();
        assert_eq!(b.tokens, vec![2, 0]);
        assert!(b.finished);
        assert!((b.score() - (0.4f64.ln() + 0.9f64.ln()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let zero = DecodeLimits { max_len: 0, ..LIMITS };
        assert!(greedy(&toy, &zero).is_err());
        assert!(beam_search(&toy, 3, &zero).is_err());
        assert!(beam_search(&toy, 0, &LIMITS).is_err());
    }

    #[test]
    fn budget_caps_length() {
        let never_stop = |_: &[usize]| vec![f64::NEG_INFINITY, 0.0];
        let limits = DecodeLimits { bos: 1, eos: 0, max_len: 3 };
        let g = greedy(&never_stop, &limits).unwrap();
        assert_eq!(g.tokens.len(), 3);
        assert!(!g.finished);
        assert_eq!(beam_search(&never_stop, 2, &limits).unwrap().tokens.len(), 3);
    }
}
