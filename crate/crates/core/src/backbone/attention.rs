use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Scaled dot-product attention over already projected `q`, `k`, `v`, split
/// into `heads` column blocks. Returns the concatenated head outputs and the
/// per-head weight matrices (`queries x keys`), taken before value mixing.
///
/// With `causal`, query `i` only sees keys `0..=i`.
pub fn attention_heads<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<(Var, Vec<Var>)> {
    let (tq, d) = tape.value(q).dims2();
    let (tk, dk) = tape.value(k).dims2();
    let (tv, dv) = tape.value(v).dims2();
    if d != dk || d != dv || tk != tv {
        return shape_err("attention", tape.shape(q), tape.shape(k));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Invalid(format!("{d} dims not divisible into {heads} heads")));
    }
    if tk == 0 {
        return Err(Error::Empty("attention keys"));
    }
    if causal && tq > tk {
        return shape_err("causal mask", &[tq], &[tk]);
    }
    let hd = d / heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut scores = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, lo, hi)?,
                tape.slice_cols(k, lo, hi)?,
                tape.slice_cols(v, lo, hi)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let w = if causal {
            tape.causal_softmax_rows(logits, tk - tq)
        } else {
            tape.softmax_rows(logits)
        };
        outs.push(tape.matmul(w, vh)?);
        scores.push(w);
    }
    let out = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    Ok((out, scores))
}

/// Projected multi-head attention block.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::EncoderDecoder;
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), dim, dim, true, g, rng);
        Self {
            query: lin("query"),
            key: lin("key"),
            value: lin("value"),
            output: lin("output"),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys: Var,
        causal: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, keys)?;
        let v = self.value.forward(tape, store, keys)?;
        let (mixed, scores) = attention_heads(tape, q, k, v, self.heads, causal)?;
        let out = self.output.forward(tape, store, mixed)?;
        Ok((out, scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let mut tape = Tape::new();
        let q = tape.constant(mat(2, 2, &[0.3, -1.0, 2.0, 0.5]));
        let k = tape.constant(mat(1, 2, &[1.0, 1.0]));
        let v = tape.constant(mat(1, 2, &[4.0, -3.0]));
        let (out, scores) = attention_heads(&mut tape, q, k, v, 1, false).unwrap();
        assert_eq!(tape.value(scores[0]).data(), &[1.0, 1.0]);
        assert_eq!(tape.value(out).data(), &[4.0, -3.0, 4.0, -3.0]);
    }

    #[test]
    fn identical_keys_uniform() {
        let mut tape = Tape::new();
        let q = tape.constant(mat(1, 4, &[0.3, -1.0, 2.0, 0.5]));
        let k = tape.constant(mat(3, 4, &[1.0, 2.0, 3.0, 4.0].repeat(3)));
        let v = tape.constant(mat(3, 4, &[0.0; 12]));
        let (_, scores) = attention_heads(&mut tape, q, k, v, 2, false).unwrap();
        for s in scores {
            for &x in tape.value(s).data() {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn closed_form_quarter_three_quarters() {
        // head dim 1 so the 1/sqrt(d) scale is 1 and the logits are q*k
        let mut tape = Tape::new();
        let q = tape.constant(mat(1, 1, &[1.0]));
        let k = tape.constant(mat(2, 1, &[0.0, 3f64.ln()]));
        let v = tape.constant(mat(2, 1, &[0.0, 0.0]));
        let (_, scores) = attention_heads(&mut tape, q, k, v, 1, false).unwrap();
        let s = tape.value(scores[0]).data();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(mat(1, 4, &[0.0; 4]));
        let k = tape.constant(mat(2, 2, &[0.0; 4]));
        let v = tape.constant(mat(2, 2, &[0.0; 4]));
        assert!(attention_heads(&mut tape, q, k, v, 2, false).is_err());
        let k = tape.constant(mat(2, 4, &[0.0; 8]));
        let v = tape.constant(mat(2, 4, &[0.0; 8]));
        assert!(attention_heads(&mut tape, q, k, v, 3, false).is_err());
        let q3 = tape.constant(mat(3, 4, &[0.0; 12]));
        assert!(attention_heads(&mut tape, q3, k, v, 2, true).is_err());
    }

    #[test]
    fn rows_are_distributions() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 / 3.0 - 1.5).collect();
        let x = tape.constant(mat(6, 4, &data));
        let (_, scores) = attention_heads(&mut tape, x, x, x, 2, true).unwrap();
        for s in scores {
            let t = tape.value(s);
            for r in 0..6 {
                let sum: f64 = t.row_slice(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(t.row_slice(r)[r + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }
}
