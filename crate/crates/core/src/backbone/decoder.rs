use rand::Rng;

use super::{
    add_positions, sinusoidal_positions, AttentionScores, DecoderOutput, ModelConfig, MultiHeadAttention,
};
use crate::error::{Error, Result};
use crate::nn::{bind, FeedForward, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

/// Post-norm transformer decoder with causal self-attention and cross-modal
/// attention over the visual memory.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    layers: Vec<DecoderLayer>,
    pub output: Linear,
    dim: usize,
    vocab: usize,
    position_encoding: bool,
}

/// Recorded decoder outputs.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    /// Word embeddings `l^r` of the prefix, `T x D`.
    pub embeddings: Var,
    /// Next-token log-probabilities, `T x vocab`.
    pub log_probs: Var,
    /// Final layer cross-modal attention weights, one `T x N^s` per head.
    pub cross_attention: Vec<Var>,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::EncoderDecoder;
        let a = (3.0 / cfg.dim as f64).sqrt();
        let table = (0..cfg.vocab * cfg.dim)
            .map(|_| T::lit(rng.gen_range(-a..=a)))
            .collect();
        let embedding = store.add(
            "decoder.embedding",
            Tensor::matrix(cfg.vocab, cfg.dim, table).expect("extent"),
            g,
        );
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), cfg.dim, cfg.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), cfg.dim, g),
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), cfg.dim, cfg.heads, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), cfg.dim, g),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), cfg.dim, cfg.ffn_dim, rng),
                    norm3: LayerNorm::new(store, &format!("{p}.norm3"), cfg.dim, g),
                }
            })
            .collect();
        let output = Linear::new(store, "decoder.output", cfg.dim, cfg.vocab, true, g, rng);
        Self {
            embedding,
            layers,
            output,
            dim: cfg.dim,
            vocab: cfg.vocab,
            position_encoding: cfg.position_encoding,
        }
    }

    /// Embedding lookup, `ids.len() x D`.
    pub fn embed_words<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::IndexOutOfRange {
                what: "word id",
                index: bad,
                len: self.vocab,
            });
        }
        let table = bind(tape, store, self.embedding);
        tape.gather_rows(table, ids.to_vec(), 1)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        memory: Var,
        prefix: &[usize],
    ) -> Result<DecoderVars> {
        if tape.value(memory).rows() == 0 {
            return Err(Error::Empty("decoder memory"));
        }
        if prefix.is_empty() {
            return Err(Error::Empty("decoder prefix"));
        }
        let embeddings = self.embed_words(tape, store, prefix)?;
        let mut x = embeddings;
        if self.position_encoding {
            x = add_positions(tape, x, sinusoidal_positions(prefix.len(), self.dim))?;
        }
        let mut cross_attention = Vec::new();
        for layer in &self.layers {
            let (a, _) = layer.self_attn.forward(tape, store, x, x, true)?;
            let r = tape.add(x, a)?;
            x = layer.norm1.forward(tape, store, r)?;
            let (c, scores) = layer.cross_attn.forward(tape, store, x, memory, false)?;
            cross_attention = scores;
            let r = tape.add(x, c)?;
            x = layer.norm2.forward(tape, store, r)?;
            let f = layer.ffn.forward(tape, store, x)?;
            let r = tape.add(x, f)?;
            x = layer.norm3.forward(tape, store, r)?;
        }
        let logits = self.output.forward(tape, store, x)?;
        let log_probs = tape.log_softmax_rows(logits);
        Ok(DecoderVars {
            embeddings,
            log_probs,
            cross_attention,
        })
    }

    /// Value-level decoding of a full prefix under teacher forcing.
    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        memory: &Tensor<T>,
        prefix: &[usize],
    ) -> Result<DecoderOutput<T>> {
        let mut tape = Tape::new();
        let m = tape.constant(memory.clone());
        let out = self.forward(&mut tape, store, m, prefix)?;
        Ok(DecoderOutput {
            distributions: tape.value(out.log_probs).map(|v| v.exp()),
            cross_attention: AttentionScores {
                layers: vec![out.cross_attention.iter().map(|&s| tape.value(s).clone()).collect()],
            },
        })
    }

    /// Head-averaged final-layer cross-modal attention, `T x N^s`.
    pub fn mean_cross_attention<T: Scalar>(tape: &mut Tape<T>, heads: &[Var]) -> Result<Var> {
        let mut acc = *heads.first().ok_or(Error::Empty("attention heads"))?;
        for &h in &heads[1..] {
            acc = tape.add(acc, h)?;
        }
        if heads.len() > 1 {
            acc = tape.scale(acc, T::one() / T::from_usize(heads.len()).unwrap());
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f64>, Decoder, Tensor<f64>) {
        let cfg = ModelConfig::micro();
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let mem = Tensor::matrix(4, 8, (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        (store, dec, mem)
    }

    #[test]
    fn rows_are_distributions() {
        let (store, dec, mem) = setup();
        let out = dec.decode(&store, &mem, &[1, 5, 6, 7]).unwrap();
        for r in 0..4 {
            let s: f64 = out.distributions.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let heads = &out.cross_attention.layers[0];
        assert_eq!(heads.len(), 2);
        for h in heads {
            assert_eq!(h.shape(), &[4, 4]);
            for r in 0..4 {
                let s: f64 = h.row_slice(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(h.row_slice(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn causal_prefix_independence() {
        let (store, dec, mem) = setup();
        let a = dec.decode(&store, &mem, &[1, 5, 6, 7]).unwrap();
        let b = dec.decode(&store, &mem, &[1, 5, 9, 4]).unwrap();
        assert_eq!(a.distributions.row_slice(0), b.distributions.row_slice(0));
        assert_eq!(a.distributions.row_slice(1), b.distributions.row_slice(1));
        assert_ne!(a.distributions.row_slice(2), b.distributions.row_slice(2));
    }

    #[test]
    fn embedding_lookup_contract() {
        let (store, dec, _) = setup();
        let mut tape = Tape::new();
        let e = dec.embed_words(&mut tape, &store, &[3, 3]).unwrap();
        let v = tape.value(e);
        assert_eq!(v.row_slice(0), v.row_slice(1));
        let empty = dec.embed_words(&mut tape, &store, &[]).unwrap();
        assert_eq!(tape.value(empty).numel(), 0);
        assert!(matches!(
            dec.embed_words(&mut tape, &store, &[12]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn empty_memory_rejected() {
        let (store, dec, _) = setup();
        let mem = Tensor::zeros(&[0, 8]);
        assert!(matches!(dec.decode(&store, &mem, &[1]), Err(Error::Empty(_))));
    }
}
