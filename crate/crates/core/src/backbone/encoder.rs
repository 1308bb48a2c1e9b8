use rand::Rng;

use super::{add_positions, segment_positions, ModelConfig, MultiHeadAttention};
use crate::error::Result;
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

/// Post-norm transformer encoder over visual tokens.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub input: Linear,
    layers: Vec<EncoderLayer>,
    dim: usize,
    position_encoding: bool,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::EncoderDecoder;
        let input = Linear::new(store, "encoder.input", cfg.channels, cfg.dim, true, g, rng);
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncoderLayer {
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), cfg.dim, cfg.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), cfg.dim, g),
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), cfg.dim, cfg.ffn_dim, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), cfg.dim, g),
                }
            })
            .collect();
        Self {
            input,
            layers,
            dim: cfg.dim,
            position_encoding: cfg.position_encoding,
        }
    }

    /// Encodes `tokens` (rows x C). `segments` gives the row count of each
    /// image; with `extra_token` the first row is a non-spatial token that
    /// precedes the segments. Output has the same row count, `D` columns.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        segments: &[usize],
        extra_token: bool,
    ) -> Result<Var> {
        let mut x = self.input.forward(tape, store, tokens)?;
        if self.position_encoding {
            let pe = segment_positions(segments, self.dim, extra_token);
            x = add_positions(tape, x, pe)?;
        }
        for layer in &self.layers {
            let (a, _) = layer.attn.forward(tape, store, x, x, false)?;
            let r = tape.add(x, a)?;
            x = layer.norm1.forward(tape, store, r)?;
            let f = layer.ffn.forward(tape, store, x)?;
            let r = tape.add(x, f)?;
            x = layer.norm2.forward(tape, store, r)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(cfg: &ModelConfig, tokens: &Tensor<f64>, segments: &[usize], extra: bool) -> Tensor<f64> {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let y = enc.forward(&mut tape, &store, x, segments, extra).unwrap();
        tape.value(y).clone()
    }

    fn tokens(n: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(n, c, (0..n * c).map(|i| ((i * 13) % 17) as f64 / 9.0 - 0.8).collect()).unwrap()
    }

    #[test]
    fn length_preserved() {
        let cfg = ModelConfig::micro();
        assert_eq!(run(&cfg, &tokens(4, 4), &[4], false).shape(), &[4, 8]);
        assert_eq!(run(&cfg, &tokens(5, 4), &[4], true).shape(), &[5, 8]);
    }

    #[test]
    fn permutation_equivariant_without_positions() {
        let cfg = ModelConfig {
            position_encoding: false,
            layers: 2,
            ..ModelConfig::micro()
        };
        let t = tokens(4, 4);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|r| t.row_slice(r).to_vec()).collect();
        rows.swap(1, 3);
        let swapped = Tensor::from_rows(&rows).unwrap();
        let a = run(&cfg, &t, &[4], false);
        let b = run(&cfg, &swapped, &[4], false);
        for (ra, rb) in [(0, 0), (1, 3), (2, 2), (3, 1)] {
            for (x, y) in a.row_slice(ra).iter().zip(b.row_slice(rb)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layers_is_projection() {
        let cfg = ModelConfig {
            layers: 0,
            position_encoding: false,
            ..ModelConfig::micro()
        };
        let t = tokens(4, 4);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = enc.forward(&mut tape, &store, x, &[4], false).unwrap();
        let expected = crate::tensor::matmul(&t, store.get(enc.input.weight)).unwrap();
        assert!(tape.value(y).max_abs_diff(&expected) < 1e-15);
    }
}
