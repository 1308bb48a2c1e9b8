//! Visual extractor and transformer encoder-decoder.
//!
//! The decoder's cross-modal attention weights are first-class outputs: the
//! attention-consistency objective consumes them directly.

mod attention;
mod decoder;
mod encoder;
mod extractor;

pub use attention::{attention_heads, MultiHeadAttention};
pub use decoder::{Decoder, DecoderVars};
pub use encoder::Encoder;
pub use extractor::PatchExtractor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    /// Hidden size `D` of the encoder-decoder.
    pub dim: usize,
    pub ffn_dim: usize,
    /// Patch feature channels `C`.
    pub channels: usize,
    /// Width of the first convolution stage.
    pub hidden_channels: usize,
    /// Side `G` of the square single-channel input grid.
    pub image_size: usize,
    /// Side of the square image patch mapped to one visual token.
    pub patch: usize,
    pub vocab: usize,
    /// Maximum number of generated tokens.
    pub max_len: usize,
    /// Number of pseudo-label classes `N^c`.
    pub classes: usize,
    pub position_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            dim: 512,
            ffn_dim: 512,
            channels: 64,
            hidden_channels: 32,
            image_size: 28,
            patch: 4,
            vocab: 64,
            max_len: 60,
            classes: 14,
            position_encoding: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU training runs.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            ffn_dim: 128,
            channels: 32,
            hidden_channels: 16,
            ..Self::default()
        }
    }

    /// Gradient-check sized configuration: 2x2 visual tokens.
    pub fn micro() -> Self {
        Self {
            layers: 1,
            heads: 2,
            dim: 8,
            ffn_dim: 8,
            channels: 4,
            hidden_channels: 3,
            image_size: 8,
            patch: 4,
            vocab: 12,
            max_len: 8,
            classes: 3,
            position_encoding: true,
        }
    }

    /// Tokens per image side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    /// Visual tokens per image, `N^s = H * W`.
    pub fn tokens_per_image(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Strides of the two convolution stages; their product is `patch`.
    pub fn conv_strides(&self) -> (usize, usize) {
        let second = if self.patch.is_multiple_of(2) { 2 } else { 1 };
        (self.patch / second, second)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.dim < 2 || self.channels < 2 {
            return bad("dim and channels must be at least 2".into());
        }
        if self.vocab < 5 {
            return bad(format!("vocab {} leaves no room beyond reserved tokens", self.vocab));
        }
        if self.classes == 0 || self.ffn_dim == 0 || self.hidden_channels == 0 {
            return bad("classes, ffn_dim and hidden_channels must be positive".into());
        }
        Ok(())
    }
}

/// Visual token sequence `v^s` with per-image segment boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures<T> {
    pub tokens: Tensor<T>,
    /// Row count of each concatenated image.
    pub segments: Vec<usize>,
}

impl<T: Scalar> PatchFeatures<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Attention weights indexed `[layer][head]`, each `queries x keys`.
#[derive(Clone, Debug, Default)]
pub struct AttentionScores<T> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> AttentionScores<T> {
    /// Mean over heads of layer `layer`.
    pub fn head_mean(&self, layer: usize) -> Option<Tensor<T>> {
        let heads = self.layers.get(layer)?;
        let first = heads.first()?;
        let inv = T::one() / T::from_usize(heads.len()).unwrap();
        let mut acc = Tensor::zeros(first.shape());
        for h in heads {
            for (a, &v) in acc.data_mut().iter_mut().zip(h.data()) {
                *a += v * inv;
            }
        }
        Some(acc)
    }
}

/// Per-position next-token distributions and final-layer cross-modal attention.
#[derive(Clone, Debug)]
pub struct DecoderOutput<T> {
    /// `T x vocab`, each row a probability distribution.
    pub distributions: Tensor<T>,
    /// Single layer (the final one), one `T x N^s` matrix per head.
    pub cross_attention: AttentionScores<T>,
}

/// Sinusoidal position encodings, `len x dim`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::matrix(len, dim, data).expect("extent")
}

/// Encoder position encodings for a token sequence made of image segments,
/// optionally preceded by one extra non-spatial token that gets a zero
/// encoding. Positions restart at 0 in each segment.
pub fn segment_positions<T: Scalar>(segments: &[usize], dim: usize, extra_token: bool) -> Tensor<T> {
    let longest = segments.iter().copied().max().unwrap_or(0);
    let pe = sinusoidal_positions::<T>(longest, dim);
    let mut data = Vec::new();
    if extra_token {
        data.extend(std::iter::repeat_n(T::zero(), dim));
    }
    for &s in segments {
        data.extend_from_slice(&pe.data()[..s * dim]);
    }
    let rows = data.len() / dim.max(1);
    Tensor::matrix(rows, dim, data).expect("extent")
}

pub(crate) fn add_positions<T: Scalar>(tape: &mut Tape<T>, x: Var, pe: Tensor<T>) -> Result<Var> {
    let pe = tape.constant(pe);
    tape.add(x, pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::micro().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::micro()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            image_size: 10,
            ..ModelConfig::micro()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_grid_is_seven_by_seven() {
        let c = ModelConfig::default();
        assert_eq!(c.grid_side(), 7);
        assert_eq!(c.tokens_per_image(), 49);
        assert_eq!(c.conv_strides(), (2, 2));
    }

    #[test]
    fn segment_positions_restart() {
        let pe = segment_positions::<f64>(&[2, 2], 4, true);
        assert_eq!(pe.shape(), &[5, 4]);
        assert!(pe.row_slice(0).iter().all(|&v| v == 0.0));
        assert_eq!(pe.row_slice(1), pe.row_slice(3));
        assert_eq!(pe.row_slice(2), pe.row_slice(4));
    }
}
