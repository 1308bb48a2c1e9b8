use rand::Rng;

use super::{ModelConfig, PatchFeatures};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Two non-overlapping strided convolutions, each followed by ReLU,
/// producing one `C`-channel token per image patch.
///
/// A convolution whose kernel equals its stride is a row gather followed by
/// a matrix product, which is how both stages are recorded.
#[derive(Clone, Debug)]
pub struct PatchExtractor {
    pub conv1: Linear,
    pub conv2: Linear,
    image_size: usize,
    strides: (usize, usize),
}

impl PatchExtractor {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (s1, s2) = cfg.conv_strides();
        let g = ParamGroup::Visual;
        Self {
            conv1: Linear::new(store, "extractor.conv1", s1 * s1, cfg.hidden_channels, true, g, rng),
            conv2: Linear::new(
                store,
                "extractor.conv2",
                s2 * s2 * cfg.hidden_channels,
                cfg.channels,
                true,
                g,
                rng,
            ),
            image_size: cfg.image_size,
            strides: (s1, s2),
        }
    }

    /// Records feature extraction for one `G x G` row-major image, returning
    /// an `N^s x C` token matrix in row-major patch order.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &[T]) -> Result<Var> {
        let g = self.image_size;
        if image.len() != g * g {
            return Err(Error::Shape {
                op: "extract_patch_features",
                lhs: vec![image.len()],
                rhs: vec![g, g],
            });
        }
        let (s1, s2) = self.strides;
        let pixels = tape.constant(Tensor::matrix(g * g, 1, image.to_vec())?);
        let cols = tape.gather_rows(pixels, window_index(g, s1), s1 * s1)?;
        let h = self.conv1.forward(tape, store, cols)?;
        let h = tape.relu(h);
        let cols = tape.gather_rows(h, window_index(g / s1, s2), s2 * s2)?;
        let v = self.conv2.forward(tape, store, cols)?;
        Ok(tape.relu(v))
    }

    /// Extracts and concatenates the tokens of one or more images.
    pub fn forward_images<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &[Vec<T>],
    ) -> Result<(Var, Vec<usize>)> {
        if images.is_empty() {
            return Err(Error::Empty("sample images"));
        }
        let mut parts = Vec::with_capacity(images.len());
        let mut segments = Vec::with_capacity(images.len());
        for img in images {
            let v = self.forward(tape, store, img)?;
            segments.push(tape.value(v).rows());
            parts.push(v);
        }
        let all = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        Ok((all, segments))
    }

    /// Value-level extraction without gradient bookkeeping.
    pub fn extract<T: Scalar>(&self, store: &ParamStore<T>, images: &[Vec<T>]) -> Result<PatchFeatures<T>> {
        let mut tape = Tape::new();
        let (v, segments) = self.forward_images(&mut tape, store, images)?;
        Ok(PatchFeatures {
            tokens: tape.value(v).clone(),
            segments,
        })
    }
}

/// Row indices of every `k x k` window of a `side x side` grid, windows in
/// row-major order and pixels within a window in row-major order.
fn window_index(side: usize, k: usize) -> Vec<usize> {
    let out_side = side / k;
    let mut idx = Vec::with_capacity(side * side);
    for oy in 0..out_side {
        for ox in 0..out_side {
            for dy in 0..k {
                for dx in 0..k {
                    idx.push((oy * k + dy) * side + ox * k + dx);
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> (ParamStore<f64>, PatchExtractor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = PatchExtractor::new(&mut store, cfg, &mut rng);
        (store, ex)
    }

    #[test]
    fn default_grid_gives_49_tokens() {
        let cfg = ModelConfig::desk();
        let (store, ex) = setup(&cfg);
        let img: Vec<f64> = (0..28 * 28).map(|i| (i % 7) as f64 / 7.0).collect();
        let f = ex.extract(&store, std::slice::from_ref(&img)).unwrap();
        assert_eq!(f.tokens.shape(), &[49, cfg.channels]);
        let two = ex.extract(&store, &[img.clone(), img]).unwrap();
        assert_eq!(two.tokens.shape(), &[98, cfg.channels]);
        assert_eq!(two.segments, vec![49, 49]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let cfg = ModelConfig::desk();
        let (store, ex) = setup(&cfg);
        let f = ex.extract(&store, &[vec![0.0; 28 * 28]]).unwrap();
        assert!(f.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_image_size_is_shape_error() {
        let cfg = ModelConfig::desk();
        let (store, ex) = setup(&cfg);
        assert!(matches!(
            ex.extract(&store, &[vec![0.0; 27 * 27]]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn tokens_are_local_to_their_patch() {
        let cfg = ModelConfig::desk();
        let (store, ex) = setup(&cfg);
        let base = ex.extract(&store, &[vec![0.0; 28 * 28]]).unwrap();
        let mut img = vec![0.0; 28 * 28];
        // pixel (5, 9) lies in patch row 1, column 2
        img[5 * 28 + 9] = 1.0;
        let f = ex.extract(&store, &[img]).unwrap();
        for p in 0..49 {
            if p != 7 + 2 {
                assert_eq!(f.tokens.row_slice(p), base.tokens.row_slice(p));
            }
        }
    }

    #[test]
    fn window_index_layout() {
        assert_eq!(window_index(4, 2)[..8], [0, 1, 4, 5, 2, 3, 6, 7]);
    }
}
