//! The assembled report generator: patch extractor, optional class head and
//! discriminative token, encoder and decoder, plus the loss terms of each
//! variant recorded on one tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Decoder, Encoder, ModelConfig, PatchExtractor};
use crate::data::{Sample, Vocab, EOS};
use crate::error::{shape_err, Error, Result};
use crate::nn::{bind, LayerNorm};
use crate::objective::{composite_loss, LossBreakdown, Variant};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};
use crate::vdm::{aggregate_vdm, normalize_map, ClassProbabilities};
use crate::vdmae::{split_memory_on_tape, DiscriminativeToken};
use crate::vtac::{select_important_words, word_similarities, ImportantWordSelection, DEFAULT_K};

/// Weights of the auxiliary terms and the word proportion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub delta: f64,
    pub k: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            delta: 0.15,
            k: DEFAULT_K,
        }
    }
}

/// A tokenized training record in the model's scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub images: Vec<Vec<T>>,
    /// `[BOS, w_1 .. w_n, EOS]`
    pub tokens: Vec<usize>,
    pub labels: Vec<T>,
}

impl<T: Scalar> Example<T> {
    /// Tokenizes the report, keeping at most `max_len` words.
    pub fn from_sample(sample: &Sample, vocab: &Vocab, max_len: usize) -> Self {
        let mut tokens = vocab.tokenize(&sample.report);
        if tokens.len() > max_len + 2 {
            tokens.truncate(max_len + 1);
            tokens.push(EOS);
        }
        Self {
            id: sample.id.clone(),
            images: sample
                .images
                .iter()
                .map(|img| img.iter().map(|&v| T::lit(v)).collect())
                .collect(),
            tokens,
            labels: sample.labels.iter().map(|&l| T::lit(l as f64)).collect(),
        }
    }

    /// Teacher-forced decoder input `[BOS, w_1 .. w_n]`.
    pub fn input(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Targets `[w_1 .. w_n, EOS]`.
    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    /// Input positions eligible for word selection (not special tokens).
    pub fn selectable(&self) -> Vec<bool> {
        self.input().iter().map(|&id| !Vocab::is_special(id)).collect()
    }
}

/// Test hooks for the forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions<T> {
    /// Added to `r*` right after the split.
    pub perturb_r_star: Option<Tensor<T>>,
    /// Replaces the computed `d^v`. Finite-difference checks hold the
    /// gradient-stopped quantities fixed through this and `fixed_selection`.
    pub fixed_vdm: Option<Vec<T>>,
    /// Replaces the selected word positions.
    pub fixed_selection: Option<Vec<usize>>,
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub total: Var,
    pub ce: Var,
    pub bce: Option<Var>,
    pub mse: Option<Var>,
    pub breakdown: LossBreakdown,
    /// Patch tokens `v^s` and the row count of each image.
    pub v_s: Var,
    pub segments: Vec<usize>,
    pub r_star: Option<Var>,
    pub memory: Var,
    pub embeddings: Var,
    pub log_probs: Var,
    /// Head-averaged final-layer cross-modal attention, `n+1 x N^s`.
    pub attention: Var,
    pub probabilities: Option<ClassProbabilities<T>>,
    pub vdm: Option<Vec<T>>,
    /// Selected input positions and their weights.
    pub selection: Option<ImportantWordSelection<T>>,
    pub tdm: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ReportModel {
    pub config: ModelConfig,
    pub variant: Variant,
    pub extractor: PatchExtractor,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// `C x N^c` class head, no bias.
    pub classifier: Option<ParamId>,
    pub token: Option<DiscriminativeToken>,
}

impl ReportModel {
    /// Registers all parameters. The discriminative modules are created last
    /// so the shared parameters are identical across variants for one seed.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = PatchExtractor::new(store, config, &mut rng);
        let encoder = Encoder::new(store, config, &mut rng);
        let decoder = Decoder::new(store, config, &mut rng);
        let (classifier, token) = if variant.has_discriminative_token() {
            let w = store.add_xavier("vdm.classifier", config.channels, config.classes, ParamGroup::Visual, &mut rng);
            let norm = LayerNorm::new(store, "vdmae.norm", config.channels, ParamGroup::Visual);
            (Some(w), Some(DiscriminativeToken { norm }))
        } else {
            (None, None)
        };
        Ok(Self {
            config: config.clone(),
            variant,
            extractor,
            encoder,
            decoder,
            classifier,
            token,
        })
    }

    pub fn build<T: Scalar>(config: &ModelConfig, variant: Variant, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut store, config, variant, seed)?;
        Ok((model, store))
    }

    pub fn example<T: Scalar>(&self, sample: &Sample, vocab: &Vocab) -> Result<Example<T>> {
        if sample.labels.len() != self.config.classes {
            return shape_err("sample labels", &[sample.labels.len()], &[self.config.classes]);
        }
        if vocab.len() > self.config.vocab {
            return Err(Error::Invalid(format!(
                "vocabulary of {} tokens exceeds the model's {}",
                vocab.len(),
                self.config.vocab
            )));
        }
        Ok(Example::from_sample(sample, vocab, self.config.max_len))
    }

    /// Class logits `1 x N^c` from pooled patch tokens.
    fn class_logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, v_s: Var) -> Result<Option<Var>> {
        let Some(w) = self.classifier else {
            return Ok(None);
        };
        let pooled = tape.mean_rows(v_s)?;
        let w = bind(tape, store, w);
        Ok(Some(tape.matmul(pooled, w)?))
    }

    /// Value-level `d^v` from the tape values of `v^s` and `W_c`.
    fn vdm_values<T: Scalar>(&self, v_s: &Tensor<T>, w_c: &Tensor<T>, probs: &ClassProbabilities<T>) -> Result<Vec<T>> {
        let cams = crate::vdm::class_activation_maps(v_s, w_c)?;
        let normalized: Vec<Vec<T>> = (0..cams.cols())
            .map(|i| normalize_map(&(0..cams.rows()).map(|j| cams.get(j, i)).collect::<Vec<_>>()))
            .collect();
        Ok(aggregate_vdm(&normalized, probs)?.0)
    }

    /// Records encoding only: returns `(memory, r*, v_s, segments, probs, vdm, logits)`.
    #[allow(clippy::type_complexity)]
    fn encode_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        images: &[Vec<T>],
        fixed_vdm: Option<&[T]>,
    ) -> Result<(Var, Option<Var>, Var, Vec<usize>, Option<ClassProbabilities<T>>, Option<Vec<T>>, Option<Var>)> {
        let (v_s, segments) = self.extractor.forward_images(tape, store, images)?;
        let logits = self.class_logits(tape, store, v_s)?;
        match (&self.token, logits, self.classifier) {
            (Some(token), Some(logits), Some(w)) => {
                let probs = ClassProbabilities::from_logits(tape.value(logits).data().to_vec());
                let d_v = match fixed_vdm {
                    Some(d) => d.to_vec(),
                    None => self.vdm_values(tape.value(v_s), store.get(w), &probs)?,
                };
                let (_, r_norm) = token.forward(tape, store, &d_v, v_s)?;
                let x = tape.concat_rows(&[r_norm, v_s])?;
                let encoded = self.encoder.forward(tape, store, x, &segments, true)?;
                let split = split_memory_on_tape(tape, encoded)?;
                Ok((split.memory, Some(split.r_star), v_s, segments, Some(probs), Some(d_v), Some(logits)))
            }
            _ => {
                let memory = self.encoder.forward(tape, store, v_s, &segments, false)?;
                Ok((memory, None, v_s, segments, None, None, None))
            }
        }
    }

    /// Decoder memory for generation.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, images: &[Vec<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (memory, ..) = self.encode_on_tape(&mut tape, store, images, None)?;
        Ok(tape.value(memory).clone())
    }

    /// Teacher-forced forward pass with every loss term of the variant.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        example: &Example<T>,
        weights: &LossWeights,
        options: &ForwardOptions<T>,
    ) -> Result<Forward<T>> {
        if example.tokens.len() < 2 {
            return Err(Error::Empty("report tokens"));
        }
        let (memory, mut r_star, v_s, segments, probabilities, vdm, logits) =
            self.encode_on_tape(tape, store, &example.images, options.fixed_vdm.as_deref())?;
        if let (Some(r), Some(delta)) = (r_star, &options.perturb_r_star) {
            let d = tape.constant(delta.clone());
            r_star = Some(tape.add(r, d)?);
        }
        let dec = self.decoder.forward(tape, store, memory, example.input())?;
        let ce = tape.nll(dec.log_probs, example.targets().iter().map(|&t| Some(t)).collect())?;
        let attention = Decoder::mean_cross_attention(tape, &dec.cross_attention)?;

        let bce = match logits {
            Some(l) => {
                if example.labels.len() != self.config.classes {
                    return shape_err("labels", &[example.labels.len()], &[self.config.classes]);
                }
                let p = tape.sigmoid(l);
                Some(tape.bce(p, example.labels.clone())?)
            }
            None => None,
        };

        let mut selection = None;
        let mut tdm = None;
        let mut mse = None;
        if let (true, Some(r), Some(d_v)) = (self.variant.has_consistency(), r_star, &vdm) {
            let words = tape.slice_rows(dec.embeddings, 0, example.input().len())?;
            let s_values = word_similarities(tape.value(words), tape.value(r).data(), &example.selectable())?;
            let chosen = match &options.fixed_selection {
                Some(idx) => Some(ImportantWordSelection {
                    weights: idx.iter().map(|&i| s_values.0[i].max(T::zero())).collect(),
                    indices: idx.clone(),
                }),
                None => select_important_words(&s_values, weights.k)?,
            };
            if let Some(sel) = chosen {
                let sims = tape.cosine_rows(words, r)?;
                let chosen = tape.gather_rows(sims, sel.indices.clone(), 1)?;
                let w = tape.relu(chosen);
                let rows = tape.gather_rows(attention, sel.indices.clone(), 1)?;
                let normed = tape.relu_min_max_rows(rows);
                let scaled = tape.mul_col(normed, w)?;
                let d_t = tape.max_rows(scaled)?;
                mse = Some(tape.mse(d_t, d_v.clone())?);
                tdm = Some(d_t);
                selection = Some(sel);
            }
        }

        let value = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        let breakdown = composite_loss(
            tape.value(ce).item().as_f64(),
            value(tape, bce),
            value(tape, mse),
            weights.lambda,
            weights.delta,
            self.variant,
        )?;
        let mut total = ce;
        if let Some(b) = bce {
            let t = tape.scale(b, T::lit(weights.lambda));
            total = tape.add(total, t)?;
        }
        if let Some(m) = mse {
            let t = tape.scale(m, T::lit(weights.delta));
            total = tape.add(total, t)?;
        }
        Ok(Forward {
            total,
            ce,
            bce,
            mse,
            breakdown,
            v_s,
            segments,
            r_star,
            memory,
            embeddings: dec.embeddings,
            log_probs: dec.log_probs,
            attention,
            probabilities,
            vdm,
            selection,
            tdm,
        })
    }

    /// Value-level textual map for alignment probing under any variant.
    /// Words are ranked against `r*` when the variant has one, otherwise
    /// against the mean of the decoder memory.
    pub fn probe_tdm<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        example: &Example<T>,
        k: f64,
    ) -> Result<Option<(ImportantWordSelection<T>, Vec<T>)>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, store, example, &LossWeights { k, ..LossWeights::default() }, &ForwardOptions::default())?;
        let anchor = match f.r_star {
            Some(r) => r,
            None => tape.mean_rows(f.memory)?,
        };
        let words = tape.value(f.embeddings);
        let s = word_similarities(words, tape.value(anchor).data(), &example.selectable())?;
        let Some(sel) = select_important_words(&s, k)? else {
            return Ok(None);
        };
        let att = tape.value(f.attention);
        let rows: Vec<Vec<T>> = sel.indices.iter().map(|&i| att.row_slice(i).to_vec()).collect();
        let map = crate::vtac::textual_discriminative_map(&Tensor::from_rows(&rows)?, &sel.weights)?;
        Ok(Some((sel, map.0)))
    }

    /// Patch index of the probe map's maximum.
    pub fn probe_argmax<T: Scalar>(&self, store: &ParamStore<T>, example: &Example<T>, k: f64) -> Result<Option<usize>> {
        Ok(self.probe_tdm(store, example, k)?.and_then(|(_, m)| argmax(&m)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_example(cfg: &ModelConfig) -> Example<f64> {
        let n = cfg.image_size * cfg.image_size;
        Example {
            id: "m".into(),
            images: vec![(0..n).map(|i| ((i * 7) % 11) as f64 / 10.0).collect()],
            tokens: vec![1, 5, 6, 7, 2],
            labels: vec![1.0, 0.0, 1.0],
        }
    }

    #[test]
    fn parameter_overhead_is_head_plus_affine() {
        for cfg in [ModelConfig::micro(), ModelConfig::desk(), ModelConfig::default()] {
            let (_, base) = ReportModel::build::<f64>(&cfg, Variant::Base, 1).unwrap();
            let (_, vdmae) = ReportModel::build::<f64>(&cfg, Variant::Vdmae, 1).unwrap();
            let (_, full) = ReportModel::build::<f64>(&cfg, Variant::Full, 1).unwrap();
            assert_eq!(vdmae.count(), full.count());
            assert_eq!(full.count() - base.count(), cfg.classes * cfg.channels + 2 * cfg.channels);
        }
    }

    #[test]
    fn shared_parameters_match_across_variants() {
        let cfg = ModelConfig::micro();
        let (_, base) = ReportModel::build::<f64>(&cfg, Variant::Base, 3).unwrap();
        let (_, full) = ReportModel::build::<f64>(&cfg, Variant::Full, 3).unwrap();
        for (id, p) in base.iter() {
            assert_eq!(full.param(id).value, p.value);
        }
    }

    #[test]
    fn base_logs_zero_auxiliary_terms() {
        let cfg = ModelConfig::micro();
        let (m, store) = ReportModel::build::<f64>(&cfg, Variant::Base, 2).unwrap();
        let mut tape = Tape::new();
        let f = m
            .forward(&mut tape, &store, &micro_example(&cfg), &LossWeights::default(), &ForwardOptions::default())
            .unwrap();
        assert_eq!((f.breakdown.bce, f.breakdown.mse), (0.0, 0.0));
        assert!(f.r_star.is_none() && f.tdm.is_none());
        assert_eq!(tape.value(f.total).item(), f.breakdown.total);
    }

    #[test]
    fn full_breakdown_identity() {
        let cfg = ModelConfig::micro();
        let (m, store) = ReportModel::build::<f64>(&cfg, Variant::Full, 2).unwrap();
        let mut tape = Tape::new();
        let f = m
            .forward(&mut tape, &store, &micro_example(&cfg), &LossWeights::default(), &ForwardOptions::default())
            .unwrap();
        let b = f.breakdown;
        assert!((b.total - (b.ce + b.lambda * b.bce + b.delta * b.mse)).abs() < 1e-12);
        assert!((tape.value(f.total).item() - b.total).abs() < 1e-12);
        assert_eq!(f.vdm.as_ref().unwrap().len(), 4);
        assert_eq!(tape.value(f.tdm.unwrap()).numel(), 4);
        // input positions 1..=3 are content words; ceil(0.25 * 3) = 1
        assert_eq!(f.selection.unwrap().indices.len(), 1);
    }

    #[test]
    fn all_unknown_words_skip_consistency() {
        let cfg = ModelConfig::micro();
        let (m, store) = ReportModel::build::<f64>(&cfg, Variant::Full, 2).unwrap();
        let mut ex = micro_example(&cfg);
        ex.tokens = vec![1, 3, 3, 2];
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &store, &ex, &LossWeights::default(), &ForwardOptions::default()).unwrap();
        assert!(f.mse.is_none());
        assert_eq!(f.breakdown.mse, 0.0);
    }

    #[test]
    fn two_images_concatenate_tokens() {
        let cfg = ModelConfig::micro();
        let (m, store) = ReportModel::build::<f64>(&cfg, Variant::Full, 2).unwrap();
        let mut ex = micro_example(&cfg);
        let second: Vec<f64> = ex.images[0].iter().rev().copied().collect();
        ex.images.push(second);
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &store, &ex, &LossWeights::default(), &ForwardOptions::default()).unwrap();
        assert_eq!(f.segments, vec![4, 4]);
        assert_eq!(f.vdm.unwrap().len(), 8);
        assert_eq!(tape.value(f.memory).rows(), 8);
    }
}
