//! Teacher-forced training with two Adam groups, validation-driven early
//! stopping, a JSON-lines metrics log and a non-finite loss tripwire.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::decode::generate;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::{Example, ForwardOptions, LossWeights, ReportModel};
use crate::objective::{LossBreakdown, Variant};
use crate::optim::AdamState;
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Learning rate of the extractor and class head.
    pub lr_ve: f64,
    /// Learning rate of the encoder-decoder.
    pub lr_ed: f64,
    pub lambda: f64,
    pub delta: f64,
    pub k: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Beam width used for validation decoding.
    pub val_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            variant: Variant::Full,
            lr_ve: 1e-3,
            lr_ed: 2e-3,
            lambda: w.lambda,
            delta: w.delta,
            k: w.k,
            epochs: 100,
            batch_size: 8,
            patience: 10,
            seed: 0,
            val_beam: 1,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            delta: self.delta,
            k: self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(self.lr_ve >= 0.0 && self.lr_ed >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(self.lambda >= 0.0 && self.delta >= 0.0 && self.lambda.is_finite() && self.delta.is_finite()) {
            return bad("loss weights must be finite and >= 0");
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return bad("k must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.val_beam == 0 {
            return bad("batch_size and val_beam must be positive");
        }
        Ok(())
    }
}

/// Early-stopping bookkeeping on validation BLEU-4.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

impl TrainState {
    /// Records the metric of the epoch just finished; returns whether it
    /// improved on the best so far.
    pub fn observe(&mut self, metric: f64) -> bool {
        self.epoch += 1;
        if self.best_metric.is_none_or(|b| metric > b) {
            self.best_metric = Some(metric);
            self.best_epoch = self.epoch;
            self.stale_epochs = 0;
            true
        } else {
            self.stale_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self, patience: usize) -> bool {
        self.stale_epochs >= patience
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub ce: f64,
    pub bce: f64,
    pub mse: f64,
    pub total: f64,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown {
        lambda: items.first().map_or(0.0, |b| b.lambda),
        delta: items.first().map_or(0.0, |b| b.delta),
        ..LossBreakdown::default()
    };
    for b in items {
        m.ce += b.ce / n;
        m.bce += b.bce / n;
        m.mse += b.mse / n;
    }
    m.total = m.ce + m.lambda * m.bce + m.delta * m.mse;
    m
}

pub struct Trainer<T> {
    pub model: ReportModel,
    pub store: ParamStore<T>,
    pub config: TrainConfig,
    pub state: TrainState,
    visual: AdamState<T>,
    encoder_decoder: AdamState<T>,
    rng: ChaCha8Rng,
    /// Directory for the non-finite batch dump.
    pub dump_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ReportModel, store: ParamStore<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = |g: ParamGroup, lr: f64| {
            let shapes: Vec<&[usize]> = store.group_ids(g).into_iter().map(|id| store.get(id).shape()).collect();
            AdamState::new(T::lit(lr), &shapes)
        };
        let visual = adam(ParamGroup::Visual, config.lr_ve);
        let encoder_decoder = adam(ParamGroup::EncoderDecoder, config.lr_ed);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            store,
            config,
            state: TrainState::default(),
            visual,
            encoder_decoder,
            rng,
            dump_dir: None,
        })
    }

    /// Builds the model from `seed` and wraps it.
    pub fn from_config(model_config: &crate::backbone::ModelConfig, config: TrainConfig) -> Result<Self> {
        let (model, store) = ReportModel::build(model_config, config.variant, config.seed)?;
        Self::new(model, store, config)
    }

    pub fn step_count(&self) -> u64 {
        self.encoder_decoder.step_count()
    }

    /// Batch-averaged gradients of the composite loss.
    pub fn gradients(&self, batch: &[&Example<T>]) -> Result<(Vec<Tensor<T>>, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let weights = self.config.weights();
        let mut acc: Vec<Tensor<T>> = self.store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let scale = T::one() / T::from_usize(batch.len()).unwrap();
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            let mut tape = Tape::new();
            let f = self.model.forward(&mut tape, &self.store, ex, &weights, &ForwardOptions::default())?;
            if !f.breakdown.total.is_finite() {
                return Err(self.non_finite(batch, &f.breakdown, "loss"));
            }
            let grads = tape.backward(f.total)?;
            for (a, g) in acc.iter_mut().zip(grads.param_grads(&tape, self.store.len())) {
                if let Some(g) = g {
                    for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y * scale;
                    }
                }
            }
            parts.push(f.breakdown);
        }
        let mean = mean_breakdown(&parts);
        if acc.iter().any(|g| !g.is_finite()) {
            return Err(self.non_finite(batch, &mean, "gradient"));
        }
        Ok((acc, mean))
    }

    fn non_finite(&self, batch: &[&Example<T>], breakdown: &LossBreakdown, what: &str) -> Error {
        let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
        let mut msg = format!("non-finite {what} at step {} on batch {ids:?}", self.step_count() + 1);
        if let Some(dir) = &self.dump_dir {
            let dump = serde_json::json!({
                "step": self.step_count() + 1,
                "what": what,
                "breakdown": breakdown,
                "examples": batch.iter().map(|e| serde_json::json!({
                    "id": e.id,
                    "tokens": e.tokens,
                    "labels": e.labels.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                    "images": e.images.iter().map(|img| img.iter().map(|v| v.as_f64()).collect::<Vec<_>>()).collect::<Vec<_>>(),
                })).collect::<Vec<_>>(),
            });
            let path = dir.join("nonfinite_batch.json");
            if std::fs::write(&path, dump.to_string()).is_ok() {
                msg.push_str(&format!("; batch dumped to {}", path.display()));
            }
        }
        Error::NonFinite(msg)
    }

    /// Applies averaged gradients with the two optimizer groups.
    pub fn apply(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        for (group, opt) in [
            (ParamGroup::Visual, &mut self.visual),
            (ParamGroup::EncoderDecoder, &mut self.encoder_decoder),
        ] {
            let ids = self.store.group_ids(group);
            let g: Vec<&Tensor<T>> = ids.iter().map(|id| &grads[id.index()]).collect();
            let mut params = self.store.group_values_mut(group);
            opt.step(&mut params, &g)?;
        }
        Ok(())
    }

    pub fn step(&mut self, batch: &[&Example<T>]) -> Result<LossBreakdown> {
        let (grads, breakdown) = self.gradients(batch)?;
        self.apply(&grads)?;
        Ok(breakdown)
    }

    /// One shuffled pass; returns the mean training breakdown.
    pub fn epoch(&mut self, train: &[Example<T>]) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut parts = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &train[i]).collect();
            parts.push(self.step(&batch)?);
        }
        Ok(mean_breakdown(&parts))
    }

    /// Mean loss terms without updating anything.
    pub fn losses(&self, examples: &[Example<T>]) -> Result<LossBreakdown> {
        let weights = self.config.weights();
        let parts = examples
            .iter()
            .map(|ex| {
                let mut tape = Tape::new();
                Ok(self
                    .model
                    .forward(&mut tape, &self.store, ex, &weights, &ForwardOptions::default())?
                    .breakdown)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_breakdown(&parts))
    }

    /// Decodes every example and scores it against its own report.
    pub fn decode_metrics(&self, examples: &[Example<T>], vocab: &Vocab, beam: usize) -> Result<MetricReport> {
        let mut cands = Vec::with_capacity(examples.len());
        let mut refs = Vec::with_capacity(examples.len());
        for ex in examples {
            let ids = generate(&self.model, &self.store, &ex.images, beam)?;
            cands.push(vocab.detokenize(&ids));
            refs.push(vec![vocab.detokenize(&ex.tokens)]);
        }
        evaluate(&cands, &refs)
    }

    /// Trains until the epoch budget or early stop, keeping the parameters
    /// of the best validation epoch. Each epoch appends a train and a val
    /// record to `log`; the best parameters are saved under `run_dir`.
    pub fn fit(
        &mut self,
        train: &[Example<T>],
        val: &[Example<T>],
        vocab: &Vocab,
        mut log: Option<&mut dyn Write>,
        run_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if val.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        let mut history = Vec::new();
        let mut best = self.store.clone();
        for _ in 0..self.config.epochs {
            let tr = self.epoch(train)?;
            let va = self.losses(val)?;
            let metrics = self.decode_metrics(val, vocab, self.config.val_beam)?;
            let epoch = self.state.epoch + 1;
            let records = [
                EpochRecord {
                    epoch,
                    split: "train".into(),
                    ce: tr.ce,
                    bce: tr.bce,
                    mse: tr.mse,
                    total: tr.total,
                    metrics: None,
                },
                EpochRecord {
                    epoch,
                    split: "val".into(),
                    ce: va.ce,
                    bce: va.bce,
                    mse: va.mse,
                    total: va.total,
                    metrics: Some(metrics),
                },
            ];
            if let Some(w) = log.as_deref_mut() {
                for r in &records {
                    serde_json::to_writer(&mut *w, r)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            history.extend(records);
            if self.state.observe(metrics.bleu4) {
                best = self.store.clone();
                if let Some(dir) = run_dir {
                    best.save(&dir.join("best.ckpt"))?;
                }
            }
            if self.state.should_stop(self.config.patience) {
                break;
            }
        }
        self.store = best;
        Ok(TrainOutcome {
            state: self.state.clone(),
            history,
        })
    }
}
