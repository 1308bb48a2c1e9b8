//! Run directory layout:
//!
//! ```text
//! <run>/config.toml   effective configuration
//! <run>/run.json      model shape, variant, class names
//! <run>/vocab.json
//! <run>/log.jsonl     one train and one val record per epoch
//! <run>/best.ckpt     parameters of the best validation epoch
//! <run>/summary.json
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camalign_core::data::{load_dataset, Sample, Vocab};
use camalign_core::{Example, ModelConfig, ParamStore, ReportModel, TrainState, Trainer, Variant};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const RUNS_ENV: &str = "CAMALIGN_RUNS_DIR";

/// Root for run directories: `$CAMALIGN_RUNS_DIR`, else `runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Written by `synth` next to the splits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub classes: Vec<String>,
    pub grid: usize,
    pub patches: usize,
    pub seed: u64,
    pub samples: usize,
}

impl DatasetInfo {
    pub const FILE: &'static str = "dataset.json";

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(Self::FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub variant: Variant,
    pub model: ModelConfig,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_bleu4: Option<f64>,
    pub parameters: usize,
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn read_split(dir: &Path, split: &str, classes: Option<usize>) -> Result<Vec<Sample>> {
    let path = split_path(dir, split);
    load_dataset(&path, classes).with_context(|| format!("loading {}", path.display()))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Trains one variant into `run_dir` per `cfg`.
pub fn train_run(cfg: &RunConfig, run_dir: &Path) -> Result<TrainSummary> {
    let data = &cfg.data.dir;
    for split in ["train", "val"] {
        let p = split_path(data, split);
        if !p.is_file() {
            bail!("dataset split {} not found", p.display());
        }
    }
    let train = read_split(data, "train", None)?;
    let classes = train.first().map(|s| s.labels.len()).context("training split is empty")?;
    let val = read_split(data, "val", Some(classes))?;
    let image_side = train[0].image_side().context("first training sample has no image")?;
    let class_names = match DatasetInfo::read(data)? {
        Some(info) if info.classes.len() == classes => info.classes,
        _ => (0..classes).map(|i| format!("class{i}")).collect(),
    };

    let max_vocab = (cfg.data.max_vocab > 0).then_some(cfg.data.max_vocab);
    let vocab = Vocab::build(train.iter().map(|s| s.report.as_str()), cfg.data.min_freq, max_vocab)?;
    let model_cfg = cfg.model_config(image_side, vocab.len(), classes)?;
    let train_cfg = cfg.train_config();

    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;
    std::fs::write(run_dir.join("vocab.json"), vocab.to_json()?)?;
    write_json(
        &run_dir.join("run.json"),
        &RunMeta {
            variant: train_cfg.variant,
            model: model_cfg.clone(),
            classes: class_names,
        },
    )?;

    let mut trainer: Trainer = Trainer::from_config(&model_cfg, train_cfg)?;
    trainer.dump_dir = Some(run_dir.to_path_buf());
    let to_examples = |samples: &[Sample], t: &Trainer| -> Result<Vec<Example>> {
        samples.iter().map(|s| Ok(t.model.example(s, &vocab)?)).collect()
    };
    let tr = to_examples(&train, &trainer)?;
    let va = to_examples(&val, &trainer)?;
    let mut log = BufWriter::new(File::create(run_dir.join("log.jsonl"))?);
    let outcome = trainer.fit(&tr, &va, &vocab, Some(&mut log), Some(run_dir))?;
    // fit leaves the best parameters in the store; this also covers a zero-epoch budget
    trainer.store.save(&run_dir.join("best.ckpt"))?;
    let summary = summarize(&outcome.state, trainer.model.variant, trainer.store.count());
    write_json(&run_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn summarize(state: &TrainState, variant: Variant, parameters: usize) -> TrainSummary {
    TrainSummary {
        variant,
        epochs_run: state.epoch,
        best_epoch: state.best_epoch,
        best_val_bleu4: state.best_metric,
        parameters,
    }
}

/// A trained run restored from disk.
pub struct LoadedRun {
    pub config: RunConfig,
    pub meta: RunMeta,
    pub model: ReportModel,
    pub store: ParamStore,
    pub vocab: Vocab,
}

impl LoadedRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
        };
        let config = RunConfig::load(Some(&dir.join("config.toml")), &[])?;
        let meta: RunMeta = serde_json::from_str(&read("run.json")?)?;
        let vocab = Vocab::from_json(&read("vocab.json")?)?;
        let (model, mut store) = ReportModel::build(&meta.model, meta.variant, config.train.seed)?;
        let ckpt = dir.join("best.ckpt");
        store.load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        Ok(Self {
            config,
            meta,
            model,
            store,
            vocab,
        })
    }

    /// Samples from `path`, or from the run's test split.
    pub fn samples(&self, path: Option<&Path>) -> Result<Vec<Sample>> {
        let classes = Some(self.meta.model.classes);
        match path {
            Some(p) => load_dataset(p, classes).with_context(|| format!("loading {}", p.display())),
            None => read_split(&self.config.data.dir, "test", classes),
        }
    }
}
