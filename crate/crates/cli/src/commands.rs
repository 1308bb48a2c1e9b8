use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use camalign_core::ablation::AblationTable;
use camalign_core::data::vocab::normalize_text;
use camalign_core::data::{generate_synthetic, save_dataset, split_dataset, write_json_lines, SyntheticSpec};
use camalign_core::decode::generate as decode;
use camalign_core::metrics::evaluate as score;
use camalign_core::model::{ForwardOptions, LossWeights};
use camalign_core::vdm::{class_activation_maps, normalize_map};
use camalign_core::{MetricReport, Tape, Variant};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::run::{runs_root, train_run, DatasetInfo, LoadedRun};
use crate::ConfigArgs;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(d) = &args.data {
        overrides.push(format!("data.dir={}", toml::Value::String(d.display().to_string())));
    }
    RunConfig::load(args.config.as_deref(), &overrides)
}

// ---- synth ----

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for the splits.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of samples before splitting.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Number of glyph classes.
    #[arg(long, default_value_t = 14, value_parser = clap::value_parser!(u64).range(1..))]
    pub glyphs: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 28)]
    pub grid: usize,
    /// Patch cells per image side.
    #[arg(long, default_value_t = 7)]
    pub patches: usize,
    #[arg(long, default_value_t = 1)]
    pub min_glyphs: usize,
    #[arg(long, default_value_t = 3)]
    pub max_glyphs: usize,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        grid: a.grid,
        patches: a.patches,
        catalog: SyntheticSpec::catalog_of(a.glyphs as usize),
        min_glyphs: a.min_glyphs,
        max_glyphs: a.max_glyphs,
        samples: a.samples as usize,
        seed: a.seed,
    };
    let set = generate_synthetic(&spec)?;
    let splits = split_dataset(set.samples, a.seed, 0.7, 0.1)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        save_dataset(&a.out.join(format!("{name}.jsonl")), part)?;
    }
    write_json_lines(&a.out.join("alignment.jsonl"), &set.placements)?;
    let info = DatasetInfo {
        classes: spec.catalog.clone(),
        grid: spec.grid,
        patches: spec.patches,
        seed: spec.seed,
        samples: spec.samples,
    };
    std::fs::write(a.out.join(DatasetInfo::FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    println!(
        "wrote {} train, {} val, {} test samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        a.out.display()
    );
    Ok(())
}

// ---- train ----

pub fn train(args: &ConfigArgs, variant: Option<Variant>, run_dir: Option<PathBuf>) -> Result<()> {
    let mut args = args.clone();
    if let Some(v) = variant {
        args.overrides.push(format!("train.variant=\"{v}\""));
    }
    let cfg = load_config(&args)?;
    let dir = run_dir.unwrap_or_else(|| runs_root().join(format!("{}-s{}", cfg.train.variant, cfg.train.seed)));
    let s = train_run(&cfg, &dir)?;
    println!(
        "{} trained {} epochs, best val BLEU-4 {:.4} at epoch {}; run in {}",
        s.variant,
        s.epochs_run,
        s.best_val_bleu4.unwrap_or(0.0),
        s.best_epoch,
        dir.display()
    );
    Ok(())
}

// ---- generate ----

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Trained run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset file to decode; defaults to the run's test split.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Candidate file to write (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub beam: u64,
}

/// One line of a candidate file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateLine {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
    /// Dataset lines carry the reference as `report`.
    #[serde(default, skip_serializing)]
    pub report: Option<String>,
}

pub fn generate_lines(run: &LoadedRun, input: Option<&Path>, beam: usize) -> Result<Vec<CandidateLine>> {
    run.samples(input)?
        .iter()
        .map(|s| {
            let ids = decode(&run.model, &run.store, &s.images, beam)?;
            Ok(CandidateLine {
                id: s.id.clone(),
                candidate: Some(run.vocab.detokenize(&ids)),
                references: Some(vec![normalize_text(&s.report)]),
                report: None,
            })
        })
        .collect()
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let run = LoadedRun::open(&a.run)?;
    let lines = generate_lines(&run, a.input.as_deref(), a.beam as usize)?;
    write_json_lines(&a.out, &lines)?;
    println!("wrote {} candidates to {}", lines.len(), a.out.display());
    Ok(())
}

// ---- evaluate ----

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// JSON lines with `id` and `candidate` (or `report`).
    #[arg(long)]
    pub candidates: PathBuf,
    /// JSON lines with `id` and `references` (or `report`); defaults to the
    /// references inside the candidate file.
    #[arg(long)]
    pub references: Option<PathBuf>,
    /// Where to write the metric report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_lines(path: &Path) -> Result<Vec<CandidateLine>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}: malformed line", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Pairs candidates with references by id.
pub fn score_files(candidates: &Path, references: Option<&Path>) -> Result<MetricReport> {
    let cands = read_lines(candidates)?;
    let refs = match references {
        Some(p) => read_lines(p)?,
        None => cands.clone(),
    };
    let mut by_id: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in &refs {
        let texts = match (&r.references, &r.report) {
            (Some(rs), _) => rs.clone(),
            (None, Some(rep)) => vec![rep.clone()],
            (None, None) => bail!("reference line {:?} has neither references nor report", r.id),
        };
        by_id.insert(&r.id, texts);
    }
    let cand_ids: BTreeSet<&str> = cands.iter().map(|c| c.id.as_str()).collect();
    let ref_ids: BTreeSet<&str> = by_id.keys().copied().collect();
    if cand_ids != ref_ids {
        let missing_refs: Vec<_> = cand_ids.difference(&ref_ids).collect();
        let missing_cands: Vec<_> = ref_ids.difference(&cand_ids).collect();
        bail!("id mismatch: no reference for {missing_refs:?}; no candidate for {missing_cands:?}");
    }
    ensure!(cand_ids.len() == cands.len(), "duplicate candidate ids");
    let mut c = Vec::with_capacity(cands.len());
    let mut r = Vec::with_capacity(cands.len());
    for line in &cands {
        let text = line
            .candidate
            .clone()
            .or_else(|| line.report.clone())
            .with_context(|| format!("candidate line {:?} has neither candidate nor report", line.id))?;
        c.push(text);
        r.push(by_id[line.id.as_str()].clone());
    }
    Ok(score(&c, &r)?)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let m = score_files(&a.candidates, a.references.as_deref())?;
    let text = serde_json::to_string_pretty(&m)? + "\n";
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

// ---- inspect-maps ----

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Trained run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset file; defaults to the run's test split.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Sample ids to dump; the first sample when absent.
    #[arg(long = "id")]
    pub ids: Vec<String>,
    /// Output directory; one subdirectory per sample.
    #[arg(long)]
    pub out: PathBuf,
}

fn csv_grid(values: &[f64], side: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(side) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes one CSV per image segment: `<stem>_seg<i>.csv`.
fn write_segments(dir: &Path, stem: &str, values: &[f64], segments: &[usize], side: usize) -> Result<()> {
    let mut start = 0;
    for (i, &n) in segments.iter().enumerate() {
        std::fs::write(dir.join(format!("{stem}_seg{i}.csv")), csv_grid(&values[start..start + n], side))?;
        start += n;
    }
    Ok(())
}

#[derive(Serialize)]
struct MapMeta<'a> {
    id: &'a str,
    variant: Variant,
    classes: &'a [String],
    labels: &'a [u8],
    probabilities: Option<Vec<f64>>,
    presence: Option<Vec<bool>>,
    segments: Vec<usize>,
}

pub const NO_VDM_NOTE: &str = "The base variant has no class head, so no visual discriminative map or CAMs exist.\n";
pub const NO_TDM_NOTE: &str =
    "The base variant has no discriminative token r*, so no textual discriminative map is defined and no words are selected.\n";

pub fn inspect_maps(a: &InspectArgs) -> Result<()> {
    let run = LoadedRun::open(&a.run)?;
    let samples = run.samples(a.input.as_deref())?;
    let chosen: Vec<_> = if a.ids.is_empty() {
        samples.iter().take(1).collect()
    } else {
        let wanted: HashSet<&str> = a.ids.iter().map(String::as_str).collect();
        let found: Vec<_> = samples.iter().filter(|s| wanted.contains(s.id.as_str())).collect();
        let have: HashSet<&str> = found.iter().map(|s| s.id.as_str()).collect();
        let missing: Vec<_> = a.ids.iter().filter(|i| !have.contains(i.as_str())).collect();
        ensure!(missing.is_empty(), "sample ids not found: {missing:?}");
        found
    };
    ensure!(!chosen.is_empty(), "no samples to inspect");
    let side = run.meta.model.grid_side();
    let k = run.config.vtac.k;
    for sample in chosen {
        let dir = a.out.join(&sample.id);
        std::fs::create_dir_all(&dir)?;
        let ex = run.model.example(sample, &run.vocab)?;
        let mut tape = Tape::new();
        let weights = LossWeights { k, ..LossWeights::default() };
        let f = run.model.forward(&mut tape, &run.store, &ex, &weights, &ForwardOptions::default())?;
        let meta = MapMeta {
            id: &sample.id,
            variant: run.meta.variant,
            classes: &run.meta.classes,
            labels: &sample.labels,
            probabilities: f.probabilities.as_ref().map(|p| p.probabilities.clone()),
            presence: f.probabilities.as_ref().map(|p| p.presence.clone()),
            segments: f.segments.clone(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

        match (&f.vdm, run.model.classifier) {
            (Some(vdm), Some(w)) => {
                write_segments(&dir, "vdm", vdm, &f.segments, side)?;
                let cams = class_activation_maps(tape.value(f.v_s), run.store.get(w))?;
                for (c, name) in run.meta.classes.iter().enumerate() {
                    let col: Vec<f64> = (0..cams.rows()).map(|j| cams.get(j, c)).collect();
                    write_segments(&dir, &format!("cam_{name}"), &normalize_map(&col), &f.segments, side)?;
                }
            }
            _ => std::fs::write(dir.join("vdm_absent.txt"), NO_VDM_NOTE)?,
        }

        match run.model.probe_tdm(&run.store, &ex, k)? {
            Some((sel, tdm)) if run.meta.variant != Variant::Base => {
                write_segments(&dir, "tdm", &tdm, &f.segments, side)?;
                let att = tape.value(f.attention);
                let word = |i: usize| run.vocab.token(ex.input()[i]).unwrap_or("<unk>").to_string();
                let mut rows = String::from("word");
                for j in 0..att.cols() {
                    let _ = write!(rows, ",p{j}");
                }
                rows.push('\n');
                for &i in &sel.indices {
                    rows.push_str(&word(i));
                    for v in att.row_slice(i) {
                        let _ = write!(rows, ",{v:.6}");
                    }
                    rows.push('\n');
                }
                std::fs::write(dir.join("attention.csv"), rows)?;
                let mut seen = HashSet::new();
                let mut words = String::new();
                for (&i, w) in sel.indices.iter().zip(&sel.weights) {
                    let t = word(i);
                    if seen.insert(t.clone()) {
                        let _ = writeln!(words, "{t}\t{w:.6}");
                    }
                }
                std::fs::write(dir.join("words.txt"), words)?;
            }
            Some(_) => std::fs::write(dir.join("tdm_absent.txt"), NO_TDM_NOTE)?,
            None => std::fs::write(dir.join("tdm_absent.txt"), "The report has no selectable content words.\n")?,
        }
    }
    println!("wrote maps to {}", a.out.display());
    Ok(())
}

// ---- ablate ----

pub fn ablate(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let base = load_config(args)?;
    let out = out.unwrap_or_else(|| runs_root().join("ablation"));
    std::fs::create_dir_all(&out)?;
    let table = AblationTable::collect(&Variant::ALL, |variant| -> Result<MetricReport> {
        let mut cfg = base.clone();
        cfg.train.variant = variant;
        let dir = out.join(variant.to_string());
        train_run(&cfg, &dir)?;
        let run = LoadedRun::open(&dir)?;
        let lines = generate_lines(&run, None, cfg.decode.beam)?;
        let cands = dir.join("test_candidates.jsonl");
        write_json_lines(&cands, &lines)?;
        let m = score_files(&cands, None)?;
        std::fs::write(dir.join("test_metrics.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(m)
    });
    let text = table.render();
    std::fs::write(out.join("ablation.md"), &text)?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    print!("{text}");
    ensure!(table.rows.iter().any(|r| r.metrics.is_some()), "every variant failed");
    Ok(())
}
