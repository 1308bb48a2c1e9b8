use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One record: one or two square single-channel images, the report, and the
/// multi-hot pseudo labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Row-major `G x G` grids with values in `[0, 1]`.
    pub images: Vec<Vec<f64>>,
    pub report: String,
    pub labels: Vec<u8>,
}

impl Sample {
    /// Side length of the (square) images.
    pub fn image_side(&self) -> Option<usize> {
        let n = self.images.first()?.len();
        let side = (n as f64).sqrt().round() as usize;
        (side * side == n).then_some(side)
    }

    fn validate(&self, classes: Option<usize>) -> std::result::Result<(), String> {
        if self.report.trim().is_empty() {
            return Err("report is empty".into());
        }
        if self.images.is_empty() {
            return Err("sample has no images".into());
        }
        let side = self.image_side().ok_or("image is not square")?;
        for img in &self.images {
            if img.len() != side * side {
                return Err("images differ in size".into());
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err("image contains non-finite values".into());
            }
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err("labels must be 0 or 1".into());
        }
        if let Some(n) = classes {
            if self.labels.len() != n {
                return Err(format!("labels has length {}, expected {n}", self.labels.len()));
            }
        }
        Ok(())
    }
}

/// Reads JSON-lines samples. Blank lines are skipped. When `classes` is
/// given every label vector must have that length; otherwise all must agree
/// with the first.
pub fn load_dataset(path: &Path, classes: Option<usize>) -> Result<Vec<Sample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut expected = classes;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: e.to_string(),
        })?;
        sample
            .validate(expected)
            .map_err(|msg| Error::Schema { line: lineno, msg })?;
        expected.get_or_insert(sample.labels.len());
        out.push(sample);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    write_json_lines(path, samples)
}

pub fn write_json_lines<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded shuffle then a cut by the given train/val fractions; the rest is
/// test.
pub fn split_dataset(mut samples: Vec<Sample>, seed: u64, train: f64, val: f64) -> Result<Splits> {
    if !(train > 0.0 && val >= 0.0 && train + val <= 1.0) {
        return Err(Error::Invalid(format!("bad split fractions {train}, {val}")));
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = samples.len();
    let n_train = (train * n as f64).round() as usize;
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(Splits {
        train: samples,
        val,
        test,
    })
}
