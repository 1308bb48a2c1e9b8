use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use crate::error::{Error, Result};

/// Default glyph catalog; its length matches the 14 finding categories of
/// the label schema.
pub const DEFAULT_CATALOG: [&str; 14] = [
    "square", "circle", "cross", "bar", "ring", "dot", "plus", "diamond", "corner", "stripe", "checker",
    "hook", "arrow", "wedge",
];

// 4x4 masks, row-major, one per default glyph.
const MASKS: [&str; 14] = [
    "1111111111111111",
    "0110111111110110",
    "1001011001101001",
    "0000111111110000",
    "1111100110011111",
    "0000011001100000",
    "0100111101000100",
    "0110100110010110",
    "1110100010000000",
    "1000010000100001",
    "1010010110100101",
    "1110001000101110",
    "0010011011100010",
    "0001001101111111",
];

const ROWS: [&str; 3] = ["upper", "middle", "lower"];
const COLS: [&str; 3] = ["left", "center", "right"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Image side `G` in pixels.
    pub grid: usize,
    /// Patch grid side `H` (`W = H`); `G` must be a multiple of it.
    pub patches: usize,
    pub catalog: Vec<String>,
    pub min_glyphs: usize,
    pub max_glyphs: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid: 28,
            patches: 7,
            catalog: DEFAULT_CATALOG.iter().map(|s| s.to_string()).collect(),
            min_glyphs: 1,
            max_glyphs: 3,
            samples: 200,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// First `n` names of the default catalog, then `glyph14`, `glyph15`, ...
    pub fn catalog_of(n: usize) -> Vec<String> {
        (0..n)
            .map(|i| DEFAULT_CATALOG.get(i).map_or_else(|| format!("glyph{i}"), |s| s.to_string()))
            .collect()
    }

    pub fn cells(&self) -> usize {
        self.patches * self.patches
    }

    pub fn patch_size(&self) -> usize {
        self.grid / self.patches.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches == 0 || self.grid == 0 || !self.grid.is_multiple_of(self.patches) {
            return Err(Error::Invalid(format!(
                "grid {} is not a positive multiple of the patch grid {}",
                self.grid, self.patches
            )));
        }
        if self.catalog.is_empty() {
            return Err(Error::Empty("glyph catalog"));
        }
        if self.catalog.len() > self.cells() {
            return Err(Error::Invalid(format!(
                "catalog of {} glyphs exceeds the {} available cells",
                self.catalog.len(),
                self.cells()
            )));
        }
        if self.min_glyphs == 0 || self.min_glyphs > self.max_glyphs || self.max_glyphs > self.catalog.len() {
            return Err(Error::Invalid(format!(
                "glyph count range {}..={} must lie within 1..={}",
                self.min_glyphs,
                self.max_glyphs,
                self.catalog.len()
            )));
        }
        Ok(())
    }
}

/// Ground-truth glyph-to-patch assignment for one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub id: String,
    #[serde(flatten)]
    pub glyphs: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    pub samples: Vec<Sample>,
    pub placements: Vec<Placement>,
}

/// Binary `p x p` bitmap for catalog entry `class`. Default glyphs scale
/// their 4x4 mask; extra classes get a seeded pattern.
pub fn glyph_bitmap(class: usize, p: usize) -> Vec<bool> {
    if let Some(mask) = MASKS.get(class) {
        let bits: Vec<bool> = mask.bytes().map(|b| b == b'1').collect();
        return (0..p * p)
            .map(|i| bits[(i / p) * 4 / p * 4 + (i % p) * 4 / p])
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + class as u64);
    loop {
        let bits: Vec<bool> = (0..p * p).map(|_| rng.gen_bool(0.5)).collect();
        if bits.iter().any(|&b| b) {
            return bits;
        }
    }
}

/// Coarse region name of patch cell `(r, c)` on an `h x h` grid.
pub fn region_name(r: usize, c: usize, h: usize) -> String {
    format!("{} {}", ROWS[r * 3 / h], COLS[c * 3 / h])
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (g, h, p) = (spec.grid, spec.patches, spec.patch_size());
    let classes = spec.catalog.len();
    let bitmaps: Vec<Vec<bool>> = (0..classes).map(|c| glyph_bitmap(c, p)).collect();
    let mut samples = Vec::with_capacity(spec.samples);
    let mut placements = Vec::with_capacity(spec.samples);
    for n in 0..spec.samples {
        let count = rng.gen_range(spec.min_glyphs..=spec.max_glyphs);
        let chosen = sample_indices(&mut rng, classes, count).into_vec();
        let cells = sample_indices(&mut rng, spec.cells(), count).into_vec();
        let mut image = vec![0.0; g * g];
        let mut placed: Vec<(usize, usize)> = chosen.iter().copied().zip(cells).collect();
        placed.sort_by_key(|&(_, cell)| cell);
        let mut sentences = Vec::new();
        let mut labels = vec![0u8; classes];
        let mut glyphs = BTreeMap::new();
        for &(class, cell) in &placed {
            let intensity = rng.gen_range(0.75..=1.0);
            let (r, c) = (cell / h, cell % h);
            for (i, &on) in bitmaps[class].iter().enumerate() {
                if on {
                    image[(r * p + i / p) * g + c * p + i % p] = intensity;
                }
            }
            labels[class] = 1;
            glyphs.insert(spec.catalog[class].clone(), cell);
            sentences.push(format!("there is a {} in the {} .", spec.catalog[class], region_name(r, c, h)));
        }
        let absent: Vec<usize> = (0..classes).filter(|&c| labels[c] == 0).collect();
        if !absent.is_empty() {
            let c = absent[rng.gen_range(0..absent.len())];
            sentences.push(format!("there is no {} .", spec.catalog[c]));
        }
        let id = format!("s{}-{n:05}", spec.seed);
        samples.push(Sample {
            id: id.clone(),
            images: vec![image],
            report: sentences.join(" "),
            labels,
        });
        placements.push(Placement { id, glyphs });
    }
    Ok(SyntheticSet { samples, placements })
}
