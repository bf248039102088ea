//! Layout control maps: for every latent token, the exact fraction of its
//! receptive field covered by each text token's semantic class.
//!
//! Receptive fields are the floor-partition tiling of the source map:
//! token `(r, c)` of an `h×w` grid owns rows `[⌊rH/h⌋, ⌊(r+1)H/h⌋)` and the
//! analogous column range, so the rectangles tile the source exactly even
//! when `H/h` is not an integer. Coverage entries are therefore a partition
//! of unity over the classes present in a token's field.

use std::path::{Path, PathBuf};

use crate::pnm::{self, PnmError, Raster};
use crate::semantic_map::{present_classes, SemanticMap};
use crate::text_semantics::TokenClassMap;

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("latent {latent:?} is larger than source {source_dims:?}")]
    LatentLargerThanSource { latent: (usize, usize), source_dims: (usize, usize) },
    #[error("class {0} is present in the map but no text token maps to it")]
    UnmappedPresentClass(usize),
    #[error("token class map refers to class {class} but the map has {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("token index {index} out of range for {tokens} tokens")]
    TokenOutOfRange { index: usize, tokens: usize },
    #[error(transparent)]
    Io(#[from] PnmError),
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.row_end - self.row_start) * (self.col_end - self.col_start)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_start..self.row_end).contains(&row) && (self.col_start..self.col_end).contains(&col)
    }
}

fn check_dims(latent: (usize, usize), source: (usize, usize)) -> Result<(), LayoutError> {
    if latent.0 == 0 || latent.1 == 0 || latent.0 > source.0 || latent.1 > source.1 {
        return Err(LayoutError::LatentLargerThanSource { latent, source_dims: source });
    }
    Ok(())
}

pub fn receptive_field(token_index: usize, latent_dims: (usize, usize), source_dims: (usize, usize)) -> Result<Rect, LayoutError> {
    check_dims(latent_dims, source_dims)?;
    let (h, w) = latent_dims;
    let (sh, sw) = source_dims;
    if token_index >= h * w {
        return Err(LayoutError::TokenOutOfRange { index: token_index, tokens: h * w });
    }
    let (r, c) = (token_index / w, token_index % w);
    Ok(Rect { row_start: r * sh / h, row_end: (r + 1) * sh / h, col_start: c * sw / w, col_end: (c + 1) * sw / w })
}

/// One entry of a layout control map. `Masked` stands for −∞ and becomes
/// zero attention mass after the softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coverage {
    Masked,
    Fraction(f64),
}

impl Coverage {
    pub fn value(self) -> Option<f64> {
        match self {
            Coverage::Masked => None,
            Coverage::Fraction(v) => Some(v),
        }
    }

    pub fn is_masked(self) -> bool {
        matches!(self, Coverage::Masked)
    }

    /// Masked entries read as zero.
    pub fn or_zero(self) -> f64 {
        self.value().unwrap_or(0.0)
    }
}

/// `(h·w) × N` matrix of coverage fractions for `N` text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutControlMap {
    latent_dims: (usize, usize),
    source_dims: (usize, usize),
    channels: usize,
    classes: Vec<String>,
    token_classes: TokenClassMap,
    data: Vec<Coverage>,
}

impl LayoutControlMap {
    pub fn latent_dims(&self) -> (usize, usize) {
        self.latent_dims
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    pub fn tokens(&self) -> usize {
        self.latent_dims.0 * self.latent_dims.1
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn token_classes(&self) -> &TokenClassMap {
        &self.token_classes
    }

    pub fn get(&self, token: usize, channel: usize) -> Coverage {
        self.data[token * self.channels + channel]
    }

    pub fn row(&self, token: usize) -> &[Coverage] {
        &self.data[token * self.channels..(token + 1) * self.channels]
    }

    pub fn entries(&self) -> &[Coverage] {
        &self.data
    }

    /// Coverage of one class across all tokens, masked entries as zero.
    pub fn class_slice(&self, class: usize) -> Option<Vec<f64>> {
        let ch = self.token_classes.entries().iter().position(|c| *c == Some(class))?;
        Some((0..self.tokens()).map(|i| self.get(i, ch).or_zero()).collect())
    }

    /// A map with `channels` tokens whose entries are all 1.0, i.e. no
    /// spatial restriction at all.
    pub fn unrestricted(latent_dims: (usize, usize), channels: usize) -> Self {
        Self {
            latent_dims,
            source_dims: latent_dims,
            channels,
            classes: Vec::new(),
            token_classes: TokenClassMap::new(vec![None; channels]),
            data: vec![Coverage::Fraction(1.0); latent_dims.0 * latent_dims.1 * channels],
        }
    }

    /// Writes one PGM per mapped class with values `round(255·coverage)`,
    /// named `<class>_<h>x<w>.pgm`. Returns the written paths.
    pub fn dump_pgms(&self, dir: &Path) -> Result<Vec<PathBuf>, LayoutError> {
        std::fs::create_dir_all(dir).map_err(PnmError::from)?;
        let (h, w) = self.latent_dims;
        let mut written = Vec::new();
        let mut seen = Vec::new();
        for class in self.token_classes.entries().iter().flatten() {
            if seen.contains(class) {
                continue;
            }
            seen.push(*class);
            let slice = self.class_slice(*class).expect("mapped class");
            let pixels = slice.iter().map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect();
            let name = self.classes[*class].replace(char::is_whitespace, "_");
            let path = dir.join(format!("{name}_{h}x{w}.pgm"));
            pnm::write_file(&path, &Raster { width: w, height: h, channels: 1, pixels })?;
            written.push(path);
        }
        Ok(written)
    }
}

fn validate_mapping(map: &SemanticMap, tcm: &TokenClassMap) -> Result<(), LayoutError> {
    for class in tcm.entries().iter().flatten() {
        if *class >= map.num_classes() {
            return Err(LayoutError::UnknownClass { class: *class, classes: map.num_classes() });
        }
    }
    for class in present_classes(map) {
        if !tcm.covers(class) {
            return Err(LayoutError::UnmappedPresentClass(class));
        }
    }
    Ok(())
}

/// Per-token class counts over each receptive field, flattened `(h·w) × C`.
fn field_counts(map: &SemanticMap, latent: (usize, usize)) -> Vec<usize> {
    let (h, w) = latent;
    let (sh, sw) = map.dims();
    let c = map.num_classes();
    let mut counts = vec![0usize; h * w * c];
    // row/col → token lookups; floor partition inverse
    let row_token: Vec<usize> = (0..sh).map(|y| (0..h).rfind(|&r| r * sh / h <= y).unwrap()).collect();
    let col_token: Vec<usize> = (0..sw).map(|x| (0..w).rfind(|&q| q * sw / w <= x).unwrap()).collect();
    for y in 0..sh {
        for x in 0..sw {
            let t = row_token[y] * w + col_token[x];
            counts[t * c + map.class_at(y, x)] += 1;
        }
    }
    counts
}

/// Exact-coverage layout control map.
pub fn compute_lcm(map: &SemanticMap, latent_dims: (usize, usize), tcm: &TokenClassMap) -> Result<LayoutControlMap, LayoutError> {
    check_dims(latent_dims, map.dims())?;
    validate_mapping(map, tcm)?;
    let c = map.num_classes();
    let counts = field_counts(map, latent_dims);
    let n = tcm.len();
    let tokens = latent_dims.0 * latent_dims.1;
    let mut data = Vec::with_capacity(tokens * n);
    for i in 0..tokens {
        let area = receptive_field(i, latent_dims, map.dims())?.area() as f64;
        for j in 0..n {
            data.push(match tcm.get(j) {
                None => Coverage::Fraction(1.0),
                Some(class) => match counts[i * c + class] {
                    0 => Coverage::Masked,
                    k => Coverage::Fraction(k as f64 / area),
                },
            });
        }
    }
    Ok(LayoutControlMap { latent_dims, source_dims: map.dims(), channels: n, classes: map.classes().to_vec(), token_classes: tcm.clone(), data })
}

/// Source pixel sampled by nearest-neighbour resizing for a latent token.
pub fn nearest_source_pixel(row: usize, col: usize, latent: (usize, usize), source: (usize, usize)) -> (usize, usize) {
    ((2 * row + 1) * source.0 / (2 * latent.0), (2 * col + 1) * source.1 / (2 * latent.1))
}

/// Baseline: the layout seen through a nearest-neighbour resize of the map.
pub fn nearest_lcm_baseline(map: &SemanticMap, latent_dims: (usize, usize), tcm: &TokenClassMap) -> Result<LayoutControlMap, LayoutError> {
    check_dims(latent_dims, map.dims())?;
    validate_mapping(map, tcm)?;
    let (h, w) = latent_dims;
    let n = tcm.len();
    let mut data = Vec::with_capacity(h * w * n);
    for r in 0..h {
        for q in 0..w {
            let (y, x) = nearest_source_pixel(r, q, latent_dims, map.dims());
            let sampled = map.class_at(y, x);
            for j in 0..n {
                data.push(match tcm.get(j) {
                    Some(class) if class != sampled => Coverage::Masked,
                    _ => Coverage::Fraction(1.0),
                });
            }
        }
    }
    Ok(LayoutControlMap { latent_dims, source_dims: map.dims(), channels: n, classes: map.classes().to_vec(), token_classes: tcm.clone(), data })
}

/// Latent-resolution map whose class per token is the argmax of its finite
/// class coverages (ties to the lowest class index).
pub fn reconstruct_map(lcm: &LayoutControlMap, tcm: &TokenClassMap) -> SemanticMap {
    let c = lcm.classes.len().max(1);
    let mut grid = Vec::with_capacity(lcm.tokens());
    for i in 0..lcm.tokens() {
        let mut best: Option<(usize, f64)> = None;
        for class in 0..c {
            let Some(j) = tcm.entries().iter().position(|e| *e == Some(class)) else { continue };
            let Some(v) = lcm.get(i, j).value() else { continue };
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((class, v));
            }
        }
        grid.push(best.map_or(0, |(class, _)| class) as u8);
    }
    let classes = if lcm.classes.is_empty() { vec!["background".to_string()] } else { lcm.classes.clone() };
    SemanticMap::new(lcm.latent_dims.0, lcm.latent_dims.1, classes, grid).expect("argmax is a valid class")
}

/// Majority class of each receptive field (ties to the lowest index).
pub fn majority_downsample(map: &SemanticMap, latent_dims: (usize, usize)) -> Result<SemanticMap, LayoutError> {
    check_dims(latent_dims, map.dims())?;
    let c = map.num_classes();
    let counts = field_counts(map, latent_dims);
    let grid = counts
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Ok(SemanticMap::new(latent_dims.0, latent_dims.1, map.classes().to_vec(), grid).expect("valid classes"))
}
