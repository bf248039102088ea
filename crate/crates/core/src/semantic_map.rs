//! Semantic maps: an H×W grid of class indices over a user-supplied class
//! vocabulary, stored on disk as a binary PGM plus a JSON sidecar.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use crate::pnm::{self, PnmError, Raster};

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("pixel value {value} has no class in the sidecar ({classes} classes)")]
    MissingClass { value: usize, classes: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("sidecar indices must be contiguous from 0: {0}")]
    NonContiguousIndices(String),
    #[error("invalid class vocabulary: {0}")]
    InvalidClasses(String),
    #[error("grid has {got} cells, expected {expected}")]
    GridSize { expected: usize, got: usize },
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<PnmError> for MapError {
    fn from(e: PnmError) -> Self {
        match e {
            PnmError::Io(io) => MapError::Io(io),
            other => MapError::MalformedHeader(other.to_string()),
        }
    }
}

/// Per-pixel class annotation. Class 0 is background by convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    classes: Vec<String>,
    grid: Vec<u8>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, classes: Vec<String>, grid: Vec<u8>) -> Result<Self, MapError> {
        validate_classes(&classes)?;
        if classes.len() > 256 {
            return Err(MapError::InvalidClasses(format!("{} classes exceed the 8-bit grid", classes.len())));
        }
        if height == 0 || width == 0 {
            return Err(MapError::GridSize { expected: 1, got: 0 });
        }
        if grid.len() != height * width {
            return Err(MapError::GridSize { expected: height * width, got: grid.len() });
        }
        if let Some(&v) = grid.iter().find(|&&v| v as usize >= classes.len()) {
            return Err(MapError::MissingClass { value: v as usize, classes: classes.len() });
        }
        Ok(Self { height, width, classes, grid })
    }

    /// A map filled with one class.
    pub fn uniform(height: usize, width: usize, classes: Vec<String>, class: u8) -> Result<Self, MapError> {
        Self::new(height, width, classes, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn class_at(&self, row: usize, col: usize) -> usize {
        self.grid[row * self.width + col] as usize
    }

    /// Pixel counts per class index.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes.len()];
        for &v in &self.grid {
            h[v as usize] += 1;
        }
        h
    }

    pub fn to_raster(&self) -> Raster {
        Raster { width: self.width, height: self.height, channels: 1, pixels: self.grid.clone() }
    }

    /// Sidecar JSON object mapping stringified index to class name.
    pub fn sidecar_json(&self) -> String {
        let m: BTreeMap<usize, &str> = self.classes.iter().enumerate().map(|(i, c)| (i, c.as_str())).collect();
        let obj: serde_json::Map<String, serde_json::Value> =
            m.into_iter().map(|(i, c)| (i.to_string(), serde_json::Value::String(c.to_string()))).collect();
        serde_json::to_string_pretty(&obj).expect("string map serializes")
    }

    pub fn save(&self, pgm_path: &Path, sidecar_path: &Path) -> Result<(), MapError> {
        pnm::write_file(pgm_path, &self.to_raster())?;
        std::fs::write(sidecar_path, self.sidecar_json())?;
        Ok(())
    }
}

fn validate_classes(classes: &[String]) -> Result<(), MapError> {
    if classes.is_empty() {
        return Err(MapError::InvalidClasses("at least one class is required".into()));
    }
    let mut seen = HashSet::new();
    for c in classes {
        if c.trim().is_empty() {
            return Err(MapError::InvalidClasses("empty class name".into()));
        }
        if !seen.insert(c.as_str()) {
            return Err(MapError::InvalidClasses(format!("duplicate class {c:?}")));
        }
    }
    Ok(())
}

/// Parses a sidecar `{ "<index>": "<class name>", ... }` into an ordered
/// class list.
pub fn parse_sidecar(json: &str) -> Result<Vec<String>, MapError> {
    let obj: BTreeMap<String, String> = serde_json::from_str(json)?;
    let mut indexed = BTreeMap::new();
    for (k, v) in obj {
        let idx: usize = k.trim().parse().map_err(|_| MapError::NonContiguousIndices(format!("key {k:?} is not an index")))?;
        if indexed.insert(idx, v).is_some() {
            return Err(MapError::NonContiguousIndices(format!("index {idx} repeated")));
        }
    }
    for (expected, &idx) in indexed.keys().enumerate() {
        if idx != expected {
            return Err(MapError::NonContiguousIndices(format!("expected index {expected}, found {idx}")));
        }
    }
    let classes: Vec<String> = indexed.into_values().collect();
    validate_classes(&classes)?;
    Ok(classes)
}

pub fn load_semantic_map(pgm_path: &Path, sidecar_path: &Path) -> Result<SemanticMap, MapError> {
    let raster = pnm::read_file(pgm_path)?;
    if raster.channels != 1 {
        return Err(MapError::MalformedHeader("semantic maps must be P5 greyscale".into()));
    }
    let classes = parse_sidecar(&std::fs::read_to_string(sidecar_path)?)?;
    SemanticMap::new(raster.height, raster.width, classes, raster.pixels)
}

/// Ŝ: the (H·W)×C one-hot form of a semantic map, row-major over pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotLayout {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl OneHotLayout {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let mut sums = vec![0; self.cols];
        for r in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(r)) {
                *s += v as usize;
            }
        }
        sums
    }
}

pub fn one_hot_layout(map: &SemanticMap) -> OneHotLayout {
    let cols = map.num_classes();
    let mut data = vec![0u8; map.grid.len() * cols];
    for (r, &c) in map.grid.iter().enumerate() {
        data[r * cols + c as usize] = 1;
    }
    OneHotLayout { rows: map.grid.len(), cols, data }
}

/// Distinct class indices in the grid, ascending.
pub fn present_classes(map: &SemanticMap) -> BTreeSet<usize> {
    map.grid.iter().map(|&v| v as usize).collect()
}
