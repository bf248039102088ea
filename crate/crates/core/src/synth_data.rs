//! Procedural scenes of flat-colored shapes with exact semantic maps, and
//! layout-free image–caption pairs from the same generator.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
use crate::pnm::PnmError;
use crate::semantic_map::{load_semantic_map, present_classes, MapError, SemanticMap};

pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "square", "triangle", "stripe"];
pub const BACKGROUND: usize = 0;
pub const CIRCLE: usize = 1;
pub const SQUARE: usize = 2;
pub const TRIANGLE: usize = 3;
pub const STRIPE: usize = 4;
/// Excluded from layout-annotated splits, present in layout-free pairs.
pub const HELDOUT_CLASS: usize = TRIANGLE;

pub const CANONICAL_COLORS: [[f64; 3]; 5] = [[0.1, 0.1, 0.1], [0.9, 0.15, 0.15], [0.15, 0.85, 0.15], [0.15, 0.25, 0.95], [0.95, 0.9, 0.1]];
pub const COLOR_JITTER: f64 = 0.05;
const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("could not place any shape after {0} attempts")]
    PlacementFailure(usize),
    #[error("invalid scene options: {0}")]
    Options(String),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] PnmError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle {
        diameter: usize,
    },
    Square {
        side: usize,
    },
    /// Upward-pointing isosceles triangle filling its box.
    Triangle {
        base: usize,
        height: usize,
    },
    Stripe {
        length: usize,
        thickness: usize,
        orientation: Orientation,
    },
}

impl ShapeKind {
    pub fn class(&self) -> usize {
        match self {
            ShapeKind::Circle { .. } => CIRCLE,
            ShapeKind::Square { .. } => SQUARE,
            ShapeKind::Triangle { .. } => TRIANGLE,
            ShapeKind::Stripe { .. } => STRIPE,
        }
    }

    /// `(rows, cols)` of the bounding box.
    pub fn extent(&self) -> (usize, usize) {
        match *self {
            ShapeKind::Circle { diameter } => (diameter, diameter),
            ShapeKind::Square { side } => (side, side),
            ShapeKind::Triangle { base, height } => (height, base),
            ShapeKind::Stripe { length, thickness, orientation: Orientation::Horizontal } => (thickness, length),
            ShapeKind::Stripe { length, thickness, orientation: Orientation::Vertical } => (length, thickness),
        }
    }

    /// Whether box-relative pixel `(r, c)` is covered (pixel-center rule).
    pub fn covers(&self, r: usize, c: usize) -> bool {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        match *self {
            ShapeKind::Circle { diameter } => {
                let rad = diameter as f64 / 2.0;
                (y - rad).powi(2) + (x - rad).powi(2) <= rad * rad
            }
            ShapeKind::Square { .. } | ShapeKind::Stripe { .. } => true,
            ShapeKind::Triangle { base, height } => {
                let half = base as f64 / 2.0;
                (x - half).abs() <= half * y / height as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Top-left corner of the bounding box.
    pub top: usize,
    pub left: usize,
    pub color: [f64; 3],
}

impl ShapeSpec {
    pub fn class(&self) -> usize {
        self.kind.class()
    }

    fn bbox(&self) -> (usize, usize, usize, usize) {
        let (h, w) = self.kind.extent();
        (self.top, self.left, self.top + h, self.left + w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub background: [f64; 3],
    pub shapes: Vec<ShapeSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOptions {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape classes that may be drawn.
    pub allowed: Vec<usize>,
    /// A class that must appear (drawn first).
    pub required: Option<usize>,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self { size: 32, min_shapes: 1, max_shapes: 3, allowed: vec![CIRCLE, SQUARE, STRIPE], required: None }
    }
}

impl SceneOptions {
    pub fn with_heldout(heldout_allowed: bool) -> Self {
        let allowed = if heldout_allowed { vec![CIRCLE, SQUARE, TRIANGLE, STRIPE] } else { vec![CIRCLE, SQUARE, STRIPE] };
        Self { allowed, ..Self::default() }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.size < 8 {
            return Err(SynthError::Options(format!("canvas {} is below the 8 px minimum", self.size)));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(SynthError::Options(format!("shape count range {}..={}", self.min_shapes, self.max_shapes)));
        }
        if self.allowed.is_empty() || self.allowed.iter().chain(&self.required).any(|&c| c == BACKGROUND || c >= CLASS_NAMES.len()) {
            return Err(SynthError::Options("allowed classes must be shape classes".into()));
        }
        Ok(())
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|v| (v + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0))
}

fn random_kind(rng: &mut ChaCha8Rng, class: usize, size: usize) -> ShapeKind {
    let s = size as f64 / 32.0;
    let dim = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let (lo, hi) = (((lo * s).round() as usize).max(2), ((hi * s).round() as usize).max(3));
        rng.random_range(lo..=hi.max(lo)).min(size)
    };
    match class {
        CIRCLE => ShapeKind::Circle { diameter: dim(rng, 6.0, 12.0) },
        SQUARE => ShapeKind::Square { side: dim(rng, 5.0, 11.0) },
        TRIANGLE => ShapeKind::Triangle { base: dim(rng, 7.0, 13.0), height: dim(rng, 6.0, 12.0) },
        _ => ShapeKind::Stripe {
            length: dim(rng, 10.0, 24.0),
            thickness: rng.random_range(1..=2),
            orientation: if rng.random::<bool>() { Orientation::Horizontal } else { Orientation::Vertical },
        },
    }
}

fn disjoint(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    // one pixel of clearance keeps shapes separable
    a.2 < b.0 || b.2 < a.0 || a.3 < b.1 || b.3 < a.1
}

/// Samples a scene layout. Shapes that cannot be placed within the attempt
/// budget are dropped; failing to place any shape is an error.
pub fn sample_scene_spec(seed: u64, opts: &SceneOptions) -> Result<SceneSpec, SynthError> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = jitter(&mut rng, CANONICAL_COLORS[BACKGROUND]);
    let count = rng.random_range(opts.min_shapes..=opts.max_shapes);
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(count);
    for k in 0..count {
        let class = match (k, opts.required) {
            (0, Some(c)) => c,
            _ => opts.allowed[rng.random_range(0..opts.allowed.len())],
        };
        for _ in 0..MAX_ATTEMPTS {
            let kind = random_kind(&mut rng, class, opts.size);
            let (h, w) = kind.extent();
            let top = rng.random_range(0..=opts.size - h);
            let left = rng.random_range(0..=opts.size - w);
            let cand = ShapeSpec { kind, top, left, color: [0.0; 3] };
            if shapes.iter().all(|s| disjoint(s.bbox(), cand.bbox())) {
                shapes.push(ShapeSpec { color: jitter(&mut rng, CANONICAL_COLORS[class]), ..cand });
                break;
            }
        }
        if k == 0 && shapes.is_empty() {
            return Err(SynthError::PlacementFailure(MAX_ATTEMPTS));
        }
    }
    Ok(SceneSpec { seed, size: opts.size, background, shapes })
}

/// Draws image and semantic map from one rasterizer pass.
pub fn rasterize(spec: &SceneSpec) -> (RgbImage, SemanticMap) {
    let n = spec.size;
    let mut img = RgbImage::filled(n, n, spec.background);
    let mut grid = vec![BACKGROUND as u8; n * n];
    for s in &spec.shapes {
        let (h, w) = s.kind.extent();
        for r in 0..h {
            for c in 0..w {
                if s.kind.covers(r, c) {
                    img.set_pixel(s.top + r, s.left + c, s.color);
                    grid[(s.top + r) * n + s.left + c] = s.class() as u8;
                }
            }
        }
    }
    (img, SemanticMap::new(n, n, class_names(), grid).expect("valid classes"))
}

/// Class names of the present classes, ascending.
pub fn caption_of(map: &SemanticMap) -> String {
    present_classes(map).into_iter().map(|c| map.classes()[c].as_str()).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub image: RgbImage,
    pub map: SemanticMap,
    pub caption: String,
}

pub fn gen_scene(seed: u64, opts: &SceneOptions) -> Result<Scene, SynthError> {
    let spec = sample_scene_spec(seed, opts)?;
    let (image, map) = rasterize(&spec);
    let caption = caption_of(&map);
    Ok(Scene { spec, image, map, caption })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutFreePair {
    pub seed: u64,
    pub image: RgbImage,
    pub caption: String,
}

pub fn gen_layout_free_pair(seed: u64, heldout_allowed: bool) -> Result<LayoutFreePair, SynthError> {
    let s = gen_scene(seed, &SceneOptions::with_heldout(heldout_allowed))?;
    Ok(LayoutFreePair { seed, image: s.image, caption: s.caption })
}

/// Background map crossed by 6–10 one-pixel lines of random shape classes.
pub fn thin_structure_map(seed: u64, size: usize) -> SemanticMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = vec![BACKGROUND as u8; size * size];
    for _ in 0..rng.random_range(6..=10) {
        let class = rng.random_range(1..CLASS_NAMES.len()) as u8;
        let at = rng.random_range(0..size);
        let len = rng.random_range(size / 2..=size);
        let start = rng.random_range(0..=size - len);
        let horizontal = rng.random::<bool>();
        for k in start..start + len {
            let (r, c) = if horizontal { (at, k) } else { (k, at) };
            grid[r * size + c] = class;
        }
    }
    SemanticMap::new(size, size, class_names(), grid).expect("valid classes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    /// Validation layouts that always contain the held-out class.
    HeldoutVal,
    /// Layout-free pairs; may contain the held-out class.
    Lf,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::HeldoutVal => 3,
            Split::Lf => 4,
        }
    }

    pub fn has_maps(self) -> bool {
        self != Split::Lf
    }

    pub fn scene_options(self, size: usize) -> SceneOptions {
        match self {
            Split::Train | Split::Val => SceneOptions { size, ..SceneOptions::with_heldout(false) },
            Split::HeldoutVal => SceneOptions { size, required: Some(HELDOUT_CLASS), ..SceneOptions::with_heldout(true) },
            Split::Lf => SceneOptions { size, ..SceneOptions::with_heldout(true) },
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "heldout_val" => Ok(Split::HeldoutVal),
            "lf" => Ok(Split::Lf),
            other => Err(format!("unknown split {other:?} (expected train|val|heldout_val|lf)")),
        }
    }
}

/// Scene seed: split tag in the top byte, base seed in the next 32 bits,
/// index in the low 24, so splits never share a seed.
pub fn split_seed(split: Split, base_seed: u64, index: usize) -> u64 {
    assert!(index < 1 << 24, "at most 2^24 scenes per split");
    (split.tag() << 56) | ((base_seed & 0xFFFF_FFFF) << 24) | index as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub split: Split,
    pub base_seed: u64,
    pub size: usize,
    pub jobs: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { split: Split::Train, base_seed: 0, size: 32, jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub caption: String,
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: Split,
    pub base_seed: u64,
    pub size: usize,
    pub classes: Vec<String>,
    pub heldout_class: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Generates `count` scenes, in parallel over `jobs` threads; the result
/// does not depend on `jobs`.
pub fn gen_split(count: usize, config: &DatasetConfig) -> Result<Vec<Scene>, SynthError> {
    let opts = config.split.scene_options(config.size);
    let gen = |i: usize| gen_scene(split_seed(config.split, config.base_seed, i), &opts);
    let jobs = config.jobs.max(1).min(count.max(1));
    if jobs == 1 {
        return (0..count).map(gen).collect();
    }
    let chunk = count.div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            (0..jobs).map(|j| s.spawn(move || (j * chunk..((j + 1) * chunk).min(count)).map(gen).collect::<Result<Vec<_>, _>>())).collect();
        let mut out = Vec::with_capacity(count);
        for h in handles {
            out.extend(h.join().expect("generator thread panicked")?);
        }
        Ok(out)
    })
}

/// Writes `images/NNNN.ppm`, `maps/NNNN.pgm` (labeled splits only),
/// `classes.json` and `manifest.json` under `out_dir`.
pub fn write_dataset(count: usize, out_dir: &Path, config: &DatasetConfig) -> Result<Manifest, SynthError> {
    let scenes = gen_split(count, config)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    if config.split.has_maps() {
        std::fs::create_dir_all(out_dir.join("maps"))?;
    }
    let classes = class_names();
    let sidecar = SemanticMap::uniform(1, 1, classes.clone(), 0).expect("valid").sidecar_json();
    std::fs::write(out_dir.join("classes.json"), &sidecar)?;
    let mut entries = Vec::with_capacity(count);
    for (index, scene) in scenes.iter().enumerate() {
        let image = format!("images/{index:04}.ppm");
        scene.image.save(&out_dir.join(&image))?;
        let map = if config.split.has_maps() {
            let m = format!("maps/{index:04}.pgm");
            crate::pnm::write_file(&out_dir.join(&m), &scene.map.to_raster())?;
            Some(m)
        } else {
            None
        };
        entries.push(ManifestEntry { index, seed: scene.spec.seed, caption: scene.caption.clone(), image, map });
    }
    let manifest = Manifest {
        split: config.split,
        base_seed: config.base_seed,
        size: config.size,
        classes,
        heldout_class: CLASS_NAMES[HELDOUT_CLASS].to_string(),
        entries,
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub seed: u64,
    pub caption: String,
    pub image: RgbImage,
    pub map: Option<SemanticMap>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub items: Vec<DatasetItem>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let sidecar = dir.join("classes.json");
    let mut items = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let image = RgbImage::load(&dir.join(&e.image))?;
        let map = e.map.as_ref().map(|m| load_semantic_map(&dir.join(m), &sidecar)).transpose()?;
        items.push(DatasetItem { seed: e.seed, caption: e.caption.clone(), image, map });
    }
    Ok(Dataset { root: dir.to_path_buf(), manifest, items })
}
