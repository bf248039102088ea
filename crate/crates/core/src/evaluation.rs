//! Oracle segmentation of generated images, mIoU, and the layout-fidelity
//! report comparing exact-coverage and nearest-resize layout maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::image::RgbImage;
use crate::layout_control::{compute_lcm, majority_downsample, nearest_lcm_baseline, reconstruct_map, LayoutError};
use crate::semantic_map::{present_classes, SemanticMap};
use crate::synth_data::{class_names, BACKGROUND, CANONICAL_COLORS};
use crate::text_semantics::TokenClassMap;

/// L∞ radius around a canonical color inside which a pixel takes its class.
pub const COLOR_THRESHOLD: f64 = 0.15;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    DimMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("factor {factor} is too coarse for a {dims:?} map")]
    FactorTooLarge { factor: usize, dims: (usize, usize) },
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// Nearest canonical color under L∞ within [`COLOR_THRESHOLD`], else
/// background; ties go to the lowest class index.
pub fn classify_pixel(rgb: [f64; 3]) -> usize {
    let mut best = (BACKGROUND, f64::INFINITY);
    for (class, c) in CANONICAL_COLORS.iter().enumerate() {
        let d = rgb.iter().zip(c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if d < best.1 {
            best = (class, d);
        }
    }
    if best.1 <= COLOR_THRESHOLD {
        best.0
    } else {
        BACKGROUND
    }
}

pub fn oracle_segment(image: &RgbImage) -> SemanticMap {
    let (h, w) = (image.height(), image.width());
    let grid = (0..h * w).map(|p| classify_pixel(image.pixel(p / w, p % w)) as u8).collect();
    SemanticMap::new(h, w, class_names(), grid).expect("canonical classes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// IoU of every class present in the ground truth.
    pub per_class: BTreeMap<usize, f64>,
    pub miou: f64,
}

pub fn miou(pred: &SemanticMap, gt: &SemanticMap) -> Result<SegmentationResult, EvalError> {
    if pred.dims() != gt.dims() {
        return Err(EvalError::DimMismatch { pred: pred.dims(), gt: gt.dims() });
    }
    let mut per_class = BTreeMap::new();
    for class in present_classes(gt) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.grid().iter().zip(gt.grid()) {
            let (p, g) = (p as usize == class, g as usize == class);
            inter += usize::from(p && g);
            union += usize::from(p || g);
        }
        per_class.insert(class, inter as f64 / union as f64);
    }
    let miou = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(SegmentationResult { per_class, miou })
}

/// Aggregate over a set of generated images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean of per-image mIoU.
    pub miou: f64,
    /// Mean IoU of each class over the images whose ground truth has it.
    pub per_class: BTreeMap<String, f64>,
    pub n_images: usize,
}

pub fn summarize(results: &[SegmentationResult], classes: &[String]) -> EvalSummary {
    let n = results.len();
    let miou = if n == 0 { 0.0 } else { results.iter().map(|r| r.miou).sum::<f64>() / n as f64 };
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in results {
        for (&c, &iou) in &r.per_class {
            let e = acc.entry(c).or_default();
            e.0 += iou;
            e.1 += 1;
        }
    }
    let per_class = acc.into_iter().map(|(c, (s, k))| (classes.get(c).cloned().unwrap_or_else(|| c.to_string()), s / k as f64)).collect();
    EvalSummary { miou, per_class, n_images: n }
}

/// Per-image CSV: `image,miou,<class IoU columns>`; empty cells for classes
/// absent from that image's ground truth.
pub fn per_image_csv(results: &[SegmentationResult], classes: &[String]) -> String {
    let mut out = String::from("image,miou");
    for c in classes {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, r) in results.iter().enumerate() {
        let _ = write!(out, "{i},{:.6}", r.miou);
        for c in 0..classes.len() {
            match r.per_class.get(&c) {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub map: usize,
    pub factor: usize,
    pub lcm_accuracy: f64,
    pub nearest_accuracy: f64,
}

fn accuracy(a: &SemanticMap, b: &SemanticMap) -> f64 {
    let same = a.grid().iter().zip(b.grid()).filter(|(x, y)| x == y).count();
    same as f64 / a.grid().len() as f64
}

/// Pixel accuracy, against the majority-class downsample, of the argmax
/// reconstruction of the exact map and of the nearest-resize baseline.
pub fn layout_fidelity_report(maps: &[SemanticMap], factors: &[usize]) -> Result<Vec<FidelityRow>, EvalError> {
    let mut rows = Vec::with_capacity(maps.len() * factors.len());
    for (i, map) in maps.iter().enumerate() {
        let tcm = TokenClassMap::new(present_classes(map).into_iter().map(Some).collect());
        for &factor in factors {
            let latent = (map.height() / factor.max(1), map.width() / factor.max(1));
            if factor == 0 || latent.0 == 0 || latent.1 == 0 {
                return Err(EvalError::FactorTooLarge { factor, dims: map.dims() });
            }
            let truth = majority_downsample(map, latent)?;
            let lcm = reconstruct_map(&compute_lcm(map, latent, &tcm)?, &tcm);
            let nearest = reconstruct_map(&nearest_lcm_baseline(map, latent, &tcm)?, &tcm);
            rows.push(FidelityRow { map: i, factor, lcm_accuracy: accuracy(&lcm, &truth), nearest_accuracy: accuracy(&nearest, &truth) });
        }
    }
    Ok(rows)
}

pub fn fidelity_csv(rows: &[FidelityRow]) -> String {
    let mut out = String::from("map,factor,lcm_accuracy,nearest_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", r.map, r.factor, r.lcm_accuracy, r.nearest_accuracy);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{gen_scene, thin_structure_map, SceneOptions, CIRCLE};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn map(h: usize, w: usize, grid: Vec<u8>) -> SemanticMap {
        SemanticMap::new(h, w, class_names(), grid).unwrap()
    }

    #[test]
    fn pixel_rules() {
        assert_eq!(classify_pixel(CANONICAL_COLORS[CIRCLE]), CIRCLE);
        assert_eq!(classify_pixel([0.5, 0.5, 0.5]), BACKGROUND);
        assert_eq!(classify_pixel([0.9 + 0.14, 0.15, 0.15 - 0.14]), CIRCLE);
        assert_eq!(classify_pixel([0.9 + 0.16, 0.15, 0.15]), BACKGROUND);
    }

    #[test]
    fn half_covered_class() {
        // gt: four class-1 pixels; pred finds two of them
        let gt = map(2, 4, vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let pred = map(2, 4, vec![1, 1, 0, 0, 0, 0, 0, 0]);
        let r = miou(&pred, &gt).unwrap();
        assert_eq!(r.per_class[&1], 0.5);
        assert_eq!(r.per_class[&0], 4.0 / 6.0);
        assert_eq!(miou(&gt, &gt).unwrap().miou, 1.0);
        assert!(matches!(miou(&map(1, 1, vec![0]), &gt), Err(EvalError::DimMismatch { .. })));
    }

    #[test]
    fn oracle_calibrates_on_clean_scenes() {
        let mut total = 0.0;
        for seed in 0..100 {
            let s = gen_scene(seed, &SceneOptions::with_heldout(true)).unwrap();
            total += miou(&oracle_segment(&s.image.quantized()), &s.map).unwrap().miou;
        }
        assert!(total / 100.0 >= 0.95);
    }

    fn arb_pair() -> impl Strategy<Value = (SemanticMap, SemanticMap)> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            (prop::collection::vec(0u8..5, h * w), prop::collection::vec(0u8..5, h * w)).prop_map(move |(a, b)| (map(h, w, a), map(h, w, b)))
        })
    }

    proptest! {
        #[test]
        fn miou_matches_set_arithmetic((pred, gt) in arb_pair()) {
            let r = miou(&pred, &gt).unwrap();
            let cells = |m: &SemanticMap, c: u8| -> HashSet<usize> {
                m.grid().iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| i).collect()
            };
            let mut sum = 0.0;
            let mut n = 0;
            for c in 0..5u8 {
                let (p, g) = (cells(&pred, c), cells(&gt, c));
                if g.is_empty() {
                    prop_assert!(!r.per_class.contains_key(&(c as usize)));
                    continue;
                }
                let iou = p.intersection(&g).count() as f64 / p.union(&g).count() as f64;
                prop_assert_eq!(r.per_class[&(c as usize)], iou);
                sum += iou;
                n += 1;
            }
            prop_assert_eq!(r.miou, sum / n as f64);
        }

        #[test]
        fn miou_invariant_under_relabeling((pred, gt) in arb_pair(), perm in Just([0u8, 1, 2, 3, 4]).prop_shuffle()) {
            let relabel = |m: &SemanticMap| map(m.height(), m.width(), m.grid().iter().map(|&v| perm[v as usize]).collect());
            let a = miou(&pred, &gt).unwrap().miou;
            let b = miou(&relabel(&pred), &relabel(&gt)).unwrap().miou;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_report_shape_and_uniform_maps() {
        let maps = vec![SemanticMap::uniform(16, 16, class_names(), 2).unwrap(), thin_structure_map(1, 16)];
        let rows = layout_fidelity_report(&maps, &[1, 2, 4, 8]).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows[..4].iter().all(|r| r.lcm_accuracy == 1.0 && r.nearest_accuracy == 1.0));
        assert!(rows.iter().all(|r| r.lcm_accuracy == 1.0 && r.lcm_accuracy >= r.nearest_accuracy));
        let csv = fidelity_csv(&rows);
        assert_eq!(csv.lines().count(), 9);
        assert!(matches!(layout_fidelity_report(&maps, &[32]), Err(EvalError::FactorTooLarge { .. })));
    }

    #[test]
    fn summary_and_csv() {
        let gt = map(1, 2, vec![0, 1]);
        let r = vec![miou(&gt, &gt).unwrap(), miou(&map(1, 2, vec![0, 0]), &gt).unwrap()];
        let s = summarize(&r, &class_names());
        assert_eq!(s.n_images, 2);
        assert_eq!(s.per_class["circle"], 0.5);
        assert_eq!(s.miou, (1.0 + 0.25) / 2.0);
        let csv = per_image_csv(&r, &class_names());
        assert!(csv.starts_with("image,miou,background,circle,square,triangle,stripe\n"));
        assert_eq!(csv.lines().nth(2).unwrap(), "1,0.250000,0.500000,0.000000,,,");
    }
}
