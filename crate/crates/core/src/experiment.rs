//! Train-and-evaluate driver for the variant rows: one training run on
//! synthetic data followed by guided sampling over held-in and held-out
//! layouts, scored with the oracle segmenter.

use serde::{Deserialize, Serialize};

use crate::config::{variant_row, RawConfig, RunConfig};
use crate::diffusion::{plms_sample, DiffusionError, PlaceModel, SampleRequest, StepReport, Trainer};
use crate::evaluation::{miou, oracle_segment, summarize, EvalSummary, SegmentationResult};
use crate::image::RgbImage;
use crate::semantic_map::SemanticMap;
use crate::synth_data::{class_names, gen_split, DatasetConfig, Split, SynthError, HELDOUT_CLASS};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Config(String),
}

/// Sizes of one desk-scale ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub train_steps: usize,
    pub batch_size: usize,
    pub lf_batch_size: usize,
    pub lr: f64,
    pub n_train: usize,
    pub n_lf: usize,
    pub n_eval: usize,
    pub n_heldout_eval: usize,
    pub sample_steps: usize,
    pub guidance: f64,
}

/// Synthetic splits shared by every run of an ablation.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Vec<(RgbImage, SemanticMap)>,
    pub lf: Vec<(RgbImage, String)>,
    pub eval: Vec<SemanticMap>,
    pub heldout_eval: Vec<SemanticMap>,
}

impl ExperimentData {
    pub fn generate(budget: &Budget, base_seed: u64) -> Result<Self, SynthError> {
        let split = |split, n| gen_split(n, &DatasetConfig { split, base_seed, ..DatasetConfig::default() });
        Ok(Self {
            train: split(Split::Train, budget.n_train)?.into_iter().map(|s| (s.image.quantized(), s.map)).collect(),
            lf: split(Split::Lf, budget.n_lf)?.into_iter().map(|s| (s.image.quantized(), s.caption)).collect(),
            eval: split(Split::Val, budget.n_eval)?.into_iter().map(|s| s.map).collect(),
            heldout_eval: split(Split::HeldoutVal, budget.n_heldout_eval)?.into_iter().map(|s| s.map).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub row: u8,
    pub seed: u64,
    pub held_in: EvalSummary,
    pub heldout: EvalSummary,
    /// Mean IoU of the held-out class on held-out layouts.
    pub heldout_class_iou: f64,
    pub alpha_t01: f64,
    pub alpha_t09: f64,
    pub last_step: Option<StepReport>,
}

/// Resolved configuration of one row under a budget.
pub fn row_config(row: u8, seed: u64, budget: &Budget) -> Result<RunConfig, ExperimentError> {
    variant_row(row).ok_or_else(|| ExperimentError::Config(format!("no variant row {row}")))?;
    RawConfig {
        variant: Some(row),
        seed: Some(seed),
        train_steps: Some(budget.train_steps),
        batch_size: Some(budget.batch_size),
        lf_batch_size: Some(budget.lf_batch_size),
        lr: Some(budget.lr),
        steps: Some(budget.sample_steps),
        guidance: Some(budget.guidance),
        ..RawConfig::default()
    }
    .resolve()
    .map_err(|e| ExperimentError::Config(e.to_string()))
}

pub fn train_model(
    cfg: &RunConfig,
    data: &ExperimentData,
    mut on_step: impl FnMut(&StepReport),
) -> Result<(PlaceModel<f32>, Option<StepReport>), ExperimentError> {
    let model = PlaceModel::<f32>::new(cfg.model_config(), cfg.seed)?;
    let labeled: Vec<_> = data.train.iter().map(|(i, m)| (i.to_signed_tensor(), m.clone())).collect();
    let free: Vec<_> = data.lf.iter().map(|(i, c)| (i.to_signed_tensor(), c.clone())).collect();
    let mut trainer = Trainer::new(model, cfg.train_config(), &labeled, &free)?;
    let mut last = None;
    trainer.run(|r| {
        on_step(r);
        last = Some(r.clone());
    })?;
    Ok((trainer.into_model(), last))
}

/// Samples one image per map and scores it against that map.
pub fn evaluate_maps(
    model: &PlaceModel<f32>,
    maps: &[SemanticMap],
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Vec<SegmentationResult>, ExperimentError> {
    let mut out = Vec::with_capacity(maps.len());
    for (i, map) in maps.iter().enumerate() {
        let req =
            SampleRequest { map: Some(map), steps, guidance, seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64), ..SampleRequest::default() };
        let s = plms_sample(model, &req)?;
        let img = RgbImage::from_unit_tensor(&s.image).map_err(DiffusionError::Shape)?;
        out.push(miou(&oracle_segment(&img.quantized()), map).expect("same dims"));
    }
    Ok(out)
}

pub fn run_variant(row: u8, seed: u64, budget: &Budget, data: &ExperimentData) -> Result<VariantOutcome, ExperimentError> {
    let cfg = row_config(row, seed, budget)?;
    let (model, last_step) = train_model(&cfg, data, |_| {})?;
    let held_in = evaluate_maps(&model, &data.eval, budget.sample_steps, budget.guidance, seed)?;
    let heldout = evaluate_maps(&model, &data.heldout_eval, budget.sample_steps, budget.guidance, seed)?;
    let heldout_class_iou = {
        let v: Vec<f64> = heldout.iter().filter_map(|r| r.per_class.get(&HELDOUT_CLASS).copied()).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    Ok(VariantOutcome {
        row,
        seed,
        held_in: summarize(&held_in, &class_names()),
        heldout: summarize(&heldout, &class_names()),
        heldout_class_iou,
        alpha_t01: model.mean_alpha_at_fraction(0.1),
        alpha_t09: model.mean_alpha_at_fraction(0.9),
        last_step,
    })
}
