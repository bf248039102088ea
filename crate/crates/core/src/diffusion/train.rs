use place_autograd::{Adam, Graph, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::PlaceModel;
use super::unet::Conditioning;
use super::DiffusionError;
use crate::layout_control::LayoutControlMap;
use crate::losses::{ldm_loss, lfp_loss, sa_loss, total_loss, LossReport, NoisePrediction, DEFAULT_LAMBDA};
use crate::semantic_map::SemanticMap;
use crate::text_semantics::{caption_prompt, unconditional_prompt, Prompt};

/// Probability of replacing a labeled sample's conditioning with the null
/// prompt and no layout.
pub const CAPTION_DROPOUT: f64 = 0.1;

/// Coefficients of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ldm: f64,
    pub sa: f64,
    pub lfp: f64,
}

impl LossWeights {
    pub fn new(lambda_sa: f64, lambda_lfp: f64) -> Self {
        Self { ldm: 1.0, sa: lambda_sa, lfp: lambda_lfp }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(DEFAULT_LAMBDA, DEFAULT_LAMBDA)
    }
}

/// One layout-annotated training example. `lcms == None` marks a dropped
/// caption: null prompt, no layout, no alignment term.
#[derive(Debug, Clone)]
pub struct LabeledExample<T> {
    pub x0: Tensor<T>,
    pub prompt: Prompt,
    pub lcms: Option<Vec<LayoutControlMap>>,
    pub t: usize,
    pub eps: Tensor<T>,
}

/// One layout-free image–caption example.
#[derive(Debug, Clone)]
pub struct FreeExample<T> {
    pub x0: Tensor<T>,
    pub prompt: Prompt,
    pub t: usize,
    pub eps: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// One entry per model parameter, in store order.
    pub grads: Vec<Option<Tensor<T>>>,
    pub report: LossReport,
    /// Mean α over blocks and labeled samples that used a layout.
    pub alpha_mean: Option<f64>,
}

fn accumulate<T: Real>(acc: &mut [Option<Tensor<T>>], g: &Graph<T>, root: Var, vars: &[Var]) -> Result<(), DiffusionError> {
    let mut grads = g.backward(root)?;
    for (slot, &v) in acc.iter_mut().zip(vars) {
        if let Some(gv) = grads.take(v) {
            match slot {
                Some(s) => s.add_assign(&gv),
                None => *slot = Some(gv),
            }
        }
    }
    Ok(())
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

/// Gradient of `w.ldm·ldm + w.sa·sa + w.lfp·lfp` over both batches.
///
/// `ldm` is the mean over labeled samples, `sa` the mean over
/// (sample, block) pairs of the per-block alignment penalty, `lfp` the
/// mean over layout-free samples. Terms with zero weight are skipped.
pub fn compute_gradients<T: Real>(
    model: &PlaceModel<T>,
    labeled: &[LabeledExample<T>],
    free: &[FreeExample<T>],
    w: LossWeights,
) -> Result<Gradients<T>, DiffusionError> {
    let n_params = model.params().len();
    let mut acc: Vec<Option<Tensor<T>>> = vec![None; n_params];
    let blocks = model.unet().num_place_blocks();
    let with_layout = labeled.iter().filter(|e| e.lcms.is_some()).count();
    let sa_pairs = (with_layout * blocks).max(1) as f64;
    let (mut ldm_sum, mut sa_sum, mut lfp_sum) = (0.0, 0.0, 0.0);
    let (mut alpha_sum, mut alpha_n) = (0.0, 0usize);

    for ex in labeled {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let z = g.constant(model.schedule().q_sample(&ex.x0, ex.t, &ex.eps)?);
        let cond = match &ex.lcms {
            Some(l) => model.conditioning(Some(l)),
            None => Conditioning::Free,
        };
        let out = model.forward(&mut g, &p, z, ex.t, &ex.prompt, &cond)?;
        let target = g.constant(ex.eps.clone());
        let ldm = ldm_loss(&mut g, target, out.eps)?;
        ldm_sum += scalar(&g, ldm);
        let mut loss = g.scale(ldm, T::lit(w.ldm / labeled.len() as f64));
        if ex.lcms.is_some() {
            for b in &out.blocks {
                if let Some(a) = b.alpha {
                    alpha_sum += scalar(&g, a);
                    alpha_n += 1;
                }
                if w.sa != 0.0 {
                    let s = sa_loss(&mut g, b.fusion, b.self_attn)?;
                    sa_sum += scalar(&g, s);
                    let s = g.scale(s, T::lit(w.sa / sa_pairs));
                    loss = g.add(loss, s)?;
                }
            }
        }
        accumulate(&mut acc, &g, loss, p.vars())?;
    }

    if w.lfp != 0.0 {
        for ex in free {
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            let z = g.constant(model.schedule().q_sample(&ex.x0, ex.t, &ex.eps)?);
            let out = model.forward(&mut g, &p, z, ex.t, &ex.prompt, &Conditioning::Free)?;
            let target = g.constant(ex.eps.clone());
            let lfp = lfp_loss(&mut g, target, NoisePrediction { eps: out.eps, alpha_forced_zero: out.alpha_forced_zero })?;
            lfp_sum += scalar(&g, lfp);
            let loss = g.scale(lfp, T::lit(w.lfp / free.len() as f64));
            accumulate(&mut acc, &g, loss, p.vars())?;
        }
    }

    let ldm = ldm_sum / labeled.len().max(1) as f64;
    let sa = if w.sa != 0.0 { sa_sum / sa_pairs } else { 0.0 };
    let lfp = if w.lfp != 0.0 && !free.is_empty() { lfp_sum / free.len() as f64 } else { 0.0 };
    let mut report = total_loss(ldm, sa, lfp, w.sa, w.lfp)?;
    report.total = w.ldm * ldm + w.sa * sa + w.lfp * lfp;
    Ok(Gradients { grads: acc, report, alpha_mean: (alpha_n > 0).then(|| alpha_sum / alpha_n as f64) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Layout-free samples per step; ignored when `weights.lfp == 0`.
    pub lf_batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub caption_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 16,
            lf_batch_size: 16,
            lr: 1e-4,
            weights: LossWeights::default(),
            caption_dropout: CAPTION_DROPOUT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub losses: LossReport,
    pub alpha_mean: Option<f64>,
}

struct PreparedLabeled<T> {
    x0: Tensor<T>,
    prompt: Prompt,
    lcms: Vec<LayoutControlMap>,
}

struct PreparedFree<T> {
    x0: Tensor<T>,
    prompt: Prompt,
}

/// Adam training loop over a fixed labeled set and layout-free set.
pub struct Trainer<T: Real> {
    model: PlaceModel<T>,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    config: TrainConfig,
    labeled: Vec<PreparedLabeled<T>>,
    free: Vec<PreparedFree<T>>,
    step: usize,
}

impl<T: Real> Trainer<T> {
    /// `labeled` pairs images in `[-1, 1]` with their maps; `free` pairs
    /// images with captions.
    pub fn new(
        model: PlaceModel<T>,
        config: TrainConfig,
        labeled: &[(Tensor<T>, SemanticMap)],
        free: &[(Tensor<T>, String)],
    ) -> Result<Self, DiffusionError> {
        if labeled.is_empty() || config.batch_size == 0 {
            return Err(DiffusionError::Config("training needs at least one labeled sample and batch size ≥ 1".into()));
        }
        if config.weights.lfp != 0.0 && (free.is_empty() || config.lf_batch_size == 0) {
            return Err(DiffusionError::Config("prior preservation is enabled but there are no layout-free pairs".into()));
        }
        let shape = model.image_shape();
        let mut prep = Vec::with_capacity(labeled.len());
        for (x0, map) in labeled {
            if x0.shape() != shape {
                return Err(DiffusionError::Shape(format!("image {:?}, model expects {shape:?}", x0.shape())));
            }
            let (prompt, lcms) = model.layout_for(map, &[])?;
            prep.push(PreparedLabeled { x0: x0.clone(), prompt, lcms });
        }
        let mut prep_free = Vec::with_capacity(free.len());
        for (x0, caption) in free {
            if x0.shape() != shape {
                return Err(DiffusionError::Shape(format!("image {:?}, model expects {shape:?}", x0.shape())));
            }
            prep_free.push(PreparedFree { x0: x0.clone(), prompt: caption_prompt(caption, model.vocabulary())? });
        }
        Ok(Self { adam: Adam::new(config.lr), rng: ChaCha8Rng::seed_from_u64(config.seed), model, config, labeled: prep, free: prep_free, step: 0 })
    }

    pub fn model(&self) -> &PlaceModel<T> {
        &self.model
    }

    pub fn into_model(self) -> PlaceModel<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn noise(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z)
            })
            .collect();
        Tensor::new(shape, data).expect("shape")
    }

    /// Draws one step's batches (indices, timesteps, noise, dropout).
    pub fn sample_batch(&mut self) -> (Vec<LabeledExample<T>>, Vec<FreeExample<T>>) {
        let steps = self.model.schedule().len();
        let shape = self.model.image_shape();
        let mut labeled = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let i = self.rng.random_range(0..self.labeled.len());
            let t = self.rng.random_range(0..steps);
            let dropped = self.rng.random::<f64>() < self.config.caption_dropout;
            let eps = self.noise(&shape);
            let src = &self.labeled[i];
            let (prompt, lcms) = if dropped { (unconditional_prompt().0, None) } else { (src.prompt.clone(), Some(src.lcms.clone())) };
            labeled.push(LabeledExample { x0: src.x0.clone(), prompt, lcms, t, eps });
        }
        let mut free = Vec::new();
        if self.config.weights.lfp != 0.0 {
            for _ in 0..self.config.lf_batch_size {
                let i = self.rng.random_range(0..self.free.len());
                let t = self.rng.random_range(0..steps);
                let eps = self.noise(&shape);
                let src = &self.free[i];
                free.push(FreeExample { x0: src.x0.clone(), prompt: src.prompt.clone(), t, eps });
            }
        }
        (labeled, free)
    }

    /// One optimizer step on the given batches.
    pub fn train_step(&mut self, labeled: &[LabeledExample<T>], free: &[FreeExample<T>]) -> Result<StepReport, DiffusionError> {
        let grads = compute_gradients(&self.model, labeled, free, self.config.weights)?;
        if !grads.report.total.is_finite() {
            return Err(DiffusionError::NonFiniteActivation);
        }
        let refs: Vec<Option<&Tensor<T>>> = grads.grads.iter().map(Option::as_ref).collect();
        self.adam.step(&mut self.model.params_mut().tensors_mut(), &refs);
        self.step += 1;
        Ok(StepReport { step: self.step, losses: grads.report, alpha_mean: grads.alpha_mean })
    }

    /// Draws a batch and steps once.
    pub fn step(&mut self) -> Result<StepReport, DiffusionError> {
        let (labeled, free) = self.sample_batch();
        self.train_step(&labeled, &free)
    }

    /// Runs the configured number of steps, reporting each one.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<(), DiffusionError> {
        while self.step < self.config.steps {
            let r = self.step()?;
            on_step(&r);
        }
        Ok(())
    }
}
