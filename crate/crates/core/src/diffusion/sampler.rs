use place_autograd::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::PlaceModel;
use super::unet::Conditioning;
use super::{DiffusionError, NoiseSchedule};
use crate::semantic_map::SemanticMap;
use crate::text_semantics::{caption_prompt, unconditional_prompt};

pub const DEFAULT_SAMPLE_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 2.0;

/// Uniformly strided timesteps `i·c + 1` (`c = T / steps`), ascending.
/// The `+1` offset is dropped when it would leave the schedule.
pub fn plms_timesteps(schedule_len: usize, steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::Sampling("at least one sampling step is required".into()));
    }
    if steps > schedule_len {
        return Err(DiffusionError::StepsExceedSchedule { steps, schedule: schedule_len });
    }
    let c = schedule_len / steps;
    let offset = usize::from((steps - 1) * c + 1 < schedule_len);
    Ok((0..steps).map(|i| i * c + offset).collect())
}

/// State after one sampler step.
#[derive(Debug)]
pub struct PlmsStep<'a, T> {
    /// Position in the reverse trajectory, 0 = noisiest.
    pub index: usize,
    pub t: usize,
    /// State fed to the predictor at `t`.
    pub x: &'a Tensor<T>,
    pub x_prev: &'a Tensor<T>,
    pub pred_x0: &'a Tensor<T>,
}

fn lin<T: Real>(terms: &[(f64, &Tensor<T>)]) -> Tensor<T> {
    let mut out = terms[0].1.map(|v| v * T::lit(terms[0].0));
    for &(c, t) in &terms[1..] {
        let c = T::lit(c);
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += c * v;
        }
    }
    out
}

/// Deterministic pseudo-linear multistep sampler over an arbitrary noise
/// predictor `eps(x, t)`.
///
/// The first step is a pseudo improved-Euler step (two evaluations); later
/// steps use Adams–Bashforth combinations of up to four past predictions.
/// With `clip_x0` each x̂0 is clamped to `[-1, 1]` before the update.
pub fn plms_loop<T: Real>(
    schedule: &NoiseSchedule,
    steps: usize,
    clip_x0: bool,
    x_init: Tensor<T>,
    mut eps: impl FnMut(&Tensor<T>, usize) -> Result<Tensor<T>, DiffusionError>,
    mut observe: impl FnMut(PlmsStep<'_, T>),
) -> Result<Tensor<T>, DiffusionError> {
    let ts = plms_timesteps(schedule.len(), steps)?;
    let abar: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar(t)).collect();
    let abar_prev: Vec<f64> = std::iter::once(schedule.alpha_bar(0)).chain(ts[..ts.len() - 1].iter().map(|&t| schedule.alpha_bar(t))).collect();
    let x_prev_and_x0 = |x: &Tensor<T>, e: &Tensor<T>, index: usize| {
        let (a_t, a_prev) = (abar[index], abar_prev[index]);
        let mut pred_x0 = lin(&[(1.0 / a_t.sqrt(), x), (-(1.0 - a_t).sqrt() / a_t.sqrt(), e)]);
        if clip_x0 {
            pred_x0 = pred_x0.map(|v| v.max(-T::one()).min(T::one()));
        }
        let x_prev = lin(&[(a_prev.sqrt(), &pred_x0), ((1.0 - a_prev).sqrt(), e)]);
        (x_prev, pred_x0)
    };

    let n = ts.len();
    let mut x = x_init;
    let mut old_eps: Vec<Tensor<T>> = Vec::new();
    for i in 0..n {
        let index = n - i - 1;
        let t = ts[index];
        let t_next = ts[n - 1 - (i + 1).min(n - 1)];
        let e_t = eps(&x, t)?;
        let e_prime = match old_eps.len() {
            0 => {
                let (x_tmp, _) = x_prev_and_x0(&x, &e_t, index);
                let e_next = eps(&x_tmp, t_next)?;
                lin(&[(0.5, &e_t), (0.5, &e_next)])
            }
            1 => lin(&[(1.5, &e_t), (-0.5, &old_eps[0])]),
            2 => lin(&[(23.0 / 12.0, &e_t), (-16.0 / 12.0, &old_eps[1]), (5.0 / 12.0, &old_eps[0])]),
            _ => lin(&[(55.0 / 24.0, &e_t), (-59.0 / 24.0, &old_eps[2]), (37.0 / 24.0, &old_eps[1]), (-9.0 / 24.0, &old_eps[0])]),
        };
        let (x_prev, pred_x0) = x_prev_and_x0(&x, &e_prime, index);
        observe(PlmsStep { index: i, t, x: &x, x_prev: &x_prev, pred_x0: &pred_x0 });
        old_eps.push(e_t);
        if old_eps.len() > 3 {
            old_eps.remove(0);
        }
        x = x_prev;
    }
    Ok(x)
}

/// What to generate.
#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    /// Layout; `None` samples from the caption alone.
    pub map: Option<&'a SemanticMap>,
    /// Region-free words appended after the class words (or the whole
    /// prompt when there is no map).
    pub caption: Option<String>,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    /// Clamp every x̂0 to the image range.
    pub clip_x0: bool,
    pub record_trace: bool,
}

impl Default for SampleRequest<'_> {
    fn default() -> Self {
        Self { map: None, caption: None, steps: DEFAULT_SAMPLE_STEPS, guidance: DEFAULT_GUIDANCE, seed: 0, clip_x0: false, record_trace: false }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T> {
    /// `[channels, S, S]` in `[0, 1]`.
    pub image: Tensor<T>,
    /// `(t, x̂0 in [0, 1])` per step when requested.
    pub x0_trace: Vec<(usize, Tensor<T>)>,
    /// `(t, z_t)` fed to the predictor per step when requested.
    pub xt_trace: Vec<(usize, Tensor<T>)>,
    /// `(t, α per block)` per step.
    pub alpha_trace: Vec<(usize, Vec<f64>)>,
}

pub(crate) fn to_unit<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    x.map(|v| (v.max(-T::one()).min(T::one()) + T::one()) * half)
}

/// Classifier-free guided PLMS sampling:
/// `ε̂ = ε̂_uncond + s·(ε̂_cond − ε̂_uncond)`, where the unconditional branch
/// uses the null prompt on the layout-free (α = 0) path.
pub fn plms_sample<T: Real>(model: &PlaceModel<T>, req: &SampleRequest<'_>) -> Result<SampleOutput<T>, DiffusionError> {
    if !(req.guidance >= 0.0) {
        return Err(DiffusionError::Sampling(format!("guidance must be ≥ 0, got {}", req.guidance)));
    }
    let extras: Vec<&str> = req.caption.as_deref().map(|c| c.split_whitespace().collect()).unwrap_or_default();
    let (prompt, lcms) = match req.map {
        Some(map) => {
            let (p, l) = model.layout_for(map, &extras)?;
            (p, Some(l))
        }
        None => (caption_prompt(req.caption.as_deref().unwrap_or(""), model.vocabulary())?, None),
    };
    let cond = model.conditioning(lcms.as_deref());
    let null = unconditional_prompt().0;
    let s = req.guidance;

    let shape = model.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let n: usize = shape.iter().product();
    let init: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z)
        })
        .collect();
    let init = Tensor::new(&shape, init).expect("shape");

    let mut x0_trace = Vec::new();
    let mut xt_trace = Vec::new();
    let mut alpha_trace = Vec::new();
    let uses_layout = lcms.is_some();
    let x = plms_loop(
        model.schedule(),
        req.steps,
        req.clip_x0,
        init,
        |x, t| {
            let ec = model.predict_eps(x, t, &prompt, &cond)?;
            let eu = model.predict_eps(x, t, &null, &Conditioning::Free)?;
            Ok(lin(&[(1.0 - s, &eu), (s, &ec)]))
        },
        |step| {
            if req.record_trace {
                x0_trace.push((step.t, to_unit(step.pred_x0)));
                xt_trace.push((step.t, step.x.clone()));
            }
            alpha_trace.push((step.t, if uses_layout { model.alpha_at(step.t) } else { vec![0.0; model.unet().num_place_blocks()] }));
        },
    )?;
    Ok(SampleOutput { image: to_unit(&x), x0_trace, xt_trace, alpha_trace })
}
