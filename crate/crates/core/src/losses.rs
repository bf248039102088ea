//! Training objective: denoising MSE on layout-annotated data, the semantic
//! alignment penalty on fusion maps, and the layout-free prior-preservation
//! MSE, combined as `ldm + λ1·sa + λ2·lfp`.

use place_autograd::{Graph, Real, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("prior-preservation prediction was not produced with every α forced to 0")]
    AlphaNotForcedToZero,
    #[error("loss component {name} is negative ({value})")]
    NegativeComponent { name: &'static str, value: f64 },
    #[error(transparent)]
    Graph(#[from] place_autograd::Error),
}

fn mse<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::ShapeMismatch(g.shape(a).to_vec(), g.shape(b).to_vec()));
    }
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Mean squared error between true and predicted noise.
pub fn ldm_loss<T: Real>(g: &mut Graph<T>, eps_true: Var, eps_pred: Var) -> Result<Var, LossError> {
    mse(g, eps_true, eps_pred)
}

/// A noise prediction tagged with whether it came from the α = 0,
/// layout-free forward path.
#[derive(Debug, Clone, Copy)]
pub struct NoisePrediction {
    pub eps: Var,
    pub alpha_forced_zero: bool,
}

/// Prior-preservation loss; same formula as [`ldm_loss`], but only accepts
/// predictions made without layout.
pub fn lfp_loss<T: Real>(g: &mut Graph<T>, eps_true: Var, pred: NoisePrediction) -> Result<Var, LossError> {
    if !pred.alpha_forced_zero {
        return Err(LossError::AlphaNotForcedToZero);
    }
    mse(g, eps_true, pred.eps)
}

/// `Σ_i ‖W_i − F_i‖²` with `W_i = Σ_j F_i[j] · A^sa_j`.
///
/// `fusion` is `[hw, N]` (column `i` is the flattened map of text token
/// `i`), `self_attn` is `[hw, hw]` with row `j` the self-attention of image
/// token `j`. In matrix form `W = (A^sa)ᵀ F`.
pub fn sa_loss<T: Real>(g: &mut Graph<T>, fusion: Var, self_attn: Var) -> Result<Var, LossError> {
    let (fs, ss) = (g.shape(fusion).to_vec(), g.shape(self_attn).to_vec());
    if fs.len() != 2 || ss.len() != 2 || ss[0] != ss[1] || ss[0] != fs[0] {
        return Err(LossError::ShapeMismatch(fs, ss));
    }
    let w = g.matmul(self_attn, fusion, true, false)?;
    let d = g.sub(w, fusion)?;
    let sq = g.square(d);
    Ok(g.sum(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ldm: f64,
    pub sa: f64,
    pub lfp: f64,
    pub total: f64,
    pub lambda_sa: f64,
    pub lambda_lfp: f64,
}

pub const DEFAULT_LAMBDA: f64 = 1.0;

pub fn total_loss(ldm: f64, sa: f64, lfp: f64, lambda_sa: f64, lambda_lfp: f64) -> Result<LossReport, LossError> {
    for (name, value) in [("ldm", ldm), ("sa", sa), ("lfp", lfp), ("lambda_sa", lambda_sa), ("lambda_lfp", lambda_lfp)] {
        if value < 0.0 || value.is_nan() {
            return Err(LossError::NegativeComponent { name, value });
        }
    }
    Ok(LossReport { ldm, sa, lfp, total: ldm + lambda_sa * sa + lambda_lfp * lfp, lambda_sa, lambda_lfp })
}
