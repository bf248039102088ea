//! Cross-attention with timestep-adaptive layout-semantic fusion.
//!
//! For a block with image tokens `X` and text features `E`,
//! `A = softmax(X W_q (E W_k)ᵀ / √d)` and the fused map is
//! `F = α · softmax(L ⊙ A) + (1 − α) · A`, with output `O = F · (E W_v)`.
//! `α ∈ (0, 1)` comes from a logistic linear layer over the timestep
//! embedding. Masked layout entries dominate the product and receive zero
//! mass in the inner softmax.

use std::rc::Rc;

use place_autograd::{softmax_rows, CustomOp, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::TimeEmbedding;
use crate::layout_control::{Coverage, LayoutControlMap};

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("layout map is {lcm_tokens}x{lcm_channels} but attention is {tokens}x{channels}")]
    ShapeMismatch { lcm_tokens: usize, lcm_channels: usize, tokens: usize, channels: usize },
    #[error("layout row {0} has no unmasked entry")]
    FullyMaskedRow(usize),
    #[error(transparent)]
    Graph(#[from] place_autograd::Error),
}

/// How `L ⊙ A` is read when `L` carries masked (−∞) entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionDomain {
    /// Elementwise product with the post-softmax map; masked entries stay −∞.
    #[default]
    Product,
    /// Adds `ln L` to the raw logits, i.e. renormalizes `L · A`.
    Logit,
}

impl std::str::FromStr for FusionDomain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "product" => Ok(Self::Product),
            "logit" => Ok(Self::Logit),
            other => Err(format!("unknown fusion domain {other:?} (expected product|logit)")),
        }
    }
}

/// Pre-softmax logits and the row-stochastic cross-attention map.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMaps {
    pub raw_logits: Var,
    pub attn: Var,
}

/// Bound projection weights: `wq: [d_model, d]`, `wk: [d_text, d]`,
/// `wv: [d_text, d_model]`.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

fn ensure_finite<T: Real>(g: &Graph<T>, v: Var, what: &'static str) -> Result<(), FusionError> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(FusionError::NonFiniteInput(what))
    }
}

/// Cross-attention maps and values for image tokens `[hw, d_model]` against
/// text features `[N, d_text]`.
pub fn cross_attention_maps<T: Real>(
    g: &mut Graph<T>,
    image_feats: Var,
    text_feats: Var,
    w: &CrossAttentionWeights,
) -> Result<(AttentionMaps, Var), FusionError> {
    ensure_finite(g, image_feats, "image features")?;
    ensure_finite(g, text_feats, "text features")?;
    let q = g.matmul(image_feats, w.wq, false, false)?;
    let k = g.matmul(text_feats, w.wk, false, false)?;
    let v = g.matmul(text_feats, w.wv, false, false)?;
    let d = g.shape(q)[1];
    let logits = g.matmul(q, k, false, true)?;
    let raw_logits = g.scale(logits, T::one() / T::lit(d as f64).sqrt());
    let attn = g.softmax_rows(raw_logits)?;
    Ok((AttentionMaps { raw_logits, attn }, v))
}

/// Logistic linear layer over the sinusoidal timestep embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveAlpha {
    pub weight: Vec<f64>,
    pub bias: f64,
}

/// Initial bias: α ≈ 0.88 at every timestep.
pub const ALPHA_BIAS_INIT: f64 = 2.0;

impl AdaptiveAlpha {
    pub fn new(dim: usize) -> Self {
        Self { weight: vec![0.0; dim], bias: ALPHA_BIAS_INIT }
    }

    pub fn value(&self, emb: &TimeEmbedding) -> f64 {
        let z: f64 = self.weight.iter().zip(emb.values()).map(|(w, e)| w * e).sum::<f64>() + self.bias;
        1.0 / (1.0 + (-z).exp())
    }
}

/// Differentiable α for bound `weight: [D]` and `bias: [1]`.
pub fn adaptive_alpha<T: Real>(g: &mut Graph<T>, emb: &TimeEmbedding, weight: Var, bias: Var) -> Result<Var, FusionError> {
    let e = g.constant(emb.tensor::<T>().reshaped(&[emb.dim(), 1])?);
    let w = g.reshape(weight, &[1, emb.dim()])?;
    let z = g.matmul(w, e, false, false)?;
    let z = g.reshape(z, &[1])?;
    let z = g.add(z, bias)?;
    Ok(g.sigmoid(z))
}

fn lcm_row_masks(lcm: &LayoutControlMap) -> Result<Vec<Option<f64>>, FusionError> {
    let entries: Vec<Option<f64>> = lcm.entries().iter().map(|c| c.value()).collect();
    for i in 0..lcm.tokens() {
        if lcm.row(i).iter().all(|c| matches!(c, Coverage::Masked)) {
            return Err(FusionError::FullyMaskedRow(i));
        }
    }
    Ok(entries)
}

/// Inner layout-forced distribution `softmax(φ(source))` with masked
/// entries at zero mass, where `φ(x) = l·x` (product) or `x + ln l` (logit).
fn layout_softmax<T: Real>(lcm: &[Option<f64>], source: &Tensor<T>, domain: FusionDomain) -> Tensor<T> {
    let mut z = source.clone();
    for (zv, l) in z.data_mut().iter_mut().zip(lcm) {
        *zv = match (l, domain) {
            (None, _) => T::neg_infinity(),
            (Some(l), FusionDomain::Product) => *zv * T::lit(*l),
            (Some(l), FusionDomain::Logit) => *zv + T::lit(l.ln()),
        };
    }
    softmax_rows(&z).expect("every row has an unmasked entry")
}

/// Numeric fusion: returns `F` for given attention, source and α.
pub fn fuse_values<T: Real>(
    lcm: &LayoutControlMap,
    attn: &Tensor<T>,
    raw_logits: &Tensor<T>,
    alpha: T,
    domain: FusionDomain,
) -> Result<Tensor<T>, FusionError> {
    check_lcm_shape(lcm, attn.shape())?;
    let masks = lcm_row_masks(lcm)?;
    let source = match domain {
        FusionDomain::Product => attn,
        FusionDomain::Logit => raw_logits,
    };
    let p = layout_softmax(&masks, source, domain);
    Ok(p.zip_map(attn, |pv, av| alpha * pv + (T::one() - alpha) * av))
}

fn check_lcm_shape(lcm: &LayoutControlMap, shape: &[usize]) -> Result<(), FusionError> {
    let (tokens, channels) = match shape {
        [t, c] => (*t, *c),
        _ => (0, 0),
    };
    if lcm.tokens() != tokens || lcm.channels() != channels {
        return Err(FusionError::ShapeMismatch { lcm_tokens: lcm.tokens(), lcm_channels: lcm.channels(), tokens, channels });
    }
    Ok(())
}

struct FuseOp {
    lcm: Vec<Option<f64>>,
    domain: FusionDomain,
}

impl<T: Real> CustomOp<T> for FuseOp {
    fn name(&self) -> &'static str {
        "adaptive_fusion"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (source, attn, alpha) = (inputs[0], inputs[1], inputs[2].data()[0]);
        let p = layout_softmax(&self.lcm, source, self.domain);
        let cols = *attn.shape().last().unwrap_or(&1);
        let g_alpha: T = grad.data().iter().zip(p.data().iter().zip(attn.data())).map(|(&g, (&pv, &av))| g * (pv - av)).sum();
        let g_attn = grad.map(|g| g * (T::one() - alpha));
        let mut g_source = grad.map(|g| g * alpha);
        for ((gr, pr), lr) in g_source.data_mut().chunks_mut(cols).zip(p.data().chunks(cols)).zip(self.lcm.chunks(cols)) {
            let dot: T = gr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
            for ((gv, &pv), l) in gr.iter_mut().zip(pr).zip(lr) {
                let dz = pv * (*gv - dot);
                *gv = match (l, self.domain) {
                    (None, _) => T::zero(),
                    (Some(l), FusionDomain::Product) => dz * T::lit(*l),
                    (Some(_), FusionDomain::Logit) => dz,
                };
            }
        }
        vec![Some(g_source), Some(g_attn), Some(Tensor::scalar(g_alpha))]
    }
}

/// Records `F = α softmax(L ⊙ A) + (1 − α) A`; `alpha` is a one-element var.
pub fn fuse<T: Real>(g: &mut Graph<T>, lcm: &LayoutControlMap, maps: &AttentionMaps, alpha: Var, domain: FusionDomain) -> Result<Var, FusionError> {
    let a = g.value(alpha).data()[0];
    let f = fuse_values(lcm, g.value(maps.attn), g.value(maps.raw_logits), a, domain)?;
    let source = match domain {
        FusionDomain::Product => maps.attn,
        FusionDomain::Logit => maps.raw_logits,
    };
    let op = Rc::new(FuseOp { lcm: lcm_row_masks(lcm)?, domain });
    Ok(g.custom(&[source, maps.attn, alpha], f, op))
}

/// Layout conditioning for one attention block.
#[derive(Debug, Clone, Copy)]
pub enum FusionControl<'a> {
    /// No layout: `F = A` (the α = 0 path).
    Free,
    /// Fuse with a layout control map at the given α.
    Layout { lcm: &'a LayoutControlMap, alpha: Var, domain: FusionDomain },
}

#[derive(Debug, Clone, Copy)]
pub struct PlaceOutput {
    /// `O = F V`, shape `[hw, d_model]`.
    pub out: Var,
    pub fusion: Var,
    pub maps: AttentionMaps,
}

pub fn place_attention_forward<T: Real>(
    g: &mut Graph<T>,
    image_feats: Var,
    text_feats: Var,
    control: FusionControl<'_>,
    w: &CrossAttentionWeights,
) -> Result<PlaceOutput, FusionError> {
    let (maps, v) = cross_attention_maps(g, image_feats, text_feats, w)?;
    let fusion = match control {
        FusionControl::Free => maps.attn,
        FusionControl::Layout { lcm, alpha, domain } => fuse(g, lcm, &maps, alpha, domain)?,
    };
    let out = g.matmul(fusion, v, false, false)?;
    Ok(PlaceOutput { out, fusion, maps })
}
