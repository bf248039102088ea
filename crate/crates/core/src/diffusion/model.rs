use place_autograd::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use super::unet::{AlphaMode, Conditioning, UNet, UNetConfig, UNetOutput};
use super::{DiffusionError, NoiseSchedule, TimeEmbedding};
use crate::fusion_attention::FusionDomain;
use crate::layout_control::{compute_lcm, nearest_lcm_baseline, LayoutControlMap};
use crate::semantic_map::SemanticMap;
use crate::text_semantics::{build_prompt_with_extras, embed_prompt, Prompt, Vocabulary};

pub const TEXT_EMBEDDING: &str = "text.embedding";

/// How a semantic map is turned into per-resolution layout maps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    /// Exact coverage fractions.
    #[default]
    Lcm,
    /// Nearest-neighbour resize of the map (binary masks).
    Nearest,
}

impl std::str::FromStr for LayoutMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lcm" => Ok(Self::Lcm),
            "nearest" => Ok(Self::Nearest),
            other => Err(format!("unknown layout mode {other:?} (expected lcm|nearest)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub unet: UNetConfig,
    pub layout: LayoutMode,
    pub alpha: AlphaMode,
    pub fusion_domain: FusionDomain,
    /// Class names; index 0 is the background.
    pub classes: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            layout: LayoutMode::Lcm,
            alpha: AlphaMode::Adaptive,
            fusion_domain: FusionDomain::Product,
            classes: crate::synth_data::CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// UNet, text embedding table and vocabulary.
#[derive(Debug, Clone)]
pub struct PlaceModel<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    unet: UNet,
    embedding: ParamId,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
}

impl<T: Real> PlaceModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, DiffusionError> {
        let vocab = Vocabulary::from_classes(&config.classes, &[]);
        Self::with_vocabulary(config, vocab, seed)
    }

    pub fn with_vocabulary(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, DiffusionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let embedding = params.normal(TEXT_EMBEDDING, &[vocab.len(), config.unet.d_text], 1.0, &mut rng);
        let unet = UNet::new(config.unet.clone(), &mut params, &mut rng)?;
        Ok(Self { config, params, unet, embedding, vocab, schedule: NoiseSchedule::default() })
    }

    /// Rebuilds a model from stored tensors; every parameter of the
    /// architecture must be supplied with its exact shape.
    pub fn from_tensors(
        config: ModelConfig,
        vocab: Vocabulary,
        tensors: impl IntoIterator<Item = (String, Tensor<T>)>,
    ) -> Result<Self, DiffusionError> {
        let mut model = Self::with_vocabulary(config, vocab, 0)?;
        let mut seen = std::collections::HashSet::new();
        for (name, t) in tensors {
            model.params.set(&name, t).map_err(DiffusionError::Config)?;
            seen.insert(name);
        }
        if let Some((missing, _)) = model.params.iter().find(|(n, _)| !seen.contains(*n)) {
            return Err(DiffusionError::Config(format!("missing parameter {missing}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.config.unet.image_size;
        [self.config.unet.channels, s, s]
    }

    /// Prompt from the map's present classes plus region-free extras, and
    /// one layout map per attention resolution.
    pub fn layout_for(&self, map: &SemanticMap, extras: &[&str]) -> Result<(Prompt, Vec<LayoutControlMap>), DiffusionError> {
        let (prompt, tcm) = build_prompt_with_extras(map, &self.vocab, extras)?;
        let mut lcms = Vec::new();
        for &r in &self.config.unet.attention_resolutions {
            lcms.push(match self.config.layout {
                LayoutMode::Lcm => compute_lcm(map, (r, r), &tcm)?,
                LayoutMode::Nearest => nearest_lcm_baseline(map, (r, r), &tcm)?,
            });
        }
        Ok((prompt, lcms))
    }

    /// Conditioning for the configured α mode; `None` is the layout-free path.
    pub fn conditioning<'a>(&self, lcms: Option<&'a [LayoutControlMap]>) -> Conditioning<'a> {
        match lcms {
            None => Conditioning::Free,
            Some(lcms) => Conditioning::Layout { lcms, alpha: self.config.alpha, domain: self.config.fusion_domain },
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        t: usize,
        prompt: &Prompt,
        cond: &Conditioning<'_>,
    ) -> Result<UNetOutput, DiffusionError> {
        let text = embed_prompt(g, prompt, p.var(self.embedding))?;
        self.unet.forward(g, p, z, t, text, cond)
    }

    /// Inference-only ε̂ on a fresh graph.
    pub fn predict_eps(&self, z: &Tensor<T>, t: usize, prompt: &Prompt, cond: &Conditioning<'_>) -> Result<Tensor<T>, DiffusionError> {
        if t >= self.schedule.len() {
            return Err(DiffusionError::TimestepOutOfRange { t, steps: self.schedule.len() });
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &p, zv, t, prompt, cond)?;
        Ok(g.value(out.eps).clone())
    }

    /// `(resolution, F)` of every PLACE block for one forward pass; `F` is
    /// `[h·w, tokens]`.
    pub fn fusion_maps(&self, z: &Tensor<T>, t: usize, prompt: &Prompt, cond: &Conditioning<'_>) -> Result<Vec<(usize, Tensor<T>)>, DiffusionError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, &p, zv, t, prompt, cond)?;
        Ok(out.blocks.iter().map(|b| (b.resolution, g.value(b.fusion).clone())).collect())
    }

    /// α of every PLACE block at timestep `t`, in forward order.
    pub fn alpha_at(&self, t: usize) -> Vec<f64> {
        match self.config.alpha {
            AlphaMode::Fixed(a) => vec![a; self.unet.num_place_blocks()],
            AlphaMode::Adaptive => {
                let emb = TimeEmbedding::new(t, self.config.unet.alpha_embed_dim);
                self.unet
                    .alpha_params()
                    .into_iter()
                    .map(|(w, b)| {
                        let w = self.params.get(w).data();
                        let z: f64 = w.iter().zip(emb.values()).map(|(w, e)| w.to_f64().unwrap_or(0.0) * e).sum::<f64>()
                            + self.params.get(b).data()[0].to_f64().unwrap_or(0.0);
                        1.0 / (1.0 + (-z).exp())
                    })
                    .collect()
            }
        }
    }

    /// Mean α across blocks at a normalized timestep `u ∈ [0, 1]`.
    pub fn mean_alpha_at_fraction(&self, u: f64) -> f64 {
        let t = ((u * (self.schedule.len() - 1) as f64).round() as usize).min(self.schedule.len() - 1);
        let a = self.alpha_at(t);
        a.iter().sum::<f64>() / a.len().max(1) as f64
    }
}
