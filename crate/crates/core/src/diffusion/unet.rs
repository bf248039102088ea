use place_autograd::{Graph, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use super::{DiffusionError, TimeEmbedding};
use crate::fusion_attention::{adaptive_alpha, place_attention_forward, CrossAttentionWeights, FusionControl, FusionDomain};
use crate::layout_control::LayoutControlMap;
use crate::text_semantics::DEFAULT_TEXT_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level; level `i` runs at
    /// `image_size >> i`.
    pub channel_mult: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub d_text: usize,
    pub time_dim: usize,
    pub alpha_embed_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            base_width: 16,
            channel_mult: vec![1, 2, 2],
            attention_resolutions: vec![16, 8],
            d_text: DEFAULT_TEXT_DIM,
            time_dim: 64,
            alpha_embed_dim: 32,
            groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |msg: String| Err(DiffusionError::Config(msg));
        let levels = self.channel_mult.len();
        if levels == 0 || !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return bad(format!("image size {} does not halve {} times", self.image_size, levels - 1));
        }
        for &r in &self.attention_resolutions {
            if r == 0 || !self.image_size.is_multiple_of(r) || !self.level_resolutions().contains(&r) {
                return bad(format!("attention resolution {r} is not a level of a {} UNet", self.image_size));
            }
        }
        for &m in &self.channel_mult {
            if m == 0 || !(self.base_width * m).is_multiple_of(self.groups) {
                return bad(format!("width {} not divisible into {} groups", self.base_width * m, self.groups));
            }
        }
        if !self.time_dim.is_multiple_of(2) || !self.alpha_embed_dim.is_multiple_of(2) {
            return bad("embedding widths must be even".into());
        }
        Ok(())
    }

    pub fn level_resolutions(&self) -> Vec<usize> {
        (0..self.channel_mult.len()).map(|i| self.image_size >> i).collect()
    }

    fn has_attention(&self, res: usize) -> bool {
        self.attention_resolutions.contains(&res)
    }
}

/// How the fusion parameter is obtained inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Predicted from the timestep embedding by the block's own layer.
    #[default]
    Adaptive,
    /// Constant α for every block and timestep.
    Fixed(f64),
}

/// Layout input to the whole UNet.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// No layout; every block uses plain cross-attention (α = 0).
    Free,
    /// One layout control map per attention resolution.
    Layout { lcms: &'a [LayoutControlMap], alpha: AlphaMode, domain: FusionDomain },
}

impl Conditioning<'_> {
    pub fn alpha_forced_zero(&self) -> bool {
        match self {
            Conditioning::Free => true,
            Conditioning::Layout { alpha, .. } => *alpha == AlphaMode::Fixed(0.0),
        }
    }
}

/// Per-block intermediates needed by the alignment loss and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub resolution: usize,
    pub fusion: Var,
    pub self_attn: Var,
    pub alpha: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct UNetOutput {
    pub eps: Var,
    pub blocks: Vec<BlockTrace>,
    pub alpha_forced_zero: bool,
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv {
    fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, zero: bool, rng: &mut impl Rng) -> Self {
        let shape = [cout, cin, k, k];
        let w = if zero { ps.zeros(format!("{name}.weight"), &shape) } else { ps.uniform(format!("{name}.weight"), &shape, cin * k * k, rng) };
        let b = ps.zeros(format!("{name}.bias"), &[cout]);
        Self { w, b, pad: k / 2 }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, DiffusionError> {
        let y = g.conv2d(x, p.var(self.w), self.pad)?;
        Ok(g.add_leading(y, p.var(self.b))?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        Self { w: ps.uniform(format!("{name}.weight"), &[din, dout], din, rng), b: ps.zeros(format!("{name}.bias"), &[dout]) }
    }

    /// `x: [din]` → `[dout]`.
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, DiffusionError> {
        let din = g.value(x).len();
        let row = g.reshape(x, &[1, din])?;
        let y = g.matmul(row, p.var(self.w), false, false)?;
        let dout = g.shape(y)[1];
        let y = g.reshape(y, &[dout])?;
        Ok(g.add(y, p.var(self.b))?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    temb: Linear,
    conv2: Conv,
    skip: Option<Conv>,
    groups: usize,
}

impl ResBlock {
    fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, tdim: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, false, rng),
            temb: Linear::new(ps, &format!("{name}.temb"), tdim, cout, rng),
            conv2: Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, false, rng),
            skip: (cin != cout).then(|| Conv::new(ps, &format!("{name}.skip"), cin, cout, 1, false, rng)),
            groups,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, temb: Var) -> Result<Var, DiffusionError> {
        let h = g.group_norm(x, self.groups, 1e-5)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let t = self.temb.forward(g, p, temb)?;
        let h = g.add_leading(h, t)?;
        let h = g.group_norm(h, self.groups, 1e-5)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        Ok(g.add(skip, h)?)
    }
}

/// Self-attention followed by layout-fused cross-attention, both residual.
#[derive(Debug, Clone)]
struct PlaceBlock {
    self_q: ParamId,
    self_k: ParamId,
    self_v: ParamId,
    self_o: ParamId,
    cross_q: ParamId,
    cross_k: ParamId,
    cross_v: ParamId,
    cross_o: ParamId,
    alpha_w: ParamId,
    alpha_b: ParamId,
    alpha_dim: usize,
}

impl PlaceBlock {
    fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize, d_text: usize, alpha_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_q: ps.uniform(format!("{name}.self.q"), &[c, c], c, rng),
            self_k: ps.uniform(format!("{name}.self.k"), &[c, c], c, rng),
            self_v: ps.uniform(format!("{name}.self.v"), &[c, c], c, rng),
            self_o: ps.zeros(format!("{name}.self.o"), &[c, c]),
            cross_q: ps.uniform(format!("{name}.cross.q"), &[c, c], c, rng),
            cross_k: ps.uniform(format!("{name}.cross.k"), &[d_text, c], d_text, rng),
            cross_v: ps.uniform(format!("{name}.cross.v"), &[d_text, c], d_text, rng),
            cross_o: ps.zeros(format!("{name}.cross.o"), &[c, c]),
            alpha_w: ps.zeros(format!("{name}.alpha.weight"), &[alpha_dim]),
            alpha_b: ps.add(format!("{name}.alpha.bias"), Tensor::scalar(T::lit(crate::fusion_attention::ALPHA_BIAS_INIT))),
            alpha_dim,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        t: usize,
        text: Var,
        cond: &Conditioning<'_>,
        res: usize,
    ) -> Result<(Var, BlockTrace), DiffusionError> {
        let shape = g.shape(x).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[c, h * w])?;
        let tokens = g.transpose(flat);

        let n1 = g.layer_norm_rows(tokens, 1e-5);
        let q = g.matmul(n1, p.var(self.self_q), false, false)?;
        let k = g.matmul(n1, p.var(self.self_k), false, false)?;
        let v = g.matmul(n1, p.var(self.self_v), false, false)?;
        let logits = g.matmul(q, k, false, true)?;
        let logits = g.scale(logits, T::one() / T::lit(c as f64).sqrt());
        let self_attn = g.softmax_rows(logits)?;
        let sa = g.matmul(self_attn, v, false, false)?;
        let sa = g.matmul(sa, p.var(self.self_o), false, false)?;
        let tokens = g.add(tokens, sa)?;

        let n2 = g.layer_norm_rows(tokens, 1e-5);
        let weights = CrossAttentionWeights { wq: p.var(self.cross_q), wk: p.var(self.cross_k), wv: p.var(self.cross_v) };
        let (control, alpha) = match cond {
            Conditioning::Free => (FusionControl::Free, None),
            Conditioning::Layout { lcms, alpha, domain } => {
                let lcm = lcms.iter().find(|l| l.latent_dims() == (h, w)).ok_or(DiffusionError::MissingResolutionLcm(res))?;
                let a = match alpha {
                    AlphaMode::Adaptive => {
                        let emb = TimeEmbedding::new(t, self.alpha_dim);
                        adaptive_alpha(g, &emb, p.var(self.alpha_w), p.var(self.alpha_b))?
                    }
                    AlphaMode::Fixed(v) => g.constant(Tensor::scalar(T::lit(*v))),
                };
                (FusionControl::Layout { lcm, alpha: a, domain: *domain }, Some(a))
            }
        };
        let placed = place_attention_forward(g, n2, text, control, &weights)?;
        let o = g.matmul(placed.out, p.var(self.cross_o), false, false)?;
        let tokens = g.add(tokens, o)?;

        let back = g.transpose(tokens);
        let y = g.reshape(back, &[c, h, w])?;
        Ok((y, BlockTrace { resolution: res, fusion: placed.fusion, self_attn, alpha }))
    }

    fn alpha_params(&self) -> (ParamId, ParamId) {
        (self.alpha_w, self.alpha_b)
    }
}

#[derive(Debug, Clone)]
struct Level {
    resolution: usize,
    down: ResBlock,
    down_attn: Option<PlaceBlock>,
    up: Option<ResBlock>,
    up_attn: Option<PlaceBlock>,
}

/// Small pixel-space UNet whose every cross-attention is a PLACE block.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    conv_in: Conv,
    time1: Linear,
    time2: Linear,
    levels: Vec<Level>,
    mid: ResBlock,
    mid_attn: Option<PlaceBlock>,
    conv_out: Conv,
}

impl UNet {
    /// Registers all parameters in `ps` under the `unet.` prefix.
    pub fn new<T: Real>(config: UNetConfig, ps: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self, DiffusionError> {
        config.validate()?;
        let c0 = config.base_width;
        let td = config.time_dim;
        let gr = config.groups;
        let widths: Vec<usize> = config.channel_mult.iter().map(|m| m * c0).collect();
        let conv_in = Conv::new(ps, "unet.conv_in", config.channels, c0, 3, false, rng);
        let time1 = Linear::new(ps, "unet.time1", td, td, rng);
        let time2 = Linear::new(ps, "unet.time2", td, td, rng);
        let mut levels = Vec::new();
        let mut cin = c0;
        for (i, &cout) in widths.iter().enumerate() {
            let res = config.image_size >> i;
            let attn = config.has_attention(res);
            let down = ResBlock::new(ps, &format!("unet.down{i}.res"), cin, cout, td, gr, rng);
            let down_attn = attn.then(|| PlaceBlock::new(ps, &format!("unet.down{i}.attn"), cout, config.d_text, config.alpha_embed_dim, rng));
            levels.push(Level { resolution: res, down, down_attn, up: None, up_attn: None });
            cin = cout;
        }
        let last = *widths.last().expect("at least one level");
        let last_res = config.image_size >> (widths.len() - 1);
        let mid = ResBlock::new(ps, "unet.mid.res", last, last, td, gr, rng);
        let mid_attn = config.has_attention(last_res).then(|| PlaceBlock::new(ps, "unet.mid.attn", last, config.d_text, config.alpha_embed_dim, rng));
        // up path registered after mid so parameter order follows execution order
        let mut h_ch = last;
        for i in (0..widths.len()).rev() {
            let res = config.image_size >> i;
            let up = ResBlock::new(ps, &format!("unet.up{i}.res"), h_ch + widths[i], widths[i], td, gr, rng);
            let up_attn = config
                .has_attention(res)
                .then(|| PlaceBlock::new(ps, &format!("unet.up{i}.attn"), widths[i], config.d_text, config.alpha_embed_dim, rng));
            levels[i].up = Some(up);
            levels[i].up_attn = up_attn;
            h_ch = widths[i];
        }
        let conv_out = Conv::new(ps, "unet.conv_out", c0, config.channels, 3, true, rng);
        Ok(Self { config, conv_in, time1, time2, levels, mid, mid_attn, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Number of PLACE blocks, in forward order.
    pub fn num_place_blocks(&self) -> usize {
        self.place_blocks().len()
    }

    fn place_blocks(&self) -> Vec<&PlaceBlock> {
        let mut out: Vec<&PlaceBlock> = self.levels.iter().filter_map(|l| l.down_attn.as_ref()).collect();
        out.extend(self.mid_attn.as_ref());
        out.extend(self.levels.iter().rev().filter_map(|l| l.up_attn.as_ref()));
        out
    }

    /// `(weight, bias)` of each block's α layer, in forward order.
    pub fn alpha_params(&self) -> Vec<(ParamId, ParamId)> {
        self.place_blocks().iter().map(|b| b.alpha_params()).collect()
    }

    /// Resolutions of the PLACE blocks in forward order.
    pub fn block_resolutions(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.levels.iter().filter(|l| l.down_attn.is_some()).map(|l| l.resolution).collect();
        if self.mid_attn.is_some() {
            out.push(self.levels.last().expect("levels").resolution);
        }
        out.extend(self.levels.iter().rev().filter(|l| l.up_attn.is_some()).map(|l| l.resolution));
        out
    }

    /// ε̂(z_t, t, text, layout). `z` is `[channels, S, S]`, `text` is `[N, d_text]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        t: usize,
        text: Var,
        cond: &Conditioning<'_>,
    ) -> Result<UNetOutput, DiffusionError> {
        let s = self.config.image_size;
        if g.shape(z) != [self.config.channels, s, s] {
            return Err(DiffusionError::Shape(format!("input {:?}, expected [{}, {s}, {s}]", g.shape(z), self.config.channels)));
        }
        if let Conditioning::Layout { lcms, .. } = cond {
            for &r in &self.config.attention_resolutions {
                if !lcms.iter().any(|l| l.latent_dims() == (r, r)) {
                    return Err(DiffusionError::MissingResolutionLcm(r));
                }
            }
        }
        let emb = g.constant(TimeEmbedding::new(t, self.config.time_dim).tensor());
        let temb = self.time1.forward(g, p, emb)?;
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, p, temb)?;
        let temb = g.silu(temb);

        let mut blocks = Vec::new();
        let mut h = self.conv_in.forward(g, p, z)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            h = level.down.forward(g, p, h, temb)?;
            if let Some(a) = &level.down_attn {
                let (y, tr) = a.forward(g, p, h, t, text, cond, level.resolution)?;
                h = y;
                blocks.push(tr);
            }
            skips.push(h);
            if i + 1 < self.levels.len() {
                h = g.avg_pool2(h)?;
            }
        }
        h = self.mid.forward(g, p, h, temb)?;
        if let Some(a) = &self.mid_attn {
            let res = self.levels.last().expect("levels").resolution;
            let (y, tr) = a.forward(g, p, h, t, text, cond, res)?;
            h = y;
            blocks.push(tr);
        }
        for (i, level) in self.levels.iter().enumerate().rev() {
            if i + 1 < self.levels.len() {
                h = g.upsample2(h)?;
            }
            h = g.concat0(h, skips[i])?;
            h = level.up.as_ref().expect("up path built in new").forward(g, p, h, temb)?;
            if let Some(a) = &level.up_attn {
                let (y, tr) = a.forward(g, p, h, t, text, cond, level.resolution)?;
                h = y;
                blocks.push(tr);
            }
        }
        let h = g.group_norm(h, self.config.groups, 1e-5)?;
        let h = g.silu(h);
        let eps = self.conv_out.forward(g, p, h)?;
        if !g.value(eps).all_finite() {
            return Err(DiffusionError::NonFiniteActivation);
        }
        Ok(UNetOutput { eps, blocks, alpha_forced_zero: cond.alpha_forced_zero() })
    }
}
