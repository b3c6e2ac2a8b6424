//! The multi-task network: dual-domain encoders, entropy-weighted fusion,
//! segmentation decoder, transformer trunk with regression and class heads,
//! mask-derived enhancement, and the adversarial discriminator.

pub mod checkpoint;
mod config;
pub mod tdd;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Ablation, ModelConfig, Tasks, TddConfig};
pub use tdd::{tdd_discriminate, Discriminator, TDD_SLOTS};

use crate::error::{Error, Result};
use crate::phantom::{Sample, PHASES};
use crate::spectral::{spectral_preprocess, HighPassSpec};
use crate::tensor::nn::{self, Ctx, NormMode};
use crate::tensor::{Buffers, Graph, ParameterSet, Tensor, Var};

pub const TIM_EPS: f64 = 1e-6;
/// Intensity scale shared by network inputs and discriminator slots.
pub const INTENSITY_MAX: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Spatial,
    Spectral,
}

/// A sample with both branch inputs precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `[4, 1, H, W]` raw phases scaled to `[0, 1]`.
    pub spatial: Tensor,
    /// `[4, 1, H, W]` high-passed phases on the same scale.
    pub spectral: Tensor,
    /// `[4·H·W]` raw intensities.
    pub phases: Vec<f64>,
    pub mask: Vec<f64>,
    pub enhancement: [f64; PHASES],
    pub label: usize,
}

impl Prepared {
    pub fn new(sample: &Sample, high_pass: HighPassSpec) -> Result<Prepared> {
        let (h, w) = sample.dims();
        let spatial: Vec<f64> = sample.phases.values().iter().map(|v| v / INTENSITY_MAX).collect();
        let mut spectral = Vec::with_capacity(PHASES * h * w);
        for p in 0..PHASES {
            let img = Tensor::new(&[h, w], sample.phase(p).to_vec())?;
            let filtered = spectral_preprocess(&img, high_pass)?;
            spectral.extend(filtered.values().iter().map(|v| v / INTENSITY_MAX));
        }
        Ok(Prepared {
            spatial: Tensor::new(&[PHASES, 1, h, w], spatial)?,
            spectral: Tensor::new(&[PHASES, 1, h, w], spectral)?,
            phases: sample.phases.values().to_vec(),
            mask: sample.mask.values().to_vec(),
            enhancement: sample.enhancement,
            label: sample.label.index(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.spatial.shape();
        (s[2], s[3])
    }
}

pub fn encoder_prefix(config: &ModelConfig, branch: Branch) -> &'static str {
    match (config.share_encoders, branch) {
        (true, _) => "enc.shared",
        (false, Branch::Spatial) => "enc.spa",
        (false, Branch::Spectral) => "enc.spe",
    }
}

/// Declares every generator parameter in a fixed order.
pub fn declare_model(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(ParameterSet, Buffers)> {
    config.validate()?;
    let mut params = ParameterSet::new();
    let mut buffers = Buffers::default();
    let branches: &[Branch] = if config.share_encoders {
        &[Branch::Spatial]
    } else {
        &[Branch::Spatial, Branch::Spectral]
    };
    for &b in branches {
        let prefix = encoder_prefix(config, b);
        let mut cin = 1;
        for (i, &cout) in config.encoder_channels.iter().enumerate() {
            nn::declare_conv_block(&mut params, &mut buffers, &format!("{prefix}.{i}"), cin, cout, rng)?;
            cin = cout;
        }
    }
    let mut cin = 4 * config.channels();
    for (i, &cout) in config.decoder_channels.iter().enumerate() {
        nn::declare_deconv_block(&mut params, &mut buffers, &format!("dec.{i}"), cin, cout, rng)?;
        cin = cout;
    }
    nn::declare_conv(&mut params, "seg_head", cin, 1, 1, rng)?;
    if let Some(d) = config.embed_dim {
        nn::declare_linear(&mut params, "embed", config.raw_token_dim(), d, rng)?;
    }
    for i in 0..config.depth {
        nn::declare_transformer_block(&mut params, &format!("trunk.{i}"), config.trunk_block(), rng)?;
    }
    nn::declare_linear(&mut params, "reg_head", config.model_dim(), PHASES, rng)?;
    nn::declare_linear(&mut params, "cls_head", config.model_dim(), 2, rng)?;
    Ok((params, buffers))
}

/// Four conv blocks: `[B, 1, H, W]` (or `[1, H, W]`) to `[B, C, H/16, W/16]`.
pub fn encode(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let mut y = x;
    for i in 0..4 {
        y = nn::conv_block(ctx, &format!("{prefix}.{i}"), y)?;
    }
    Ok(y)
}

/// Encodes one `[H, W]` phase image into `[C, P, P]`.
pub fn encode_phase(ctx: &mut Ctx, config: &ModelConfig, image: &Tensor, branch: Branch) -> Result<Var> {
    let (h, w) = match *image.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::shape(format!("phase image must be [H, W], got {s:?}"))),
    };
    let input = match branch {
        Branch::Spatial => image.clone(),
        Branch::Spectral => spectral_preprocess(image, config.high_pass)?,
    };
    let x = ctx.graph.constant(&input.reshape(&[1, h, w])?);
    encode(ctx, encoder_prefix(config, branch), x)
}

/// Per-channel weights of the two branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub spa: Vec<f64>,
    pub spe: Vec<f64>,
}

/// Entropy-aware fusion: per-channel GAP of each branch, a two-way softmax
/// across branches, then `x_spa·(1+γ_spa) + x_spe·(1+γ_spe)`.
/// Returns the fused map and the two weight vectors.
pub fn mdief_fuse(g: &mut Graph, x_spa: Var, x_spe: Var) -> Result<(Var, Var, Var)> {
    if g.shape(x_spa) != g.shape(x_spe) {
        return Err(Error::shape(format!(
            "fusion inputs {:?} and {:?} differ",
            g.shape(x_spa),
            g.shape(x_spe)
        )));
    }
    let shape = g.shape(x_spa).to_vec();
    if shape.len() < 3 {
        return Err(Error::shape(format!("fusion input {shape:?} must be [.., C, P, P]")));
    }
    let spatial = shape[shape.len() - 1] * shape[shape.len() - 2];
    let groups = g.numel(x_spa) / spatial;
    let p_spa = g.group_mean(x_spa, groups)?;
    let p_spe = g.group_mean(x_spe, groups)?;
    let stacked = g.concat(&[p_spa, p_spe], &[2, groups])?;
    let pairs = g.transpose(stacked)?;
    let soft = g.softmax_rows(pairs);
    let back = g.transpose(soft)?;
    let gamma_spa = g.slice(back, 0, &[groups])?;
    let gamma_spe = g.slice(back, groups, &[groups])?;
    let c_spa = g.shift(gamma_spa, 1.0);
    let c_spe = g.shift(gamma_spe, 1.0);
    let a = g.mul_groups(x_spa, c_spa)?;
    let b = g.mul_groups(x_spe, c_spe)?;
    Ok((g.add(a, b)?, gamma_spa, gamma_spe))
}

/// Decoder over the four fused phase maps `[4, C, P, P]`; returns `[H, W]` logits.
pub fn segment(ctx: &mut Ctx, config: &ModelConfig, fused: Var) -> Result<Var> {
    let s = ctx.graph.shape(fused).to_vec();
    let (c, p, q) = match *s.as_slice() {
        [PHASES, c, p, q] => (c, p, q),
        _ => return Err(Error::shape(format!("segment expects [4, C, P, P], got {s:?}"))),
    };
    let mut y = ctx.graph.reshape(fused, &[PHASES * c, p, q])?;
    for i in 0..config.decoder_channels.len() {
        y = nn::deconv_block(ctx, &format!("dec.{i}"), y)?;
    }
    let w = ctx.p("seg_head.weight")?;
    let b = ctx.p("seg_head.bias")?;
    let logits = ctx.graph.conv2d(y, w, b, 0)?;
    let (h, wd) = (ctx.graph.shape(logits)[1], ctx.graph.shape(logits)[2]);
    ctx.graph.reshape(logits, &[h, wd])
}

fn flatten_tokens(g: &mut Graph, fused: Var) -> Result<(Var, usize)> {
    let s = g.shape(fused).to_vec();
    let (c, p, q) = match *s.as_slice() {
        [PHASES, c, p, q] => (c, p, q),
        _ => return Err(Error::shape(format!("tokens need [4, C, P, P], got {s:?}"))),
    };
    let n = PHASES * c;
    Ok((g.reshape(fused, &[n, p * q])?, n))
}

/// Row-major flattening of each of the `4·C` channel maps (phase-major
/// order) plus the sinusoidal table: `[4·C, P²]`.
pub fn build_tokens(g: &mut Graph, fused: Var) -> Result<Var> {
    let (flat, n) = flatten_tokens(g, fused)?;
    let dim = g.shape(flat)[1];
    let pe = nn::positional_encoding(n, dim)?;
    let pe = g.constant(&pe);
    g.add(flat, pe)
}

/// Tokens as the trunk consumes them: the raw flattening when no embedding
/// is configured, otherwise a learned projection to the model width.
pub fn trunk_tokens(ctx: &mut Ctx, config: &ModelConfig, fused: Var) -> Result<Var> {
    if config.embed_dim.is_none() {
        return build_tokens(&mut ctx.graph, fused);
    }
    let (flat, n) = flatten_tokens(&mut ctx.graph, fused)?;
    if n != config.n_tokens() {
        return Err(Error::shape(format!("{n} tokens where {} were configured", config.n_tokens())));
    }
    let emb = nn::linear(ctx, "embed", flat)?;
    let pe = nn::positional_encoding(n, config.model_dim())?;
    let pe = ctx.graph.constant(&pe);
    ctx.graph.add(emb, pe)
}

/// Outputs of the regression and classification heads.
#[derive(Clone, Copy, Debug, Default)]
pub struct Heads {
    pub reg: Option<Var>,
    /// Scaled logits before the softmax.
    pub cls_logits: Option<Var>,
    pub cls_prob: Option<Var>,
}

/// Transformer blocks, mean pooling, then the two heads. Each head is only
/// built when its task is enabled.
pub fn trunk_and_heads(ctx: &mut Ctx, config: &ModelConfig, tokens: Var) -> Result<Heads> {
    let mut x = tokens;
    for i in 0..config.depth {
        x = nn::transformer_block(ctx, &format!("trunk.{i}"), x, config.trunk_block())?.out;
    }
    let pooled = ctx.graph.mean_rows(x)?;
    let reg = if config.tasks.reg {
        let r = nn::linear(ctx, "reg_head", pooled)?;
        Some(ctx.graph.scale(r, config.reg_scale))
    } else {
        None
    };
    let (cls_logits, cls_prob) = if config.tasks.cls {
        let l = nn::linear(ctx, "cls_head", pooled)?;
        let l = ctx.graph.scale(l, config.cls_logit_scale);
        (Some(l), Some(ctx.graph.softmax_rows(l)))
    } else {
        (None, None)
    };
    Ok(Heads { reg, cls_logits, cls_prob })
}

/// Soft-mask mean intensity per phase: `Σ(p ⊙ phase) / max(Σ p, ε)`.
pub fn tim_derive(g: &mut Graph, seg_prob: Var, phases: &[f64]) -> Result<Var> {
    if phases.len() != PHASES * g.numel(seg_prob) {
        return Err(Error::shape(format!(
            "{} phase values for a {}-pixel mask",
            phases.len(),
            g.numel(seg_prob)
        )));
    }
    g.weighted_mean(seg_prob, phases, TIM_EPS)
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub fused: Var,
    pub gamma: Option<(Var, Var)>,
    pub seg_logits: Option<Var>,
    pub seg_prob: Option<Var>,
    pub reg: Option<Var>,
    pub cls_logits: Option<Var>,
    pub cls_prob: Option<Var>,
    pub y_si: Option<Var>,
}

/// Runs the generator on one prepared sample, honouring ablation and task switches.
pub fn forward(ctx: &mut Ctx, config: &ModelConfig, input: &Prepared) -> Result<Forward> {
    if input.dims() != (config.height, config.width) {
        return Err(Error::shape(format!(
            "input {:?} does not match configured {}x{}",
            input.dims(),
            config.height,
            config.width
        )));
    }
    let ab = config.ablation;
    let x_spa = if ab.use_spa {
        let x = ctx.graph.constant(&input.spatial);
        Some(encode(ctx, encoder_prefix(config, Branch::Spatial), x)?)
    } else {
        None
    };
    let x_spe = if ab.use_spe {
        let x = ctx.graph.constant(&input.spectral);
        Some(encode(ctx, encoder_prefix(config, Branch::Spectral), x)?)
    } else {
        None
    };
    let (fused, gamma) = match (x_spa, x_spe) {
        (Some(a), Some(b)) if ab.use_mdief => {
            let (f, gs, ge) = mdief_fuse(&mut ctx.graph, a, b)?;
            (f, Some((gs, ge)))
        }
        (Some(a), Some(b)) => (ctx.graph.add(a, b)?, None),
        // A lone branch takes the full weight: x·(1+1).
        (Some(x), None) | (None, Some(x)) if ab.use_mdief => (ctx.graph.scale(x, 2.0), None),
        (Some(x), None) | (None, Some(x)) => (x, None),
        (None, None) => return Err(Error::config("both encoder branches are disabled")),
    };

    let (seg_logits, seg_prob) = if config.tasks.seg {
        let l = segment(ctx, config, fused)?;
        (Some(l), Some(ctx.graph.sigmoid(l)))
    } else {
        (None, None)
    };
    let heads = if config.needs_trunk() {
        let tokens = trunk_tokens(ctx, config, fused)?;
        trunk_and_heads(ctx, config, tokens)?
    } else {
        Heads::default()
    };
    let y_si = match seg_prob {
        Some(p) if config.tim_active() => Some(tim_derive(&mut ctx.graph, p, &input.phases)?),
        _ => None,
    };
    Ok(Forward {
        fused,
        gamma,
        seg_logits,
        seg_prob,
        reg: heads.reg,
        cls_logits: heads.cls_logits,
        cls_prob: heads.cls_prob,
        y_si,
    })
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutputs {
    pub seg_prob: Option<Tensor>,
    pub reg: Option<[f64; PHASES]>,
    pub cls_prob: Option<[f64; 2]>,
    pub y_si: Option<[f64; PHASES]>,
    pub fusion: Option<FusionWeights>,
}

fn array<const N: usize>(v: &[f64]) -> [f64; N] {
    v.try_into().expect("head width")
}

impl TaskOutputs {
    pub fn read(g: &Graph, f: &Forward, config: &ModelConfig) -> TaskOutputs {
        let ab = config.ablation;
        let fusion = match f.gamma {
            Some((s, e)) => Some(FusionWeights {
                spa: g.value(s).to_vec(),
                spe: g.value(e).to_vec(),
            }),
            None if ab.use_mdief && ab.use_spa != ab.use_spe => {
                let n = PHASES * config.channels();
                let (a, b) = if ab.use_spa { (1.0, 0.0) } else { (0.0, 1.0) };
                Some(FusionWeights {
                    spa: vec![a; n],
                    spe: vec![b; n],
                })
            }
            None => None,
        };
        TaskOutputs {
            seg_prob: f.seg_prob.map(|p| g.tensor(p)),
            reg: f.reg.map(|r| array(g.value(r))),
            cls_prob: f.cls_prob.map(|c| array(g.value(c))),
            y_si: f.y_si.map(|y| array(g.value(y))),
            fusion,
        }
    }
}

/// Generator parameters, normalisation statistics and the configuration they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub buffers: Buffers,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, buffers) = declare_model(&config, &mut rng)?;
        Ok(Model {
            config,
            params,
            buffers,
        })
    }

    /// Rounds every parameter and statistic to `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.params.iter_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
        let names: Vec<String> = self.buffers.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let rounded = self.buffers.get(&n).unwrap_or(&[]).iter().map(|v| f64::from(*v as f32)).collect();
            self.buffers.set(n, rounded);
        }
    }

    pub fn predict(&self, input: &Prepared, mode: NormMode) -> Result<TaskOutputs> {
        let mut ctx = Ctx::new(&self.params, &self.buffers, mode);
        let f = forward(&mut ctx, &self.config, input)?;
        Ok(TaskOutputs::read(&ctx.graph, &f, &self.config))
    }
}
