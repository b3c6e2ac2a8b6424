//! Layers assembled from tape ops, with matching parameter declarations.
//!
//! Parameter names follow `prefix.part.field`; declaring and applying a layer
//! must use the same prefix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Buffers, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;

/// Where batch normalisation takes its statistics from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Batch statistics, running averages updated afterwards.
    Train,
    /// Batch statistics, running averages left alone.
    BatchStats,
    /// Stored running averages.
    Running,
}

/// Batch statistics observed by one normalisation layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// A graph under construction plus the state layers read from.
pub struct Ctx<'a> {
    pub graph: Graph,
    pub params: &'a ParameterSet,
    pub buffers: &'a Buffers,
    pub mode: NormMode,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParameterSet, buffers: &'a Buffers, mode: NormMode) -> Self {
        Ctx {
            graph: Graph::new(),
            params,
            buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }

    /// Binds parameter `name` on the graph.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
        Ok(self.graph.param(name, t))
    }
}

/// Folds observed batch statistics into the running averages. The stored
/// variance is the unbiased estimate whenever more than one value was seen.
pub fn apply_bn_updates(buffers: &mut Buffers, updates: &[BnUpdate]) {
    for u in updates {
        let mean_key = format!("{}.running_mean", u.prefix);
        let var_key = format!("{}.running_var", u.prefix);
        let c = u.mean.len();
        let mut rm = buffers.get(&mean_key).map_or_else(|| vec![0.0; c], <[f64]>::to_vec);
        let mut rv = buffers.get(&var_key).map_or_else(|| vec![1.0; c], <[f64]>::to_vec);
        let correction = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        for i in 0..c {
            rm[i] = (1.0 - BN_MOMENTUM) * rm[i] + BN_MOMENTUM * u.mean[i];
            rv[i] = (1.0 - BN_MOMENTUM) * rv[i] + BN_MOMENTUM * u.var[i] * correction;
        }
        buffers.set(mean_key, rm);
        buffers.set(var_key, rv);
    }
}

pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn declare_conv(
    params: &mut ParameterSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let w = Tensor::uniform(&[cout, cin, k, k], he_bound(cin * k * k), rng);
    params.insert(format!("{prefix}.weight"), w)?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]))
}

pub fn declare_deconv(
    params: &mut ParameterSet,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let w = Tensor::uniform(&[cin, cout, k, k], he_bound(cin * k * k), rng);
    params.insert(format!("{prefix}.weight"), w)?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]))
}

pub fn declare_bn(params: &mut ParameterSet, buffers: &mut Buffers, prefix: &str, channels: usize) -> Result<()> {
    params.insert(format!("{prefix}.gamma"), Tensor::filled(&[channels], 1.0))?;
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
    buffers.set(format!("{prefix}.running_mean"), vec![0.0; channels]);
    buffers.set(format!("{prefix}.running_var"), vec![1.0; channels]);
    Ok(())
}

pub fn declare_linear(params: &mut ParameterSet, prefix: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Result<()> {
    let w = Tensor::uniform(&[dout, din], he_bound(din), rng);
    params.insert(format!("{prefix}.weight"), w)?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]))
}

pub fn declare_layer_norm(params: &mut ParameterSet, prefix: &str, dim: usize) -> Result<()> {
    params.insert(format!("{prefix}.gain"), Tensor::filled(&[dim], 1.0))?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]))
}

/// 3×3 convolution, batch norm, ReLU.
pub fn declare_conv_block(
    params: &mut ParameterSet,
    buffers: &mut Buffers,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    declare_conv(params, &format!("{prefix}.conv"), cin, cout, 3, rng)?;
    declare_bn(params, buffers, &format!("{prefix}.bn"), cout)
}

/// 4×4 stride-2 transposed convolution, batch norm, ReLU.
pub fn declare_deconv_block(
    params: &mut ParameterSet,
    buffers: &mut Buffers,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    declare_deconv(params, &format!("{prefix}.deconv"), cin, cout, 4, rng)?;
    declare_bn(params, buffers, &format!("{prefix}.bn"), cout)
}

pub fn batch_norm(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let gamma = ctx.p(&format!("{prefix}.gamma"))?;
    let beta = ctx.p(&format!("{prefix}.beta"))?;
    match ctx.mode {
        NormMode::Running => {
            let mean_key = format!("{prefix}.running_mean");
            let var_key = format!("{prefix}.running_var");
            let mean = ctx
                .buffers
                .get(&mean_key)
                .ok_or_else(|| Error::contract(format!("missing buffer {mean_key}")))?;
            let var = ctx
                .buffers
                .get(&var_key)
                .ok_or_else(|| Error::contract(format!("missing buffer {var_key}")))?;
            ctx.graph.frozen_norm(x, gamma, beta, mean, var)
        }
        mode => {
            let (y, mean, var) = ctx.graph.batch_norm(x, gamma, beta)?;
            if mode == NormMode::Train {
                let count = ctx.graph.numel(x) / mean.len();
                ctx.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                    count,
                });
            }
            Ok(y)
        }
    }
}

/// Conv 3×3 (pad 1) → BN → ReLU → 2×2 max-pool; halves H and W.
pub fn conv_block(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let shape = ctx.graph.shape(x);
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("conv_block {prefix}: extents {h}x{w} must be even")));
    }
    let wt = ctx.p(&format!("{prefix}.conv.weight"))?;
    let b = ctx.p(&format!("{prefix}.conv.bias"))?;
    let y = ctx.graph.conv2d(x, wt, b, 1)?;
    let y = batch_norm(ctx, &format!("{prefix}.bn"), y)?;
    let y = ctx.graph.relu(y);
    ctx.graph.max_pool2(y)
}

/// Transposed conv 4×4 (stride 2, pad 1) → BN → ReLU; doubles H and W.
pub fn deconv_block(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let wt = ctx.p(&format!("{prefix}.deconv.weight"))?;
    let b = ctx.p(&format!("{prefix}.deconv.bias"))?;
    let y = ctx.graph.conv_transpose2d(x, wt, b, 2, 1)?;
    let y = batch_norm(ctx, &format!("{prefix}.bn"), y)?;
    Ok(ctx.graph.relu(y))
}

/// `W·x + b` applied to a vector `[D_in]` or to each row of `[rows, D_in]`.
pub fn linear(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let wt = ctx.p(&format!("{prefix}.weight"))?;
    let b = ctx.p(&format!("{prefix}.bias"))?;
    let (dout, din) = match *ctx.graph.shape(wt) {
        [o, i] => (o, i),
        ref s => return Err(Error::shape(format!("linear {prefix}: weight shape {s:?}"))),
    };
    let xs = ctx.graph.shape(x).to_vec();
    let rows = match xs.as_slice() {
        [d] if *d == din => 1,
        [r, d] if *d == din => *r,
        s => {
            return Err(Error::shape(format!(
                "linear {prefix}: input {s:?} does not end in {din}"
            )))
        }
    };
    let x2 = if xs.len() == 1 { ctx.graph.reshape(x, &[1, din])? } else { x };
    let y = ctx.graph.matmul_nt(x2, wt)?;
    let y = ctx.graph.add_row_bias(y, b)?;
    if xs.len() == 1 {
        ctx.graph.reshape(y, &[dout])
    } else {
        debug_assert_eq!(ctx.graph.shape(y), &[rows, dout]);
        Ok(y)
    }
}

pub fn layer_norm(ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
    let gain = ctx.p(&format!("{prefix}.gain"))?;
    let bias = ctx.p(&format!("{prefix}.bias"))?;
    ctx.graph.layer_norm_rows(x, gain, bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ff: usize,
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.d_k == 0 || self.ff == 0 {
            return Err(Error::config("transformer extents must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "token dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

pub fn declare_transformer_block(
    params: &mut ParameterSet,
    prefix: &str,
    spec: TransformerSpec,
    rng: &mut impl Rng,
) -> Result<()> {
    spec.validate()?;
    let TransformerSpec { dim, heads, d_k, ff } = spec;
    for h in 0..heads {
        for part in ["q", "k", "v"] {
            declare_linear(params, &format!("{prefix}.attn.{h}.{part}"), dim, d_k, rng)?;
        }
        let wo = Tensor::uniform(&[dim, d_k], he_bound(heads * d_k), rng);
        params.insert(format!("{prefix}.attn.{h}.out.weight"), wo)?;
    }
    params.insert(format!("{prefix}.attn.out.bias"), Tensor::zeros(&[dim]))?;
    declare_layer_norm(params, &format!("{prefix}.ln1"), dim)?;
    declare_linear(params, &format!("{prefix}.ff1"), dim, ff, rng)?;
    declare_linear(params, &format!("{prefix}.ff2"), ff, dim, rng)?;
    declare_layer_norm(params, &format!("{prefix}.ln2"), dim)
}

pub struct BlockOutput {
    pub out: Var,
    /// Attention weights `[N, N]` per head.
    pub attention: Vec<Var>,
}

/// Post-norm block: LN(x + MHA(x)), then LN(· + FF(·)).
pub fn transformer_block(ctx: &mut Ctx, prefix: &str, x: Var, spec: TransformerSpec) -> Result<BlockOutput> {
    spec.validate()?;
    match *ctx.graph.shape(x) {
        [_, d] if d == spec.dim => {}
        ref s => {
            return Err(Error::shape(format!(
                "transformer {prefix}: tokens {s:?} need width {}",
                spec.dim
            )))
        }
    }
    let scale = 1.0 / (spec.d_k as f64).sqrt();
    let mut attention = Vec::with_capacity(spec.heads);
    let mut mixed: Option<Var> = None;
    for h in 0..spec.heads {
        let q = linear(ctx, &format!("{prefix}.attn.{h}.q"), x)?;
        let k = linear(ctx, &format!("{prefix}.attn.{h}.k"), x)?;
        let v = linear(ctx, &format!("{prefix}.attn.{h}.v"), x)?;
        let scores = ctx.graph.matmul_nt(q, k)?;
        let scores = ctx.graph.scale(scores, scale);
        let a = ctx.graph.softmax_rows(scores);
        attention.push(a);
        let o = ctx.graph.matmul(a, v)?;
        let wo = ctx.p(&format!("{prefix}.attn.{h}.out.weight"))?;
        let proj = ctx.graph.matmul_nt(o, wo)?;
        mixed = Some(match mixed {
            Some(m) => ctx.graph.add(m, proj)?,
            None => proj,
        });
    }
    let bo = ctx.p(&format!("{prefix}.attn.out.bias"))?;
    let mixed = ctx.graph.add_row_bias(mixed.expect("heads >= 1"), bo)?;
    let r1 = ctx.graph.add(x, mixed)?;
    let x1 = layer_norm(ctx, &format!("{prefix}.ln1"), r1)?;
    let f = linear(ctx, &format!("{prefix}.ff1"), x1)?;
    let f = ctx.graph.relu(f);
    let f = linear(ctx, &format!("{prefix}.ff2"), f)?;
    let r2 = ctx.graph.add(x1, f)?;
    let out = layer_norm(ctx, &format!("{prefix}.ln2"), r2)?;
    Ok(BlockOutput { out, attention })
}

/// Sinusoidal table: `sin(pos / 10000^(2i/dim))` at column `2i`, cosine at `2i+1`.
pub fn positional_encoding(n_tokens: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("positional encoding dim {dim} must be even and positive")));
    }
    if n_tokens == 0 {
        return Err(Error::config("positional encoding needs at least one position"));
    }
    let mut v = vec![0.0; n_tokens * dim];
    for pos in 0..n_tokens {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            v[pos * dim + 2 * i] = angle.sin();
            v[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[n_tokens, dim], v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_encoding_closed_form() {
        let pe = positional_encoding(2, 4).unwrap();
        assert_eq!(&pe.values()[..4], &[0.0, 1.0, 0.0, 1.0]);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in pe.values()[4..].iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(positional_encoding(3, 5), Err(Error::Config(_))));
    }

    #[test]
    fn linear_hand_product() {
        let mut p = ParameterSet::new();
        p.insert("l.weight", Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap()).unwrap();
        p.insert("l.bias", Tensor::from_vec(vec![0.0, 1.0]).unwrap()).unwrap();
        let b = Buffers::default();
        let mut ctx = Ctx::new(&p, &b, NormMode::Train);
        let x = ctx.graph.constant(&Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let y = linear(&mut ctx, "l", x).unwrap();
        assert_eq!(ctx.graph.value(y), &[3.0, 3.0]);
        let bad = ctx.graph.constant(&Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(linear(&mut ctx, "l", bad), Err(Error::Shape(_))));
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut p = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = TransformerSpec { dim: 6, heads: 4, d_k: 8, ff: 8 };
        assert!(matches!(declare_transformer_block(&mut p, "t", spec, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn running_variance_is_unbiased() {
        let mut buffers = Buffers::default();
        let u = BnUpdate {
            prefix: "bn".into(),
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        };
        apply_bn_updates(&mut buffers, &[u]);
        assert!((buffers.get("bn.running_mean").unwrap()[0] - 0.2).abs() < 1e-15);
        assert!((buffers.get("bn.running_var").unwrap()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
