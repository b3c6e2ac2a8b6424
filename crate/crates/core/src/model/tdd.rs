//! Transformer discriminator over (regression / 255, class distribution).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::TddConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::{self, Ctx};
use crate::tensor::{ParameterSet, Tensor, Var};

/// Four regression slots followed by two class probabilities.
pub const TDD_SLOTS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: TddConfig,
    pub params: ParameterSet,
}

impl Discriminator {
    pub fn new(config: TddConfig, seed: u64) -> Result<Discriminator> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let d = config.dim;
        let normal = Normal::new(0.0, config.embed_std)
            .map_err(|e| Error::config(format!("discriminator embedding std: {e}")))?;
        let emb: Vec<f64> = (0..TDD_SLOTS * d).map(|_| normal.sample(&mut rng)).collect();
        params.insert("tdd.embed", Tensor::new(&[TDD_SLOTS, d], emb)?)?;
        params.insert("tdd.embed_bias", Tensor::zeros(&[TDD_SLOTS, d]))?;
        nn::declare_transformer_block(&mut params, "tdd.block", config.block(), &mut rng)?;
        nn::declare_linear(&mut params, "tdd.out", d, 1, &mut rng)?;
        Ok(Discriminator { config, params })
    }
}

/// Probability that `y` (six entries) is a ground-truth pair. Each slot
/// scales its own learned embedding row; the sinusoidal table marks slot order.
pub fn tdd_discriminate(ctx: &mut Ctx, config: &TddConfig, y: Var) -> Result<Var> {
    if ctx.graph.numel(y) != TDD_SLOTS {
        return Err(Error::shape(format!(
            "discriminator input has {} entries, expected {TDD_SLOTS}",
            ctx.graph.numel(y)
        )));
    }
    if ctx.graph.value(y).iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("discriminator input is not finite"));
    }
    let emb = ctx.p("tdd.embed")?;
    let bias = ctx.p("tdd.embed_bias")?;
    let scaled = ctx.graph.mul_groups(emb, y)?;
    let tokens = ctx.graph.add(scaled, bias)?;
    let pe = nn::positional_encoding(TDD_SLOTS, config.dim)?;
    let pe = ctx.graph.constant(&pe);
    let tokens = ctx.graph.add(tokens, pe)?;
    let out = nn::transformer_block(ctx, "tdd.block", tokens, config.block())?.out;
    let pooled = ctx.graph.mean_rows(out)?;
    let logit = nn::linear(ctx, "tdd.out", pooled)?;
    Ok(ctx.graph.sigmoid(logit))
}
