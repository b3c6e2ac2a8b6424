use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::HighPassSpec;
use crate::tensor::nn::TransformerSpec;

/// Architecture ablations. Every switch defaults to on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_mdief: bool,
    pub use_spe: bool,
    pub use_spa: bool,
    pub use_tim: bool,
    pub use_tdd: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_mdief: true,
            use_spe: true,
            use_spa: true,
            use_tim: true,
            use_tdd: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tasks {
    pub seg: bool,
    pub reg: bool,
    pub cls: bool,
}

impl Default for Tasks {
    fn default() -> Self {
        Tasks {
            seg: true,
            reg: true,
            cls: true,
        }
    }
}

impl Tasks {
    /// Parses a comma list such as `seg,reg`.
    pub fn parse(list: &str) -> Result<Tasks> {
        let mut t = Tasks {
            seg: false,
            reg: false,
            cls: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "seg" => t.seg = true,
                "reg" => t.reg = true,
                "cls" => t.cls = true,
                other => return Err(Error::config(format!("unknown task {other:?}; expected seg, reg or cls"))),
            }
        }
        if !(t.seg || t.reg || t.cls) {
            return Err(Error::config("at least one task must be enabled"));
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [(self.seg, "seg"), (self.reg, "reg"), (self.cls, "cls")] {
            if on {
                parts.push(name);
            }
        }
        parts.join(",")
    }
}

/// Discriminator geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TddConfig {
    pub dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub ff: usize,
    /// Standard deviation of the per-slot embedding initialisation.
    pub embed_std: f64,
}

impl Default for TddConfig {
    fn default() -> Self {
        TddConfig {
            dim: 16,
            heads: 2,
            d_k: 64,
            ff: 128,
            embed_std: 0.5,
        }
    }
}

impl TddConfig {
    pub fn block(&self) -> TransformerSpec {
        TransformerSpec {
            dim: self.dim,
            heads: self.heads,
            d_k: self.d_k,
            ff: self.ff,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of the four encoder blocks.
    pub encoder_channels: Vec<usize>,
    /// Output channels of the four decoder blocks.
    pub decoder_channels: Vec<usize>,
    /// Width of the learned token embedding; `None` feeds raw `P²` tokens.
    pub embed_dim: Option<usize>,
    pub heads: usize,
    pub d_k: usize,
    pub ff: usize,
    pub depth: usize,
    /// Multiplier on the regression head output (intensity units).
    pub reg_scale: f64,
    /// Multiplier on the classification logits.
    pub cls_logit_scale: f64,
    pub high_pass: HighPassSpec,
    /// One encoder for both branches instead of two.
    pub share_encoders: bool,
    pub ablation: Ablation,
    pub tasks: Tasks,
    pub tdd: TddConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![128, 64, 32, 16],
            embed_dim: Some(32),
            heads: 1,
            d_k: 64,
            ff: 128,
            depth: 3,
            reg_scale: 255.0,
            cls_logit_scale: 10.0,
            high_pass: HighPassSpec::default(),
            share_encoders: false,
            ablation: Ablation::default(),
            tasks: Tasks::default(),
            tdd: TddConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn p(&self) -> usize {
        self.height / 16
    }

    /// Final encoder channel count `C`.
    pub fn channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn n_tokens(&self) -> usize {
        4 * self.channels()
    }

    pub fn raw_token_dim(&self) -> usize {
        self.p() * (self.width / 16)
    }

    pub fn model_dim(&self) -> usize {
        self.embed_dim.unwrap_or_else(|| self.raw_token_dim())
    }

    pub fn trunk_block(&self) -> TransformerSpec {
        TransformerSpec {
            dim: self.model_dim(),
            heads: self.heads,
            d_k: self.d_k,
            ff: self.ff,
        }
    }

    pub fn needs_trunk(&self) -> bool {
        self.tasks.reg || self.tasks.cls
    }

    /// Mask-to-intensity consistency needs both the mask and the regression task.
    pub fn tim_active(&self) -> bool {
        self.ablation.use_tim && self.tasks.seg && self.tasks.reg
    }

    /// The discriminator judges (regression, class) pairs.
    pub fn tdd_active(&self) -> bool {
        self.ablation.use_tdd && self.tasks.reg && self.tasks.cls
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("image extents {h}x{w} must be positive multiples of 16")));
        }
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(Error::config(format!("image extents {h}x{w} must be powers of two")));
        }
        if self.encoder_channels.len() != 4 || self.encoder_channels.contains(&0) {
            return Err(Error::config("encoder_channels must list four positive widths"));
        }
        if self.decoder_channels.len() != 4 || self.decoder_channels.contains(&0) {
            return Err(Error::config("decoder_channels must list four positive widths"));
        }
        if self.depth == 0 {
            return Err(Error::config("transformer depth must be at least 1"));
        }
        let raw = self.raw_token_dim();
        if raw < 4 || raw % 2 != 0 {
            return Err(Error::config(format!("token dim P² = {raw} must be even and at least 4")));
        }
        if self.model_dim() % 2 != 0 || self.model_dim() == 0 {
            return Err(Error::config("embedding width must be even and positive"));
        }
        self.trunk_block().validate()?;
        self.tdd.block().validate()?;
        if self.tdd.dim % 2 != 0 {
            return Err(Error::config("discriminator width must be even"));
        }
        if !(self.reg_scale.is_finite() && self.reg_scale > 0.0)
            || !(self.cls_logit_scale.is_finite() && self.cls_logit_scale > 0.0)
        {
            return Err(Error::config("head scales must be finite and positive"));
        }
        if !(self.tdd.embed_std.is_finite() && self.tdd.embed_std > 0.0) {
            return Err(Error::config("discriminator embedding std must be positive"));
        }
        self.high_pass.validate()?;
        if !self.ablation.use_spa && !self.ablation.use_spe {
            return Err(Error::config("at least one of the spatial and spectral branches must be enabled"));
        }
        if !(self.tasks.seg || self.tasks.reg || self.tasks.cls) {
            return Err(Error::config("at least one task must be enabled"));
        }
        Ok(())
    }
}
