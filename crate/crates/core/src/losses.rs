//! Training objectives as tape nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Clamp applied to every logarithm argument.
pub const LOG_EPS: f64 = 1e-7;

/// Mean pixel-wise binary cross-entropy against a 0/1 mask.
pub fn seg_loss(g: &mut Graph, seg_prob: Var, mask: &[f64]) -> Result<Var> {
    g.bce(seg_prob, mask, LOG_EPS)
}

/// Mean absolute error in intensity units.
pub fn reg_loss(g: &mut Graph, y_hat: Var, y: Var) -> Result<Var> {
    g.l1(y_hat, y)
}

/// `-ln p_u` with `p_u` clamped to `[ε, 1]`.
pub fn cls_loss(g: &mut Graph, p: Var, label: usize) -> Result<Var> {
    if label >= g.numel(p) {
        return Err(Error::contract(format!(
            "label {label} outside a {}-class distribution",
            g.numel(p)
        )));
    }
    let pu = g.slice(p, label, &[1])?;
    Ok(g.neg_log(pu, LOG_EPS, 1.0))
}

/// [`cls_loss`] evaluated from logits: equal in value wherever `p_u ≥ ε`,
/// but its gradient does not vanish once the softmax saturates.
pub fn cls_loss_logits(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    g.softmax_nll(logits, label, LOG_EPS)
}

/// Mean absolute error between the mask-derived and the target enhancement.
pub fn tim_loss(g: &mut Graph, y_si: Var, y_i: Var) -> Result<Var> {
    g.l1(y_si, y_i)
}

fn clamped_neg_log(g: &mut Graph, x: Var) -> Var {
    g.neg_log(x, LOG_EPS, 1.0 - LOG_EPS)
}

/// `-[ln d_real + ln(1 - d_fake)]`.
pub fn discriminator_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = clamped_neg_log(g, d_real);
    let neg = g.scale(d_fake, -1.0);
    let one_minus = g.shift(neg, 1.0);
    let fake = clamped_neg_log(g, one_minus);
    g.add(real, fake)
}

/// Non-saturating generator term `-ln d_fake`.
pub fn generator_adv_loss(g: &mut Graph, d_fake: Var) -> Var {
    clamped_neg_log(g, d_fake)
}

/// Both adversarial terms on one graph: `(L_D, L_G)`.
pub fn adversarial_losses(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    let ld = discriminator_loss(g, d_real, d_fake)?;
    Ok((ld, generator_adv_loss(g, d_fake)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f64,
    pub reg: f64,
    pub cls: f64,
    pub tim: f64,
    pub adv: f64,
}

/// Default weights put the two intensity-valued L1 terms on the unit scale
/// of the log-likelihood terms.
impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            reg: 1.0 / 255.0,
            tim: 1.0 / 255.0,
            ..LossWeights::uniform(1.0)
        }
    }
}

impl LossWeights {
    pub const fn uniform(w: f64) -> Self {
        LossWeights {
            seg: w,
            reg: w,
            cls: w,
            tim: w,
            adv: w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("seg", self.seg),
            ("reg", self.reg),
            ("cls", self.cls),
            ("tim", self.tim),
            ("adv", self.adv),
        ]
    }

    /// Zeroes the weights of disabled terms, warning about any that were
    /// set away from the default.
    pub fn effective(&self, enabled: &TermSwitches) -> LossWeights {
        let mut w = *self;
        let defaults = LossWeights::default();
        for (name, on, slot, default) in [
            ("seg", enabled.seg, &mut w.seg, defaults.seg),
            ("reg", enabled.reg, &mut w.reg, defaults.reg),
            ("cls", enabled.cls, &mut w.cls, defaults.cls),
            ("tim", enabled.tim, &mut w.tim, defaults.tim),
            ("adv", enabled.adv, &mut w.adv, defaults.adv),
        ] {
            if !on {
                if *slot != default && *slot != 0.0 {
                    log::warn!("loss weight {name} = {} ignored: the term is disabled", *slot);
                }
                *slot = 0.0;
            }
        }
        w
    }
}

/// Which loss terms a configuration produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermSwitches {
    pub seg: bool,
    pub reg: bool,
    pub cls: bool,
    pub tim: bool,
    pub adv: bool,
}

/// Generator loss terms present on a graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub seg: Option<Var>,
    pub reg: Option<Var>,
    pub cls: Option<Var>,
    pub tim: Option<Var>,
    pub adv: Option<Var>,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, Option<Var>); 5] {
        [
            ("seg", self.seg),
            ("reg", self.reg),
            ("cls", self.cls),
            ("tim", self.tim),
            ("adv", self.adv),
        ]
    }
}

/// Weighted sum of the present terms; absent terms contribute nothing.
pub fn total_generator_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((_, term), (_, w)) in terms.named().into_iter().zip(weights.named()) {
        if let Some(t) = term {
            let wt = g.scale(t, w);
            total = Some(match total {
                Some(acc) => g.add(acc, wt)?,
                None => wt,
            });
        }
    }
    total.ok_or_else(|| Error::config("no loss term is enabled"))
}
