use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParameterSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParameterSet) -> Self {
        let zeros = |_: ()| {
            params
                .iter()
                .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
                .collect::<BTreeMap<_, _>>()
        };
        AdamState {
            config,
            t: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// Rebuilds a state from stored moments, checking them against `params`.
    pub fn from_parts(
        config: AdamConfig,
        t: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
        params: &ParameterSet,
    ) -> Result<Self> {
        for (name, p) in params.iter() {
            for (which, map) in [("m", &m), ("v", &v)] {
                match map.get(name) {
                    Some(x) if x.len() == p.numel() => {}
                    Some(x) => {
                        return Err(Error::format(
                            format!("adam.{which}.{name}"),
                            format!("length {} does not match parameter length {}", x.len(), p.numel()),
                        ))
                    }
                    None => return Err(Error::format(format!("adam.{which}.{name}"), "missing")),
                }
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::format("adam", "moments name parameters that do not exist"));
        }
        Ok(AdamState { config, t, m, v })
    }

    /// One bias-corrected update of every parameter from its gradient buffer.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::contract(format!("parameter {name} has no gradient")));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (name, p) in params.iter_mut() {
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let g = p.grad().expect("checked above").to_vec();
            for (i, theta) in p.values_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *theta -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
