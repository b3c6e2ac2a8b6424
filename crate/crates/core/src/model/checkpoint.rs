//! Checkpoints: a JSON manifest plus a little-endian `f32` blob.
//!
//! Tensors are stored in manifest order under group prefixes (`param/`,
//! `buffer/`, `disc/`, `adam_g.m/`, ...). Values are quantised to 32 bits on
//! save; everything else (configs, step counts) is exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Discriminator, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Buffers, ParameterSet, Tensor};

pub const FORMAT: &str = "mtinet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimiserEntry {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model_config: ModelConfig,
    pub blob: String,
    pub total_values: usize,
    pub tensors: Vec<TensorEntry>,
    pub generator_optimiser: Option<OptimiserEntry>,
    pub discriminator_optimiser: Option<OptimiserEntry>,
    /// Completed training epochs.
    pub epochs_done: usize,
    /// Base seed of the run that produced the weights.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Sample files held out from training, if any.
    #[serde(default)]
    pub holdout: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub disc: Discriminator,
    pub opt_g: Option<AdamState>,
    pub opt_d: Option<AdamState>,
    pub epochs_done: usize,
    pub seed: Option<u64>,
    pub holdout: Vec<String>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

struct Writer {
    tensors: Vec<TensorEntry>,
    blob: Vec<u8>,
    offset: usize,
}

impl Writer {
    fn push(&mut self, name: String, shape: &[usize], values: &[f64]) {
        self.tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: self.offset,
        });
        for v in values {
            self.blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.offset += values.len();
    }

    fn params(&mut self, group: &str, params: &ParameterSet) {
        for (name, t) in params.iter() {
            self.push(format!("{group}/{name}"), t.shape(), t.values());
        }
    }

    fn adam(&mut self, group: &str, state: &AdamState, params: &ParameterSet) {
        for (name, t) in params.iter() {
            if let (Some(m), Some(v)) = (state.first_moment(name), state.second_moment(name)) {
                self.push(format!("{group}.m/{name}"), t.shape(), m);
                self.push(format!("{group}.v/{name}"), t.shape(), v);
            }
        }
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer {
            tensors: Vec::new(),
            blob: Vec::new(),
            offset: 0,
        };
        w.params("param", &self.model.params);
        for (name, values) in self.model.buffers.iter() {
            w.push(format!("buffer/{name}"), &[values.len()], values);
        }
        w.params("disc", &self.disc.params);
        if let Some(s) = &self.opt_g {
            w.adam("adam_g", s, &self.model.params);
        }
        if let Some(s) = &self.opt_d {
            w.adam("adam_d", s, &self.disc.params);
        }
        let blob = blob_path(path);
        let blob_name = blob
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::format("checkpoint path", "has no file name"))?
            .to_string();
        let mut config = self.model.config.clone();
        config.tdd = self.disc.config;
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            version: VERSION,
            model_config: config,
            blob: blob_name,
            total_values: w.offset,
            tensors: w.tensors,
            generator_optimiser: self.opt_g.as_ref().map(|s| OptimiserEntry {
                config: s.config,
                step: s.step_count(),
            }),
            discriminator_optimiser: self.opt_d.as_ref().map(|s| OptimiserEntry {
                config: s.config,
                step: s.step_count(),
            }),
            epochs_done: self.epochs_done,
            seed: self.seed,
            holdout: self.holdout.clone(),
        };
        fs::write(&blob, &w.blob).map_err(|e| Error::io(&blob, e))?;
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint. With `expected`, every stored parameter must match
    /// the shapes that configuration declares.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::format("checkpoint manifest", e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::format("format", format!("expected {FORMAT}, found {}", manifest.format)));
        }
        if manifest.version != VERSION {
            return Err(Error::format("version", format!("unsupported version {}", manifest.version)));
        }
        let blob_file = path.with_file_name(&manifest.blob);
        let bytes = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
        if bytes.len() != 4 * manifest.total_values {
            return Err(Error::format(
                "blob",
                format!("{} bytes where {} values were declared", bytes.len(), manifest.total_values),
            ));
        }
        let mut table: BTreeMap<&str, (&[usize], Vec<f64>)> = BTreeMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset + n > manifest.total_values {
                return Err(Error::format(e.name.clone(), "extends past the end of the blob"));
            }
            let values = bytes[4 * e.offset..4 * (e.offset + n)]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            if table.insert(e.name.as_str(), (e.shape.as_slice(), values)).is_some() {
                return Err(Error::format(e.name.clone(), "listed twice"));
            }
        }

        if let Some(exp) = expected {
            let mut want = exp.clone();
            want.tdd = manifest.model_config.tdd;
            let probe = Model::new(want, 0)?;
            for (name, t) in probe.params.iter() {
                match table.get(format!("param/{name}").as_str()) {
                    None => return Err(Error::compat(name, "missing from checkpoint")),
                    Some((shape, _)) if *shape != t.shape() => {
                        return Err(Error::compat(
                            name,
                            format!("checkpoint shape {shape:?}, model expects {:?}", t.shape()),
                        ))
                    }
                    Some(_) => {}
                }
            }
            let extra = table
                .keys()
                .filter_map(|k| k.strip_prefix("param/"))
                .find(|k| probe.params.get(k).is_none());
            if let Some(name) = extra {
                return Err(Error::compat(name, "not part of the configured model"));
            }
        }

        let mut model = Model::new(manifest.model_config.clone(), 0)?;
        let mut disc = Discriminator::new(manifest.model_config.tdd, 0)?;
        fill(&mut model.params, "param", &table)?;
        fill(&mut disc.params, "disc", &table)?;
        let mut buffers = Buffers::default();
        for (name, (_, values)) in table.iter().filter_map(|(k, v)| k.strip_prefix("buffer/").map(|n| (n, v))) {
            buffers.set(name, values.clone());
        }
        for (name, values) in model.buffers.iter() {
            match buffers.get(name) {
                Some(b) if b.len() == values.len() => {}
                _ => return Err(Error::format(format!("buffer/{name}"), "missing or wrong length")),
            }
        }
        model.buffers = buffers;
        let opt_g = optimiser(&manifest.generator_optimiser, "adam_g", &table, &model.params)?;
        let opt_d = optimiser(&manifest.discriminator_optimiser, "adam_d", &table, &disc.params)?;
        Ok(Checkpoint {
            model,
            disc,
            opt_g,
            opt_d,
            epochs_done: manifest.epochs_done,
            seed: manifest.seed,
            holdout: manifest.holdout,
        })
    }
}

type Table<'a> = BTreeMap<&'a str, (&'a [usize], Vec<f64>)>;

fn fill(params: &mut ParameterSet, group: &str, table: &Table) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let key = format!("{group}/{name}");
        let (shape, values) = table
            .get(key.as_str())
            .ok_or_else(|| Error::format(key.clone(), "missing from checkpoint"))?;
        let t = params.get_mut(name).expect("listed");
        if *shape != t.shape() {
            return Err(Error::format(key, format!("shape {shape:?}, configuration declares {:?}", t.shape())));
        }
        *t = Tensor::new(shape, values.clone())
            .map_err(|e| Error::format(key.clone(), e.to_string()))?
            .with_requires_grad(true);
    }
    let prefix = format!("{group}/");
    if let Some(stray) = table
        .keys()
        .filter_map(|k| k.strip_prefix(prefix.as_str()))
        .find(|k| params.get(k).is_none())
    {
        return Err(Error::format(format!("{group}/{stray}"), "not declared by the stored configuration"));
    }
    Ok(())
}

fn optimiser(entry: &Option<OptimiserEntry>, group: &str, table: &Table, params: &ParameterSet) -> Result<Option<AdamState>> {
    let Some(entry) = entry else { return Ok(None) };
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for name in params.names() {
        for (which, map) in [("m", &mut m), ("v", &mut v)] {
            let key = format!("{group}.{which}/{name}");
            let (_, values) = table
                .get(key.as_str())
                .ok_or_else(|| Error::format(key.clone(), "missing optimiser moment"))?;
            map.insert(name.to_string(), values.clone());
        }
    }
    AdamState::from_parts(entry.config, entry.step, m, v, params).map(Some)
}
