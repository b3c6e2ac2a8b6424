//! Synthetic four-phase contrast-kinetics phantoms.
//!
//! Each case is a smooth liver-like background with one elliptical lesion
//! whose intensity follows a hemangioma (progressive fill-in) or HCC
//! (arterial wash-in, later washout) enhancement curve.

pub mod format;

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use format::{read_sample, write_sample};

pub const PHASES: usize = 4;
pub const PHASE_NAMES: [&str; PHASES] = ["pre", "arterial", "portal_venous", "delay"];
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Hemangioma,
    Hcc,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Hemangioma, Class::Hcc];

    pub fn index(self) -> usize {
        match self {
            Class::Hemangioma => 0,
            Class::Hcc => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn template(self) -> CurveTemplate {
        match self {
            Class::Hemangioma => HEMANGIOMA,
            Class::Hcc => HCC,
        }
    }
}

/// Normalised per-phase enhancement of one lesion type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveTemplate {
    pub name: &'static str,
    pub e: [f64; PHASES],
}

pub const HEMANGIOMA: CurveTemplate = CurveTemplate {
    name: "hemangioma",
    e: [0.2, 0.5, 0.8, 0.95],
};

pub const HCC: CurveTemplate = CurveTemplate {
    name: "hcc",
    e: [0.2, 1.0, 0.6, 0.4],
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub base: f64,
    pub amplitude: f64,
    /// Bound on the total amplitude of the smooth background field.
    pub field_amplitude: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 32,
            width: 32,
            noise_sigma: 8.0,
            base: 80.0,
            amplitude: 150.0,
            field_amplitude: 8.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if !v.is_power_of_two() || !(16..=256).contains(&v) {
                return Err(Error::config(format!("{name} {v} must be a power of two in [16, 256]")));
            }
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config(format!("noise sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if !(self.base.is_finite() && self.amplitude.is_finite() && self.field_amplitude.is_finite()) {
            return Err(Error::config("intensity parameters must be finite"));
        }
        if self.field_amplitude < 0.0 || self.base - self.field_amplitude < 0.0 {
            return Err(Error::config("background must stay within [0, 255]"));
        }
        if self.amplitude <= 0.0 || self.base + self.amplitude > 255.0 || self.base + self.field_amplitude > 255.0 {
            return Err(Error::config(format!(
                "base {} plus amplitude {} must stay within [0, 255]",
                self.base, self.amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[4, H, W]` intensities in `[0, 255]`.
    pub phases: Tensor,
    /// `[H, W]` of 0/1.
    pub mask: Tensor,
    /// Noiseless in-lesion intensity per phase.
    pub enhancement: [f64; PHASES],
    pub label: Class,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }

    pub fn phase(&self, p: usize) -> &[f64] {
        let n = self.mask.numel();
        &self.phases.values()[p * n..(p + 1) * n]
    }

    pub fn foreground(&self) -> usize {
        self.mask.values().iter().filter(|&&m| m > 0.5).count()
    }
}

/// A generated case plus the number of noisy pixels clamped into `[0, 255]`.
#[derive(Clone, Debug)]
pub struct Generated {
    pub sample: Sample,
    pub clamped: usize,
}

fn quantise(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Builds one phantom. Intensities are rounded through 32-bit floats so a
/// sample survives a file round trip unchanged.
pub fn generate_sample(seed: u64, class: Class, config: &PhantomConfig) -> Result<Generated> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut background = vec![config.base; h * w];
    for _ in 0..3 {
        let fx: f64 = rng.gen_range(0.5..1.5);
        let fy: f64 = rng.gen_range(0.5..1.5);
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(-1.0..1.0) * config.field_amplitude / 3.0;
        for y in 0..h {
            for x in 0..w {
                background[y * w + x] +=
                    amp * (2.0 * PI * (fx * x as f64 / wf + fy * y as f64 / hf) + phase).sin();
            }
        }
    }

    let limit = h * w / 4;
    let mask = loop {
        let a = rng.gen_range(0.1 * hf..=0.3 * hf);
        let b = rng.gen_range(0.1 * hf..=0.3 * hf);
        let theta = rng.gen_range(0.0..PI);
        if PI * a * b > (h * w) as f64 / 4.0 {
            continue;
        }
        let r = a.max(b);
        if 2.0 * r > hf.min(wf) - 1.0 {
            continue;
        }
        let cx = rng.gen_range(r..=wf - 1.0 - r);
        let cy = rng.gen_range(r..=hf - 1.0 - r);
        let (s, c) = theta.sin_cos();
        let mask: Vec<f64> = (0..h * w)
            .map(|i| {
                let (dx, dy) = ((i % w) as f64 - cx, (i / w) as f64 - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let count = mask.iter().filter(|&&m| m > 0.5).count();
        if (1..=limit).contains(&count) {
            break mask;
        }
    };

    let template = class.template();
    let enhancement = template.e.map(|e| quantise(config.base + e * config.amplitude));
    let noise = (config.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, config.noise_sigma).expect("sigma validated"));
    let mut phases = vec![0.0; PHASES * h * w];
    let mut clamped = 0;
    for p in 0..PHASES {
        for i in 0..h * w {
            let clean = if mask[i] > 0.5 { enhancement[p] } else { background[i] };
            let mut v = clean + noise.map_or(0.0, |n| n.sample(&mut rng));
            if !(0.0..=255.0).contains(&v) {
                clamped += 1;
                v = v.clamp(0.0, 255.0);
            }
            phases[p * h * w + i] = quantise(v);
        }
    }
    Ok(Generated {
        sample: Sample {
            phases: Tensor::new(&[PHASES, h, w], phases)?,
            mask: Tensor::new(&[h, w], mask)?,
            enhancement,
            label: class,
        },
        clamped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub label: Class,
    pub enhancement: [f64; PHASES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub generator: PhantomConfig,
    pub clamped_pixels: usize,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<Class> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for s in &self.samples {
            c[s.label.index()] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::format("manifest.version", format!("unsupported version {}", self.version)));
        }
        if self.count != self.samples.len() {
            return Err(Error::format(
                "manifest.count",
                format!("declares {} samples but lists {}", self.count, self.samples.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if s.file.contains('/') || s.file.contains('\\') || s.file.is_empty() {
                return Err(Error::format("manifest.samples", format!("bad file name {:?}", s.file)));
            }
            if !seen.insert(&s.file) {
                return Err(Error::format("manifest.samples", format!("duplicate file {}", s.file)));
            }
        }
        Ok(())
    }
}

pub fn sample_file_name(i: usize) -> String {
    format!("sample_{i:05}.mtip")
}

/// Writes `2·n_per_class` samples (classes alternating) and a manifest.
pub fn generate_dataset(dir: &Path, n_per_class: usize, config: &PhantomConfig, seed: u64) -> Result<DatasetManifest> {
    config.validate()?;
    if n_per_class < 5 {
        return Err(Error::config(format!("per-class count {n_per_class} must be at least 5")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(2 * n_per_class);
    let mut clamped_pixels = 0;
    for i in 0..2 * n_per_class {
        let class = Class::ALL[i % 2];
        let g = generate_sample(master.next_u64(), class, config)?;
        let file = sample_file_name(i);
        write_sample(&dir.join(&file), &g.sample)?;
        clamped_pixels += g.clamped;
        samples.push(ManifestEntry {
            file,
            label: class,
            enhancement: g.sample.enhancement,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        height: config.height,
        width: config.width,
        count: samples.len(),
        seed,
        noise_sigma: config.noise_sigma,
        generator: *config,
        clamped_pixels,
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a dataset directory, checking every file against the manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    manifest.validate()?;
    let mut samples = Vec::with_capacity(manifest.count);
    for entry in &manifest.samples {
        let s = read_sample(&dir.join(&entry.file))?;
        if s.dims() != (manifest.height, manifest.width) {
            return Err(Error::format(
                entry.file.clone(),
                format!("extents {:?} differ from manifest {}x{}", s.dims(), manifest.height, manifest.width),
            ));
        }
        if s.label != entry.label || s.enhancement != entry.enhancement {
            return Err(Error::format(entry.file.clone(), "label or enhancement differs from manifest"));
        }
        samples.push(s);
    }
    Ok((manifest, samples))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold partition: each class is shuffled and dealt round-robin,
/// continuing where the previous class stopped, so fold sizes differ by at most one.
pub fn kfold_split(labels: &[Class], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > labels.len() {
        return Err(Error::config(format!("fold count {k} must lie in [2, {}]", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests = vec![Vec::new(); k];
    let mut next = 0;
    for class in Class::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            tests[next].push(i);
            next = (next + 1) % k;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len()).filter(|i| test.binary_search(i).is_err()).collect();
            Fold { train, test }
        })
        .collect())
}
