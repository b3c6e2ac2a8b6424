//! Adversarial multi-task training, cross-validation and experiment tables.

mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use report::{
    Aggregate, CrossValReport, ExperimentTable, FoldReport, MetricSummary, TableRow, Timing, ABSENT,
};

use crate::error::{Error, Result};
use crate::losses::{self, LossTerms, LossWeights, TermSwitches};
use crate::metrics::{self, mean_std, ConfusionMatrix, MeanStd};
use crate::model::checkpoint::Checkpoint;
use crate::model::{forward, tdd_discriminate, Discriminator, Model, ModelConfig, Prepared, Tasks, INTENSITY_MAX, TDD_SLOTS};
use crate::phantom::{kfold_split, Class, Fold, PHASES};
use crate::tensor::nn::{apply_bn_updates, Ctx, NormMode};
use crate::tensor::{AdamConfig, AdamState, Buffers, Gradients, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub k: usize,
    /// Discriminator learning rate; `None` uses `lr`.
    pub disc_lr: Option<f64>,
    /// Normalisation statistics used at evaluation time.
    pub eval_norm: NormMode,
    /// Fraction of the final epochs over which both learning rates follow a
    /// half-cosine down to zero; 0 keeps them constant.
    pub lr_decay_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-4,
            batch_size: 1,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            k: 5,
            disc_lr: None,
            eval_norm: NormMode::BatchStats,
            lr_decay_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        for (name, lr) in [("lr", Some(self.lr)), ("disc_lr", self.disc_lr)] {
            if let Some(lr) = lr {
                if !(lr.is_finite() && lr > 0.0) {
                    return Err(Error::config(format!("{name} = {lr} must be positive")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.lr_decay_fraction) {
            return Err(Error::config(format!(
                "lr_decay_fraction = {} must lie in [0, 1]",
                self.lr_decay_fraction
            )));
        }
        if self.k < 2 {
            return Err(Error::config(format!("fold count {} must be at least 2", self.k)));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Learning-rate multiplier for the epoch with zero-based index `epoch`.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        let total = self.epochs as f64;
        let start = total * (1.0 - self.lr_decay_fraction);
        let e = epoch as f64;
        if self.lr_decay_fraction == 0.0 || e < start {
            return 1.0;
        }
        0.5 * (1.0 + (std::f64::consts::PI * (e - start) / (total - start)).cos())
    }

    pub fn switches(&self) -> TermSwitches {
        let m = &self.model;
        TermSwitches {
            seg: m.tasks.seg,
            reg: m.tasks.reg,
            cls: m.tasks.cls,
            tim: m.tim_active(),
            adv: m.tdd_active(),
        }
    }
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(tag))
}

const TAG_MODEL: u64 = 1;
const TAG_DISC: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_FOLD: u64 = 4;

/// Batch-mean loss values of one step; `None` for terms the configuration lacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub seg: Option<f64>,
    pub reg: Option<f64>,
    pub cls: Option<f64>,
    pub tim: Option<f64>,
    /// Generator adversarial term `-ln D(fake)`.
    pub adv: Option<f64>,
    /// Discriminator loss before its update.
    pub disc: Option<f64>,
    /// Weighted generator objective.
    pub total: f64,
}

impl StepLosses {
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = [
            ("seg", self.seg),
            ("reg", self.reg),
            ("cls", self.cls),
            ("tim", self.tim),
            ("adv", self.adv),
            ("disc", self.disc),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect();
        out.push(("total", self.total));
        out
    }
}

fn finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical {
            term: term.to_string(),
            value,
        })
    }
}

/// Discriminator input for a real pair: enhancement / 255 and the one-hot label.
pub fn real_pair(sample: &Prepared) -> [f64; TDD_SLOTS] {
    let mut y = [0.0; TDD_SLOTS];
    for (d, e) in y.iter_mut().zip(sample.enhancement) {
        *d = e / INTENSITY_MAX;
    }
    y[PHASES + sample.label] = 1.0;
    y
}

/// Points at which [`Trainer::train_step_observed`] reports progress.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepPhase {
    Start,
    /// After the discriminator update; skipped when the discriminator is inactive.
    Discriminator,
    Generator,
}

/// Generator, discriminator and both optimisers.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub disc: Discriminator,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub epochs_done: usize,
    weights: LossWeights,
}

struct Pending {
    graph: Graph,
    fake: Option<Var>,
    terms: LossTerms,
    values: [Option<f64>; 4],
    bn: Vec<crate::tensor::nn::BnUpdate>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let model = Model::new(config.model.clone(), derive_seed(config.seed, TAG_MODEL))?;
        let disc = Discriminator::new(config.model.tdd, derive_seed(config.seed, TAG_DISC))?;
        Ok(Trainer::assemble(config, model, disc, None, None, 0))
    }

    fn assemble(
        config: TrainConfig,
        model: Model,
        disc: Discriminator,
        opt_g: Option<AdamState>,
        opt_d: Option<AdamState>,
        epochs_done: usize,
    ) -> Trainer {
        let weights = config.weights.effective(&config.switches());
        let opt_g = opt_g.unwrap_or_else(|| AdamState::new(AdamConfig::with_lr(config.lr), &model.params));
        let d_lr = config.disc_lr.unwrap_or(config.lr);
        let opt_d = opt_d.unwrap_or_else(|| AdamState::new(AdamConfig::with_lr(d_lr), &disc.params));
        Trainer {
            config,
            model,
            disc,
            opt_g,
            opt_d,
            epochs_done,
            weights,
        }
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ck: Checkpoint) -> Result<Trainer> {
        config.validate()?;
        if ck.model.config != config.model {
            return Err(Error::compat("model_config", "checkpoint was trained with a different model configuration"));
        }
        Ok(Trainer::assemble(config, ck.model, ck.disc, ck.opt_g, ck.opt_d, ck.epochs_done))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            disc: self.disc.clone(),
            opt_g: Some(self.opt_g.clone()),
            opt_d: Some(self.opt_d.clone()),
            epochs_done: self.epochs_done,
            seed: Some(self.config.seed),
            holdout: Vec::new(),
        }
    }

    /// Loss weights after disabled terms are zeroed.
    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// One optimisation step over `batch`: a discriminator update on detached
    /// generator outputs (when the discriminator is active), then a generator
    /// update. Gradients are averaged over the batch.
    pub fn train_step(&mut self, batch: &[&Prepared]) -> Result<StepLosses> {
        self.train_step_observed(batch, |_, _, _| {})
    }

    /// [`Trainer::train_step`] with `hook` called before the step and after
    /// each network's update.
    pub fn train_step_observed(
        &mut self,
        batch: &[&Prepared],
        mut hook: impl FnMut(StepPhase, &Model, &Discriminator),
    ) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let Trainer {
            model,
            disc,
            opt_g,
            opt_d,
            weights,
            ..
        } = self;
        hook(StepPhase::Start, model, disc);
        let cfg = &model.config;
        let adv = cfg.tdd_active();
        let n = batch.len() as f64;

        let mut pending = Vec::with_capacity(batch.len());
        for s in batch {
            let mut ctx = Ctx::new(&model.params, &model.buffers, NormMode::Train);
            let f = forward(&mut ctx, cfg, s)?;
            let g = &mut ctx.graph;
            let target = g.constant_vec(&[PHASES], s.enhancement.to_vec());
            let mut terms = LossTerms::default();
            if let Some(p) = f.seg_prob {
                terms.seg = Some(losses::seg_loss(g, p, &s.mask)?);
            }
            if let Some(r) = f.reg {
                terms.reg = Some(losses::reg_loss(g, r, target)?);
            }
            if let Some(c) = f.cls_logits {
                terms.cls = Some(losses::cls_loss_logits(g, c, s.label)?);
            }
            if let Some(y) = f.y_si {
                terms.tim = Some(losses::tim_loss(g, y, target)?);
            }
            let fake = match (adv, f.reg, f.cls_prob) {
                (true, Some(r), Some(c)) => {
                    let r = g.scale(r, 1.0 / INTENSITY_MAX);
                    Some(g.concat(&[r, c], &[TDD_SLOTS])?)
                }
                _ => None,
            };
            let mut values = [None; 4];
            for (slot, (name, t)) in values.iter_mut().zip(terms.named()) {
                if let Some(t) = t {
                    *slot = Some(finite(name, g.scalar(t))?);
                }
            }
            pending.push(Pending {
                graph: ctx.graph,
                fake,
                terms,
                values,
                bn: ctx.bn_updates,
            });
        }

        let tdd_cfg = disc.config;
        let no_buffers = Buffers::default();
        let mut disc_loss = None;
        if adv {
            disc.params.zero_grads();
            let mut sum = 0.0;
            for (s, p) in batch.iter().zip(&pending) {
                let fake_values = p.graph.value(p.fake.expect("adversarial pair")).to_vec();
                let mut ctx = Ctx::new(&disc.params, &no_buffers, NormMode::Train);
                let real = ctx.graph.constant_vec(&[TDD_SLOTS], real_pair(s).to_vec());
                let fake = ctx.graph.constant_vec(&[TDD_SLOTS], fake_values);
                let d_real = tdd_discriminate(&mut ctx, &tdd_cfg, real)?;
                let d_fake = tdd_discriminate(&mut ctx, &tdd_cfg, fake)?;
                let ld = losses::discriminator_loss(&mut ctx.graph, d_real, d_fake)?;
                sum += finite("disc", ctx.graph.scalar(ld))?;
                let grads = ctx.graph.backward(ld)?;
                let graph = ctx.graph;
                disc.params.accumulate_grads(&graph, &grads);
            }
            disc.params.scale_grads(1.0 / n);
            opt_d.step(&mut disc.params)?;
            disc_loss = Some(sum / n);
            hook(StepPhase::Discriminator, model, disc);
        }

        let mut sums = [0.0; 5];
        let mut total_sum = 0.0;
        let mut results: Vec<(Graph, Gradients)> = Vec::with_capacity(batch.len());
        let mut bn_updates = Vec::new();
        for mut p in pending {
            let mut terms = p.terms;
            let mut adv_value = None;
            if let Some(fake) = p.fake {
                let (value, slope) = generator_adv_grad(disc, &tdd_cfg, p.graph.value(fake))?;
                adv_value = Some(finite("adv", value)?);
                let g = &mut p.graph;
                let c = g.constant_vec(&[TDD_SLOTS], slope);
                let prod = g.mul(fake, c)?;
                terms.adv = Some(g.sum(prod));
            }
            let loss = losses::total_generator_loss(&mut p.graph, &terms, weights)?;
            let mut total = 0.0;
            for (i, ((_, w), v)) in weights.named().into_iter().zip(p.values.iter().chain([&adv_value])).enumerate() {
                if let Some(v) = v {
                    sums[i] += v;
                    total += w * v;
                }
            }
            total_sum += finite("total", total)?;
            let grads = p.graph.backward(loss)?;
            results.push((p.graph, grads));
            bn_updates.extend(p.bn);
        }
        model.params.zero_grads();
        for (graph, grads) in &results {
            model.params.accumulate_grads(graph, grads);
        }
        model.params.scale_grads(1.0 / n);
        opt_g.step(&mut model.params)?;
        apply_bn_updates(&mut model.buffers, &bn_updates);
        hook(StepPhase::Generator, model, disc);

        let sw = self.config.switches();
        let mean = |on: bool, i: usize| on.then_some(sums[i] / n);
        Ok(StepLosses {
            seg: mean(sw.seg, 0),
            reg: mean(sw.reg, 1),
            cls: mean(sw.cls, 2),
            tim: mean(sw.tim, 3),
            adv: mean(sw.adv, 4),
            disc: disc_loss,
            total: total_sum / n,
        })
    }

    /// Trains one epoch over `indices` of `data` in a seeded shuffled order and
    /// returns the epoch-mean of every reported term.
    pub fn train_epoch(&mut self, data: &[Prepared], indices: &[usize]) -> Result<BTreeMap<&'static str, f64>> {
        if indices.is_empty() {
            return Err(Error::contract("no training samples"));
        }
        let mut order = indices.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            derive_seed(self.config.seed, TAG_SHUFFLE),
            self.epochs_done as u64,
        ));
        order.shuffle(&mut rng);
        let factor = self.config.lr_factor(self.epochs_done);
        self.opt_g.config.lr = self.config.lr * factor;
        self.opt_d.config.lr = self.config.disc_lr.unwrap_or(self.config.lr) * factor;
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let losses = self.train_step(&batch)?;
            for (name, v) in losses.named() {
                *sums.entry(name).or_insert(0.0) += v;
            }
            steps += 1;
        }
        self.epochs_done += 1;
        sums.values_mut().for_each(|v| *v /= steps as f64);
        Ok(sums)
    }
}

/// `-ln D(fake)` and its gradient with respect to the six discriminator inputs.
fn generator_adv_grad(
    disc: &Discriminator,
    cfg: &crate::model::TddConfig,
    fake: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let no_buffers = Buffers::default();
    let mut ctx = Ctx::new(&disc.params, &no_buffers, NormMode::Train);
    let y = ctx
        .graph
        .input(&Tensor::from_vec(fake.to_vec())?.with_requires_grad(true));
    let d = tdd_discriminate(&mut ctx, cfg, y)?;
    let lg = losses::generator_adv_loss(&mut ctx.graph, d);
    let grads = ctx.graph.backward(lg)?;
    let slope = grads
        .get(y)
        .map(<[f64]>::to_vec)
        .ok_or_else(|| Error::contract("discriminator input received no gradient"))?;
    Ok((ctx.graph.scalar(lg), slope))
}

/// Per-sample evaluation results.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub index: usize,
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
    pub mae: Option<f64>,
    pub prob: Option<[f64; 2]>,
    pub mask: Option<Vec<bool>>,
}

/// Runs the model on `indices` and scores every enabled task.
pub fn evaluate(model: &Model, data: &[Prepared], indices: &[usize], mode: NormMode) -> Result<(MetricSummary, Vec<SampleResult>)> {
    if indices.is_empty() {
        return Err(Error::contract("no samples to evaluate"));
    }
    let tasks = model.config.tasks;
    let mut results = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = data
            .get(i)
            .ok_or_else(|| Error::contract(format!("sample index {i} out of range")))?;
        let out = model.predict(s, mode)?;
        let mut r = SampleResult {
            index: i,
            dsc: None,
            iou: None,
            mae: None,
            prob: out.cls_prob,
            mask: None,
        };
        if let Some(p) = &out.seg_prob {
            let pred = metrics::binarise(p.values());
            let gt = metrics::mask_from_values(&s.mask);
            r.dsc = Some(metrics::dsc(&pred, &gt)?);
            r.iou = Some(metrics::iou(&pred, &gt)?);
            r.mask = Some(pred);
        }
        if let Some(y) = out.reg {
            r.mae = Some(finite("reg", metrics::mae(&y, &s.enhancement)?)?);
        }
        results.push(r);
    }
    let collect = |f: fn(&SampleResult) -> Option<f64>| -> Option<MeanStd> {
        let v: Vec<f64> = results.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| mean_std(&v))
    };
    let mut summary = MetricSummary {
        samples: results.len(),
        dsc: collect(|r| r.dsc).filter(|_| tasks.seg),
        iou: collect(|r| r.iou).filter(|_| tasks.seg),
        mae: collect(|r| r.mae).filter(|_| tasks.reg),
        ..MetricSummary::default()
    };
    if tasks.cls {
        let probs: Vec<[f64; 2]> = results.iter().filter_map(|r| r.prob).collect();
        let labels: Vec<usize> = indices.iter().map(|&i| data[i].label).collect();
        let (acc, cm) = metrics::classify_metrics(&probs, &labels)?;
        summary.accuracy = Some(acc);
        summary.confusion = Some(cm);
        summary.confusion_percent = Some(cm.row_percentages());
    }
    Ok((summary, results))
}

/// Trains a fresh model on `fold.train` and evaluates it on `fold.test`.
/// The final weights are rounded to checkpoint precision before evaluation.
pub fn run_fold(data: &[Prepared], fold_index: usize, fold: &Fold, config: &TrainConfig) -> Result<(FoldReport, Trainer)> {
    if fold.train.iter().any(|i| fold.test.contains(i)) {
        return Err(Error::contract("train and test partitions overlap"));
    }
    let mut fold_config = config.clone();
    fold_config.seed = derive_seed(config.seed, TAG_FOLD + fold_index as u64);
    let mut trainer = Trainer::new(fold_config)?;
    let mut trace: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let means = trainer.train_epoch(data, &fold.train)?;
        steps += fold.train.len().div_ceil(config.batch_size);
        for (name, v) in means {
            trace.entry(name.to_string()).or_default().push(v);
        }
        log::info!(
            "fold {fold_index} epoch {}/{}: total {:.4}",
            epoch + 1,
            config.epochs,
            trace["total"].last().copied().unwrap_or(f64::NAN)
        );
    }
    trainer.model.round_to_f32();
    let (test, _) = evaluate(&trainer.model, data, &fold.test, config.eval_norm)?;
    // The trainer keeps its per-fold seed; report the caller's configuration.
    trainer.config.seed = config.seed;
    Ok((
        FoldReport {
            fold: fold_index,
            train_size: fold.train.len(),
            test_size: fold.test.len(),
            steps,
            loss_trace: trace,
            test,
        },
        trainer,
    ))
}

pub fn aggregate(folds: &[FoldReport]) -> Aggregate {
    let over = |f: fn(&FoldReport) -> Option<f64>| -> Option<MeanStd> {
        let v: Option<Vec<f64>> = folds.iter().map(f).collect();
        v.filter(|v| !v.is_empty()).map(|v| mean_std(&v))
    };
    let confusion = folds.iter().try_fold(ConfusionMatrix::default(), |mut acc, f| {
        f.test.confusion.map(|c| {
            acc.merge(&c);
            acc
        })
    });
    Aggregate {
        dsc: over(|f| f.test.dsc.map(|m| m.mean)),
        iou: over(|f| f.test.iou.map(|m| m.mean)),
        mae: over(|f| f.test.mae.map(|m| m.mean)),
        accuracy: over(|f| f.test.accuracy),
        confusion: confusion.filter(|_| !folds.is_empty()),
    }
}

/// Stratified k-fold cross-validation; up to `jobs` folds train concurrently.
/// Fold reports are ordered by fold index regardless of `jobs`.
pub fn cross_validate(data: &[Prepared], config: &TrainConfig, jobs: usize) -> Result<CrossValReport> {
    config.validate()?;
    let start = Instant::now();
    let labels: Vec<Class> = data
        .iter()
        .map(|s| Class::from_index(s.label).ok_or_else(|| Error::contract(format!("label {} out of range", s.label))))
        .collect::<Result<_>>()?;
    let folds = kfold_split(&labels, config.k, config.seed)?;
    let mut results: Vec<Option<Result<(FoldReport, f64)>>> = (0..folds.len()).map(|_| None).collect();
    let jobs = jobs.max(1);
    let run = |i: usize| -> Result<(FoldReport, f64)> {
        let t = Instant::now();
        let (r, _) = run_fold(data, i, &folds[i], config)?;
        Ok((r, t.elapsed().as_secs_f64()))
    };
    if jobs == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run(i));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let cells: Vec<std::sync::Mutex<Option<Result<(FoldReport, f64)>>>> =
            (0..folds.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(folds.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= folds.len() {
                        break;
                    }
                    let r = run(i);
                    *cells[i].lock().expect("fold result lock") = Some(r);
                });
            }
        });
        for (slot, cell) in results.iter_mut().zip(cells) {
            *slot = cell.into_inner().expect("fold result lock");
        }
    }
    let mut reports = Vec::with_capacity(folds.len());
    let mut seconds = Vec::with_capacity(folds.len());
    for r in results {
        let (rep, s) = r.expect("every fold ran")?;
        reports.push(rep);
        seconds.push(s);
    }
    Ok(CrossValReport {
        config: config.clone(),
        aggregate: aggregate(&reports),
        folds: reports,
        timing: Timing {
            fold_seconds: seconds,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// The six architecture variants compared in the ablation table.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let names = ["No MdIEF", "No Spe", "No Spa", "No TIM", "No TDD", "Full"];
    names
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut c = base.clone();
            let a = &mut c.model.ablation;
            match i {
                0 => a.use_mdief = false,
                1 => a.use_spe = false,
                2 => a.use_spa = false,
                3 => a.use_tim = false,
                4 => a.use_tdd = false,
                _ => {}
            }
            (name.to_string(), c)
        })
        .collect()
}

/// Task subsets compared in the synergy table.
pub fn synergy_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [
        ("Seg-only", (true, false, false)),
        ("Seg+Reg", (true, true, false)),
        ("Seg+Cls", (true, false, true)),
        ("Full", (true, true, true)),
    ]
    .into_iter()
    .map(|(name, (seg, reg, cls))| {
        let mut c = base.clone();
        c.model.tasks = Tasks { seg, reg, cls };
        (name.to_string(), c)
    })
    .collect()
}

fn run_table(
    title: &str,
    columns: &[&str],
    variants: Vec<(String, TrainConfig)>,
    data: &[Prepared],
    jobs: usize,
    pick: fn(&Aggregate) -> Vec<Option<MeanStd>>,
) -> Result<ExperimentTable> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (name, config) in variants {
        log::info!("{title}: variant {name}");
        let report = cross_validate(data, &config, jobs)?;
        rows.push(TableRow {
            variant: name,
            values: pick(&report.aggregate),
        });
        reports.push(report);
    }
    Ok(ExperimentTable {
        title: title.to_string(),
        columns: columns.iter().map(|c| c.to_string()).collect(),
        rows,
        reports,
    })
}

/// Cross-validates each ablation variant with the base seeds.
pub fn run_ablation(data: &[Prepared], base: &TrainConfig, jobs: usize) -> Result<ExperimentTable> {
    run_table("Ablation", &["DSC", "IoU", "MAE"], ablation_variants(base), data, jobs, |a| {
        vec![a.dsc, a.iou, a.mae]
    })
}

/// Cross-validates each task subset with the base seeds.
pub fn run_synergy(data: &[Prepared], base: &TrainConfig, jobs: usize) -> Result<ExperimentTable> {
    run_table("Synergy", &["DSC", "MAE", "Accuracy"], synergy_variants(base), data, jobs, |a| {
        vec![a.dsc, a.mae, a.accuracy]
    })
}
