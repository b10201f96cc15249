//! Two-stage training: stage-1 decoupling of content and forgery semantics
//! with self/cross reconstruction, then stage-2 disentangling of common and
//! unique forgery semantics on top of the transferred forgery branch.

mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, CKPT_MAGIC, CKPT_VERSION};

use crate::corpus::{mix_seed, Dataset, PairLoader, PairedBatch};
use crate::error::{Error, Result};
use crate::filters::project_all;
use crate::gradcore::{sgd_step, Tape, Var};
use crate::losses::{contrastive_batch, cross_entropy, l1_loss, sample_tuples, weighted_sum, LossWeights};
use crate::model::{gather_batch, ModelConfig, Stage1Model, Stage2Model};

/// Step size of the full-scale reference setup.
pub const REFERENCE_LR: f64 = 5e-4;
/// Step size for the 32×32 desk configuration, where a few hundred plain
/// SGD steps at the reference rate barely move the weights.
pub const DESK_LR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub model: ModelConfig,
    pub freeze_embedded: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: REFERENCE_LR,
            batch: 16,
            epochs: 10,
            weights: LossWeights::default(),
            seed: 0,
            model: ModelConfig::default(),
            freeze_embedded: true,
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 32×32 model, 10 epochs, `DESK_LR`.
    pub fn desk() -> Self {
        TrainConfig {
            lr: DESK_LR,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch < 2 || !self.batch.is_multiple_of(2) {
            return Err(Error::Config(format!("batch must be even and ≥ 2, got {}", self.batch)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be > 0".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    pub term: String,
    pub value: f64,
}

/// Per-step loss terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    fn push(&mut self, step: u64, epoch: u64, terms: &[(&str, f64)]) {
        for &(term, value) in terms {
            self.rows.push(MetricRow {
                step,
                epoch,
                term: term.to_string(),
                value,
            });
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,term,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:e}", r.step, r.epoch, r.term, r.value);
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn values(&self, term: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.term == term).map(|r| r.value).collect()
    }

    /// Mean of `term` within each epoch, in epoch order.
    pub fn epoch_means(&self, term: &str) -> Vec<f64> {
        let mut out: Vec<(u64, f64, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.term == term) {
            match out.last_mut() {
                Some(last) if last.0 == r.epoch => {
                    last.1 += r.value;
                    last.2 += 1;
                }
                _ => out.push((r.epoch, r.value, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }
}

/// Position-wise pairing: fake `i` with real `i`.
pub fn swap_rows(n: usize) -> Vec<usize> {
    let half = n / 2;
    (0..n).map(|i| if i < half { i + half } else { i - half }).collect()
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item() as f64
}

fn check_finite(terms: &[(&str, f64)]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(Error::Numeric(format!("loss term {name} is {v}"))),
        None => Ok(()),
    }
}

/// One stage-1 update. Returns the logged terms.
pub fn stage1_step(model: &mut Stage1Model, batch: &PairedBatch, cfg: &TrainConfig) -> Result<Vec<(&'static str, f64)>> {
    let w = &cfg.weights;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let xh = tape.constant(batch.highpass.clone());
    let (c, fa) = model.encode(&mut tape, &p, x, xh)?;

    let logits = model.detector.forward(&mut tape, &p, fa)?;
    let cls = cross_entropy(&mut tape, logits, &batch.labels.y)?;

    let recon_self = model.decoder.forward(&mut tape, &p, c, fa)?;
    let rec_self = l1_loss(&mut tape, x, recon_self)?;
    let fa_swapped = gather_batch(&mut tape, fa, &swap_rows(batch.rows.len()))?;
    let recon_cross = model.decoder.forward(&mut tape, &p, c, fa_swapped)?;
    let rec_cross = l1_loss(&mut tape, x, recon_cross)?;
    let rec = weighted_sum(&mut tape, &[(rec_self, 0.5), (rec_cross, 0.5)])?;
    let total = weighted_sum(&mut tape, &[(cls, w.rho1), (rec, w.rho2)])?;

    let terms = vec![
        ("cls", scalar(&tape, cls)),
        ("rec_self", scalar(&tape, rec_self)),
        ("rec_cross", scalar(&tape, rec_cross)),
        ("rec", scalar(&tape, rec)),
        ("total", scalar(&tape, total)),
    ];
    check_finite(&terms)?;
    tape.backward(total)?;
    model.store.collect_grads(&mut tape, &p);
    sgd_step(&mut model.store, cfg.lr as f32)?;
    project_all(&mut model.store);
    Ok(terms)
}

/// One stage-2 update; `rng` drives the contrastive tuple sampler.
pub fn stage2_step(
    model: &mut Stage2Model,
    batch: &PairedBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(&'static str, f64)>> {
    let w = &cfg.weights;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let x = tape.constant(batch.images.clone());
    let xh = tape.constant(batch.highpass.clone());
    let taps = model.encode(&mut tape, &p, x, xh)?;

    let logits_u = model.detector_unique.forward(&mut tape, &p, taps.unique)?;
    let cls_unique = cross_entropy(&mut tape, logits_u, &batch.labels.method)?;
    let logits_c = model.detector_common.forward(&mut tape, &p, taps.common)?;
    let cls_common = cross_entropy(&mut tape, logits_c, &batch.labels.y)?;

    let pooled_u = pooled(&mut tape, taps.unique)?;
    let pooled_c = pooled(&mut tape, taps.common)?;
    let tuples = sample_tuples(&batch.labels, rng);
    let con = contrastive_batch(&mut tape, pooled_u, pooled_c, &tuples, w.margin)?;

    let recon_self = model.decoder.forward(&mut tape, &p, taps.common, taps.unique)?;
    let rec_self = l1_loss(&mut tape, taps.fa, recon_self)?;
    let unique_swapped = gather_batch(&mut tape, taps.unique, &swap_rows(batch.rows.len()))?;
    let recon_cross = model.decoder.forward(&mut tape, &p, taps.common, unique_swapped)?;
    let rec_cross = l1_loss(&mut tape, taps.fa, recon_cross)?;
    let rec = weighted_sum(&mut tape, &[(rec_self, 0.5), (rec_cross, 0.5)])?;

    let mut parts = vec![(cls_unique, w.rho3), (cls_common, w.rho4), (rec, w.rho6)];
    if let Some(con) = con {
        parts.push((con, w.rho5));
    }
    let total = weighted_sum(&mut tape, &parts)?;

    let terms = vec![
        ("cls_unique", scalar(&tape, cls_unique)),
        ("cls_common", scalar(&tape, cls_common)),
        ("con", con.map_or(0.0, |v| scalar(&tape, v))),
        ("rec_self", scalar(&tape, rec_self)),
        ("rec_cross", scalar(&tape, rec_cross)),
        ("rec", scalar(&tape, rec)),
        ("total", scalar(&tape, total)),
    ];
    check_finite(&terms)?;
    tape.backward(total)?;
    model.store.collect_grads(&mut tape, &p);
    sgd_step(&mut model.store, cfg.lr as f32)?;
    project_all(&mut model.store);
    Ok(terms)
}

fn pooled(tape: &mut Tape, x: Var) -> Result<Var> {
    let g = tape.gap(x)?;
    let s = tape.shape(g);
    let (n, c) = (s[0], s[1]);
    tape.reshape(g, &[n, c])
}

/// Outcome of a stage run.
#[derive(Clone, Debug)]
pub struct StageRun<M> {
    pub model: M,
    pub checkpoint: Checkpoint,
    pub metrics: MetricLog,
}

/// Drives the epoch/step loop shared by both stages. On a numeric failure
/// the last good parameters are written to `last_good` when given.
struct Driver<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    loader: PairLoader,
    metrics: MetricLog,
    step: u64,
}

impl<'a> Driver<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a Dataset, stream: u64) -> Result<Self> {
        cfg.validate()?;
        if data.size != cfg.model.image_size {
            return Err(Error::Config(format!(
                "dataset image size {} differs from model image size {}",
                data.size, cfg.model.image_size
            )));
        }
        Ok(Driver {
            cfg,
            data,
            loader: PairLoader::new(data, cfg.batch, mix_seed(cfg.seed, stream, 0))?,
            metrics: MetricLog::default(),
            step: 0,
        })
    }

    fn run(
        &mut self,
        mut step_fn: impl FnMut(&PairedBatch, u64) -> Result<Vec<(&'static str, f64)>>,
        mut save_last_good: impl FnMut(u64, u64) -> Result<()>,
    ) -> Result<()> {
        for epoch in 0..self.cfg.epochs as u64 {
            self.loader.start_epoch(epoch);
            while let Some(batch) = self.loader.next_batch(self.data)? {
                match step_fn(&batch, self.step) {
                    Ok(terms) => self.metrics.push(self.step, epoch, &terms),
                    Err(e @ Error::Numeric(_)) => {
                        log::error!("step {}: {e}; aborting", self.step);
                        save_last_good(self.step, epoch)?;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                }
                self.step += 1;
            }
            let totals = self.metrics.epoch_means("total");
            log::info!("epoch {epoch}: mean total {:.5}", totals.last().copied().unwrap_or(f64::NAN));
        }
        Ok(())
    }
}

fn meta(cfg: &TrainConfig, methods: &[String], step: u64, epoch: u64) -> CheckpointMeta {
    CheckpointMeta {
        config: cfg.clone(),
        methods: methods.to_vec(),
        step,
        epoch,
    }
}

/// Stage 1 over the training images of `data`.
pub fn train_stage1(cfg: &TrainConfig, data: &Dataset, last_good: Option<&Path>) -> Result<StageRun<Stage1Model>> {
    let mut driver = Driver::new(cfg, data, 0x57A1)?;
    let model = std::cell::RefCell::new(Stage1Model::new(&cfg.model, cfg.seed)?);
    driver.run(
        |batch, _| stage1_step(&mut model.borrow_mut(), batch, cfg),
        |step, epoch| save_failure(last_good, 1, &meta(cfg, &data.methods, step, epoch), &model.borrow().store),
    )?;
    let model = model.into_inner();
    let epoch = cfg.epochs as u64;
    Ok(StageRun {
        checkpoint: Checkpoint::from_store(1, meta(cfg, &data.methods, driver.step, epoch), &model.store),
        model,
        metrics: driver.metrics,
    })
}

/// Rebuild a stage-1 model from its checkpoint.
pub fn stage1_from_checkpoint(ckpt: &Checkpoint) -> Result<Stage1Model> {
    ckpt.expect_stage(1)?;
    let mut model = Stage1Model::new(&ckpt.meta.config.model, ckpt.meta.config.seed)?;
    ckpt.restore_into(&mut model.store)?;
    Ok(model)
}

/// A stage-2 model with the embedded branch taken from `stage1`.
pub fn stage2_init(cfg: &TrainConfig, methods: usize, stage1: &Checkpoint) -> Result<Stage2Model> {
    let s1 = stage1_from_checkpoint(stage1).map_err(|e| match e {
        Error::Incompatible(m) => Error::Precondition(format!("stage-2 training needs a stage-1 checkpoint: {m}")),
        other => other,
    })?;
    if s1.cfg != cfg.model {
        return Err(Error::Incompatible("stage-1 checkpoint was trained with a different model config".into()));
    }
    let mut model = Stage2Model::new(&cfg.model, methods, cfg.seed)?;
    model.load_embedded(&s1.store, cfg.freeze_embedded)?;
    Ok(model)
}

/// Stage 2 over the training images of `data`, starting from `stage1`.
pub fn train_stage2(
    cfg: &TrainConfig,
    data: &Dataset,
    stage1: &Checkpoint,
    last_good: Option<&Path>,
) -> Result<StageRun<Stage2Model>> {
    let mut driver = Driver::new(cfg, data, 0x57A2)?;
    let model = std::cell::RefCell::new(stage2_init(cfg, data.methods.len(), stage1)?);
    driver.run(
        |batch, step| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xC0A7, step));
            stage2_step(&mut model.borrow_mut(), batch, cfg, &mut rng)
        },
        |step, epoch| save_failure(last_good, 2, &meta(cfg, &data.methods, step, epoch), &model.borrow().store),
    )?;
    let model = model.into_inner();
    let epoch = cfg.epochs as u64;
    Ok(StageRun {
        checkpoint: Checkpoint::from_store(2, meta(cfg, &data.methods, driver.step, epoch), &model.store),
        model,
        metrics: driver.metrics,
    })
}

/// Rebuild a stage-2 model from its checkpoint.
pub fn stage2_from_checkpoint(ckpt: &Checkpoint) -> Result<Stage2Model> {
    ckpt.expect_stage(2)?;
    let cfg = &ckpt.meta.config;
    let mut model = Stage2Model::new(&cfg.model, ckpt.meta.methods.len(), cfg.seed)?;
    ckpt.restore_into(&mut model.store)?;
    model.mark_loaded(cfg.freeze_embedded);
    Ok(model)
}

fn save_failure(path: Option<&Path>, stage: u8, meta: &CheckpointMeta, store: &crate::gradcore::ParamStore) -> Result<()> {
    if let Some(path) = path {
        Checkpoint::from_store(stage, meta.clone(), store).save(path)?;
        log::error!("last good stage-{stage} parameters written to {}", path.display());
    }
    Ok(())
}
