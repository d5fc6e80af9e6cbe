//! Training loop for the baseline classifier and the full detector.
//!
//! Every random draw comes from a stream keyed by `(seed, purpose, epoch,
//! step, slot)`, so a run is reproducible bit for bit in single-threaded
//! mode. With `jobs > 1` batches are prepared one step ahead on a worker
//! thread; the prepared data is identical, only the scheduling differs.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig, PixelBox};
use crate::detection::{match_anchors, DetectionTargets};
use crate::iil::FeatureRecord;
use crate::image_ops::Image;
use crate::losses::{classification_loss, confidence_loss, location_loss, total_loss, LossBreakdown, LossWeights};
use crate::metrics::{evaluate, EvalRecord, Metrics};
use crate::mfs::{synthesize, ArtifactAnnotation, Label, MfsConfig};
use crate::network::{write_checkpoint, Checkpoint, InputStats, Model, NetworkConfig, OutputGrads, Tensor};
use crate::procgen::{Dataset, SPLIT_TRAIN, SPLIT_VAL};
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Plain binary classifier: no detection loss, heads receive no gradient.
    Vbc,
    /// Classifier plus the artifact detection loss.
    Caddm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// `(first epoch, learning rate)` pairs in ascending epoch order.
    pub lr_schedule: Vec<(usize, f64)>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub mode: Mode,
    pub augment: AugmentConfig,
    pub mfs_enabled: bool,
    /// Fraction of fake samples regenerated by MFS; the rest keep their
    /// original image and box.
    pub mfs_probability: f64,
    pub mfs: MfsConfig,
    pub network: NetworkConfig,
    pub adam: AdamConfig,
    /// Run validation after every epoch and keep the best checkpoint.
    pub validate: bool,
    /// Worker threads for data preparation; 1 is the deterministic reference.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            steps_per_epoch: 100,
            lr_schedule: vec![(0, 3.6e-3), (10, 1e-3), (20, 5e-4)],
            alpha: 1.0,
            beta: 0.1,
            seed: 0,
            mode: Mode::Caddm,
            augment: AugmentConfig::default(),
            mfs_enabled: true,
            mfs_probability: 0.5,
            mfs: MfsConfig::default(),
            network: NetworkConfig::default(),
            adam: AdamConfig::default(),
            validate: true,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    /// The baseline: binary classifier on raw fakes.
    pub fn vbc() -> Self {
        Self {
            mode: Mode::Vbc,
            beta: 0.0,
            mfs_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.jobs == 0 {
            return Err(Error::invalid("batch_size, steps_per_epoch and jobs must be positive"));
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return Err(Error::invalid("lr_schedule must start at epoch 0"));
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("lr_schedule epochs must increase"));
        }
        if self.lr_schedule.iter().any(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mfs_probability) {
            return Err(Error::invalid("mfs_probability must be in [0, 1]"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid("alpha and beta must be non-negative"));
        }
        if self.mode == Mode::Vbc && self.beta != 0.0 {
            return Err(Error::invalid("mode vbc requires beta = 0"));
        }
        self.augment.validate()?;
        self.mfs.validate()?;
        self.network.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map(|(_, lr)| *lr)
            .unwrap_or(self.lr_schedule[0].1)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// One training example ready for the network.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub label: Label,
    pub targets: DetectionTargets,
    /// Index of the annotation the sample came from.
    pub record: usize,
}

/// Pixel boxes to normalised corners, dropping degenerate ones.
fn normalized(boxes: &[PixelBox], size: usize) -> Vec<[f64; 4]> {
    let s = size as f64;
    boxes
        .iter()
        .filter(|b| b[2] > b[0] && b[3] > b[1])
        .map(|b| [b[0] / s, b[1] / s, b[2] / s, b[3] / s])
        .collect()
}

/// Image and boxes for one annotation before augmentation: genuine images
/// as they are, fakes either regenerated by MFS or with their recorded box.
pub fn source_sample(
    ds: &Dataset,
    rec: &ArtifactAnnotation,
    cfg: &TrainConfig,
    rng: &mut crate::rng::Rng,
) -> Result<(Image, Label, Vec<PixelBox>)> {
    let img = ds.image(&rec.image_path)?;
    let boxes = |b: &[[u32; 4]]| -> Vec<PixelBox> { b.iter().map(|b| b.map(f64::from)).collect() };
    if rec.label == Label::Genuine {
        return Ok((img.clone(), Label::Genuine, Vec::new()));
    }
    if cfg.mfs_enabled && rng.random_bool(cfg.mfs_probability) {
        if let Some(src) = &rec.source_path {
            let out = synthesize(img, ds.image(src)?, &cfg.mfs, rng)?;
            return Ok((out.image, out.label, boxes(&out.artifact_boxes)));
        }
    }
    Ok((img.clone(), Label::Fake, boxes(&rec.artifact_boxes)))
}

/// Record indices for `step`: uniform draws from the training split.
pub fn batch_indices(cfg: &TrainConfig, n_records: usize, epoch: usize, step: usize) -> Vec<usize> {
    let mut rng = stream(cfg.seed, &[10, epoch as u64, step as u64]);
    (0..cfg.batch_size).map(|_| rng.random_range(0..n_records)).collect()
}

/// Builds the samples of one step.
pub fn prepare_batch(
    ds: &Dataset,
    model_stats: &Model,
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<Vec<Sample>> {
    let records = ds.split(SPLIT_TRAIN);
    if records.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    batch_indices(cfg, records.len(), epoch, step)
        .into_iter()
        .enumerate()
        .map(|(slot, idx)| {
            // MFS draws depend on (epoch, record): a fresh window per epoch.
            let mut mfs_rng = stream(cfg.seed, &[11, epoch as u64, idx as u64]);
            let (img, label, boxes) = source_sample(ds, &records[idx], cfg, &mut mfs_rng)?;
            let mut aug_rng = stream(cfg.seed, &[12, epoch as u64, step as u64, slot as u64]);
            let (img, boxes) = augment(&img, &boxes, &cfg.augment, &mut aug_rng)?;
            let gt = if label == Label::Fake {
                normalized(&boxes, cfg.augment.output_size)
            } else {
                Vec::new()
            };
            Ok(Sample {
                input: model_stats.prepare(&img)?,
                label,
                targets: match_anchors(&model_stats.anchors, &gt)?,
                record: idx,
            })
        })
        .collect()
}

/// Forward and backward over a batch. Gradients of the batch loss are
/// accumulated into the model (call `zero_grad` first). The batch loss is
/// the mean over images of the per-image composite loss; the breakdown
/// reports mean `cls` and `det`, summed `conf`/`loc` and total counts.
/// The second value lists batch slots whose loss was not finite.
pub fn batch_loss_and_grad(
    model: &mut Model,
    batch: &[Sample],
    weights: LossWeights,
    mode: Mode,
) -> Result<(LossBreakdown, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = batch.len() as f64;
    let detect = mode == Mode::Caddm;
    let mut sum = LossBreakdown::default();
    let mut bad = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        let (out, cache) = model.forward(&s.input)?;
        let (c, gc) = classification_loss(&out.image_logits, s.label.index());
        let mut grads = OutputGrads {
            image_logits: [gc[0] / b, gc[1] / b],
            ..OutputGrads::default()
        };
        let lb = if detect {
            let cl = confidence_loss(&out.anchor_class_logits, &s.targets);
            let (l, gl) = location_loss(&out.anchor_offsets, &s.targets);
            let lb = total_loss(c, cl.loss, l, cl.n_positives, cl.n_mined_negatives, weights);
            let denom = if cl.n_positives > 0 {
                cl.n_positives
            } else {
                cl.n_mined_negatives.max(1)
            } as f64;
            let k = weights.beta / (denom * b);
            let ka = if cl.n_positives > 0 { k * weights.alpha } else { 0.0 };
            grads.anchor_class = Some(cl.grad.iter().map(|g| [g[0] * k, g[1] * k]).collect());
            grads.anchor_offsets = Some(gl.iter().map(|g| g.map(|v| v * ka)).collect());
            lb
        } else {
            total_loss(
                c,
                0.0,
                0.0,
                0,
                0,
                LossWeights {
                    alpha: weights.alpha,
                    beta: 0.0,
                },
            )
        };
        if !lb.total.is_finite() {
            bad.push(i);
            continue;
        }
        sum.total += lb.total / b;
        sum.cls += lb.cls / b;
        sum.det += lb.det / b;
        sum.conf += lb.conf;
        sum.loc += lb.loc;
        sum.n_positives += lb.n_positives;
        sum.n_mined_negatives += lb.n_mined_negatives;
        model.backward(&out, &cache, &grads);
    }
    Ok((sum, bad))
}

/// Adam state for every parameter tensor, in `params_mut` order.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &mut Model, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.value.len()).collect();
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        for ((p, m), v) in model.params_mut().into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogEntry {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        total: f64,
        cls: f64,
        conf: f64,
        loc: f64,
        det: f64,
        n_positives: usize,
        n_mined_negatives: usize,
        /// Images in the batch with at least one positive anchor.
        images_with_positive: usize,
        /// Squared gradient norm of the detection-head parameters.
        head_grad_sq: f64,
    },
    Epoch {
        epoch: usize,
        val: Option<Metrics>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub best: Option<(usize, f64)>,
    pub log: Vec<LogEntry>,
    pub final_checkpoint: Checkpoint,
}

/// Where a run writes its artifacts; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct RunPaths {
    pub dir: Option<PathBuf>,
}

impl RunPaths {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }
    pub const LOG: &'static str = "train_log.jsonl";
    pub const FINAL: &'static str = "final.ckpt";
    pub const BEST: &'static str = "best.ckpt";
}

struct LogSink {
    file: Option<(std::fs::File, PathBuf)>,
    entries: Vec<LogEntry>,
}

impl LogSink {
    fn open(paths: &RunPaths) -> Result<Self> {
        let file = match &paths.dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join(RunPaths::LOG);
                Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        Ok(Self {
            file,
            entries: Vec::new(),
        })
    }

    fn emit(&mut self, entry: LogEntry) -> Result<()> {
        if let Some((f, p)) = &mut self.file {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(p.as_path(), e))?;
        }
        self.entries.push(entry);
        Ok(())
    }
}

fn checkpoint_meta(cfg: &TrainConfig, epoch: usize) -> serde_json::Map<String, serde_json::Value> {
    let mut meta = serde_json::Map::new();
    meta.insert("mode".into(), serde_json::to_value(cfg.mode).expect("mode"));
    meta.insert("epoch".into(), epoch.into());
    meta.insert("mfs_enabled".into(), cfg.mfs_enabled.into());
    meta
}

fn head_grad_sq(model: &mut Model) -> f64 {
    model
        .params_mut()
        .iter()
        .filter(|p| Model::is_head_param(&p.name))
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
        .sum()
}

/// Initial model with input statistics from the training images.
pub fn initial_model(ds: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    let mut model = Model::new(cfg.network.clone(), &mut stream(cfg.seed, &[1]))?;
    let images: Vec<&Image> = ds
        .split(SPLIT_TRAIN)
        .iter()
        .map(|r| ds.image(&r.image_path))
        .collect::<Result<_>>()?;
    model.stats = InputStats::from_images(images);
    Ok(model)
}

/// Trains on `ds` and returns the final model. Writes the log and the
/// final/best checkpoints when `paths.dir` is set.
pub fn train(ds: &Dataset, cfg: &TrainConfig, paths: &RunPaths) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = initial_model(ds, cfg)?;
    let mut adam = Adam::new(&mut model, cfg.adam);
    let mut log = LogSink::open(paths)?;
    let has_val = cfg.validate && !ds.split(SPLIT_VAL).is_empty();
    let mut best: Option<(usize, f64)> = None;
    let weights = cfg.weights();
    let schedule: Vec<(usize, usize)> = (0..cfg.epochs)
        .flat_map(|e| (0..cfg.steps_per_epoch).map(move |s| (e, s)))
        .collect();

    let mut run_step =
        |model: &mut Model, epoch: usize, step: usize, batch: Vec<Sample>, log: &mut LogSink| -> Result<()> {
            model.zero_grad();
            let (lb, bad) = batch_loss_and_grad(model, &batch, weights, cfg.mode)?;
            if !bad.is_empty() || !lb.total.is_finite() {
                let indices = if bad.is_empty() {
                    batch.iter().map(|s| s.record).collect()
                } else {
                    bad.iter().map(|&i| batch[i].record).collect()
                };
                return Err(Error::NonFiniteLoss {
                    step: epoch * cfg.steps_per_epoch + step,
                    indices,
                });
            }
            let hg = head_grad_sq(model);
            let lr = cfg.lr_at(epoch);
            adam.step(model, lr);
            log.emit(LogEntry::Step {
                epoch,
                step,
                lr,
                total: lb.total,
                cls: lb.cls,
                conf: lb.conf,
                loc: lb.loc,
                det: lb.det,
                n_positives: lb.n_positives,
                n_mined_negatives: lb.n_mined_negatives,
                images_with_positive: batch.iter().filter(|s| s.targets.n_positives() > 0).count(),
                head_grad_sq: hg,
            })
        };

    let stats_model = model.clone();
    let mut end_of_epoch = |model: &Model, epoch: usize, log: &mut LogSink| -> Result<()> {
        let val = if has_val {
            Some(evaluate(&score_split(model, ds, SPLIT_VAL)?)?)
        } else {
            None
        };
        if let Some(auc) = val.as_ref().and_then(|m| m.frame_auc) {
            if best.is_none_or(|(_, b)| auc > b) {
                best = Some((epoch, auc));
                if let Some(d) = &paths.dir {
                    let ck = Checkpoint::from_model(model, cfg.seed, checkpoint_meta(cfg, epoch));
                    write_checkpoint(d.join(RunPaths::BEST), &ck)?;
                }
            }
        }
        log.emit(LogEntry::Epoch { epoch, val })
    };

    if cfg.jobs <= 1 {
        for &(epoch, step) in &schedule {
            let batch = prepare_batch(ds, &stats_model, cfg, epoch, step)?;
            run_step(&mut model, epoch, step, batch, &mut log)?;
            if step + 1 == cfg.steps_per_epoch {
                end_of_epoch(&model, epoch, &mut log)?;
            }
        }
    } else {
        // Data preparation runs one bounded step ahead of the updater.
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Vec<Sample>>>(cfg.jobs);
            let sched = &schedule;
            let sm = &stats_model;
            scope.spawn(move || {
                for &(epoch, step) in sched {
                    if tx.send(prepare_batch(ds, sm, cfg, epoch, step)).is_err() {
                        break;
                    }
                }
            });
            for &(epoch, step) in &schedule {
                let batch = rx.recv().map_err(|_| Error::invalid("data worker stopped"))??;
                run_step(&mut model, epoch, step, batch, &mut log)?;
                if step + 1 == cfg.steps_per_epoch {
                    end_of_epoch(&model, epoch, &mut log)?;
                }
            }
            Ok(())
        })?;
    }

    let final_checkpoint = Checkpoint::from_model(&model, cfg.seed, checkpoint_meta(cfg, cfg.epochs));
    if let Some(d) = &paths.dir {
        write_checkpoint(d.join(RunPaths::FINAL), &final_checkpoint)?;
    }
    Ok(TrainOutcome {
        model,
        best,
        log: log.entries,
        final_checkpoint,
    })
}

/// Scores every record of `split`; group ids are video directories.
pub fn score_split(model: &Model, ds: &Dataset, split: &str) -> Result<Vec<EvalRecord>> {
    ds.split(split)
        .iter()
        .map(|r| {
            let out = model.forward_image(ds.image(&r.image_path)?)?;
            Ok(EvalRecord::new(
                out.fake_probability(),
                r.label.index() as u8,
                Some(r.group_id()),
            ))
        })
        .collect()
}

/// Pre-classifier embeddings of every record in `splits`, tagged with the
/// record's identity.
pub fn extract_features(model: &Model, ds: &Dataset, splits: &[&str]) -> Result<Vec<FeatureRecord>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for split in splits {
        for r in ds.split(split) {
            if !seen.insert(r.image_path.clone()) {
                continue;
            }
            let e = model.forward_image(ds.image(&r.image_path)?)?;
            out.push(FeatureRecord {
                feature: e.embedding,
                identity: r.identity.clone(),
                label: r.label,
            });
        }
    }
    Ok(out)
}

/// Smoothed loss at the start and end of a step log (window of `w` steps).
pub fn smoothed_loss_ends(log: &[LogEntry], w: usize) -> Option<(f64, f64)> {
    let totals: Vec<f64> = log
        .iter()
        .filter_map(|e| match e {
            LogEntry::Step { total, .. } => Some(*total),
            _ => None,
        })
        .collect();
    if totals.is_empty() {
        return None;
    }
    let w = w.clamp(1, totals.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&totals[..w]), mean(&totals[totals.len() - w..])))
}

/// Fraction of logged steps whose batch had at least one positive anchor.
pub fn positive_step_fraction(log: &[LogEntry]) -> f64 {
    let mut steps = 0;
    let mut hits = 0;
    for e in log {
        if let LogEntry::Step { n_positives, .. } = e {
            steps += 1;
            hits += usize::from(*n_positives > 0);
        }
    }
    if steps == 0 {
        0.0
    } else {
        hits as f64 / steps as f64
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
