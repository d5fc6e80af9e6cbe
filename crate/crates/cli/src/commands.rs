use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use caddm::iil::{
    id_linear_probe, id_overlap, read_features, sample_per_identity, write_features, OverlapDistribution, ProbeConfig,
    ProbeReport, RegionMode,
};
use caddm::image_ops::Image;
use caddm::metrics::{evaluate, read_records, write_records};
use caddm::mfs::{synthesize, ArtifactAnnotation, BlendKind, Label, MfsConfig, GLOBAL_BUCKET};
use caddm::network::{read_checkpoint, Model};
use caddm::procgen::{build_dataset, read_annotations, write_annotations, Dataset, DatasetConfig};
use caddm::rng::stream;
use caddm::train::{extract_features, score_split, RunPaths, TrainConfig};

use crate::manifest::{write_atomic, Run};
use crate::Common;

/// Bad config file, unknown key or invalid value: exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?)
}

fn check(r: caddm::Result<()>) -> Result<()> {
    r.map_err(|e| ConfigError(e.to_string()).into())
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = read_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    ckpt.to_model().with_context(|| format!("loading {}", path.display()))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn procgen(common: &Common) -> Result<()> {
    let mut cfg: DatasetConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    check(cfg.validate())?;
    let mut run = Run::start("procgen", &common.out, &cfg, Some(cfg.seed))?;
    let ds = build_dataset(&cfg)?;
    ds.write_to(run.out())?;
    for name in ds.splits.keys() {
        run.output(run.out().join(format!("{name}.jsonl")));
    }
    run.output(run.out().join("manifest.json"));
    let counts: Vec<String> = ds.splits.iter().map(|(k, v)| format!("{k}={}", v.len())).collect();
    println!("procgen: {} images; {}", ds.images.len(), counts.join(" "));
    if ds.manifest.cross_method_empty {
        println!("procgen: every method is used in training; the cross-method split is empty");
    }
    run.finish()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfsRunConfig {
    pub seed: u64,
    pub mfs: MfsConfig,
}

/// Counts reported by `mfs`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MfsSummary {
    pub generated: usize,
    pub skipped: usize,
    /// Keyed by `"<lo>-<hi>"`, with `"global"` for whole-face swaps.
    pub buckets: BTreeMap<String, usize>,
    pub blends: BTreeMap<String, usize>,
    /// Swaps that came out genuine because fake and source were identical.
    pub unchanged: usize,
}

impl MfsSummary {
    fn line(&self) -> String {
        let join =
            |m: &BTreeMap<String, usize>| m.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" ");
        format!(
            "mfs: generated {} skipped {} unchanged {} | buckets {} | blends {}",
            self.generated,
            self.skipped,
            self.unchanged,
            join(&self.buckets),
            join(&self.blends)
        )
    }
}

fn bucket_key(b: [usize; 2]) -> String {
    if b == GLOBAL_BUCKET {
        "global".to_string()
    } else {
        format!("{}-{}", b[0], b[1])
    }
}

enum MfsItem {
    Done(ArtifactAnnotation, Image, [usize; 2], BlendKind),
    Skipped(String),
}

fn mfs_one(i: usize, rec: &ArtifactAnnotation, images: &Path, cfg: &MfsRunConfig) -> MfsItem {
    let Some(src) = &rec.source_path else {
        return MfsItem::Skipped(format!("{}: no source path", rec.image_path));
    };
    let load = |p: &str| Image::load_png(images.join(p)).map_err(|e| format!("{p}: {e}"));
    let (fake, source) = match (load(&rec.image_path), load(src)) {
        (Ok(f), Ok(s)) => (f, s),
        (Err(e), _) | (_, Err(e)) => return MfsItem::Skipped(e),
    };
    let mut rng = stream(cfg.seed, &[i as u64]);
    match synthesize(&fake, &source, &cfg.mfs, &mut rng) {
        Ok(out) => {
            let path = format!("mfs/{i:06}.png");
            let ann = out.annotation(path, rec.identity.clone(), Some(src.clone()));
            MfsItem::Done(ann, out.image, out.bucket, out.blend)
        }
        Err(e) => MfsItem::Skipped(format!("{}: {e}", rec.image_path)),
    }
}

pub fn mfs(annotations: &Path, images: &Path, common: &Common) -> Result<()> {
    let mut cfg: MfsRunConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    check(cfg.mfs.validate())?;
    let records = read_annotations(annotations).with_context(|| format!("reading {}", annotations.display()))?;
    let mut run = Run::start("mfs", &common.out, &cfg, Some(cfg.seed))?;
    run.input(annotations);
    run.input(images);
    let fakes: Vec<(usize, &ArtifactAnnotation)> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == Label::Fake)
        .collect();

    // Every record has its own seed stream, so the split across threads
    // does not change the output.
    let jobs = common.jobs.max(1);
    let chunk = fakes.len().div_ceil(jobs).max(1);
    let items: Vec<MfsItem> = std::thread::scope(|s| {
        let handles: Vec<_> = fakes
            .chunks(chunk)
            .map(|part| {
                s.spawn(|| {
                    part.iter()
                        .map(|(i, r)| mfs_one(*i, r, images, &cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("mfs worker panicked"))
            .collect()
    });

    let mut summary = MfsSummary::default();
    let mut out_records = Vec::new();
    std::fs::create_dir_all(run.out().join("mfs"))?;
    for item in items {
        match item {
            MfsItem::Done(ann, img, bucket, blend) => {
                img.save_png(run.out().join(&ann.image_path))?;
                if ann.label == Label::Genuine {
                    summary.unchanged += 1;
                } else {
                    *summary.buckets.entry(bucket_key(bucket)).or_default() += 1;
                    let key = serde_json::to_value(blend)?.as_str().unwrap_or("unknown").to_string();
                    *summary.blends.entry(key).or_default() += 1;
                }
                summary.generated += 1;
                out_records.push(ann);
            }
            MfsItem::Skipped(why) => {
                eprintln!("warning: skipped {why}");
                summary.skipped += 1;
            }
        }
    }
    let ann_path = run.out().join("mfs.jsonl");
    write_annotations(&ann_path, &out_records)?;
    let summary_path = run.out().join("mfs_summary.json");
    write_atomic(&summary_path, &serde_json::to_vec_pretty(&summary)?)?;
    run.output(ann_path);
    run.output(summary_path);
    println!("{}", summary.line());
    run.finish()?;
    Ok(())
}

pub fn train(data: &Path, common: &Common) -> Result<()> {
    let mut cfg: TrainConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.jobs = common.jobs;
    check(cfg.validate())?;
    let ds = load_dataset(data)?;
    let mut run = Run::start("train", &common.out, &cfg, Some(cfg.seed))?;
    run.input(data);
    let outcome = caddm::train::train(&ds, &cfg, &RunPaths::in_dir(run.out()))?;
    run.output(run.out().join(RunPaths::LOG));
    run.output(run.out().join(RunPaths::FINAL));
    if let Some((epoch, auc)) = outcome.best {
        run.output(run.out().join(RunPaths::BEST));
        println!("train: best val frame AUC {auc:.4} at epoch {epoch}");
    }
    println!(
        "train: {} steps, checkpoint {}",
        cfg.epochs * cfg.steps_per_epoch,
        run.out().join(RunPaths::FINAL).display()
    );
    run.finish()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {}

pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.jsonl";

pub fn eval(
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    split: &str,
    scores: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let cfg: EvalConfig = load_config(common.config.as_deref())?;
    let mut run = Run::start("eval", &common.out, &cfg, None)?;
    let records = match (checkpoint, data, scores) {
        (_, _, Some(s)) => {
            run.input(s);
            read_records(s).with_context(|| format!("reading {}", s.display()))?
        }
        (Some(c), Some(d), None) => {
            run.input(c);
            run.input(d);
            let model = load_model(c)?;
            let ds = load_dataset(d)?;
            if ds.split(split).is_empty() {
                bail!("split {split} is empty or missing");
            }
            let records = score_split(&model, &ds, split)?;
            let p = run.out().join(SCORES_FILE);
            write_records(&p, &records)?;
            run.output(p);
            records
        }
        _ => bail!("eval needs --scores or both --checkpoint and --data"),
    };
    let metrics = evaluate(&records)?;
    let p = run.out().join(METRICS_FILE);
    write_atomic(&p, &serde_json::to_vec_pretty(&metrics)?)?;
    run.output(p);
    println!("eval: {}", serde_json::to_string(&metrics)?);
    run.finish()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IilConfig {
    pub thresholds: Vec<f64>,
    pub mode: RegionMode,
    /// Images per identity, equally spaced, for the overlap count.
    pub samples_per_identity: usize,
    pub probe: ProbeConfig,
}

impl Default for IilConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            mode: RegionMode::All,
            samples_per_identity: 5,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IilReport {
    pub overlap: Vec<OverlapDistribution>,
    pub probe: ProbeReport,
}

pub const IIL_FILE: &str = "iil.json";
pub const FEATURES_FILE: &str = "features.jsonl";

pub fn iil(
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    splits: &[String],
    features: Option<&Path>,
    common: &Common,
) -> Result<()> {
    let mut cfg: IilConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.probe.seed = s;
    }
    if cfg.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(ConfigError("thresholds must lie in [0, 1]".into()).into());
    }
    if cfg.samples_per_identity < 2 {
        return Err(ConfigError("samples_per_identity must be at least 2".into()).into());
    }
    let mut run = Run::start("iil", &common.out, &cfg, Some(cfg.probe.seed))?;
    let feats = match (checkpoint, data, features) {
        (_, _, Some(f)) => {
            run.input(f);
            read_features(f).with_context(|| format!("reading {}", f.display()))?
        }
        (Some(c), Some(d), None) => {
            run.input(c);
            run.input(d);
            let model = load_model(c)?;
            let ds = load_dataset(d)?;
            let names: Vec<&str> = splits.iter().map(String::as_str).collect();
            let feats = extract_features(&model, &ds, &names)?;
            let p = run.out().join(FEATURES_FILE);
            write_features(&p, &feats)?;
            run.output(p);
            feats
        }
        _ => bail!("iil needs --features or both --checkpoint and --data"),
    };
    let sampled = sample_per_identity(&feats, cfg.samples_per_identity);
    let overlap = id_overlap(&sampled, &cfg.thresholds, cfg.mode)?;
    let probe = id_linear_probe(&feats, &cfg.probe)?;
    for d in &overlap {
        println!(
            "iil: overlap@{} median {} (min {} max {})",
            d.threshold, d.quartiles.median, d.quartiles.min, d.quartiles.max
        );
    }
    println!(
        "iil: probe accuracy {:.4} over {} identities",
        probe.final_accuracy, probe.n_identities
    );
    let p = run.out().join(IIL_FILE);
    write_atomic(&p, &serde_json::to_vec_pretty(&IilReport { overlap, probe })?)?;
    run.output(p);
    run.finish()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {}

/// One rendered image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VizEntry {
    pub image_path: String,
    pub output: PathBuf,
    pub fake_probability: f64,
    /// Pixel corners `[x0, y0, x1, y1]` of the drawn box.
    pub artifact_box: Option<[f64; 4]>,
    pub box_score: Option<f64>,
}

pub const VIZ_FILE: &str = "viz.jsonl";

/// Two-pixel red rectangle outline.
pub fn draw_box(img: &mut Image, b: [f64; 4]) {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let clamp = |v: f64, n: isize| (v.round() as isize).clamp(0, n - 1);
    let (x0, y0, x1, y1) = (
        clamp(b[0], w),
        clamp(b[1], h),
        clamp(b[2] - 1.0, w),
        clamp(b[3] - 1.0, h),
    );
    let mut put = |y: isize, x: isize| {
        if (0..h).contains(&y) && (0..w).contains(&x) {
            for (c, v) in [1.0, 0.0, 0.0].into_iter().enumerate() {
                img.set(y as usize, x as usize, c, v);
            }
        }
    };
    for t in 0..2 {
        for x in x0..=x1 {
            put(y0 + t, x);
            put(y1 - t, x);
        }
        for y in y0..=y1 {
            put(y, x0 + t);
            put(y, x1 - t);
        }
    }
}

pub fn viz(checkpoint: &Path, data: &Path, split: &str, threshold: f64, limit: usize, common: &Common) -> Result<()> {
    let cfg: VizConfig = load_config(common.config.as_deref())?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ConfigError("threshold must lie in [0, 1]".into()).into());
    }
    let mut run = Run::start("viz", &common.out, &cfg, None)?;
    run.input(checkpoint);
    run.input(data);
    let model = load_model(checkpoint)?;
    let ds = load_dataset(data)?;
    let mut lines = Vec::new();
    for rec in ds.split(split).iter().take(limit) {
        let img = ds.image(&rec.image_path)?;
        let out = model.forward_image(img)?;
        let top = model.top_artifact(&out, threshold)?;
        let mut canvas = img.clone();
        let (s_h, s_w) = (img.height() as f64, img.width() as f64);
        let pixel_box = top.map(|(b, _)| [b[0] * s_w, b[1] * s_h, b[2] * s_w, b[3] * s_h]);
        if let Some(b) = pixel_box {
            draw_box(&mut canvas, b);
        }
        let name = rec.image_path.replace(['/', '\\'], "_");
        let path = run.out().join(&name);
        canvas.save_png(&path)?;
        lines.push(VizEntry {
            image_path: rec.image_path.clone(),
            output: PathBuf::from(name),
            fake_probability: out.fake_probability(),
            artifact_box: pixel_box,
            box_score: top.map(|(_, s)| s),
        });
    }
    let mut body = Vec::new();
    for l in &lines {
        serde_json::to_writer(&mut body, l)?;
        body.push(b'\n');
    }
    let p = run.out().join(VIZ_FILE);
    write_atomic(&p, &body)?;
    run.output(p);
    let drawn = lines.iter().filter(|l| l.artifact_box.is_some()).count();
    println!("viz: {} images, {drawn} with a box", lines.len());
    run.finish()?;
    Ok(())
}
