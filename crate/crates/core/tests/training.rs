use caddm::detection::{match_anchors, normalize_box};
use caddm::metrics::evaluate;
use caddm::mfs::{synthesize, Label, MfsConfig};
use caddm::network::{read_checkpoint, Model};
use caddm::procgen::{build_dataset, Dataset, DatasetConfig, SPLITS, SPLIT_TEST, SPLIT_TRAIN};
use caddm::rng::stream;
use caddm::train::{read_log, score_split, smoothed_loss_ends, train, RunPaths, TrainConfig};

fn small_dataset(seed: u64) -> Dataset {
    build_dataset(&DatasetConfig {
        n_identities: 8,
        n_images_per_id: 8,
        frames_per_video: 4,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

#[test]
fn default_config_loss_decreases() {
    let ds = build_dataset(&DatasetConfig {
        seed: 11,
        ..DatasetConfig::default()
    })
    .unwrap();
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 100,
        seed: 11,
        validate: false,
        ..defaults
    };
    let out = train(&ds, &cfg, &RunPaths::default()).unwrap();
    let (start, end) = smoothed_loss_ends(&out.log, 50).unwrap();
    assert!(end < start, "smoothed loss {start} -> {end}");
}

#[test]
fn checkpoint_reload_reproduces_scores() {
    let ds = small_dataset(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 5,
        batch_size: 8,
        seed: 4,
        ..TrainConfig::default()
    };
    let paths = RunPaths::in_dir(dir.path());
    let out = train(&ds, &cfg, &paths).unwrap();
    assert_eq!(read_log(dir.path().join(RunPaths::LOG)).unwrap(), out.log);

    let reloaded: Model = read_checkpoint(dir.path().join(RunPaths::FINAL))
        .unwrap()
        .to_model()
        .unwrap();
    let a = score_split(&out.model, &ds, SPLIT_TEST).unwrap();
    let b = score_split(&reloaded, &ds, SPLIT_TEST).unwrap();
    // Checkpoints hold f32 weights.
    for (x, y) in a.iter().zip(&b) {
        assert!((x.score - y.score).abs() < 1e-4, "{} vs {}", x.score, y.score);
        assert_eq!(x.group_id, y.group_id);
    }
    let m = evaluate(&b).unwrap();
    assert!(m.video_auc.is_some() && m.n == b.len());
}

#[test]
fn written_dataset_feeds_swaps_and_matching() {
    let ds = small_dataset(9);
    let dir = tempfile::tempdir().unwrap();
    ds.write_to(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    for split in SPLITS {
        assert_eq!(back.split(split), ds.split(split));
    }
    let anchors = caddm::detection::build_anchors(&Default::default()).unwrap();
    for (i, r) in back
        .split(SPLIT_TRAIN)
        .iter()
        .filter(|r| r.label == Label::Fake)
        .enumerate()
    {
        let fake = back.image(&r.image_path).unwrap();
        let source = back.image(r.source_path.as_deref().unwrap()).unwrap();
        let out = synthesize(fake, source, &MfsConfig::default(), &mut stream(9, &[i as u64])).unwrap();
        let ann = out.annotation("x.png", &r.identity, r.source_path.clone());
        ann.validate(fake.height(), fake.width()).unwrap();
        let boxes: Vec<_> = out.artifact_boxes.iter().map(|b| normalize_box(*b, 112, 112)).collect();
        let t = match_anchors(&anchors, &boxes).unwrap();
        assert_eq!(t.len(), anchors.len());
        assert!(t
            .matches
            .iter()
            .flatten()
            .all(|m| m.iou > 0.9 && m.gt_index < boxes.len()));
    }
}
