use std::fs;
use std::path::Path;

use gassd::checkpoint::load_checkpoint;
use gassd::data::{synth_dataset, Category, Dataset, SynthSpec, ANNOTATIONS_FILE};
use gassd::network::{Level, NetworkConfig};
use gassd::train::{evaluate, read_run_log, train, TrainConfig, RUN_LOG};
use gassd::Error;

fn small_spec(n: usize) -> SynthSpec {
    SynthSpec {
        n_volumes: n,
        volume_extents: [16, 48, 48],
        nodules_per_volume: [1, 2],
        category_weights: Category::ALL
            .iter()
            .map(|&c| {
                (
                    c,
                    if c.diameter_range_mm().1 <= 6.0 {
                        1.0
                    } else {
                        0.0
                    },
                )
            })
            .collect(),
        ..SynthSpec::default()
    }
}

fn small_config(data: &Path, ckpt: &Path) -> TrainConfig {
    let mut network = NetworkConfig {
        stem_channels: 4,
        max_channels: 8,
        pyramid_channels: 4,
        active_levels: vec![Level::P3, Level::P4],
        ..NetworkConfig::default()
    };
    network.detection.tile = [8, 32, 32];
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        data_dir: data.to_path_buf(),
        checkpoint_dir: ckpt.to_path_buf(),
        network,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let anns = synth_dataset(&small_spec(3), &data_dir).unwrap();
    let data = Dataset::load(&data_dir).unwrap();
    assert_eq!(data.volumes.len(), 3);
    assert_eq!(data.annotations, anns);

    let cfg = small_config(&data_dir, &dir.path().join("ckpt"));
    let out = train::<f32>(&cfg, &data).unwrap();
    let log = read_run_log(&cfg.checkpoint_dir.join(RUN_LOG)).unwrap();
    assert_eq!(log.len(), out.steps);
    assert!(log.windows(2).all(|w| w[0].step < w[1].step));
    assert!(log.iter().all(|r| r.total.is_finite()));

    let (net, store, manifest) =
        load_checkpoint::<f32>(&cfg.checkpoint_dir, Some(&cfg.network)).unwrap();
    assert_eq!(manifest.epoch, cfg.epochs);
    let memory = evaluate(&out.network, &out.store, &data).unwrap();
    let loaded = evaluate(&net, &store, &data).unwrap();
    assert_eq!(memory.0, loaded.0);
    assert_eq!(memory.1, loaded.1);
    assert_eq!(memory.2, loaded.2);

    let mut other = cfg.network.clone();
    other.pyramid_channels = 8;
    let err = load_checkpoint::<f32>(&cfg.checkpoint_dir, Some(&other)).unwrap_err();
    assert!(matches!(err, Error::Manifest(_)), "{err}");
}

#[test]
fn dataset_rejects_annotation_without_scan() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&small_spec(2), dir.path()).unwrap();
    let csv = dir.path().join(ANNOTATIONS_FILE);
    let mut text = fs::read_to_string(&csv).unwrap();
    text.push_str("ghost,10,10,4,5,solid_small\n");
    fs::write(&csv, text).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Input(_))));
}

#[test]
fn dataset_missing_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(Dataset::load(&dir.path().join("absent")).is_err());
}
