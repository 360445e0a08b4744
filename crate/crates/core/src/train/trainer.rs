use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::sampler::{epoch_crops, materialize};
use super::sgd::{clip_grad_norm, Sgd};
use crate::checkpoint::save_checkpoint;
use crate::data::{Crop, Dataset};
use crate::detection::{
    detect_volume, match_anchors, multibox_loss, BBox, Detection, GtBox, LossBreakdown,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detections, CpmReport, FrocPoint, ScanIndex};
use crate::network::{InputMode, Network};
use crate::params::{fnv1a, Forward, Mode, ParamStore};
use crate::{Scalar, Tensor};

pub const RUN_LOG: &str = "run_log.jsonl";
pub const SPLIT_FILE: &str = "split.json";

/// Train/test partition of scan ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Seeded shuffle of the sorted ids; the first `round(fraction * n)`
    /// (at least one) train.
    pub fn new(ids: &[String], fraction: f64, seed: u64) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("cannot split an empty dataset".into()));
        }
        let mut ids = ids.to_vec();
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(fnv1a(seed, "split")));
        let n_train = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
        let test = ids.split_off(n_train);
        ids.sort();
        let mut test = test;
        test.sort();
        Ok(Self { train: ids, test })
    }

    /// Scans to evaluate on: the test scans, or the training scans when
    /// everything was used for training.
    pub fn eval_ids(&self) -> &[String] {
        if self.test.is_empty() {
            &self.train
        } else {
            &self.test
        }
    }

    /// Hex SHA-256 over both id lists.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "train:{}\ntest:{}\n",
            self.train.join(","),
            self.test.join(",")
        ));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub epoch: usize,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn read_run_log(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
        .collect()
}

pub struct TrainOutcome<T> {
    pub network: Network,
    pub store: ParamStore<T>,
    pub split: Split,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Per-sample crop extents for the network input: the crop in 3D, the
/// slice window in 2.5D.
pub fn crop_extents(net: &Network) -> [usize; 3] {
    let [c, d, h, w] = net.input_shape;
    match net.cfg.input_mode {
        InputMode::Volume3d => [d, h, w],
        InputMode::MultiChannel25d => [c, h, w],
    }
}

fn batch_tensor<T: Scalar>(net: &Network, crops: &[Crop]) -> Result<Tensor<T>> {
    let [c, d, h, w] = net.input_shape;
    let data: Vec<T> = crops
        .iter()
        .flat_map(|cr| cr.data.iter().map(|&v| T::cast(v as f64)))
        .collect();
    Tensor::new(&[crops.len(), c, d, h, w], data)
}

/// Loads `cfg.data_dir`, trains, and writes checkpoint, run log and split
/// under `cfg.checkpoint_dir`.
pub fn run_training<T: Scalar>(cfg: &TrainConfig) -> Result<(Dataset, TrainOutcome<T>)> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.data_dir)?;
    let outcome = train(cfg, &data)?;
    Ok((data, outcome))
}

/// SGD over shuffled nodule-centred and background crops of the training
/// split. The checkpoint is rewritten after every epoch.
pub fn train<T: Scalar>(cfg: &TrainConfig, all: &Dataset) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let split = Split::new(&all.scan_ids(), cfg.train_fraction, cfg.seed)?;
    let data = all.subset(&split.train);
    let (net, mut store) = Network::build::<T>(&cfg.network, cfg.seed)?;
    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let split_path = dir.join(SPLIT_FILE);
    let text = serde_json::to_string_pretty(&split).map_err(|e| Error::json(&split_path, e))?;
    fs::write(&split_path, text).map_err(|e| Error::io(&split_path, e))?;
    let log_path = dir.join(RUN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let mode = net.cfg.input_mode;
    let extents = crop_extents(&net);
    let anchors: Vec<BBox> = net.anchors().iter().map(|a| a.bbox).collect();
    let det = &net.cfg.detection;
    let mut opt = Sgd::<T>::new(cfg.momentum, cfg.weight_decay);
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let crops = epoch_crops(
            &data,
            mode,
            extents,
            cfg.background_per_positive,
            cfg.augment,
            cfg.seed,
            epoch,
        );
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for batch in crops.chunks(cfg.batch_size) {
            step += 1;
            let cut = crate::parallel::map_range(batch.len(), |i| {
                materialize(&data, &batch[i], mode, extents)
            });
            let (crops, gts): (Vec<Crop>, Vec<Vec<GtBox>>) = cut
                .into_iter()
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip();
            let matches = gts
                .iter()
                .map(|g| match_anchors(&anchors, g, det.pos_iou, det.neg_iou))
                .collect::<Result<Vec<_>>>()?;
            let x = batch_tensor::<T>(&net, &crops)?;
            let f = Forward::new(
                &store,
                Mode::Train,
                true,
                fnv1a(cfg.seed, &format!("dropout-{step}")),
            );
            let out = net.forward(&f, &x)?;
            let (loss, parts) = multibox_loss(
                &out.cls,
                &out.reg,
                &matches,
                det.mining_ratio,
                det.reg_weight,
            )?;
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            loss.backward()?;
            let mut grads = f.gradients();
            if cfg.grad_clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            }
            let stats = f.take_stat_updates();
            drop(f);
            stats.apply(&mut store)?;
            opt.step(&mut store, &grads, lr)?;
            if step % cfg.log_every == 0 {
                write_record(&mut log, &log_path, step, epoch, &parts, lr)?;
            }
            epoch_total += parts.total;
            batches += 1;
        }
        epoch_losses.push(epoch_total / batches.max(1) as f64);
        save_checkpoint(dir, &net.cfg, &store, epoch + 1)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        network: net,
        store,
        split,
        epoch_losses,
        steps: step,
    })
}

fn write_record<W: Write>(
    w: &mut W,
    path: &Path,
    step: usize,
    epoch: usize,
    parts: &LossBreakdown,
    lr: f64,
) -> Result<()> {
    let rec = RunRecord {
        step,
        epoch,
        cls_loss: parts.cls_loss,
        reg_loss: parts.reg_loss,
        total: parts.total,
        lr,
    };
    let line = serde_json::to_string(&rec).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Detections on every scan of `data`, in scan order.
pub fn detect_dataset<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    data: &Dataset,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    for v in &data.volumes {
        all.extend(detect_volume(net, store, v)?);
    }
    Ok(all)
}

/// Runs detection over `data` and scores it against its annotations.
pub fn evaluate<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    data: &Dataset,
) -> Result<(CpmReport, Vec<FrocPoint>, Vec<Detection>)> {
    if data.volumes.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let dets = detect_dataset(net, store, data)?;
    let spacing = data
        .volumes
        .iter()
        .map(|v| (v.scan_id.clone(), v.spacing_mm))
        .collect();
    let scans = ScanIndex::new(spacing)?;
    let (report, curve) = evaluate_detections(
        &dets,
        &data.annotations,
        &scans,
        net.cfg.detection.report_threshold,
    )?;
    Ok((report, curve, dets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_volume, Category, SynthSpec};
    use crate::network::{Level, NetworkConfig};

    fn tiny_data(n: usize) -> Dataset {
        let spec = SynthSpec {
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
            ..Default::default()
        };
        let mut volumes = Vec::new();
        let mut annotations = Vec::new();
        for i in 0..n {
            let (v, a) = synth_volume(&spec, i).unwrap();
            volumes.push(v);
            annotations.extend(a);
        }
        Dataset {
            volumes,
            annotations,
        }
    }

    fn tiny_cfg(dir: &Path) -> TrainConfig {
        let mut network = NetworkConfig {
            stem_channels: 4,
            max_channels: 8,
            pyramid_channels: 4,
            active_levels: vec![Level::P3, Level::P4],
            ..Default::default()
        };
        network.detection.tile = [8, 32, 32];
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            network,
            checkpoint_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn split_is_seeded_and_total() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let a = Split::new(&ids, 0.8, 1).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (8, 2));
        assert_eq!(a, Split::new(&ids, 0.8, 1).unwrap());
        let mut both: Vec<_> = a.train.iter().chain(&a.test).cloned().collect();
        both.sort();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(both, sorted);
        assert_eq!(a.hash().len(), 64);
        let all = Split::new(&ids, 1.0, 1).unwrap();
        assert!(all.test.is_empty());
        assert_eq!(all.eval_ids(), &all.train[..]);
        assert!(Split::new(&[], 0.5, 1).is_err());
    }

    #[test]
    fn zero_lr_keeps_trainable_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            ..tiny_cfg(dir.path())
        };
        let data = tiny_data(2);
        let (_, fresh) = Network::build::<f64>(&cfg.network, cfg.seed).unwrap();
        let out = train::<f64>(&cfg, &data).unwrap();
        for (name, p) in fresh.iter().filter(|(_, p)| p.trainable) {
            assert_eq!(out.store.get(name).unwrap().value, p.value, "{name}");
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let data = tiny_data(3);
        let a = train::<f32>(&tiny_cfg(d1.path()), &data).unwrap();
        let b = train::<f32>(&tiny_cfg(d2.path()), &data).unwrap();
        assert_eq!(a.store, b.store);
        let log_a = fs::read(d1.path().join(RUN_LOG)).unwrap();
        assert_eq!(log_a, fs::read(d2.path().join(RUN_LOG)).unwrap());
        let recs = read_run_log(&d1.path().join(RUN_LOG)).unwrap();
        assert_eq!(recs.len(), a.steps);
        assert!(recs.windows(2).all(|w| w[0].step < w[1].step));
        assert!(recs.iter().all(|r| r.total.is_finite()));
        for f in ["manifest.json", "head.P4.cls.weight.bin"] {
            assert_eq!(
                fs::read(d1.path().join(f)).unwrap(),
                fs::read(d2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn evaluation_edge_cases() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let (net, store) = Network::build::<f32>(&cfg.network, 0).unwrap();
        let empty = Dataset {
            volumes: vec![],
            annotations: vec![],
        };
        assert!(matches!(
            evaluate(&net, &store, &empty),
            Err(Error::Input(_))
        ));
        let mut data = tiny_data(1);
        data.annotations.clear();
        let mut net_cfg = cfg.network.clone();
        // force every anchor over the floor so detections exist
        net_cfg.detection.prob_floor = 0.0;
        net_cfg.detection.report_threshold = 0.0;
        let (net, store) = Network::build::<f32>(&net_cfg, 0).unwrap();
        let (report, _, dets) = evaluate(&net, &store, &data).unwrap();
        assert!(!dets.is_empty());
        assert_eq!(report.cpm, 0.0);
        assert!(report.fp_tp_ratio.is_infinite());
    }
}
