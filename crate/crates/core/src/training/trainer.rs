use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::{augment, split_indices, standardize, LabeledVolume};
use super::loss::{binarize, dice_loss, dice_score};
use super::optim::{early_stop, lr_at, moving_average, Adam};
use super::TrainingConfig;
use crate::engine::{alloc, Shape, Tape, Tensor};
use crate::error::{Error, Result};
use crate::memory::measure_peak;
use crate::reversible::Storage;
use crate::unet::{save_checkpoint, Network};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "train.cfg";

/// Sigmoid outputs above this count as inside a region.
pub const THRESHOLD: f32 = 0.5;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dice_wt: f64,
    pub val_dice_tc: f64,
    pub val_dice_et: f64,
    /// Moving average of the mean validation Dice; empty until the window
    /// is full.
    pub moving_avg: Option<f64>,
    /// Bytes the tape held for backward after the first forward pass.
    pub stored_activation_bytes: u64,
    /// Highest live tensor bytes above the step's starting level during
    /// any step of the epoch.
    pub peak_bytes: u64,
}

impl EpochMetrics {
    pub fn mean_dice(&self) -> f64 {
        (self.val_dice_wt + self.val_dice_tc + self.val_dice_et) / 3.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub storage: Storage,
    /// Receives `metrics.csv`, `train.cfg` and the best weights under
    /// `checkpoint/`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Per-region validation Dice of the restored best weights.
    pub best_dice: Vec<f64>,
    pub stopped_early: bool,
    pub train_volumes: usize,
    pub val_volumes: usize,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub stored_activation_bytes: u64,
    pub peak_bytes: u64,
}

/// Forward, Dice loss, backward and one Adam update on a batch.
pub fn training_step(
    net: &mut Network,
    adam: &mut Adam,
    image: &Tensor,
    target: &Tensor,
    lr: f64,
    config: &TrainingConfig,
    storage: Storage,
) -> Result<StepStats> {
    net.params_mut().zero_grad();
    let base = alloc::live_bytes();
    let (out, peak) = measure_peak(|| -> Result<(f64, usize)> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = net.forward(&mut tape, &x, storage)?;
        let loss = dice_loss(&mut tape, &y, target, config.epsilon_dice)?;
        let stored = tape.retained_bytes();
        drop((x, y));
        tape.backward(&loss, net.params_mut())?;
        Ok((loss.value().data()[0] as f64, stored))
    });
    let (loss, stored) = out?;
    adam.step(net.params_mut(), lr, config.weight_decay);
    Ok(StepStats {
        loss,
        stored_activation_bytes: stored as u64,
        peak_bytes: (peak - base) as u64,
    })
}

/// Peak live tensor bytes of one complete training step (including fresh
/// optimizer state) on a zero input of `input` shape, with the parameter
/// values and gradients counted even though they exist beforehand.
pub fn measure_step(net: &mut Network, input: Shape, storage: Storage) -> Result<u64> {
    let image = Tensor::zeros(input);
    let target = Tensor::zeros(input.with_channels(net.spec().out_regions));
    let base = alloc::live_bytes();
    let resident = 2 * net.params().numel() as u64 * 4;
    let (out, peak) = measure_peak(|| -> Result<()> {
        let mut adam = Adam::new(net.params());
        training_step(
            net,
            &mut adam,
            &image,
            &target,
            0.0,
            &TrainingConfig::default(),
            storage,
        )?;
        Ok(())
    });
    out?;
    Ok((peak - base) as u64 + resident)
}

/// Mean per-region Dice of thresholded full-volume predictions.
pub fn evaluate(net: &Network, data: &[LabeledVolume]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let mut totals = vec![0.0; net.spec().out_regions];
    for v in data {
        let pred = net.forward_full_volume(&standardize(&v.image, true))?;
        for (t, s) in totals
            .iter_mut()
            .zip(dice_score(&binarize(&pred, THRESHOLD), &v.regions)?)
        {
            *t += s;
        }
    }
    Ok(totals.into_iter().map(|t| t / data.len() as f64).collect())
}

/// Splits `data` with the configured fraction and seed, then trains.
pub fn train_split(
    net: &mut Network,
    config: &TrainingConfig,
    data: &[LabeledVolume],
    options: &TrainOptions,
) -> Result<TrainReport> {
    let (t, v) = split_indices(data.len(), config.validation_fraction, config.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    train(net, config, &pick(&t), &pick(&v), options)
}

/// Epoch loop with best-validation tracking and early stopping. On return
/// `net` holds the best weights.
pub fn train(
    net: &mut Network,
    config: &TrainingConfig,
    train_set: &[LabeledVolume],
    val_set: &[LabeledVolume],
    options: &TrainOptions,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset(format!(
            "need training and validation volumes, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    let regions = net.spec().out_regions;
    if regions != 3 {
        return Err(Error::Dataset(format!(
            "training expects 3 output regions, network has {regions}"
        )));
    }
    let mut writer = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            config.save(dir.join(CONFIG_FILE))?;
            Some(csv::Writer::from_path(dir.join(METRICS_FILE))?)
        }
        None => None,
    };

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(net.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let lr = lr_at(epoch, config);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut steps, mut stored, mut peak) = (0.0, 0usize, 0u64, 0u64);
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<LabeledVolume> = chunk
                .iter()
                .map(|&i| {
                    let v = &train_set[i];
                    let mut v = if config.augment {
                        augment(v, &mut rng)
                    } else {
                        v.clone()
                    };
                    v.image = standardize(&v.image, true);
                    v
                })
                .collect();
            let image = Tensor::stack_batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>());
            let target =
                Tensor::stack_batch(&samples.iter().map(|s| &s.regions).collect::<Vec<_>>());
            drop(samples);
            let s = training_step(net, &mut adam, &image, &target, lr, config, options.storage)?;
            if steps == 0 {
                stored = s.stored_activation_bytes;
            }
            loss_sum += s.loss;
            steps += 1;
            peak = peak.max(s.peak_bytes);
        }

        let dice = evaluate(net, val_set)?;
        let mean = dice.iter().sum::<f64>() / dice.len() as f64;
        history.push(mean);
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / steps as f64,
            val_dice_wt: dice[0],
            val_dice_tc: dice[1],
            val_dice_et: dice[2],
            moving_avg: moving_average(&history, config.moving_average_window)
                .last()
                .copied(),
            stored_activation_bytes: stored,
            peak_bytes: peak,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} dice wt {:.4} tc {:.4} et {:.4}",
            m.train_loss,
            dice[0],
            dice[1],
            dice[2]
        );
        if let Some(w) = writer.as_mut() {
            w.serialize(&m)?;
            w.flush()?;
        }
        epochs.push(m);
        if best.as_ref().is_none_or(|b| mean > b.0) {
            best = Some((mean, epoch, net.params().snapshot()));
        }
        if early_stop(&history, config.moving_average_window, config.patience) {
            stopped_early = true;
            break;
        }
    }

    let (_, best_epoch, weights) = best.expect("at least one epoch ran");
    net.params_mut().restore(&weights);
    let best_dice = evaluate(net, val_set)?;
    if let Some(dir) = &options.out_dir {
        save_checkpoint(net, dir.join(CHECKPOINT_DIR))?;
    }
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_dice,
        stopped_early,
        train_volumes: train_set.len(),
        val_volumes: val_set.len(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Reads a metrics log written by [`train`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    #[derive(serde::Deserialize)]
    struct Row {
        epoch: usize,
        lr: f64,
        train_loss: f64,
        val_dice_wt: f64,
        val_dice_tc: f64,
        val_dice_et: f64,
        moving_avg: Option<f64>,
        stored_activation_bytes: u64,
        peak_bytes: u64,
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Row>()
        .map(|row| {
            let r = row?;
            Ok(EpochMetrics {
                epoch: r.epoch,
                lr: r.lr,
                train_loss: r.train_loss,
                val_dice_wt: r.val_dice_wt,
                val_dice_tc: r.val_dice_tc,
                val_dice_et: r.val_dice_et,
                moving_avg: r.moving_avg,
                stored_activation_bytes: r.stored_activation_bytes,
                peak_bytes: r.peak_bytes,
            })
        })
        .collect()
}
