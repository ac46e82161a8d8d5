//! The training loop: PK batches, optional random erasing, per-epoch
//! learning rate, one Adam step per batch. Shared by the CLI and the test
//! suites so both drive exactly the same procedure.

use crate::backbone::{train_step, Adam, Model};
use crate::data::{lr_at, pk_sample, random_erase, EraseConfig, PkSamplerConfig, ScheduleConfig};
use crate::error::Result;
use crate::losses::{LossConfig, LossValue};
use crate::rng::SplitMix64;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub sampler: PkSamplerConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    /// Applied per batch sample when present.
    pub erase: Option<EraseConfig>,
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub triplet: f64,
    pub softmax: f64,
}

/// Train `model` in place over `epochs` passes of PK batches drawn from
/// `labels`. Deterministic in (model init, TrainConfig): batches come from
/// the sampler seed, erasing from a per-epoch fork of the train seed.
pub fn train(
    model: &mut Model,
    images: &Tensor4,
    labels: &[i64],
    config: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    let mut optimizer = Adam::new(model);
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(&config.schedule, epoch);
        let batches = pk_sample(labels, &config.sampler, epoch as u64)?;
        let mut erase_rng = SplitMix64::new(config.seed).fork(epoch as u64);
        let mut sums = (0.0, 0.0, 0.0);
        for batch in &batches {
            let (batch_images, batch_labels) = assemble_batch(images, labels, batch)?;
            let mut batch_images = batch_images;
            if let Some(erase) = &config.erase {
                for sample in 0..batch_images.batch() {
                    random_erase(&mut batch_images, sample, erase, &mut erase_rng)?;
                }
            }
            let loss: LossValue =
                train_step(model, &mut optimizer, &batch_images, &batch_labels, &config.loss, lr)?;
            sums.0 += loss.total;
            sums.1 += loss.triplet_part;
            sums.2 += loss.softmax_part;
        }
        let count = batches.len().max(1) as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            total: sums.0 / count,
            triplet: sums.1 / count,
            softmax: sums.2 / count,
        });
    }
    Ok(logs)
}

fn assemble_batch(
    images: &Tensor4,
    labels: &[i64],
    batch: &[usize],
) -> Result<(Tensor4, Vec<i64>)> {
    let samples: Vec<Tensor4> = batch.iter().map(|&i| images.slice_sample(i)).collect();
    let batch_labels: Vec<i64> = batch.iter().map(|&i| labels[i]).collect();
    Ok((Tensor4::stack(&samples)?, batch_labels))
}

/// Embed every sample in eval mode, in dataset order, batched for speed.
pub fn embed_all(model: &Model, images: &Tensor4, batch_size: usize) -> Result<crate::tensor::Matrix> {
    let n = images.batch();
    let dim = model.config.feature_dim;
    let mut out = crate::tensor::Matrix::zeros(n, dim);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let chunk: Vec<Tensor4> = (start..end).map(|i| images.slice_sample(i)).collect();
        let stacked = Tensor4::stack(&chunk)?;
        let pass = model.forward(&stacked, false)?;
        for (offset, row) in (start..end).enumerate() {
            out.row_mut(row).copy_from_slice(pass.triplet_features.row(offset));
        }
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::data::{make_synthetic_dataset, ScheduleKind};
    use crate::losses::Smoothing;

    fn small_train_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: 5,
            sampler: PkSamplerConfig::new(2, 2, 5).unwrap(),
            loss: LossConfig::new(0.3, Smoothing::None, 4).unwrap(),
            schedule: ScheduleConfig::new(1e-3, ScheduleKind::None).unwrap(),
            erase: None,
        }
    }

    #[test]
    fn training_runs_and_logs_every_epoch() {
        let ds = make_synthetic_dataset(4, 4, 12, 9).unwrap();
        let mut config = ModelConfig::toy(4);
        config.attach_ga = false;
        config.attach_la = false;
        let mut model = Model::init(config, 1).unwrap();
        let logs = train(&mut model, &ds.images, &ds.labels, &small_train_config(3)).unwrap();
        assert_eq!(logs.len(), 3);
        assert!(logs.iter().all(|l| l.total.is_finite()));
    }

    #[test]
    fn training_is_seed_reproducible() {
        let ds = make_synthetic_dataset(4, 4, 12, 9).unwrap();
        let run = || {
            let mut config = ModelConfig::toy(4);
            config.attach_ga = false;
            config.attach_la = false;
            let mut model = Model::init(config, 1).unwrap();
            let mut tc = small_train_config(2);
            tc.erase = Some(EraseConfig::new(0.5).unwrap());
            train(&mut model, &ds.images, &ds.labels, &tc).unwrap();
            model.flatten()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embed_all_matches_single_forward() {
        let ds = make_synthetic_dataset(3, 3, 12, 10).unwrap();
        let mut config = ModelConfig::toy(3);
        config.attach_ga = false;
        config.attach_la = false;
        let model = Model::init(config, 2).unwrap();
        let batched = embed_all(&model, &ds.images, 4).unwrap();
        let pass = model.forward(&ds.images, false).unwrap();
        for r in 0..ds.len() {
            for c in 0..batched.cols() {
                assert!((batched.get(r, c) - pass.triplet_features.get(r, c)).abs() <= 1e-12);
            }
        }
    }
}
