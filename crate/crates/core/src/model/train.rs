//! Mini-batch SGD with momentum on the cross-entropy loss.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelParams};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 0.05,
            batch_size: 32,
            momentum: 0.9,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean mini-batch loss, one entry per optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean loss over each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fraction of `data` classified correctly.
pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let preds: Vec<usize> = data
        .images
        .par_iter()
        .map(|x| params.predict(x))
        .collect::<Result<_>>()?;
    let hits = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mean cross-entropy over `data`.
pub fn mean_loss(params: &ModelParams, data: &Dataset) -> Result<f64> {
    let losses: Vec<f64> = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(x, &y)| Ok(crate::model::cross_entropy(&params.logits(x)?, y).0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains `params` in place order-deterministically: per-sample gradients
/// may be computed in parallel but are always reduced in sample order.
pub fn train(mut params: ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let mut report = TrainReport {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok((params, report));
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut velocity = ModelParams::zeros(params.arch())?;
    let rng = Rng::new(cfg.seed, 0x5347_4400);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.split(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<(f64, ModelParams)> = batch
                .par_iter()
                .map(|&i| params.param_gradient(&data.images[i], data.labels[i]))
                .collect::<Result<_>>()?;
            let mut grad = ModelParams::zeros(params.arch())?;
            let mut loss = 0.0;
            for (l, g) in &per_sample {
                loss += l;
                for (acc, t) in grad.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.axpy(1.0, t)?;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    detail: format!("non-finite loss at step {step}"),
                });
            }
            let norm = grad
                .tensors()
                .iter()
                .map(|t| t.as_slice().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
                * inv;
            let clip = if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                cfg.max_grad_norm / norm
            } else {
                1.0
            };
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            for ((p, v), g) in params
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors_mut())
                .zip(grad.tensors())
            {
                for ((pv, vv), &gv) in p.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                    *vv = cfg.momentum * *vv + gv * inv * clip;
                    *pv -= lr * *vv;
                }
            }
            if !params.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    detail: format!("non-finite parameters after step {step}"),
                });
            }
            report.step_losses.push(loss);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        report.epoch_losses.push(epoch_loss / data.len() as f64);
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, CnnArch, DatasetSpec, VitArch};

    fn tiny_vit() -> Arch {
        Arch::Vit(VitArch {
            image_side: 16,
            patch_size: 4,
            embed_dim: 16,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            ..VitArch::default()
        })
    }

    fn data(n: usize) -> Dataset {
        DatasetSpec {
            seed: 1,
            train_count: n,
            test_count: 1,
            classes: 10,
            image_side: 16,
        }
        .train()
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let init = ModelParams::init(tiny_vit(), &mut Rng::new(0, 0)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (out, report) = train(init.clone(), &data(10), &cfg).unwrap();
        assert_eq!(out, init);
        assert!(report.step_losses.is_empty());
    }

    #[test]
    fn one_epoch_reduces_loss() {
        let d = data(10);
        for arch in [tiny_vit(), Arch::Cnn(CnnArch { image_side: 16, ..CnnArch::default() })] {
            let init = ModelParams::init(arch, &mut Rng::new(0, 0)).unwrap();
            let cfg = TrainConfig { epochs: 1, batch_size: 10, ..TrainConfig::default() };
            let before = mean_loss(&init, &d).unwrap();
            let (out, _) = train(init, &d, &cfg).unwrap();
            let after = mean_loss(&out, &d).unwrap();
            assert!(after < before, "{arch:?}: {before} -> {after}");
        }
    }

    #[test]
    fn equal_seeds_train_identically() {
        let d = data(24);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 3, ..TrainConfig::default() };
        let run = || {
            let init = ModelParams::init(tiny_vit(), &mut Rng::new(9, 0)).unwrap();
            train(init, &d, &cfg).unwrap().0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let d = data(16);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let init = ModelParams::init(tiny_vit(), &mut Rng::new(2, 0)).unwrap();
                train(init, &d, &cfg).unwrap().0
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn divergence_reports_epoch() {
        let d = data(8);
        let init = ModelParams::init(tiny_vit(), &mut Rng::new(0, 0)).unwrap();
        let cfg = TrainConfig { epochs: 3, lr: 1e300, max_grad_norm: 0.0, batch_size: 4, ..TrainConfig::default() };
        match train(init, &d, &cfg) {
            Err(Error::TrainingFailure { epoch, .. }) => assert!(epoch < 3),
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let init = ModelParams::init(tiny_vit(), &mut Rng::new(0, 0)).unwrap();
        let empty = Dataset { images: vec![], labels: vec![] };
        assert!(train(init, &empty, &TrainConfig::default()).is_err());
    }
}
