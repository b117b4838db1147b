//! Supervised training of the source density-regression model.
//!
//! Minimises the batch-mean squared error between predicted and
//! ground-truth density maps with momentum SGD, and returns the parameters
//! from the epoch with the lowest validation MSE.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densitymap::{build_density_map, DensityMap, KernelConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{DrmParams, ParamSet};
use crate::optim::MomentumSgd;
use crate::scalar::Scalar;
use crate::synthgen::{AnnotatedImage, Image};

/// An image paired with its ground-truth density map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub density: DensityMap,
}

/// Rasterises the annotation of every image.
pub fn make_samples(images: &[AnnotatedImage], kernel: &KernelConfig) -> Result<Vec<Sample>> {
    images
        .iter()
        .map(|a| {
            Ok(Sample {
                image: a.image.clone(),
                density: build_density_map(a.image.shape(), &a.centroids, kernel)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Multiplier applied to density targets during optimisation. The
    /// returned model is rescaled so it always predicts unscaled density.
    pub target_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 100,
            epochs: 3000,
            seed: 0,
            validation_fraction: 0.2,
            target_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} must lie in [0, 1)",
                self.validation_fraction
            )));
        }
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return Err(Error::Config("target_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Number of validation samples out of `n`.
    pub fn validation_len(&self, n: usize) -> usize {
        (n as f64 * self.validation_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// Zero-based.
    pub best_epoch: usize,
    pub best_validation_mse: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_mse` rows, one per epoch (epochs numbered from 1).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mse\n");
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_mse).enumerate() {
            s.push_str(&format!("{},{t:e},{v:e}\n", e + 1));
        }
        s
    }
}

/// Per-epoch progress passed to observers.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub best_epoch: usize,
}

/// `(1/B)·Σ‖Yᵢ − F(Xᵢ)‖²` over the batch.
pub fn mse_loss<T: Scalar>(params: &DrmParams<T>, batch: &[Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("mse_loss needs a nonempty batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        let pred = params.drm_forward(&s.image)?;
        total += squared_error(&pred, s.density.values())?;
    }
    Ok(total / batch.len() as f64)
}

/// `‖target − pred‖²` accumulated in `f64`.
pub fn squared_error<T: Scalar>(pred: &Grid<T>, target: &Grid<f64>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Data(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &y)| (p.to_f64c() - y).powi(2))
        .sum())
}

/// Trains from a seeded He-uniform initialisation of `arch`.
pub fn train_source_drm<T: Scalar>(
    data: &[Sample],
    cfg: &TrainConfig,
    arch: crate::model::DrmArch,
) -> Result<(DrmParams<T>, TrainReport)> {
    train_source_drm_from(data, cfg, DrmParams::init(arch, cfg.seed), |_| {})
}

/// Trains starting from `init`, reporting each epoch to `observe`.
///
/// The last `validation_fraction` of `data` is held out for model
/// selection; the rest is reshuffled every epoch.
pub fn train_source_drm_from<T: Scalar>(
    data: &[Sample],
    cfg: &TrainConfig,
    init: DrmParams<T>,
    mut observe: impl FnMut(&EpochStats),
) -> Result<(DrmParams<T>, TrainReport)> {
    cfg.validate()?;
    let n_val = cfg.validation_len(data.len());
    let (train, val) = data.split_at(data.len() - n_val);
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds training split of {} samples",
            cfg.batch_size,
            train.len()
        )));
    }
    if let Some(first) = data.first() {
        let shape = first.image.shape();
        if let Some(bad) = data
            .iter()
            .position(|s| s.image.shape() != shape || s.density.shape() != shape)
        {
            return Err(Error::Data(format!("sample {bad} shape differs from {shape:?}")));
        }
    }

    let scale = cfg.target_scale;
    let scaled = |s: &Sample| s.density.values().map(|v| v * scale);
    let train_targets: Vec<Grid<f64>> = train.iter().map(scaled).collect();
    let val_targets: Vec<Grid<f64>> = val.iter().map(scaled).collect();
    let s2 = scale * scale;

    let mut params = init;
    let mut grad = params.zeros_like();
    let mut opt = MomentumSgd::new(T::lit(cfg.learning_rate), T::lit(cfg.momentum));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        best_validation_mse: f64::INFINITY,
        ..TrainReport::default()
    };
    let mut best = params.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sq = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.zero();
            let inv_b = T::lit(1.0 / batch.len() as f64);
            let mut batch_sq = 0.0;
            for &i in batch {
                batch_sq += params
                    .accumulate_squared_error(&train[i].image, &train_targets[i], inv_b, &mut grad)?
                    .to_f64c();
            }
            if !batch_sq.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite training loss at epoch {} with learning rate {}",
                    epoch + 1,
                    cfg.learning_rate
                )));
            }
            epoch_sq += batch_sq;
            opt.step(&mut params, &grad);
        }
        let train_loss = epoch_sq / train.len() as f64 / s2;
        let val_mse = if val.is_empty() {
            train_loss
        } else {
            let mut tot = 0.0;
            for (s, y) in val.iter().zip(&val_targets) {
                tot += squared_error(&params.drm_forward(&s.image)?, y)?;
            }
            tot / val.len() as f64 / s2
        };
        if !val_mse.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite validation MSE at epoch {} with learning rate {}",
                epoch + 1,
                cfg.learning_rate
            )));
        }
        report.train_loss.push(train_loss);
        report.val_mse.push(val_mse);
        if val_mse < report.best_validation_mse {
            report.best_validation_mse = val_mse;
            report.best_epoch = epoch;
            best.clone_from(&params);
        }
        observe(&EpochStats {
            epoch,
            train_loss,
            val_mse,
            best_epoch: report.best_epoch,
        });
    }
    if scale != 1.0 {
        let head = best.decoder.convs.last_mut().expect("decoder head");
        let inv = T::lit(1.0 / scale);
        head.weight
            .iter_mut()
            .chain(head.bias.iter_mut())
            .for_each(|v| *v *= inv);
    }
    Ok((best, report))
}
