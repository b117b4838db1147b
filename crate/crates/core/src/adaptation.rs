//! Unsupervised adversarial adaptation of a target-domain encoder.
//!
//! A domain critic is trained to score source features (from the frozen
//! source encoder) above target features (from the adaptation encoder); its
//! weights are clipped after every update so that the score gap estimates a
//! Wasserstein distance. The adaptation encoder is then updated to raise the
//! critic's score on target features, shrinking that gap. The two models
//! alternate, critic first.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CriticArch, DamParams, DcmParams, Encoder, FeatureMap, ParamSet, DOWNSAMPLE};
use crate::optim::MomentumSgd;
use crate::scalar::Scalar;
use crate::synthgen::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub dam_learning_rate: f64,
    pub dcm_learning_rate: f64,
    pub dam_momentum: f64,
    pub dcm_momentum: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub critic_iters_per_dam_step: usize,
    /// Extra critic updates, each on a fresh batch, before the first
    /// adaptation step.
    pub critic_warmup_iters: usize,
    pub weight_clip: f64,
    pub total_dam_steps: usize,
    /// Images per domain in the fixed monitoring batch used for the gap
    /// trajectory and checkpoint selection.
    pub monitor_size: usize,
    /// Encoder snapshots are kept every this many steps (plus the initial
    /// and final states); the one the final critic finds closest to the
    /// source features is returned. Zero returns the final encoder.
    pub selection_interval: usize,
    /// Encode every source image once up front instead of per step.
    pub cache_source_features: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            dam_learning_rate: 1e-8,
            dcm_learning_rate: 1e-8,
            dam_momentum: 0.0,
            dcm_momentum: 0.0,
            batch_size: 100,
            crop_size: 256,
            critic_iters_per_dam_step: 5,
            critic_warmup_iters: 0,
            weight_clip: 0.01,
            total_dam_steps: 500,
            monitor_size: 16,
            selection_interval: 50,
            cache_source_features: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of {DOWNSAMPLE}",
                self.crop_size
            )));
        }
        if !(self.weight_clip > 0.0 && self.weight_clip.is_finite()) {
            return Err(Error::Config(format!(
                "weight_clip must be > 0, got {}",
                self.weight_clip
            )));
        }
        if self.critic_iters_per_dam_step == 0 {
            return Err(Error::Config("critic_iters_per_dam_step must be >= 1".into()));
        }
        if self.batch_size == 0 || self.monitor_size == 0 {
            return Err(Error::Config("batch_size and monitor_size must be >= 1".into()));
        }
        for (name, v) in [
            ("dam_learning_rate", self.dam_learning_rate),
            ("dcm_learning_rate", self.dcm_learning_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        for (name, v) in [("dam_momentum", self.dam_momentum), ("dcm_momentum", self.dcm_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptReport {
    /// Critic loss after the last critic update of each step.
    pub critic_loss: Vec<f64>,
    /// Adaptation-encoder loss before its update in each step.
    pub dam_loss: Vec<f64>,
    /// Monitoring-batch gap `mean critic(source) − mean critic(target)`,
    /// measured after the critic updates of each step.
    pub gap: Vec<f64>,
    /// Number of adaptation updates applied to the returned encoder.
    pub selected_step: usize,
    pub selected_gap: f64,
}

impl AdaptReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,critic_loss,dam_loss,gap\n");
        for i in 0..self.gap.len() {
            s.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                i + 1,
                self.critic_loss[i],
                self.dam_loss[i],
                self.gap[i]
            ));
        }
        s
    }
}

/// Wasserstein critic objectives over two feature batches, with dropout off.
///
/// `critic_loss = −(mean critic(src) − mean critic(tgt))` and
/// `dam_loss = −mean critic(tgt)`.
pub fn critic_losses<T: Scalar>(
    dcm: &DcmParams<T>,
    src_feats: &[FeatureMap<T>],
    tgt_feats: &[FeatureMap<T>],
) -> Result<(f64, f64)> {
    if src_feats.is_empty() || tgt_feats.is_empty() {
        return Err(Error::Data(
            "critic_losses needs nonempty source and target batches".into(),
        ));
    }
    let src = mean_score(dcm, src_feats)?;
    let tgt = mean_score(dcm, tgt_feats)?;
    Ok((-(src - tgt), -tgt))
}

fn mean_score<T: Scalar>(dcm: &DcmParams<T>, feats: &[FeatureMap<T>]) -> Result<f64> {
    let mut s = 0.0;
    for f in feats {
        s += dcm.critic_forward::<ChaCha8Rng>(f, None)?.to_f64c();
    }
    Ok(s / feats.len() as f64)
}

fn sample_indices<R: Rng>(rng: &mut R, pool: usize, n: usize) -> Vec<usize> {
    if n <= pool {
        index::sample(rng, pool, n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..pool)).collect()
    }
}

fn random_crop<R: Rng>(img: &Image, size: usize, rng: &mut R) -> Image {
    let top = rng.gen_range(0..=img.rows() - size);
    let left = rng.gen_range(0..=img.cols() - size);
    img.crop(top, left, size, size).expect("crop inside image")
}

struct Pools<'a, T> {
    source: &'a [Image],
    target: &'a [Image],
    source_cache: Option<Vec<FeatureMap<T>>>,
}

impl<'a, T: Scalar> Pools<'a, T> {
    fn source_batch<R: Rng>(
        &self,
        ecnn: &Encoder<T>,
        n: usize,
        crop: usize,
        rng: &mut R,
    ) -> Result<Vec<FeatureMap<T>>> {
        let idx = sample_indices(rng, self.source.len(), n);
        match &self.source_cache {
            Some(cache) => Ok(idx.iter().map(|&i| cache[i].clone()).collect()),
            None => idx
                .iter()
                .map(|&i| ecnn.encode(&random_crop(&self.source[i], crop, rng)))
                .collect(),
        }
    }

    fn target_batch<R: Rng>(&self, n: usize, crop: usize, rng: &mut R) -> Vec<Image> {
        sample_indices(rng, self.target.len(), n)
            .iter()
            .map(|&i| random_crop(&self.target[i], crop, rng))
            .collect()
    }
}

fn encode_all<T: Scalar>(enc: &Encoder<T>, imgs: &[Image]) -> Result<Vec<FeatureMap<T>>> {
    imgs.iter().map(|x| enc.encode(x)).collect()
}

/// One critic update on fixed feature batches, followed by weight clipping.
/// Returns the critic loss measured during the update (dropout active).
fn critic_update<T: Scalar, R: Rng>(
    dcm: &mut DcmParams<T>,
    grad: &mut DcmParams<T>,
    opt: &mut MomentumSgd<T>,
    clip: T,
    src: &[FeatureMap<T>],
    tgt: &[FeatureMap<T>],
    rng: &mut R,
) -> Result<f64> {
    grad.zero();
    let (ns, nt) = (src.len() as f64, tgt.len() as f64);
    let mut loss = 0.0;
    for (feats, sign, n) in [(src, -1.0, ns), (tgt, 1.0, nt)] {
        let d = T::lit(sign / n);
        for f in feats {
            let (score, trace) = dcm.critic_forward_traced(f, Some(&mut *rng))?;
            loss += sign * score.to_f64c() / n;
            dcm.backward(&trace, d, grad, false);
        }
    }
    opt.step(dcm, grad);
    dcm.clip_weights(clip);
    Ok(loss)
}

/// Trains the adaptation encoder against a freshly initialised critic.
///
/// The adaptation encoder starts as an exact copy of `ecnn`, which is never
/// modified. Returns the selected encoder snapshot, the final critic and
/// the per-step report.
pub fn train_dam<T: Scalar>(
    ecnn: &Encoder<T>,
    source_imgs: &[Image],
    target_imgs: &[Image],
    cfg: &AdaptConfig,
) -> Result<(DamParams<T>, DcmParams<T>, AdaptReport)> {
    let arch = CriticArch {
        feature_channels: ecnn.kernels()[3],
        ..CriticArch::STANDARD
    };
    train_dam_with(ecnn, source_imgs, target_imgs, cfg, arch, |_, _| {})
}

/// [`train_dam`] with an explicit critic architecture and a per-step
/// observer `(update, &DcmParams)` invoked after every critic update
/// (warm-up included), `update` counting from zero.
pub fn train_dam_with<T: Scalar>(
    ecnn: &Encoder<T>,
    source_imgs: &[Image],
    target_imgs: &[Image],
    cfg: &AdaptConfig,
    critic_arch: CriticArch,
    mut observe: impl FnMut(usize, &DcmParams<T>),
) -> Result<(DamParams<T>, DcmParams<T>, AdaptReport)> {
    cfg.validate()?;
    if source_imgs.is_empty() || target_imgs.is_empty() {
        return Err(Error::Data(
            "adaptation needs nonempty source and target image sets".into(),
        ));
    }
    let crop = cfg.crop_size;
    for (name, set) in [("source", source_imgs), ("target", target_imgs)] {
        if let Some(i) = set.iter().position(|x| x.rows() < crop || x.cols() < crop) {
            let (r, c) = set[i].shape();
            return Err(Error::Shape(format!(
                "{name} image {i} is {r}x{c}, smaller than crop_size {crop}"
            )));
        }
    }
    if critic_arch.feature_channels != ecnn.kernels()[3] {
        return Err(Error::Config(
            "critic input width must match encoder feature channels".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dam = DamParams::from_ecnn(ecnn);
    let clip = T::lit(cfg.weight_clip);
    let mut dcm = DcmParams::<T>::init(critic_arch, rng.gen());
    dcm.clip_weights(clip);
    let mut report = AdaptReport {
        selected_gap: f64::NAN,
        ..AdaptReport::default()
    };
    if cfg.total_dam_steps == 0 {
        return Ok((dam, dcm, report));
    }

    let source_cache = if cfg.cache_source_features {
        if let Some(i) = source_imgs.iter().position(|x| x.shape() != (crop, crop)) {
            return Err(Error::Config(format!(
                "cache_source_features needs {crop}x{crop} source images; image {i} differs"
            )));
        }
        Some(encode_all(ecnn, source_imgs)?)
    } else {
        None
    };
    let pools = Pools {
        source: source_imgs,
        target: target_imgs,
        source_cache,
    };

    // Fixed monitoring batch.
    let monitor_src = pools.source_batch(ecnn, cfg.monitor_size, crop, &mut rng)?;
    let monitor_tgt = pools.target_batch(cfg.monitor_size, crop, &mut rng);

    let mut dcm_grad = dcm.zeros_like();
    let mut dcm_opt = MomentumSgd::new(T::lit(cfg.dcm_learning_rate), T::lit(cfg.dcm_momentum));
    let mut dam_grad = DamParams {
        encoder: dam.encoder.zeros_like(),
    };
    let mut dam_opt = MomentumSgd::new(T::lit(cfg.dam_learning_rate), T::lit(cfg.dam_momentum));

    let mut updates = 0;
    for _ in 0..cfg.critic_warmup_iters {
        let src = pools.source_batch(ecnn, cfg.batch_size, crop, &mut rng)?;
        let tgt = encode_all(&dam.encoder, &pools.target_batch(cfg.batch_size, crop, &mut rng))?;
        let loss = critic_update(&mut dcm, &mut dcm_grad, &mut dcm_opt, clip, &src, &tgt, &mut rng)?;
        observe(updates, &dcm);
        updates += 1;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite critic loss during warm-up, lr {}",
                cfg.dcm_learning_rate
            )));
        }
    }

    let mut snapshots: Vec<(usize, DamParams<T>)> = Vec::new();
    for step in 0..cfg.total_dam_steps {
        if cfg.selection_interval > 0 && step % cfg.selection_interval == 0 {
            snapshots.push((step, dam.clone()));
        }
        let src = pools.source_batch(ecnn, cfg.batch_size, crop, &mut rng)?;
        let tgt_imgs = pools.target_batch(cfg.batch_size, crop, &mut rng);
        let tgt = encode_all(&dam.encoder, &tgt_imgs)?;

        let mut critic_loss = 0.0;
        for _ in 0..cfg.critic_iters_per_dam_step {
            critic_loss = critic_update(&mut dcm, &mut dcm_grad, &mut dcm_opt, clip, &src, &tgt, &mut rng)?;
            observe(updates, &dcm);
            updates += 1;
        }

        let monitor_tgt_feats = encode_all(&dam.encoder, &monitor_tgt)?;
        let (gap_loss, _) = critic_losses(&dcm, &monitor_src, &monitor_tgt_feats)?;
        let gap = -gap_loss;

        // Adaptation-encoder update with the critic held fixed.
        dam_grad.zero();
        let inv_b = T::lit(-1.0 / tgt_imgs.len() as f64);
        let mut dam_loss = 0.0;
        let mut scratch = dcm.zeros_like();
        for img in &tgt_imgs {
            let (feat, etrace) = dam.encoder.encode_traced(img)?;
            let (score, ctrace) = dcm.critic_forward_traced(&feat, Some(&mut rng))?;
            dam_loss -= score.to_f64c() / tgt_imgs.len() as f64;
            let dfeat = dcm.backward(&ctrace, inv_b, &mut scratch, true).expect("feature grad");
            dam.encoder.backward(&etrace, &dfeat, &mut dam_grad.encoder);
        }
        if !(critic_loss.is_finite() && dam_loss.is_finite() && gap.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite adversarial loss at step {} (critic {critic_loss}, dam {dam_loss}); learning rates {}/{}",
                step + 1,
                cfg.dcm_learning_rate,
                cfg.dam_learning_rate
            )));
        }
        dam_opt.step(&mut dam, &dam_grad);

        report.critic_loss.push(critic_loss);
        report.dam_loss.push(dam_loss);
        report.gap.push(gap);
    }

    // Every snapshot is judged by the same (final) critic; ties go to the
    // later state.
    let total = cfg.total_dam_steps;
    let mut selected = (total, abs_gap(&dcm, &monitor_src, &dam.encoder, &monitor_tgt)?);
    let mut chosen = None;
    for (i, (steps_done, snap)) in snapshots.iter().enumerate().rev() {
        let g = abs_gap(&dcm, &monitor_src, &snap.encoder, &monitor_tgt)?;
        if g < selected.1 {
            selected = (*steps_done, g);
            chosen = Some(i);
        }
    }
    let (selected_step, selected_gap) = selected;
    let dam = match chosen {
        Some(i) => snapshots.swap_remove(i).1,
        None => dam,
    };
    report.selected_step = selected_step;
    report.selected_gap = selected_gap;
    Ok((dam, dcm, report))
}

fn abs_gap<T: Scalar>(
    dcm: &DcmParams<T>,
    monitor_src: &[FeatureMap<T>],
    encoder: &Encoder<T>,
    monitor_tgt: &[Image],
) -> Result<f64> {
    Ok(critic_losses(dcm, monitor_src, &encode_all(encoder, monitor_tgt)?)?
        .0
        .abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::model::DrmArch;
    use crate::tensor::Tensor;

    #[test]
    fn identical_batches_have_zero_critic_loss() {
        let dcm = DcmParams::<f64>::init(
            CriticArch {
                feature_channels: 4,
                conv: [3, 5],
                hidden: 6,
                dropout: 0.5,
            },
            3,
        );
        let feats: Vec<_> = (0..3)
            .map(|k| Tensor::from_vec(4, 2, 2, (0..16).map(|i| ((i + k) as f64 * 0.3).sin()).collect()).unwrap())
            .collect();
        let (c, d) = critic_losses(&dcm, &feats, &feats).unwrap();
        assert!(c.abs() < 1e-15);
        assert!(d.is_finite());
    }

    #[test]
    fn constant_critic_losses() {
        // Zero weights everywhere except the head bias: critic ≡ c.
        let mut dcm = DcmParams::<f64>::zeros(CriticArch {
            feature_channels: 4,
            conv: [3, 5],
            hidden: 6,
            dropout: 0.5,
        });
        dcm.head.bias[0] = 0.75;
        let a = vec![Tensor::from_vec(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap()];
        let b = vec![
            Tensor::zeros(4, 1, 1),
            Tensor::from_vec(4, 1, 1, vec![-1.0; 4]).unwrap(),
        ];
        let (c, d) = critic_losses(&dcm, &a, &b).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(d, -0.75);
    }

    #[test]
    fn empty_batch_rejected() {
        let dcm = DcmParams::<f64>::zeros(CriticArch {
            feature_channels: 4,
            conv: [3, 5],
            hidden: 6,
            dropout: 0.5,
        });
        assert!(critic_losses(&dcm, &[], &[Tensor::zeros(4, 1, 1)]).is_err());
    }

    #[test]
    fn config_rejects_indivisible_crop() {
        let cfg = AdaptConfig {
            crop_size: 60,
            ..AdaptConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_returns_ecnn_copy() {
        let drm = crate::model::DrmParams::<f32>::init(DrmArch::TINY, 5);
        let imgs = vec![Grid::<f32>::filled(16, 16, 0.3)];
        let cfg = AdaptConfig {
            total_dam_steps: 0,
            crop_size: 16,
            ..AdaptConfig::default()
        };
        let (dam, _, report) = train_dam(&drm.encoder, &imgs, &imgs, &cfg).unwrap();
        assert_eq!(dam.encoder, drm.encoder);
        assert!(report.gap.is_empty());
    }

    #[test]
    fn small_target_rejected() {
        let drm = crate::model::DrmParams::<f32>::init(DrmArch::TINY, 5);
        let src = vec![Grid::<f32>::filled(16, 16, 0.3)];
        let tgt = vec![Grid::<f32>::filled(8, 16, 0.3)];
        let cfg = AdaptConfig {
            total_dam_steps: 1,
            crop_size: 16,
            ..AdaptConfig::default()
        };
        assert!(matches!(
            train_dam(&drm.encoder, &src, &tgt, &cfg),
            Err(Error::Shape(_))
        ));
    }
}
