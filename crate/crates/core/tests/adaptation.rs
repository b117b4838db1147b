use cellcount::adaptation::{critic_losses, train_dam_with, AdaptConfig};
use cellcount::densitymap::KernelConfig;
use cellcount::grid::Grid;
use cellcount::model::{CriticArch, DcmParams, DrmArch, DrmParams, Encoder, ParamSet};
use cellcount::source_training::{make_samples, train_source_drm, TrainConfig};
use cellcount::synthgen::{apply_shift_all, generate_annotated, Image, ShiftConfig, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KERNELS: [usize; 4] = [3, 4, 4, 6];

fn arch() -> CriticArch {
    CriticArch {
        feature_channels: KERNELS[3],
        conv: [4, 4],
        hidden: 8,
        dropout: 0.5,
    }
}

fn images(seed: u64, n: usize) -> Vec<Image> {
    let cfg = SynthConfig {
        image_height: 24,
        image_width: 24,
        cell_count_range: [2, 5],
        cell_radius_range: [2.0, 3.0],
        seed,
        ..SynthConfig::default()
    };
    generate_annotated(&cfg, n)
        .unwrap()
        .into_iter()
        .map(|a| a.image)
        .collect()
}

fn cfg(steps: usize) -> AdaptConfig {
    AdaptConfig {
        dam_learning_rate: 0.5,
        dcm_learning_rate: 0.05,
        batch_size: 3,
        crop_size: 16,
        critic_warmup_iters: 2,
        total_dam_steps: steps,
        monitor_size: 3,
        selection_interval: 2,
        seed: 5,
        ..AdaptConfig::default()
    }
}

fn encoder() -> Encoder<f32> {
    Encoder::init(KERNELS, &mut ChaCha8Rng::seed_from_u64(2))
}

#[test]
fn every_critic_update_respects_the_clip() {
    let (src, tgt) = (images(1, 6), images(2, 6));
    let c = cfg(5);
    let mut seen = 0;
    train_dam_with(&encoder(), &src, &tgt, &c, arch(), |i, dcm: &DcmParams<f32>| {
        assert_eq!(i, seen);
        seen += 1;
        assert!(dcm.flatten().iter().all(|v| v.abs() <= c.weight_clip as f32));
    })
    .unwrap();
    assert_eq!(
        seen,
        c.critic_warmup_iters + c.total_dam_steps * c.critic_iters_per_dam_step
    );
}

#[test]
fn adaptation_is_deterministic_and_reports_every_step() {
    let (src, tgt) = (images(1, 6), images(2, 6));
    let run = || train_dam_with(&encoder(), &src, &tgt, &cfg(4), arch(), |_, _| {}).unwrap();
    let (d1, c1, r1) = run();
    let (d2, c2, r2) = run();
    assert_eq!(d1.flatten(), d2.flatten());
    assert_eq!(c1.flatten(), c2.flatten());
    assert_eq!(r1, r2);
    assert_eq!((r1.gap.len(), r1.critic_loss.len(), r1.dam_loss.len()), (4, 4, 4));
    assert!([0, 2, 4].contains(&r1.selected_step));
    assert!(r1.to_csv().starts_with("step,critic_loss,dam_loss,gap\n1,"));
}

#[test]
fn zero_steps_return_the_source_encoder_bitwise() {
    let enc = encoder();
    let (dam, dcm, report) = train_dam_with(&enc, &images(1, 3), &images(2, 3), &cfg(0), arch(), |_, _| {}).unwrap();
    let bits = |v: Vec<f32>| v.into_iter().map(f32::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(dam.flatten()), bits(enc.flatten()));
    assert!(report.gap.is_empty());
    assert!(dcm.flatten().iter().all(|v| v.abs() <= 0.01));
}

#[test]
fn selection_disabled_returns_final_encoder() {
    let mut c = cfg(3);
    c.selection_interval = 0;
    let (_, _, r) = train_dam_with(&encoder(), &images(1, 4), &images(2, 4), &c, arch(), |_, _| {}).unwrap();
    assert_eq!(r.selected_step, 3);
}

#[test]
fn identical_batches_have_zero_critic_gap() {
    let enc = encoder();
    let feats: Vec<_> = images(3, 4)
        .iter()
        .map(|x| enc.encode(&x.crop(0, 0, 16, 16).unwrap()).unwrap())
        .collect();
    let dcm = DcmParams::<f32>::init(arch(), 1);
    let (critic, _) = critic_losses(&dcm, &feats, &feats).unwrap();
    assert_eq!(critic, 0.0);
}

#[test]
fn undersized_images_and_bad_configs_are_rejected() {
    let small = vec![Grid::filled(8, 8, 0.5f32)];
    assert!(train_dam_with(&encoder(), &small, &small, &cfg(1), arch(), |_, _| {})
        .unwrap_err()
        .is_usage());
    let mut c = cfg(1);
    c.crop_size = 12;
    assert!(
        train_dam_with(&encoder(), &images(1, 2), &images(1, 2), &c, arch(), |_, _| {})
            .unwrap_err()
            .is_usage()
    );
}

#[test]
fn source_training_is_deterministic_and_lowers_loss() {
    let synth = SynthConfig {
        image_height: 16,
        image_width: 16,
        cell_count_range: [1, 4],
        cell_radius_range: [2.0, 3.0],
        seed: 4,
        ..SynthConfig::default()
    };
    let samples = make_samples(&generate_annotated(&synth, 10).unwrap(), &KernelConfig::new(1.5, 4)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        epochs: 6,
        seed: 1,
        target_scale: 10.0,
        ..TrainConfig::default()
    };
    let arch = DrmArch {
        encoder: [4, 4, 4, 8],
        decoder: [4, 4, 4, 1],
    };
    let (a, ra) = train_source_drm::<f64>(&samples, &cfg, arch).unwrap();
    let (b, rb) = train_source_drm::<f64>(&samples, &cfg, arch).unwrap();
    assert_eq!(a.flatten(), b.flatten());
    assert_eq!(ra, rb);
    assert!(ra.best_validation_mse <= ra.val_mse[0]);
    assert!(ra.train_loss.last().unwrap() < &ra.train_loss[0]);
    let init = DrmParams::<f64>::init(arch, 1);
    assert_ne!(a.flatten(), init.flatten());
}

#[test]
fn shifted_targets_keep_annotations() {
    let cfg = SynthConfig {
        image_height: 24,
        image_width: 24,
        cell_count_range: [2, 4],
        cell_radius_range: [2.0, 3.0],
        seed: 8,
        ..SynthConfig::default()
    };
    let src = generate_annotated(&cfg, 3).unwrap();
    let tgt = apply_shift_all(&src, &ShiftConfig::default()).unwrap();
    for (a, b) in src.iter().zip(&tgt) {
        assert_eq!(a.centroids, b.centroids);
        assert_ne!(a.image, b.image);
    }
}
