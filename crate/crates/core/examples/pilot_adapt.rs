//! Adaptation pilot on shifted held-out images.
//! PILOT_SELF=1 adapts source to itself.
//! Usage: pilot_adapt <drm.ckpt> [dam_lr] [dcm_lr] [batch] [steps] [warmup] [seed] [selection_interval]

use std::path::Path;
use std::time::Instant;

use cellcount::adaptation::{train_dam_with, AdaptConfig};
use cellcount::densitymap::integrate_count;
use cellcount::evalcount::estimate_density;
use cellcount::io::checkpoint::load_drm;
use cellcount::model::CriticArch;
use cellcount::synthgen::{apply_shift_all, generate_annotated, ShiftConfig, SynthConfig};

fn arg(i: usize, default: f64) -> f64 {
    std::env::args().nth(i).map_or(default, |s| s.parse().unwrap())
}

fn main() {
    let drm = load_drm::<f32>(Path::new(&std::env::args().nth(1).unwrap())).unwrap();
    let seed = arg(7, 1.0) as u64;
    let synth = SynthConfig {
        image_height: 64,
        image_width: 64,
        cell_count_range: [10, 25],
        seed: 11,
        ..SynthConfig::default()
    };
    let source: Vec<_> = generate_annotated(&synth, 160)
        .unwrap()
        .into_iter()
        .map(|a| a.image)
        .collect();
    let held = generate_annotated(
        &SynthConfig {
            seed: 5011,
            ..synth.clone()
        },
        40,
    )
    .unwrap();
    let target = apply_shift_all(
        &held,
        &ShiftConfig {
            seed: 9011,
            ..ShiftConfig::default()
        },
    )
    .unwrap();
    let tgt_imgs: Vec<_> = if std::env::var_os("PILOT_SELF").is_some() {
        source.clone()
    } else {
        target.iter().map(|a| a.image.clone()).collect()
    };
    let mae = |enc: &cellcount::Encoder| {
        target
            .iter()
            .map(|a| {
                (integrate_count(&estimate_density(enc, &drm.decoder, &a.image).unwrap()) - a.centroids.len() as f64)
                    .abs()
            })
            .sum::<f64>()
            / target.len() as f64
    };
    let mean_est = |enc: &cellcount::Encoder| {
        target
            .iter()
            .map(|a| integrate_count(&estimate_density(enc, &drm.decoder, &a.image).unwrap()))
            .sum::<f64>()
            / target.len() as f64
    };
    let mean_gt = target.iter().map(|a| a.centroids.len() as f64).sum::<f64>() / target.len() as f64;
    let src_mae = mae(&drm.encoder);
    println!(
        "source-only mae {src_mae:.3} mean est {:.2} mean gt {mean_gt:.2}",
        mean_est(&drm.encoder)
    );
    let cfg = AdaptConfig {
        dam_learning_rate: arg(2, 1e-4),
        dcm_learning_rate: arg(3, 1e-3),
        batch_size: arg(4, 8.0) as usize,
        total_dam_steps: arg(5, 100.0) as usize,
        critic_warmup_iters: arg(6, 20.0) as usize,
        crop_size: 64,
        cache_source_features: true,
        selection_interval: arg(8, 50.0) as usize,
        seed,
        ..AdaptConfig::default()
    };
    println!("{cfg:?}");
    let t0 = Instant::now();
    let arch = CriticArch {
        feature_channels: 512,
        ..CriticArch::STANDARD
    };
    let (dam, _dcm, report) = train_dam_with(&drm.encoder, &source, &tgt_imgs, &cfg, arch, |_, _| {}).unwrap();
    for (i, g) in report.gap.iter().enumerate() {
        if i % 10 == 0 || i + 1 == report.gap.len() {
            println!(
                "step {i:>4} critic {:.4e} dam {:.4e} gap {g:.4e}",
                report.critic_loss[i], report.dam_loss[i]
            );
        }
    }
    let gmax = report.gap.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    println!(
        "initial |gap| {:.3e} max |gap| {gmax:.3e}",
        report.gap.first().map_or(0.0, |g| g.abs())
    );
    let ad = mae(&dam.encoder);
    println!(
        "selected {:?} gap {:.3e} adapt mae {ad:.3} mean est {:.2} ratio {:.3} t={:.0}s",
        report.selected_step,
        report.selected_gap,
        mean_est(&dam.encoder),
        ad / src_mae,
        t0.elapsed().as_secs_f64()
    );
}
