//! Desk-scale source training run: 160 train / 40 validation images at
//! 64×64 with 10–25 cells. Usage: pilot_drm [lr] [target_scale] [batch] [epochs] [momentum]

use std::time::Instant;

use cellcount::densitymap::{integrate_count, KernelConfig};
use cellcount::evalcount::estimate_density;
use cellcount::model::DrmArch;
use cellcount::source_training::{make_samples, train_source_drm_from, TrainConfig};
use cellcount::synthgen::{generate_annotated, SynthConfig};
use cellcount::DrmParams;

fn arg(i: usize, default: f64) -> f64 {
    std::env::args().nth(i).map_or(default, |s| s.parse().unwrap())
}

fn main() {
    let synth = SynthConfig {
        image_height: 64,
        image_width: 64,
        cell_count_range: [10, 25],
        seed: 11,
        ..SynthConfig::default()
    };
    let imgs = generate_annotated(&synth, 200).unwrap();
    let samples = make_samples(&imgs, &KernelConfig::default()).unwrap();
    let cfg = TrainConfig {
        learning_rate: arg(1, 1e-3),
        target_scale: arg(2, 100.0),
        batch_size: arg(3, 8.0) as usize,
        epochs: arg(4, 40.0) as usize,
        momentum: arg(5, 0.9),
        seed: 11,
        ..TrainConfig::default()
    };
    println!("{cfg:?}");
    let t0 = Instant::now();
    let init = DrmParams::init(DrmArch::STANDARD, cfg.seed);
    let (drm, report) = train_source_drm_from(&samples, &cfg, init, |s| {
        println!(
            "epoch {:>3} train {:.4e} val {:.4e} t={:.0}s",
            s.epoch + 1,
            s.train_loss,
            s.val_mse,
            t0.elapsed().as_secs_f64()
        );
    })
    .unwrap();
    let val = &imgs[160..];
    let truth: Vec<f64> = val.iter().map(|a| a.centroids.len() as f64).collect();
    let mean_gt = truth.iter().sum::<f64>() / truth.len() as f64;
    let zero_mae = mean_gt;
    let mae = val
        .iter()
        .zip(&truth)
        .map(|(a, t)| (integrate_count(&estimate_density(&drm.encoder, &drm.decoder, &a.image).unwrap()) - t).abs())
        .sum::<f64>()
        / truth.len() as f64;
    if let Ok(path) = std::env::var("PILOT_SAVE") {
        cellcount::io::checkpoint::drm_checkpoint(&drm)
            .save(std::path::Path::new(&path))
            .unwrap();
    }
    println!(
        "best epoch {} mae {mae:.3} mean_gt {mean_gt:.2} ratio {:.3} zero_ratio {:.3}",
        report.best_epoch + 1,
        mae / mean_gt,
        mae / zero_mae
    );
}
