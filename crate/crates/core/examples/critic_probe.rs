//! Measures how far critic weights move during adaptation.
//! Usage: critic_probe <drm.ckpt> <dcm_lr> <dam_lr> <steps>

use std::path::Path;

use cellcount::adaptation::{train_dam_with, AdaptConfig};
use cellcount::io::checkpoint::load_drm;
use cellcount::model::{CriticArch, ParamSet};
use cellcount::synthgen::{apply_shift_all, generate_annotated, ShiftConfig, SynthConfig};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let drm = load_drm::<f32>(Path::new(&a[1])).unwrap();
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
    let held = generate_annotated(&SynthConfig { seed: 5011, ..synth }, 40).unwrap();
    let target: Vec<_> = apply_shift_all(
        &held,
        &ShiftConfig {
            seed: 9011,
            ..ShiftConfig::default()
        },
    )
    .unwrap()
    .into_iter()
    .map(|a| a.image)
    .collect();
    let cfg = AdaptConfig {
        dcm_learning_rate: a[2].parse().unwrap(),
        dam_learning_rate: a[3].parse().unwrap(),
        total_dam_steps: a[4].parse().unwrap(),
        batch_size: 8,
        crop_size: 64,
        cache_source_features: true,
        seed: 2,
        ..AdaptConfig::default()
    };
    let arch = CriticArch {
        feature_channels: 512,
        ..CriticArch::STANDARD
    };
    let mut first: Option<Vec<f32>> = None;
    let mut last = Vec::new();
    let (_, _, r) = train_dam_with(&drm.encoder, &source, &target, &cfg, arch, |_, d| {
        let f = d.flatten();
        if first.is_none() {
            first = Some(f.clone());
        }
        last = f;
    })
    .unwrap();
    let first = first.unwrap();
    let moved = first.iter().zip(&last).filter(|(x, y)| x != y).count();
    let mean_abs: f64 = first.iter().zip(&last).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / first.len() as f64;
    let at_clip = last.iter().filter(|v| v.abs() >= 0.01).count();
    println!(
        "params {} moved {} mean|d| {mean_abs:.3e} at clip {}",
        first.len(),
        moved,
        at_clip
    );
    println!(
        "critic loss {:?}",
        r.critic_loss.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>()
    );
    println!("gap {:?}", r.gap.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>());
}
