//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cellcount::adaptation::{train_dam_with, AdaptConfig};
use cellcount::densitymap::{build_density_map, integrate_count, make_kernel, KernelConfig};
use cellcount::evalcount::{estimate_density, score_arm, Arm, CountResult};
use cellcount::grid::Grid;
use cellcount::model::{CriticArch, DrmArch, DrmParams, ParamSet};
use cellcount::source_training::{make_samples, train_source_drm_from, TrainConfig};
use cellcount::synthgen::{apply_shift_all, generate_annotated, AnnotatedImage, Image, ShiftConfig, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(o: &Outcome) -> String {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    format!("{tag} [{}] {}: {}", o.id, o.name, o.detail)
}

fn kernel_identities() -> Outcome {
    let mut worst_kernel = 0.0f64;
    for sigma in [0.5, 1.0, 3.0, 10.0] {
        for k in [3, 10, 25] {
            let g = make_kernel(&KernelConfig::new(sigma, k)).unwrap();
            worst_kernel = worst_kernel.max((g.sum() - 1.0).abs());
        }
    }
    let synth = SynthConfig {
        seed: 101,
        ..SynthConfig::default()
    };
    let cfg = KernelConfig::default();
    let mut worst_rel = 0.0f64;
    for a in generate_annotated(&synth, 100).unwrap() {
        let n = a.centroids.len() as f64;
        let map = build_density_map(a.image.shape(), &a.centroids, &cfg).unwrap();
        worst_rel = worst_rel.max((integrate_count(&map) - n).abs() / n);
    }
    Outcome {
        id: 1,
        name: "kernel and count identities",
        pass: worst_kernel <= 1e-12 && worst_rel <= 1e-6,
        detail: format!("max |kernel sum - 1| = {worst_kernel:.2e} (tol 1e-12); max count error / N = {worst_rel:.2e} over 100 images (tol 1e-6)"),
    }
}

fn gradient_check() -> Outcome {
    let g = common::tiny_drm_gradient_check(2024, 1e-3, 1e-3);
    Outcome {
        id: 2,
        name: "gradient check",
        pass: g.fraction() >= 0.99,
        detail: format!(
            "{}/{} coordinates within relative error 1e-3 ({:.2}%, need >= 99%); worst {:.2e}",
            g.agreeing,
            g.total,
            100.0 * g.fraction(),
            g.worst
        ),
    }
}

fn shape_audit() -> Outcome {
    let arch = DrmArch::STANDARD;
    let plan: Vec<usize> = arch.conv_shapes().iter().map(|s| s.1).collect();
    let expected = [
        ("encoder.conv0.weight", vec![32, 1, 3, 3]),
        ("encoder.conv1.weight", vec![64, 32, 3, 3]),
        ("encoder.conv2.weight", vec![128, 64, 3, 3]),
        ("encoder.conv3.weight", vec![512, 128, 3, 3]),
        ("decoder.conv0.weight", vec![128, 512, 3, 3]),
        ("decoder.conv1.weight", vec![64, 128, 3, 3]),
        ("decoder.conv2.weight", vec![32, 64, 3, 3]),
        ("decoder.conv3.weight", vec![1, 32, 1, 1]),
    ];
    let drm = DrmParams::<f32>::init(arch, 3);
    let named = drm.named();
    let shapes_ok = expected.iter().all(|(name, shape)| {
        named
            .iter()
            .any(|(n, s, v)| n == name && s == shape && v.len() == shape.iter().product::<usize>())
    }) && named.len() == 16;
    let img = Grid::from_fn(256, 256, |i, j| ((i * 31 + j * 17) % 97) as f32 / 97.0);
    let feat = drm.encoder.encode(&img).unwrap();
    let out = drm.decoder.decode(&feat).unwrap();
    let pass = plan == [32, 64, 128, 512, 128, 64, 32, 1]
        && shapes_ok
        && feat.shape() == (512, 32, 32)
        && out.shape() == (256, 256);
    Outcome {
        id: 3,
        name: "shape audit",
        pass,
        detail: format!(
            "plan {plan:?}; tensor shapes {}; 256x256 -> features {:?} (c,h,w) -> density {:?}",
            if shapes_ok { "match" } else { "MISMATCH" },
            feat.shape(),
            out.shape()
        ),
    }
}

/// Desk-scale settings, fixed by the pilot runs recorded in docs/pilot.md.
fn desk_synth() -> SynthConfig {
    SynthConfig {
        image_height: 64,
        image_width: 64,
        cell_count_range: [10, 25],
        seed: 11,
        ..SynthConfig::default()
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-6,
        momentum: 0.9,
        batch_size: 8,
        epochs: 20,
        seed: 11,
        validation_fraction: 0.2,
        target_scale: 100.0,
    }
}

fn desk_adapt(seed: u64) -> AdaptConfig {
    AdaptConfig {
        dam_learning_rate: 0.3,
        dcm_learning_rate: 0.1,
        batch_size: 8,
        crop_size: 64,
        critic_warmup_iters: 10,
        total_dam_steps: 500,
        cache_source_features: true,
        seed,
        ..AdaptConfig::default()
    }
}

fn mae(drm: &DrmParams<f32>, enc: &cellcount::Encoder, set: &[AnnotatedImage]) -> f64 {
    let results: Vec<CountResult> = set
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let d = estimate_density(enc, &drm.decoder, &a.image).unwrap();
            CountResult::new(i.to_string(), integrate_count(&d), Some(a.centroids.len() as u64))
        })
        .collect();
    score_arm(Arm::Adaptation, &results).unwrap().mae
}

fn source_training(images: &[AnnotatedImage]) -> (DrmParams<f32>, Outcome) {
    let t0 = Instant::now();
    let samples = make_samples(images, &KernelConfig::default()).unwrap();
    let cfg = desk_train();
    let init = DrmParams::init(DrmArch::STANDARD, cfg.seed);
    let (drm, report) = train_source_drm_from(&samples, &cfg, init, |_| {}).unwrap();
    let val = &images[160..];
    let mean_gt = val.iter().map(|a| a.centroids.len() as f64).sum::<f64>() / val.len() as f64;
    // The zero predictor's MAE is the mean ground-truth count.
    let zero_mae = mean_gt;
    let m = mae(&drm, &drm.encoder, val);
    let outcome = Outcome {
        id: 4,
        name: "source model desk-scale learning",
        pass: m <= 0.15 * mean_gt && m <= 0.5 * zero_mae,
        detail: format!(
            "validation MAE {m:.3} vs mean count {mean_gt:.2} ({:.1}%, need <= 15%), zero-predictor MAE {zero_mae:.2} ({:.1}%, need <= 50%); best epoch {}/{}; {:.0}s",
            100.0 * m / mean_gt,
            100.0 * m / zero_mae,
            report.best_epoch + 1,
            cfg.epochs,
            t0.elapsed().as_secs_f64()
        ),
    };
    (drm, outcome)
}

fn pseudo_target() -> Vec<AnnotatedImage> {
    let held_out = generate_annotated(
        &SynthConfig {
            seed: 5011,
            ..desk_synth()
        },
        40,
    )
    .unwrap();
    apply_shift_all(
        &held_out,
        &ShiftConfig {
            seed: 9011,
            ..ShiftConfig::default()
        },
    )
    .unwrap()
}

struct ClipAudit {
    updates: usize,
    worst: f32,
}

fn domain_shift(drm: &DrmParams<f32>, source: &[Image], clip: &mut ClipAudit) -> Outcome {
    let t0 = Instant::now();
    let target = pseudo_target();
    let target_imgs: Vec<Image> = target.iter().map(|a| a.image.clone()).collect();
    let source_only = mae(drm, &drm.encoder, &target);
    let arch = CriticArch {
        feature_channels: drm.encoder.kernels()[3],
        ..CriticArch::STANDARD
    };
    let mut adapted = Vec::new();
    for seed in [1, 2, 3] {
        let cfg = desk_adapt(seed);
        let (dam, _, _) = train_dam_with(&drm.encoder, source, &target_imgs, &cfg, arch, |_, dcm| {
            clip.updates += 1;
            clip.worst = dcm.flatten().iter().fold(clip.worst, |w, v| w.max(v.abs()));
        })
        .unwrap();
        adapted.push(mae(drm, &dam.encoder, &target));
    }
    let mut sorted = adapted.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[1];
    Outcome {
        id: 5,
        name: "domain-shift reenactment",
        pass: median <= 0.8 * source_only,
        detail: format!(
            "Source-only MAE {source_only:.3}; Adaptation MAE per seed {:?}; median {median:.3} = {:.3} x Source-only (need <= 0.8); {:.0}s",
            adapted.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            median / source_only,
            t0.elapsed().as_secs_f64()
        ),
    }
}

/// Allowed growth of the monitoring |gap| over its initial value when the
/// two domains coincide. Pilot: same-domain growth stayed under 1.7e-5 while
/// the shifted run started at 5.8e-4.
const SELF_GAP_TOLERANCE: f64 = 5e-5;

fn adversarial_mechanics(drm: &DrmParams<f32>, source: &[Image], clip: &mut ClipAudit) -> Outcome {
    let mut cfg = desk_adapt(7);
    cfg.total_dam_steps = 60;
    let arch = CriticArch {
        feature_channels: drm.encoder.kernels()[3],
        ..CriticArch::STANDARD
    };
    let (_, _, report) = train_dam_with(&drm.encoder, source, source, &cfg, arch, |_, dcm| {
        clip.updates += 1;
        clip.worst = dcm.flatten().iter().fold(clip.worst, |w, v| w.max(v.abs()));
    })
    .unwrap();
    let g0 = report.gap[0].abs();
    let gmax = report.gap.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let gap_ok = gmax <= g0 + SELF_GAP_TOLERANCE;

    let mut zero = cfg.clone();
    zero.total_dam_steps = 0;
    let (dam0, _, _) = train_dam_with(&drm.encoder, source, source, &zero, arch, |_, _| {}).unwrap();
    let bitwise = drm
        .encoder
        .flatten()
        .iter()
        .map(|v| v.to_bits())
        .eq(dam0.flatten().iter().map(|v| v.to_bits()));

    let clip_ok = clip.updates > 0 && clip.worst <= cfg.weight_clip as f32;
    Outcome {
        id: 6,
        name: "adversarial mechanics",
        pass: clip_ok && gap_ok && bitwise,
        detail: format!(
            "max |critic weight| {:.4e} over {} critic updates (clip {}); same-domain |gap| initial {g0:.3e}, max {gmax:.3e} (tol {SELF_GAP_TOLERANCE:.0e}); zero-step encoder bitwise equal: {bitwise}",
            clip.worst, clip.updates, cfg.weight_clip
        ),
    }
}

fn cellcount(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cellcount"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "cellcount {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_pipeline(root: &Path, config: &Path) -> Vec<u8> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = config.to_str().unwrap();
    cellcount(&[
        "synth",
        "--config",
        cfg,
        "--seed",
        "42",
        "--count",
        "12",
        "--out",
        &p("src"),
    ]);
    cellcount(&[
        "shift",
        "--config",
        cfg,
        "--seed",
        "42",
        "--input",
        &p("src"),
        "--out",
        &p("tgt"),
    ]);
    cellcount(&[
        "train-drm",
        "--config",
        cfg,
        "--seed",
        "42",
        "--data",
        &p("src"),
        "--out",
        &p("ckpt"),
    ]);
    cellcount(&[
        "adapt",
        "--config",
        cfg,
        "--seed",
        "42",
        "--drm",
        &p("ckpt/drm.ckpt"),
        "--source",
        &p("src"),
        "--target",
        &p("tgt"),
        "--out",
        &p("ckpt"),
    ]);
    cellcount(&[
        "eval",
        "--config",
        cfg,
        "--seed",
        "42",
        "--data",
        &p("tgt"),
        "--drm",
        &p("ckpt/drm.ckpt"),
        "--dam",
        &p("ckpt/dam.ckpt"),
        "--out",
        &p("report"),
    ]);
    let mut all = Vec::new();
    for arm in ["adaptation", "source_only"] {
        all.extend(std::fs::read(root.join(format!("report/counts_{arm}.csv"))).unwrap());
    }
    all
}

fn determinism() -> Outcome {
    let base = std::env::temp_dir().join(format!("cellcount-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&base).unwrap();
    let config = base.join("run.toml");
    std::fs::write(
        &config,
        "[synth]\nimage_height = 32\nimage_width = 32\ncell_count_range = [3, 8]\ncell_radius_range = [2.0, 4.0]\n\
         [kernel]\nsigma = 2.0\nhalf_width = 6\n\
         [train]\nepochs = 2\nbatch_size = 4\nlearning_rate = 1e-6\ntarget_scale = 100.0\n\
         [adapt]\ntotal_dam_steps = 3\nbatch_size = 4\ncrop_size = 32\nmonitor_size = 4\nselection_interval = 1\n\
         dam_learning_rate = 0.3\ndcm_learning_rate = 0.1\n",
    )
    .unwrap();
    let digest = |b: &[u8]| Sha256::digest(b).iter().map(|x| format!("{x:02x}")).collect::<String>();
    let runs: Vec<(PathBuf, String)> = ["a", "b"]
        .iter()
        .map(|r| {
            let root = base.join(r);
            let bytes = run_pipeline(&root, &config);
            (root, digest(&bytes))
        })
        .collect();
    let nonempty = std::fs::read_to_string(runs[0].0.join("report/counts_adaptation.csv"))
        .unwrap()
        .lines()
        .count()
        == 13;
    std::fs::remove_dir_all(&base).ok();
    Outcome {
        id: 7,
        name: "pipeline determinism",
        pass: nonempty && runs[0].1 == runs[1].1,
        detail: format!(
            "counts CSV sha256 run 1 {}, run 2 {}",
            &runs[0].1[..16],
            &runs[1].1[..16]
        ),
    }
}

fn scoring_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = rng.gen_range(1..100);
        let results: Vec<CountResult> = (0..n)
            .map(|i| {
                let truth = rng.gen_range(0..300u64);
                let est = rng.gen_range(0.0..400.0);
                CountResult::new(format!("{trial}-{i}"), est, Some(truth))
            })
            .collect();
        let errors: Vec<f64> = results.iter().map(|r| r.absolute_error.unwrap()).collect();
        let (mae, sae) = common::two_pass_mae_sae(&errors);
        let s = score_arm(Arm::SourceOnly, &results).unwrap();
        worst = worst.max((s.mae - mae).abs()).max((s.sae - sae).abs());
    }
    Outcome {
        id: 8,
        name: "scoring oracle",
        pass: worst <= 1e-12,
        detail: format!("max |difference| from two-pass recomputation {worst:.2e} over 1000 vectors (tol 1e-12)"),
    }
}

fn main() {
    let mut outcomes = Vec::new();
    let emit = |o: Outcome, outcomes: &mut Vec<Outcome>| {
        println!("{}", line(&o));
        outcomes.push(o);
    };
    emit(kernel_identities(), &mut outcomes);
    emit(gradient_check(), &mut outcomes);
    emit(shape_audit(), &mut outcomes);
    emit(scoring_oracle(), &mut outcomes);
    emit(determinism(), &mut outcomes);

    let images = generate_annotated(&desk_synth(), 200).unwrap();
    let (drm, c4) = source_training(&images);
    emit(c4, &mut outcomes);
    let source: Vec<Image> = images[..160].iter().map(|a| a.image.clone()).collect();
    let mut clip = ClipAudit { updates: 0, worst: 0.0 };
    emit(domain_shift(&drm, &source, &mut clip), &mut outcomes);
    emit(adversarial_mechanics(&drm, &source, &mut clip), &mut outcomes);

    outcomes.sort_by_key(|o| o.id);
    println!("\nsummary");
    for o in &outcomes {
        println!("{}", line(o));
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
