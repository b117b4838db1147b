//! `cellcount` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cellcount::adaptation::train_dam;
use cellcount::config::RunConfig;
use cellcount::densitymap::integrate_count;
use cellcount::evalcount::{counts_csv, estimate_density, run_comparison, ComparisonModels, CountResult, EvalImage};
use cellcount::io::checkpoint::{
    dam_checkpoint, dcm_checkpoint, drm_checkpoint, load_dam, load_decoder, load_drm, load_encoder,
};
use cellcount::io::dataset::{list_pngs, read_dataset, read_manifest, write_dataset, Manifest, MANIFEST};
use cellcount::io::{read_png, triptych, write_dmap, write_png8};
use cellcount::model::DrmArch;
use cellcount::source_training::{make_samples, train_source_drm_from};
use cellcount::synthgen::{apply_shift_all, generate_annotated, Domain};
use cellcount::{DrmParams, Error};

#[derive(Parser)]
#[command(name = "cellcount", version, about = "Annotation-free cell counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Base seed; overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output location (see each command).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an annotated synthetic source dataset. `--out`: dataset directory.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// Apply the configured domain shift to a dataset. `--out`: dataset directory.
    Shift {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the source density-regression model. `--out`: checkpoint directory.
    TrainDrm {
        #[command(flatten)]
        common: Common,
        /// Annotated dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        target_scale: Option<f64>,
    },
    /// Adapt an encoder to a target dataset. `--out`: checkpoint directory.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Source model checkpoint.
        #[arg(long)]
        drm: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        crop_size: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        dam_lr: Option<f64>,
        #[arg(long)]
        dcm_lr: Option<f64>,
    },
    /// Count cells in an image, a directory of PNGs, or a dataset. `--out`: CSV file (stdout if absent).
    Count {
        #[command(flatten)]
        common: Common,
        /// Encoder checkpoint (source model or adaptation encoder).
        #[arg(long)]
        encoder: PathBuf,
        /// Decoder checkpoint (source model); defaults to `--encoder`.
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Also write each estimated density map here.
        #[arg(long)]
        density_dir: Option<PathBuf>,
    },
    /// Compare the three arms on an annotated dataset. `--out`: report directory.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Source model checkpoint (Source-only arm, and decoder for Adaptation).
        #[arg(long)]
        drm: Option<PathBuf>,
        /// Adaptation encoder checkpoint.
        #[arg(long)]
        dam: Option<PathBuf>,
        /// Model trained on annotated target images.
        #[arg(long)]
        annotated_drm: Option<PathBuf>,
    },
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn require_exists(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    if let Some(p) = &common.config {
        require_exists(p, "config")?;
    }
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn out_path(common: &Common, fallback: Option<&PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| fallback.cloned())
        .ok_or_else(|| usage(format!("no output given: pass --out or set paths.{what}")))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(common: &Common, count: usize) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    cfg.synth.validate()?;
    cfg.kernel.validate()?;
    let out = out_path(common, cfg.paths.dataset_dir.as_ref(), "dataset_dir")?;
    let images = generate_annotated(&cfg.synth, count)?;
    let manifest = Manifest::new(Domain::Source, cfg.synth.clone(), cfg.kernel, None);
    let m = write_dataset(&out, &images, manifest)?;
    println!(
        "wrote {} images to {} (content {})",
        m.count,
        out.display(),
        m.content_sha256
    );
    Ok(())
}

fn cmd_shift(common: &Common, input: &Path) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    cfg.shift.validate()?;
    let out = out_path(common, None, "dataset_dir")?;
    let ds = read_dataset(input)?;
    let shifted = apply_shift_all(&ds.annotated(), &cfg.shift)?;
    let manifest = Manifest::new(
        Domain::Target,
        ds.manifest.synth.clone(),
        ds.manifest.kernel,
        Some(cfg.shift.clone()),
    );
    let m = write_dataset(&out, &shifted, manifest)?;
    println!("wrote {} shifted images to {}", m.count, out.display());
    Ok(())
}

struct TrainOverrides {
    data: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    target_scale: Option<f64>,
}

fn cmd_train_drm(common: &Common, o: TrainOverrides) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    let t = &mut cfg.train;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.learning_rate = o.lr.unwrap_or(t.learning_rate);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.target_scale = o.target_scale.unwrap_or(t.target_scale);
    cfg.train.validate()?;
    let data = o
        .data
        .or_else(|| cfg.paths.dataset_dir.clone())
        .ok_or_else(|| usage("no dataset given: pass --data or set paths.dataset_dir"))?;
    let out = out_path(common, cfg.paths.checkpoint_dir.as_ref(), "checkpoint_dir")?;
    let ds = read_dataset(&data)?;
    let samples = make_samples(&ds.annotated(), &ds.manifest.kernel)?;
    let init = DrmParams::init(DrmArch::STANDARD, cfg.train.seed);
    let (drm, report) = train_source_drm_from(&samples, &cfg.train, init, |s| {
        eprintln!(
            "epoch {:>5} train {:.6e} val {:.6e}",
            s.epoch + 1,
            s.train_loss,
            s.val_mse
        );
    })?;
    drm_checkpoint(&drm)
        .with_meta("seed", cfg.train.seed)
        .with_meta("epoch", report.best_epoch + 1)
        .save(&out.join("drm.ckpt"))?;
    write_text(&out.join("train_report.csv"), &report.to_csv())?;
    println!(
        "best epoch {} validation mse {:.6e}; wrote {}",
        report.best_epoch + 1,
        report.best_validation_mse,
        out.join("drm.ckpt").display()
    );
    Ok(())
}

struct AdaptArgs {
    drm: PathBuf,
    source: PathBuf,
    target: PathBuf,
    steps: Option<usize>,
    crop_size: Option<usize>,
    batch_size: Option<usize>,
    dam_lr: Option<f64>,
    dcm_lr: Option<f64>,
}

fn cmd_adapt(common: &Common, a: AdaptArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    let c = &mut cfg.adapt;
    c.total_dam_steps = a.steps.unwrap_or(c.total_dam_steps);
    c.crop_size = a.crop_size.unwrap_or(c.crop_size);
    c.batch_size = a.batch_size.unwrap_or(c.batch_size);
    c.dam_learning_rate = a.dam_lr.unwrap_or(c.dam_learning_rate);
    c.dcm_learning_rate = a.dcm_lr.unwrap_or(c.dcm_learning_rate);
    cfg.adapt.validate()?;
    require_exists(&a.drm, "checkpoint")?;
    let out = out_path(common, cfg.paths.checkpoint_dir.as_ref(), "checkpoint_dir")?;
    let drm = load_drm::<f32>(&a.drm)?;
    let source = read_dataset(&a.source)?.images();
    let target = read_dataset(&a.target)?.images();
    let (dam, dcm, report) = train_dam(&drm.encoder, &source, &target, &cfg.adapt)?;
    let steps = cfg.adapt.total_dam_steps;
    dam_checkpoint(&dam)
        .with_meta("seed", cfg.adapt.seed)
        .with_meta("step", report.selected_step)
        .save(&out.join("dam.ckpt"))?;
    dcm_checkpoint(&dcm)
        .with_meta("seed", cfg.adapt.seed)
        .with_meta("step", steps)
        .save(&out.join("dcm.ckpt"))?;
    write_text(&out.join("adapt_report.csv"), &report.to_csv())?;
    match report.gap.first().zip(report.gap.last()) {
        Some((g0, g1)) => println!(
            "gap {g0:.6e} -> {g1:.6e}; selected encoder after {} of {steps} steps (|gap| {:.6e})",
            report.selected_step, report.selected_gap
        ),
        None => println!("no adaptation steps; encoder copied unchanged"),
    }
    Ok(())
}

/// Images to count, with ground truth when `input` is a dataset directory.
fn count_inputs(input: &Path) -> anyhow::Result<Vec<(String, cellcount::synthgen::Image, Option<u64>)>> {
    require_exists(input, "input")?;
    if input.join(MANIFEST).is_file() {
        let ds = read_dataset(input)?;
        return Ok(ds
            .items
            .into_iter()
            .map(|i| {
                let truth = i.centroids.len() as u64;
                (i.id, i.image, Some(truth))
            })
            .collect());
    }
    list_pngs(input)?
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            Ok((id, read_png(&p)?, None))
        })
        .collect()
}

fn cmd_count(
    common: &Common,
    encoder: &Path,
    decoder: Option<&Path>,
    input: &Path,
    density_dir: Option<&Path>,
) -> anyhow::Result<()> {
    let decoder = decoder.unwrap_or(encoder);
    require_exists(encoder, "encoder checkpoint")?;
    require_exists(decoder, "decoder checkpoint")?;
    let enc = load_encoder::<f32>(encoder)?;
    let dec = load_decoder::<f32>(decoder)?;
    let mut results = Vec::new();
    for (id, img, truth) in count_inputs(input)? {
        let density = estimate_density(&enc, &dec, &img)?;
        if let Some(dir) = density_dir {
            write_dmap(&dir.join(format!("{id}.dmap")), &density)?;
        }
        results.push(CountResult::new(id, integrate_count(&density), truth));
    }
    let csv = counts_csv(&results);
    match &common.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_eval(
    common: &Common,
    data: &Path,
    drm: Option<&Path>,
    dam: Option<&Path>,
    annotated: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let out = out_path(common, cfg.paths.report_dir.as_ref(), "report_dir")?;
    for p in [drm, dam, annotated].into_iter().flatten() {
        require_exists(p, "checkpoint")?;
    }
    if drm.is_none() && dam.is_some() {
        return Err(usage("--dam needs --drm for its decoder"));
    }
    read_manifest(data)?;
    let source = drm.map(load_drm::<f32>).transpose()?;
    let adaptation = dam.map(load_dam::<f32>).transpose()?;
    let annotated_train = annotated.map(load_drm::<f32>).transpose()?;
    let ds = read_dataset(data)?;
    let eval: Vec<EvalImage> = ds
        .items
        .into_iter()
        .map(|i| EvalImage {
            truth: i.centroids.len() as u64,
            id: i.id,
            image: i.image,
            density: Some(i.density),
        })
        .collect();
    let models = ComparisonModels {
        source: source.as_ref(),
        adaptation: adaptation.as_ref(),
        annotated_train: annotated_train.as_ref(),
    };
    let cmp = run_comparison(&models, &eval)?;
    let table = cmp.table();
    write_text(&out.join("table.txt"), &table)?;
    write_text(&out.join("summary.csv"), &cmp.summary_csv())?;
    let present: Vec<_> = cmp.arms.iter().filter(|a| a.scores.is_some()).collect();
    for a in &present {
        write_text(
            &out.join(format!("counts_{}.csv", a.arm.key())),
            &counts_csv(&a.results),
        )?;
    }
    for (k, item) in eval.iter().enumerate() {
        let mut maps = vec![item.density.as_ref().expect("dataset density")];
        maps.extend(present.iter().map(|a| &a.densities[k]));
        write_png8(
            &out.join("triptych").join(format!("{}.png", item.id)),
            &triptych(&item.image, &maps),
        )?;
    }
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common, count } => cmd_synth(&common, count),
        Command::Shift { common, input } => cmd_shift(&common, &input),
        Command::TrainDrm {
            common,
            data,
            epochs,
            lr,
            batch_size,
            target_scale,
        } => cmd_train_drm(
            &common,
            TrainOverrides {
                data,
                epochs,
                lr,
                batch_size,
                target_scale,
            },
        ),
        Command::Adapt {
            common,
            drm,
            source,
            target,
            steps,
            crop_size,
            batch_size,
            dam_lr,
            dcm_lr,
        } => cmd_adapt(
            &common,
            AdaptArgs {
                drm,
                source,
                target,
                steps,
                crop_size,
                batch_size,
                dam_lr,
                dcm_lr,
            },
        ),
        Command::Count {
            common,
            encoder,
            decoder,
            input,
            density_dir,
        } => cmd_count(&common, &encoder, decoder.as_deref(), &input, density_dir.as_deref()),
        Command::Eval {
            common,
            data,
            drm,
            dam,
            annotated_drm,
        } => cmd_eval(&common, &data, drm.as_deref(), dam.as_deref(), annotated_drm.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Error>().is_some_and(Error::is_usage);
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}
