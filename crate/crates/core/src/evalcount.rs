//! Counting with trained models and scoring of the comparison arms.
//!
//! Three arms are compared on an annotated evaluation set:
//! * source-only: source encoder + source decoder applied directly,
//! * adaptation: adaptation encoder + the same source decoder,
//! * annotated-train: a model of the same architecture trained on
//!   annotated target images.
//!
//! Errors are computed on real-valued counts. The spread statistic is the
//! population standard deviation of the absolute errors.

use crate::densitymap::{integrate_count, round_count, DensityMap};
use crate::error::{Error, Result};
use crate::model::{DamParams, Decoder, DrmParams, Encoder};
use crate::scalar::Scalar;
use crate::synthgen::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct CountResult {
    pub id: String,
    pub estimated_count: f64,
    pub rounded_count: i64,
    pub ground_truth: Option<u64>,
    pub absolute_error: Option<f64>,
}

impl CountResult {
    pub fn new(id: impl Into<String>, estimated_count: f64, ground_truth: Option<u64>) -> Self {
        Self {
            id: id.into(),
            estimated_count,
            rounded_count: round_count(estimated_count),
            ground_truth,
            absolute_error: ground_truth.map(|t| (estimated_count - t as f64).abs()),
        }
    }

    pub fn with_truth(mut self, truth: u64) -> Self {
        self.ground_truth = Some(truth);
        self.absolute_error = Some((self.estimated_count - truth as f64).abs());
        self
    }
}

/// Header of the per-image counts CSV.
pub const COUNTS_CSV_HEADER: &str = "id,estimated,rounded,truth,abs_error";

/// Formats results as the per-image counts CSV.
pub fn counts_csv(results: &[CountResult]) -> String {
    let mut s = format!("{COUNTS_CSV_HEADER}\n");
    for r in results {
        let truth = r.ground_truth.map(|t| t.to_string()).unwrap_or_default();
        let err = r.absolute_error.map(|e| format!("{e:.9}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{:.9},{},{truth},{err}\n",
            r.id, r.estimated_count, r.rounded_count
        ));
    }
    s
}

/// Clamped density estimate of `decoder(encoder(img))`.
pub fn estimate_density<T: Scalar>(encoder: &Encoder<T>, decoder: &Decoder<T>, img: &Image) -> Result<DensityMap> {
    let raw = decoder.decode(&encoder.encode(img)?)?;
    Ok(DensityMap::from_estimate(&raw.map(|v| v.to_f64c())))
}

/// Counts the cells in `img` by integrating the clamped density estimate.
pub fn count_image<T: Scalar>(
    encoder: &Encoder<T>,
    decoder: &Decoder<T>,
    img: &Image,
    id: &str,
) -> Result<CountResult> {
    let density = estimate_density(encoder, decoder, img)?;
    Ok(CountResult::new(id, integrate_count(&density), None))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arm {
    Adaptation,
    SourceOnly,
    AnnotatedTrain,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Adaptation, Arm::SourceOnly, Arm::AnnotatedTrain];

    pub fn label(&self) -> &'static str {
        match self {
            Arm::Adaptation => "Adaptation",
            Arm::SourceOnly => "Source-only",
            Arm::AnnotatedTrain => "Annotated-train",
        }
    }

    pub fn key(&self) -> &'static str {
        match self {
            Arm::Adaptation => "adaptation",
            Arm::SourceOnly => "source_only",
            Arm::AnnotatedTrain => "annotated_train",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmScores {
    pub arm: Arm,
    pub mae: f64,
    pub sae: f64,
    pub n_images: usize,
}

/// Mean and population standard deviation of the absolute errors.
pub fn score_arm(arm: Arm, results: &[CountResult]) -> Result<ArmScores> {
    let errors: Vec<f64> = results.iter().filter_map(|r| r.absolute_error).collect();
    if errors.is_empty() {
        return Err(Error::Usage(format!(
            "cannot score {}: no results with ground truth",
            arm.label()
        )));
    }
    let (mae, sae) = mean_and_population_std(&errors);
    Ok(ArmScores {
        arm,
        mae,
        sae,
        n_images: errors.len(),
    })
}

/// Welford's single-pass mean / population standard deviation.
fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    (mean, (m2 / xs.len() as f64).max(0.0).sqrt())
}

/// One annotated evaluation image.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub id: String,
    pub image: Image,
    pub truth: u64,
    /// Ground-truth density, used only for visual panels.
    pub density: Option<DensityMap>,
}

/// The models compared. Adaptation reuses the source decoder, so it is
/// reported absent whenever the source model is.
pub struct ComparisonModels<'a, T> {
    pub source: Option<&'a DrmParams<T>>,
    pub adaptation: Option<&'a DamParams<T>>,
    pub annotated_train: Option<&'a DrmParams<T>>,
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub scores: Option<ArmScores>,
    pub results: Vec<CountResult>,
    pub densities: Vec<DensityMap>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    /// Rows in display order: Adaptation, Source-only, Annotated-train.
    pub arms: Vec<ArmOutcome>,
}

impl Comparison {
    pub fn scores(&self, arm: Arm) -> Option<ArmScores> {
        self.arms.iter().find(|a| a.arm == arm).and_then(|a| a.scores)
    }

    /// Text table with one row per arm, `MAE ± SAE`.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16}{:>20}{:>8}\n", "Method", "MAE ± SAE", "n");
        for a in &self.arms {
            let (cell, n) = match a.scores {
                Some(sc) => (format!("{:.2} ± {:.2}", sc.mae, sc.sae), sc.n_images.to_string()),
                None => ("absent".to_string(), "-".to_string()),
            };
            s.push_str(&format!("{:<16}{cell:>20}{n:>8}\n", a.arm.label()));
        }
        s
    }

    /// `arm,mae,sae,n_images,sae_kind` per arm; absent arms have empty fields.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("arm,mae,sae,n_images,sae_kind\n");
        for a in &self.arms {
            match a.scores {
                Some(sc) => s.push_str(&format!(
                    "{},{:.9},{:.9},{},population\n",
                    a.arm.key(),
                    sc.mae,
                    sc.sae,
                    sc.n_images
                )),
                None => s.push_str(&format!("{},,,,absent\n", a.arm.key())),
            }
        }
        s
    }
}

fn evaluate_arm<T: Scalar>(arm: Arm, enc: &Encoder<T>, dec: &Decoder<T>, eval: &[EvalImage]) -> Result<ArmOutcome> {
    let mut results = Vec::with_capacity(eval.len());
    let mut densities = Vec::with_capacity(eval.len());
    for item in eval {
        let d = estimate_density(enc, dec, &item.image)?;
        results.push(CountResult::new(item.id.clone(), integrate_count(&d), Some(item.truth)));
        densities.push(d);
    }
    let scores = Some(score_arm(arm, &results)?);
    Ok(ArmOutcome {
        arm,
        scores,
        results,
        densities,
    })
}

/// Scores every available arm on `eval`; missing arms are marked absent.
pub fn run_comparison<T: Scalar>(models: &ComparisonModels<'_, T>, eval: &[EvalImage]) -> Result<Comparison> {
    if eval.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let absent = |arm| ArmOutcome {
        arm,
        scores: None,
        results: Vec::new(),
        densities: Vec::new(),
    };
    let mut arms = Vec::with_capacity(3);
    for arm in Arm::ALL {
        let pair = match arm {
            Arm::Adaptation => models
                .source
                .zip(models.adaptation)
                .map(|(s, d)| (&d.encoder, &s.decoder)),
            Arm::SourceOnly => models.source.map(|s| (&s.encoder, &s.decoder)),
            Arm::AnnotatedTrain => models.annotated_train.map(|s| (&s.encoder, &s.decoder)),
        };
        arms.push(match pair {
            Some((enc, dec)) => evaluate_arm(arm, enc, dec, eval)?,
            None => absent(arm),
        });
    }
    Ok(Comparison { arms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::model::DrmArch;

    fn with_errors(errs: &[f64]) -> Vec<CountResult> {
        errs.iter()
            .enumerate()
            .map(|(i, &e)| CountResult::new(format!("{i}"), 10.0 + e, Some(10)))
            .collect()
    }

    #[test]
    fn constant_errors_have_zero_spread() {
        let s = score_arm(Arm::SourceOnly, &with_errors(&[3.0, 3.0, 3.0])).unwrap();
        assert_eq!((s.mae, s.sae, s.n_images), (3.0, 0.0, 3));
    }

    #[test]
    fn population_std_of_two_errors() {
        let s = score_arm(Arm::Adaptation, &with_errors(&[0.0, 10.0])).unwrap();
        assert_eq!((s.mae, s.sae), (5.0, 5.0));
    }

    #[test]
    fn empty_scoring_is_usage_error() {
        assert!(matches!(score_arm(Arm::Adaptation, &[]), Err(Error::Usage(_))));
        let untruthed = vec![CountResult::new("a", 1.0, None)];
        assert!(score_arm(Arm::Adaptation, &untruthed).is_err());
    }

    #[test]
    fn zero_model_counts_zero() {
        let drm = DrmParams::<f32>::zeros(DrmArch::TINY);
        let img = Grid::filled(16, 24, 0.5f32);
        let r = count_image(&drm.encoder, &drm.decoder, &img, "x").unwrap();
        assert_eq!(r.estimated_count, 0.0);
        assert_eq!(r.rounded_count, 0);
    }

    #[test]
    fn negative_estimates_are_clamped() {
        let mut drm = DrmParams::<f32>::zeros(DrmArch::TINY);
        drm.decoder.convs[3].bias[0] = -0.5;
        let r = count_image(&drm.encoder, &drm.decoder, &Grid::filled(8, 8, 0.1f32), "n").unwrap();
        assert_eq!(r.estimated_count, 0.0);
        drm.decoder.convs[3].bias[0] = 0.25;
        let r = count_image(&drm.encoder, &drm.decoder, &Grid::filled(8, 8, 0.1f32), "p").unwrap();
        assert!((r.estimated_count - 16.0).abs() < 1e-9);
    }

    #[test]
    fn comparison_marks_missing_arms() {
        let drm = DrmParams::<f32>::zeros(DrmArch::TINY);
        let eval = vec![EvalImage {
            id: "a".into(),
            image: Grid::filled(8, 8, 0.0),
            truth: 4,
            density: None,
        }];
        let models = ComparisonModels {
            source: Some(&drm),
            adaptation: None,
            annotated_train: Some(&drm),
        };
        let cmp = run_comparison(&models, &eval).unwrap();
        assert_eq!(cmp.arms.len(), 3);
        assert!(cmp.scores(Arm::Adaptation).is_none());
        assert_eq!(cmp.scores(Arm::SourceOnly).unwrap().mae, 4.0);
        let table = cmp.table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().nth(1).unwrap().starts_with("Adaptation") && table.contains("absent"));
        assert!(cmp.summary_csv().contains("adaptation,,,,absent"));
    }

    #[test]
    fn counts_csv_layout() {
        let rows = vec![
            CountResult::new("img_0", 12.4, Some(13)),
            CountResult::new("img_1", 2.5, None),
        ];
        let csv = counts_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,estimated,rounded,truth,abs_error");
        assert_eq!(lines[1], "img_0,12.400000000,12,13,0.600000000");
        assert_eq!(lines[2], "img_1,2.500000000,3,,");
    }
}
