//! Synthetic fluorescent-microscopy images with exact centroid annotations,
//! plus a configurable intensity/blur/noise shift that manufactures a
//! pseudo-target domain from them.
//!
//! Rendering: elliptical Gaussian-profile blobs combined with the background
//! by pixelwise maximum, then a Gaussian point-spread blur, then additive
//! Gaussian noise, then clipping to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::densitymap::{Centroid, CentroidSet, KernelConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Grayscale image with intensities in `[0, 1]`.
pub type Image = Grid<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image: Image,
    pub centroids: CentroidSet,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Inclusive.
    pub cell_count_range: [usize; 2],
    pub cell_radius_range: [f64; 2],
    pub cell_eccentricity_range: [f64; 2],
    pub peak_intensity_range: [f64; 2],
    pub psf_sigma: f64,
    pub noise_std: f64,
    pub background_level: f64,
    pub min_centroid_margin: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_height: 256,
            image_width: 256,
            cell_count_range: [60, 120],
            cell_radius_range: [3.0, 8.0],
            cell_eccentricity_range: [0.0, 0.6],
            peak_intensity_range: [0.5, 1.0],
            psf_sigma: 1.0,
            noise_std: 0.02,
            background_level: 0.05,
            min_centroid_margin: 4.0,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64, hi_inclusive: bool) -> Result<()> {
    let in_hi = |v: f64| if hi_inclusive { v <= hi } else { v < hi };
    if !(r[0] <= r[1] && r[0] >= lo && in_hi(r[1])) {
        return Err(Error::Config(format!(
            "{name} [{}, {}] must satisfy {lo} <= low <= high within bounds",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if self.cell_count_range[0] > self.cell_count_range[1] {
            return Err(Error::Config(format!(
                "cell_count_range [{}, {}] is empty",
                self.cell_count_range[0], self.cell_count_range[1]
            )));
        }
        check_range(
            "cell_radius_range",
            self.cell_radius_range,
            f64::MIN_POSITIVE,
            f64::INFINITY,
            false,
        )?;
        check_range("cell_eccentricity_range", self.cell_eccentricity_range, 0.0, 1.0, false)?;
        check_range(
            "peak_intensity_range",
            self.peak_intensity_range,
            f64::MIN_POSITIVE,
            1.0,
            true,
        )?;
        if !(self.psf_sigma >= 0.0 && self.noise_std >= 0.0 && self.min_centroid_margin >= 0.0) {
            return Err(Error::Config(
                "psf_sigma, noise_std and min_centroid_margin must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.background_level) {
            return Err(Error::Config(format!(
                "background_level {} must lie in [0, 1)",
                self.background_level
            )));
        }
        Ok(())
    }

    /// Checks that images are large enough for the density kernel.
    pub fn validate_for_kernel(&self, kernel: &KernelConfig) -> Result<()> {
        self.validate()?;
        let side = kernel.side();
        if self.image_height < side || self.image_width < side {
            return Err(Error::Config(format!(
                "image {}x{} smaller than density kernel side {side}",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }
}

/// Per-image seed: base seed plus image index.
pub fn image_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Generates `count` annotated source-domain images.
pub fn generate_annotated(config: &SynthConfig, count: usize) -> Result<Vec<AnnotatedImage>> {
    config.validate()?;
    check_packing(config)?;
    (0..count)
        .map(|i| render_one(config, &mut ChaCha8Rng::seed_from_u64(image_seed(config.seed, i))))
        .collect()
}

/// Rejects configurations whose maximum cell count cannot be packed at the
/// requested margin (disc packing density bound).
fn check_packing(config: &SynthConfig) -> Result<()> {
    let m = config.min_centroid_margin;
    let n = config.cell_count_range[1] as f64;
    if m > 0.0 {
        let disc = std::f64::consts::PI * (m / 2.0).powi(2);
        let padded = (config.image_height as f64 + m) * (config.image_width as f64 + m);
        if n * disc > 0.9069 * padded {
            return Err(Error::Placement(format!(
                "cannot fit {} cells in {}x{} with min_centroid_margin {m}",
                config.cell_count_range[1], config.image_height, config.image_width
            )));
        }
    }
    Ok(())
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

fn place_centroids<R: Rng>(config: &SynthConfig, n: usize, rng: &mut R) -> Result<CentroidSet> {
    let (h, w) = (config.image_height, config.image_width);
    let m2 = config.min_centroid_margin * config.min_centroid_margin;
    let mut placed: CentroidSet = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = Centroid::new(rng.gen_range(0..h), rng.gen_range(0..w));
            let clear = placed.iter().all(|p| {
                let dy = p.row as f64 - c.row as f64;
                let dx = p.col as f64 - c.col as f64;
                dy * dy + dx * dx >= m2
            });
            if clear {
                placed.push(c);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Placement(format!(
                "placed {} of {n} cells in {h}x{w}; min_centroid_margin {} too large",
                placed.len(),
                config.min_centroid_margin
            )));
        }
    }
    Ok(placed)
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn render_one<R: Rng>(config: &SynthConfig, rng: &mut R) -> Result<AnnotatedImage> {
    let (h, w) = (config.image_height, config.image_width);
    let [lo, hi] = config.cell_count_range;
    let n = rng.gen_range(lo..=hi);
    let centroids = place_centroids(config, n, rng)?;
    let mut canvas = Grid::<f64>::filled(h, w, config.background_level);
    for c in &centroids {
        let radius = uniform(rng, config.cell_radius_range);
        let ecc = uniform(rng, config.cell_eccentricity_range);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let peak = uniform(rng, config.peak_intensity_range);
        draw_blob(&mut canvas, *c, radius, radius * (1.0 - ecc * ecc).sqrt(), theta, peak);
    }
    let mut img = gaussian_blur(&canvas, config.psf_sigma);
    add_noise(&mut img, config.noise_std, rng);
    Ok(AnnotatedImage {
        image: to_image(&img),
        centroids,
        domain: Domain::Source,
    })
}

/// Elliptical blob `peak·exp(-2q²)`, `q` the normalised elliptical radius,
/// merged into `canvas` by pixelwise maximum.
fn draw_blob(canvas: &mut Grid<f64>, c: Centroid, major: f64, minor: f64, theta: f64, peak: f64) {
    let (h, w) = canvas.shape();
    let reach = (2.0 * major).ceil() as i64;
    let (sin, cos) = theta.sin_cos();
    let (cy, cx) = (c.row as i64, c.col as i64);
    for y in (cy - reach).max(0)..=(cy + reach).min(h as i64 - 1) {
        for x in (cx - reach).max(0)..=(cx + reach).min(w as i64 - 1) {
            let (dy, dx) = ((y - cy) as f64, (x - cx) as f64);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let q2 = (u / major).powi(2) + (v / minor).powi(2);
            let val = peak * (-2.0 * q2).exp();
            let (yi, xi) = (y as usize, x as usize);
            if val > canvas.get(yi, xi) {
                canvas.set(yi, xi, val);
            }
        }
    }
}

/// Separable Gaussian blur with edge clamping. `sigma == 0` is the identity.
pub fn gaussian_blur(src: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let k = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-k..=k)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    let (h, w) = src.shape();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let tmp = Grid::from_fn(h, w, |i, j| {
        taps.iter()
            .enumerate()
            .map(|(t, &g)| g * src.get(i, clamp(j as i64 + t as i64 - k, w)))
            .sum::<f64>()
    });
    Grid::from_fn(h, w, |i, j| {
        taps.iter()
            .enumerate()
            .map(|(t, &g)| g * tmp.get(clamp(i as i64 + t as i64 - k, h), j))
            .sum::<f64>()
    })
}

fn add_noise<R: Rng>(img: &mut Grid<f64>, std: f64, rng: &mut R) {
    if std <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in img.as_mut_slice() {
        *v += normal.sample(rng);
    }
}

fn to_image(g: &Grid<f64>) -> Image {
    g.map(|v| v.clamp(0.0, 1.0) as f32)
}

/// Pixelwise intensity transform followed by blur and noise. Identity
/// settings leave the image bit-for-bit unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub gamma: f64,
    pub intensity_invert: bool,
    pub extra_blur_sigma: f64,
    pub extra_noise_std: f64,
    /// Multiplicative gain applied after the gamma curve.
    pub contrast_scale: f64,
    pub seed: u64,
}

impl Default for ShiftConfig {
    /// The default pseudo-target shift.
    fn default() -> Self {
        Self {
            gamma: 1.8,
            intensity_invert: false,
            extra_blur_sigma: 1.0,
            extra_noise_std: 0.03,
            contrast_scale: 0.7,
            seed: 0,
        }
    }
}

impl ShiftConfig {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            intensity_invert: false,
            extra_blur_sigma: 0.0,
            extra_noise_std: 0.0,
            contrast_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.contrast_scale > 0.0 && self.contrast_scale.is_finite()) {
            return Err(Error::Config(format!(
                "contrast_scale must be > 0, got {}",
                self.contrast_scale
            )));
        }
        if !(self.extra_blur_sigma >= 0.0 && self.extra_noise_std >= 0.0) {
            return Err(Error::Config(
                "extra_blur_sigma and extra_noise_std must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Shifts one image into the target domain. Centroids are carried over
/// untouched. Noise is drawn from `shift.seed`.
pub fn apply_shift(img: &AnnotatedImage, shift: &ShiftConfig) -> Result<AnnotatedImage> {
    shift.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
    Ok(shift_with_rng(img, shift, &mut rng))
}

/// Shifts a dataset, seeding image `i`'s noise with `shift.seed + i`.
pub fn apply_shift_all(imgs: &[AnnotatedImage], shift: &ShiftConfig) -> Result<Vec<AnnotatedImage>> {
    shift.validate()?;
    Ok(imgs
        .iter()
        .enumerate()
        .map(|(i, img)| shift_with_rng(img, shift, &mut ChaCha8Rng::seed_from_u64(image_seed(shift.seed, i))))
        .collect())
}

fn shift_with_rng<R: Rng>(img: &AnnotatedImage, shift: &ShiftConfig, rng: &mut R) -> AnnotatedImage {
    let pointwise = shift.gamma != 1.0 || shift.contrast_scale != 1.0 || shift.intensity_invert;
    let spatial = shift.extra_blur_sigma > 0.0 || shift.extra_noise_std > 0.0;
    let image = if !pointwise && !spatial {
        img.image.clone()
    } else {
        let mut g = img.image.map(|v| {
            let mut x = v as f64;
            if shift.gamma != 1.0 {
                x = x.powf(shift.gamma);
            }
            x *= shift.contrast_scale;
            if shift.intensity_invert {
                x = 1.0 - x;
            }
            x
        });
        g = gaussian_blur(&g, shift.extra_blur_sigma);
        add_noise(&mut g, shift.extra_noise_std, rng);
        to_image(&g)
    };
    AnnotatedImage {
        image,
        centroids: img.centroids.clone(),
        domain: Domain::Target,
    }
}
