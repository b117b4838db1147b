#![allow(dead_code)]

use cellcount::grid::Grid;
use cellcount::model::{DrmArch, DrmParams, ParamSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheck {
    pub agreeing: usize,
    pub total: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.agreeing as f64 / self.total as f64
    }
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn flat_index(p: &mut DrmParams<f64>, mut k: usize) -> &mut f64 {
    for s in p.slices_mut() {
        if k < s.len() {
            return &mut s[k];
        }
        k -= s.len();
    }
    panic!("index out of range")
}

fn loss(p: &DrmParams<f64>, img: &Grid<f64>, target: &Grid<f64>) -> f64 {
    let pred = p.drm_forward(img).unwrap();
    pred.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// Central-difference check of every parameter of the tiny model on a
/// 16×16 image with a random nonnegative target.
pub fn tiny_drm_gradient_check(seed: u64, eps: f64, tol: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DrmParams::<f64>::init(DrmArch::TINY, seed);
    for s in p.slices_mut() {
        for v in s {
            // Nonzero biases keep most ReLUs away from their kink.
            if *v == 0.0 {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let img = Grid::from_fn(16, 16, |_, _| rng.gen_range(0.0..1.0));
    let target = Grid::from_fn(16, 16, |_, _| rng.gen_range(0.0..0.5));
    let mut grad = p.zeros_like();
    p.accumulate_squared_error(&img, &target, 1.0, &mut grad).unwrap();
    let analytic = grad.flatten();
    let mut out = GradCheck {
        agreeing: 0,
        total: analytic.len(),
        worst: 0.0,
    };
    for (k, &a) in analytic.iter().enumerate() {
        let orig = *flat_index(&mut p, k);
        *flat_index(&mut p, k) = orig + eps;
        let up = loss(&p, &img, &target);
        *flat_index(&mut p, k) = orig - eps;
        let down = loss(&p, &img, &target);
        *flat_index(&mut p, k) = orig;
        let rel = relative_error(a, (up - down) / (2.0 * eps));
        out.worst = out.worst.max(rel);
        if rel < tol {
            out.agreeing += 1;
        }
    }
    out
}

/// Brute-force two-pass mean and population standard deviation.
pub fn two_pass_mae_sae(errors: &[f64]) -> (f64, f64) {
    let n = errors.len() as f64;
    let mut sum = 0.0;
    for e in errors {
        sum += e;
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for e in errors {
        ss += (e - mean) * (e - mean);
    }
    (mean, (ss / n).sqrt())
}
