//! Measures forward/backward throughput of the standard architecture.
use std::time::Instant;

use cellcount::grid::Grid;
use cellcount::model::{CriticArch, DcmParams, DrmArch, DrmParams};
use rand_chacha::ChaCha8Rng;

fn main() {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let drm = DrmParams::<f32>::init(DrmArch::STANDARD, 1);
    let img = Grid::from_fn(size, size, |i, j| ((i * 7 + j * 3) % 11) as f32 / 11.0);
    let target = Grid::<f64>::zeros(size, size);
    let mut grad = drm.zeros_like();
    let n = 5;
    let t = Instant::now();
    for _ in 0..n {
        drm.drm_forward(&img).unwrap();
    }
    println!(
        "forward  {size}x{size}: {:.1} ms",
        t.elapsed().as_secs_f64() * 1e3 / n as f64
    );
    let t = Instant::now();
    for _ in 0..n {
        drm.accumulate_squared_error(&img, &target, 1.0, &mut grad).unwrap();
    }
    println!(
        "fwd+bwd  {size}x{size}: {:.1} ms",
        t.elapsed().as_secs_f64() * 1e3 / n as f64
    );
    let dcm = DcmParams::<f32>::init(CriticArch::STANDARD, 2);
    let feat = drm.encoder.encode(&img).unwrap();
    let mut g = dcm.zeros_like();
    let t = Instant::now();
    for _ in 0..n {
        let (_, tr) = dcm.critic_forward_traced::<ChaCha8Rng>(&feat, None).unwrap();
        dcm.backward(&tr, 1.0, &mut g, true);
    }
    println!("critic fwd+bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);
}
