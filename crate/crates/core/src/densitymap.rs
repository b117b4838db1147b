//! Ground-truth density maps from centroid annotations, and counting by
//! integration.
//!
//! Each annotated cell contributes a normalised isotropic Gaussian kernel of
//! side `2·K+1` centred on its centroid. Kernels that hang over the image
//! border are, by default, rescaled so that their in-bounds mass is exactly
//! one, which keeps `integral == number of cells` for every image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Integer pixel position of a cell centroid. `row` is the image row
/// (y, top-left origin), `col` the column (x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Centroid {
    pub row: usize,
    pub col: usize,
}

impl Centroid {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

pub type CentroidSet = Vec<Centroid>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    /// Standard deviation in pixels.
    pub sigma: f64,
    /// Half-width `K`; the kernel is `(2K+1)×(2K+1)`.
    pub half_width: usize,
    /// Rescale border-clipped kernels to unit mass.
    pub renormalize_border: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            half_width: 10,
            renormalize_border: true,
        }
    }
}

impl KernelConfig {
    pub fn new(sigma: f64, half_width: usize) -> Self {
        Self {
            sigma,
            half_width,
            ..Self::default()
        }
    }

    pub fn side(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("kernel sigma must be > 0, got {}", self.sigma)));
        }
        if self.half_width == 0 {
            return Err(Error::Config("kernel half_width must be a positive integer".into()));
        }
        Ok(())
    }
}

/// Discrete Gaussian kernel normalised to unit sum.
pub fn make_kernel(cfg: &KernelConfig) -> Result<Grid<f64>> {
    cfg.validate()?;
    let k = cfg.half_width as i64;
    let two_s2 = 2.0 * cfg.sigma * cfg.sigma;
    let side = cfg.side();
    let mut g = Grid::from_fn(side, side, |i, j| {
        let (dy, dx) = (i as i64 - k, j as i64 - k);
        (-((dy * dy + dx * dx) as f64) / two_s2).exp()
    });
    let total: f64 = g.sum();
    for v in g.as_mut_slice() {
        *v /= total;
    }
    Ok(g)
}

/// Non-negative density grid whose integral is the cell count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    values: Grid<f64>,
}

impl DensityMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            values: Grid::zeros(rows, cols),
        }
    }

    /// Wraps a grid, clamping negative entries to zero.
    pub fn from_estimate<T: Copy + Into<f64>>(estimate: &Grid<T>) -> Self {
        Self {
            values: estimate.map(|v| v.into().max(0.0)),
        }
    }

    pub fn from_grid(values: Grid<f64>) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::Data(format!("density entries must be non-negative, found {v}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.values
    }
}

/// Rasterises `centroids` into a density map of the given shape.
pub fn build_density_map(shape: (usize, usize), centroids: &[Centroid], cfg: &KernelConfig) -> Result<DensityMap> {
    let kernel = make_kernel(cfg)?;
    let (rows, cols) = shape;
    let k = cfg.half_width as i64;
    let side = cfg.side();
    let mut map = Grid::<f64>::zeros(rows, cols);
    for (index, c) in centroids.iter().enumerate() {
        if c.row >= rows || c.col >= cols {
            return Err(Error::Annotation {
                index,
                row: c.row as i64,
                col: c.col as i64,
                rows,
                cols,
            });
        }
        let (r0, c0) = (c.row as i64 - k, c.col as i64 - k);
        let i_lo = (-r0).max(0) as usize;
        let i_hi = ((rows as i64 - r0).min(side as i64)) as usize;
        let j_lo = (-c0).max(0) as usize;
        let j_hi = ((cols as i64 - c0).min(side as i64)) as usize;
        let scale = if cfg.renormalize_border && (i_lo > 0 || j_lo > 0 || i_hi < side || j_hi < side) {
            let mass: f64 = (i_lo..i_hi)
                .map(|i| (j_lo..j_hi).map(|j| kernel.get(i, j)).sum::<f64>())
                .sum();
            1.0 / mass
        } else {
            1.0
        };
        let dst = map.as_mut_slice();
        for i in i_lo..i_hi {
            let y = (r0 + i as i64) as usize;
            let row = &mut dst[y * cols..(y + 1) * cols];
            for j in j_lo..j_hi {
                row[(c0 + j as i64) as usize] += scale * kernel.get(i, j);
            }
        }
    }
    Ok(DensityMap { values: map })
}

/// Estimated count: the sum of all density entries, accumulated in `f64`.
pub fn integrate_count(map: &DensityMap) -> f64 {
    map.values.sum()
}

/// Integer report of a real-valued count, rounding half away from zero.
pub fn round_count(count: f64) -> i64 {
    count.round() as i64
}
