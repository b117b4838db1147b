//! On-disk formats: 16-bit grayscale PNG images, centroid CSV, binary
//! density maps, model checkpoints and dataset directories.

pub mod checkpoint;
pub mod dataset;

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};

use crate::densitymap::{Centroid, CentroidSet, DensityMap};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::synthgen::Image;

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes a `[0,1]` image as 16-bit grayscale PNG.
pub fn write_png16(path: &Path, img: &Image) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        img.cols() as u32,
        img.rows() as u32,
        img.as_slice()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect(),
    )
    .expect("buffer size matches dimensions");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Reads any grayscale-convertible PNG into `[0,1]` intensities.
pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let luma = dynimg.into_luma16();
    let (w, h) = luma.dimensions();
    Grid::from_vec(
        h as usize,
        w as usize,
        luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
    )
}

pub fn write_png8(path: &Path, img: &Grid<u8>) -> Result<()> {
    let buf = GrayImage::from_raw(img.cols() as u32, img.rows() as u32, img.as_slice().to_vec())
        .expect("buffer size matches dimensions");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Centroids as `x,y` CSV (x = column, y = row, origin top-left).
pub fn centroids_to_csv(centroids: &[Centroid]) -> String {
    let mut s = String::from("x,y\n");
    for c in centroids {
        s.push_str(&format!("{},{}\n", c.col, c.row));
    }
    s
}

pub fn centroids_from_csv(text: &str, path: &Path) -> Result<CentroidSet> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("x,y") => {}
        other => return Err(Error::format(path, format!("expected header `x,y`, found {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut parts = l.split(',').map(str::trim);
            let parse = |v: Option<&str>| v.and_then(|s| s.parse::<usize>().ok());
            match (parse(parts.next()), parse(parts.next()), parts.next()) {
                (Some(x), Some(y), None) => Ok(Centroid::new(y, x)),
                _ => Err(Error::format(path, format!("bad centroid row {}: {l:?}", i + 2))),
            }
        })
        .collect()
}

const DMAP_MAGIC: &[u8; 4] = b"DMAP";

/// `DMAP`, u32 rows, u32 cols, then rows·cols little-endian f32, row-major.
pub fn encode_dmap(map: &DensityMap) -> Vec<u8> {
    let (m, n) = map.shape();
    let mut out = Vec::with_capacity(12 + 4 * m * n);
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for &v in map.values().as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_dmap(bytes: &[u8], path: &Path) -> Result<DensityMap> {
    if bytes.len() < 12 || &bytes[..4] != DMAP_MAGIC {
        return Err(Error::format(path, "missing DMAP header"));
    }
    let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 4 * m * n {
        return Err(Error::format(
            path,
            format!("{m}x{n} map needs {} payload bytes, found {}", 4 * m * n, body.len()),
        ));
    }
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DensityMap::from_grid(Grid::from_vec(m, n, vals)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_dmap(path: &Path, map: &DensityMap) -> Result<()> {
    write_bytes(path, &encode_dmap(map))
}

pub fn read_dmap(path: &Path) -> Result<DensityMap> {
    decode_dmap(&read_bytes(path)?, path)
}

/// Side-by-side 8-bit panel: input image, then each density map, all maps
/// sharing one intensity scale. Panels are separated by a 2-pixel white bar.
pub fn triptych(image: &Image, maps: &[&DensityMap]) -> Grid<u8> {
    let (h, w) = image.shape();
    let gap = 2;
    let panels = 1 + maps.len();
    let total_w = panels * w + (panels - 1) * gap;
    let peak = maps
        .iter()
        .flat_map(|m| m.values().as_slice().iter().copied())
        .fold(0.0f64, f64::max);
    let mut out = Grid::filled(h, total_w, 255u8);
    for i in 0..h {
        for j in 0..w {
            out.set(i, j, (image.get(i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    for (k, m) in maps.iter().enumerate() {
        let x0 = (k + 1) * (w + gap);
        for i in 0..h.min(m.shape().0) {
            for j in 0..w.min(m.shape().1) {
                let v = if peak > 0.0 { m.values().get(i, j) / peak } else { 0.0 };
                out.set(i, x0 + j, (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densitymap::{build_density_map, KernelConfig};

    #[test]
    fn centroid_csv_round_trip_and_axes() {
        let cs = vec![Centroid::new(3, 7), Centroid::new(0, 1)];
        let text = centroids_to_csv(&cs);
        assert!(text.starts_with("x,y\n7,3\n"));
        assert_eq!(centroids_from_csv(&text, Path::new("t")).unwrap(), cs);
        assert!(centroids_from_csv("a,b\n", Path::new("t")).is_err());
        assert!(centroids_from_csv("x,y\n1\n", Path::new("t")).is_err());
    }

    #[test]
    fn dmap_layout_is_bit_exact() {
        let map = DensityMap::from_grid(Grid::from_vec(1, 2, vec![0.5, 1.0]).unwrap()).unwrap();
        let bytes = encode_dmap(&map);
        assert_eq!(&bytes[..4], b"DMAP");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &0.5f32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert!(decode_dmap(&bytes[..15], Path::new("t")).is_err());
    }

    #[test]
    fn dmap_preserves_count_within_f32() {
        let map = build_density_map(
            (64, 64),
            &[Centroid::new(5, 5), Centroid::new(40, 60)],
            &KernelConfig::default(),
        )
        .unwrap();
        let back = decode_dmap(&encode_dmap(&map), Path::new("t")).unwrap();
        assert!((back.values().sum() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn png16_round_trip_within_quantisation() {
        let dir = std::env::temp_dir().join(format!("cellcount-png-{}", std::process::id()));
        let path = dir.join("a.png");
        let img = Grid::from_fn(8, 16, |i, j| (i * 16 + j) as f32 / 127.0);
        write_png16(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), (8, 16));
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
