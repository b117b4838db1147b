//! Dataset directories.
//!
//! ```text
//! <dir>/manifest.toml      generator settings, seed, count, content digest
//! <dir>/img_0000.png       16-bit grayscale image
//! <dir>/img_0000.csv       centroids (`x,y`)
//! <dir>/img_0000.dmap      ground-truth density map
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::densitymap::{build_density_map, CentroidSet, DensityMap, KernelConfig};
use crate::error::{Error, Result};
use crate::synthgen::{AnnotatedImage, Domain, Image, ShiftConfig, SynthConfig};

use super::{
    centroids_from_csv, centroids_to_csv, encode_dmap, read_dmap, read_png, read_text, write_bytes, write_png16,
};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT: &str = "cellcount-dataset-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub domain: Domain,
    pub count: usize,
    /// SHA-256 over every file written for the dataset, in index order.
    pub content_sha256: String,
    pub synth: SynthConfig,
    pub kernel: KernelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftConfig>,
}

impl Manifest {
    pub fn new(domain: Domain, synth: SynthConfig, kernel: KernelConfig, shift: Option<ShiftConfig>) -> Self {
        Self {
            format: FORMAT.into(),
            domain,
            count: 0,
            content_sha256: String::new(),
            synth,
            kernel,
            shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub image: Image,
    pub centroids: CentroidSet,
    pub density: DensityMap,
}

impl DatasetItem {
    pub fn annotated(&self, domain: Domain) -> AnnotatedImage {
        AnnotatedImage {
            image: self.image.clone(),
            centroids: self.centroids.clone(),
            domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn images(&self) -> Vec<Image> {
        self.items.iter().map(|i| i.image.clone()).collect()
    }

    pub fn annotated(&self) -> Vec<AnnotatedImage> {
        self.items.iter().map(|i| i.annotated(self.manifest.domain)).collect()
    }
}

pub fn item_id(index: usize) -> String {
    format!("img_{index:04}")
}

/// Writes images, centroids, density maps and the manifest. Returns the
/// manifest as written.
pub fn write_dataset(dir: &Path, images: &[AnnotatedImage], mut manifest: Manifest) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut digest = Sha256::new();
    for (i, a) in images.iter().enumerate() {
        let id = item_id(i);
        let png = dir.join(format!("{id}.png"));
        write_png16(&png, &a.image)?;
        digest.update(super::read_bytes(&png)?);
        let csv = centroids_to_csv(&a.centroids);
        write_bytes(&dir.join(format!("{id}.csv")), csv.as_bytes())?;
        digest.update(csv.as_bytes());
        let dmap = encode_dmap(&build_density_map(a.image.shape(), &a.centroids, &manifest.kernel)?);
        write_bytes(&dir.join(format!("{id}.dmap")), &dmap)?;
        digest.update(&dmap);
    }
    manifest.count = images.len();
    manifest.content_sha256 = digest.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let text = toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
    write_bytes(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::Usage(format!(
            "{} is not a dataset directory (no {MANIFEST})",
            dir.display()
        )));
    }
    let manifest: Manifest = toml::from_str(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format(
            &path,
            format!("unknown dataset format {:?}", manifest.format),
        ));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let items = (0..manifest.count)
        .map(|i| {
            let id = item_id(i);
            let csv_path = dir.join(format!("{id}.csv"));
            Ok(DatasetItem {
                image: read_png(&dir.join(format!("{id}.png")))?,
                centroids: centroids_from_csv(&read_text(&csv_path)?, &csv_path)?,
                density: read_dmap(&dir.join(format!("{id}.dmap")))?,
                id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, items })
}

/// Lists PNG files: the path itself, or the sorted `*.png` entries of a
/// directory.
pub fn list_pngs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::Usage(format!("{} does not exist", path.display())));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::generate_annotated;

    #[test]
    fn write_then_read_preserves_annotations() {
        let dir = std::env::temp_dir().join(format!("cellcount-ds-{}", std::process::id()));
        let synth = SynthConfig {
            image_height: 32,
            image_width: 32,
            cell_count_range: [2, 5],
            cell_radius_range: [2.0, 3.0],
            seed: 3,
            ..SynthConfig::default()
        };
        let kernel = KernelConfig::new(2.0, 4);
        let imgs = generate_annotated(&synth, 3).unwrap();
        let m = write_dataset(&dir, &imgs, Manifest::new(Domain::Source, synth.clone(), kernel, None)).unwrap();
        assert_eq!(m.count, 3);
        let ds = read_dataset(&dir).unwrap();
        assert_eq!(ds.manifest, m);
        for (a, b) in imgs.iter().zip(&ds.items) {
            assert_eq!(a.centroids, b.centroids);
            assert!((b.density.values().sum() - a.centroids.len() as f64).abs() < 1e-5);
        }
        assert_eq!(list_pngs(&dir).unwrap().len(), 3);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_manifest_is_usage_error() {
        let err = read_dataset(Path::new("/definitely/not/here")).unwrap_err();
        assert!(err.is_usage());
    }
}
