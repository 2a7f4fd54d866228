//! Rasters, tiling, augmentation and the synthetic dataset.

pub mod augment;
pub mod raster;
pub mod synth;
pub mod tiling;

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{augment, Augmentation};
pub use synth::{synth_generate, write_dataset, RawPatch};
pub use tiling::{crop, slide_windows, stitch_average, TileIndex};

/// Land-cover classes in label order. The last one is the background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Building,
    Tree,
    LowVegetation,
    Car,
    ImperviousSurface,
    Clutter,
}

impl Class {
    pub const ALL: [Class; 6] =
        [Class::Building, Class::Tree, Class::LowVegetation, Class::Car, Class::ImperviousSurface, Class::Clutter];

    pub fn name(self) -> &'static str {
        match self {
            Class::Building => "Building",
            Class::Tree => "Tree",
            Class::LowVegetation => "LowVegetation",
            Class::Car => "Car",
            Class::ImperviousSurface => "ImperviousSurface",
            Class::Clutter => "Clutter",
        }
    }

    /// Column heading used in metric tables.
    pub fn short(self) -> &'static str {
        match self {
            Class::Building => "Bui.",
            Class::Tree => "Tre.",
            Class::LowVegetation => "Low.",
            Class::Car => "Car",
            Class::ImperviousSurface => "Imp.",
            Class::Clutter => "Clu.",
        }
    }

    /// Label colour in the conventional aerial-benchmark palette.
    pub fn color(self) -> [u8; 3] {
        match self {
            Class::Building => [0, 0, 255],
            Class::Tree => [0, 255, 0],
            Class::LowVegetation => [0, 255, 255],
            Class::Car => [255, 255, 0],
            Class::ImperviousSurface => [255, 255, 255],
            Class::Clutter => [255, 0, 0],
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Ordered class names with a foreground mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTaxonomy {
    pub classes: Vec<Class>,
    pub foreground: Vec<bool>,
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self { classes: Class::ALL.to_vec(), foreground: Class::ALL.iter().map(|&c| c != Class::Clutter).collect() }
    }
}

impl ClassTaxonomy {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn foreground_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.foreground[i]).collect()
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.classes.iter().map(|c| c.color()).collect()
    }
}

/// One co-registered tile: optical `[3×H×W]` in `[0,1]`, normalized
/// elevation `[1×H×W]`, and per-pixel class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub optical: Tensor<S>,
    pub dsm: Tensor<S>,
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl<S: Scalar> Sample<S> {
    pub fn new(optical: Tensor<S>, dsm: Tensor<S>, labels: Vec<u8>) -> Result<Self> {
        let (h, w) = match optical.shape() {
            &[3, h, w] => (h, w),
            s => return Err(Error::invalid("sample", format!("optical shape {s:?}, expected [3,H,W]"))),
        };
        if dsm.shape() != [1, h, w] || labels.len() != h * w {
            return Err(Error::invalid(
                "sample",
                format!(
                    "extent mismatch: optical {:?}, dsm {:?}, labels {}",
                    optical.shape(),
                    dsm.shape(),
                    labels.len()
                ),
            ));
        }
        Ok(Self { optical, dsm, labels, height: h, width: w })
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }
}

/// A sample together with the identifier of its directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<S> {
    pub id: String,
    pub sample: Sample<S>,
}

/// Min-max normalizes elevation to `[0,1]`; a flat raster maps to zeros.
pub fn normalize_dsm(values: &[f32]) -> Vec<f32> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; values.len()];
    }
    let range = max - min;
    values.iter().map(|&v| (v - min) / range).collect()
}

fn data_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data { path: path.to_path_buf(), reason: reason.into() }
}

/// Loads one patch from its optical PNG, elevation raster and label PNG.
///
/// Four-band optical images keep their last three bands. The elevation
/// header is expected next to `dsm_path` with the `.hdr` extension.
pub fn load_patch<S: Scalar>(
    optical_path: &Path,
    dsm_path: &Path,
    label_path: &Path,
    classes: usize,
) -> Result<Sample<S>> {
    let img = raster::read_png(optical_path)?;
    if img.indexed || !(img.channels == 3 || img.channels == 4) {
        return Err(data_err(optical_path, format!("optical must have 3 or 4 bands, found {}", img.channels)));
    }
    let (h, w) = (img.height, img.width);
    let skip = img.channels - 3;
    let mut optical = vec![S::zero(); 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            optical[c * h * w + p] = S::lit(img.data[p * img.channels + skip + c] as f64 / 255.0);
        }
    }

    let hdr_path = dsm_path.with_extension("hdr");
    let (header, elev) = raster::read_dsm(dsm_path, &hdr_path)?;
    if (header.height, header.width) != (h, w) {
        return Err(data_err(
            dsm_path,
            format!("extent mismatch: dsm {}x{}, optical {h}x{w}", header.height, header.width),
        ));
    }
    let dsm: Vec<S> = normalize_dsm(&elev).into_iter().map(|v| S::lit(v as f64)).collect();

    let lab = raster::read_png(label_path)?;
    if lab.channels != 1 {
        return Err(data_err(label_path, "labels must be a single-band (palette or gray) PNG"));
    }
    if (lab.height, lab.width) != (h, w) {
        return Err(data_err(
            label_path,
            format!("extent mismatch: labels {}x{}, optical {h}x{w}", lab.height, lab.width),
        ));
    }
    if let Some(&bad) = lab.data.iter().find(|&&l| l as usize >= classes) {
        return Err(data_err(label_path, format!("label {bad} out of range for {classes} classes")));
    }

    Sample::new(Tensor::new([3, h, w], optical)?, Tensor::new([1, h, w], dsm)?, lab.data)
}

pub const OPTICAL_FILE: &str = "optical.png";
pub const DSM_FILE: &str = "dsm.raw";
pub const DSM_HEADER_FILE: &str = "dsm.hdr";
pub const LABEL_FILE: &str = "labels.png";

/// Loads `<dir>/{optical.png, dsm.raw, dsm.hdr, labels.png}`.
pub fn load_patch_dir<S: Scalar>(dir: &Path, classes: usize) -> Result<Patch<S>> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let sample = load_patch(&dir.join(OPTICAL_FILE), &dir.join(DSM_FILE), &dir.join(LABEL_FILE), classes)?;
    Ok(Patch { id, sample })
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every patch of one split (`train` or `test`) in name order.
pub fn load_split<S: Scalar>(root: &Path, split: &str, classes: usize) -> Result<Vec<Patch<S>>> {
    let dir = root.join(split);
    let patches = sorted_dirs(&dir)?.iter().map(|d| load_patch_dir(d, classes)).collect::<Result<Vec<_>>>()?;
    if patches.is_empty() {
        return Err(data_err(&dir, "no patches"));
    }
    Ok(patches)
}

/// SHA-256 over relative paths and contents of every file below `root`.
pub fn fingerprint(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in rd {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_has_one_background() {
        let t = ClassTaxonomy::default();
        assert_eq!(t.len(), 6);
        assert_eq!(t.foreground.iter().filter(|f| !**f).count(), 1);
        assert_eq!(t.foreground_indices(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn flat_dsm_normalizes_to_zero() {
        assert_eq!(normalize_dsm(&[5.0; 4]), vec![0.0; 4]);
        assert_eq!(normalize_dsm(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }
}
