//! Grayscale exports of class probabilities and encoder feature magnitudes.

use std::path::{Path, PathBuf};

use crate::autograd::Graph;
use crate::data::{crop, raster, ClassTaxonomy, Sample, TileIndex};
use crate::error::{Error, Result};
use crate::model::Manet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// L2 norm of each token of an `[h×w×c]` feature, nearest-upsampled to `size`.
fn magnitude_map<S: Scalar>(tokens: &Tensor<S>, size: usize) -> Vec<f32> {
    let (h, w, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let d = tokens.data();
    let norms: Vec<f32> = (0..h * w)
        .map(|t| d[t * c..(t + 1) * c].iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt() as f32)
        .collect();
    (0..size * size).map(|p| norms[(p / size) * h / size * w + (p % size) * w / size]).collect()
}

/// Writes one probability map per class and one feature-magnitude map per
/// encoder branch for the top-left window of `sample`. Returns the paths.
pub fn export_heatmaps<S: Scalar>(model: &Manet<S>, sample: &Sample<S>, out: &Path) -> Result<Vec<PathBuf>> {
    let n = model.cfg.encoder.image_size;
    if sample.height < n || sample.width < n {
        return Err(Error::invalid(
            "heatmap",
            format!("sample {}x{} smaller than window {n}", sample.height, sample.width),
        ));
    }
    let tile = crop(sample, &TileIndex { patch: 0, row: 0, col: 0, window: n, stride: n })?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &tile.optical, &tile.dsm)?;
    let probs = g.softmax(fwd.logits, 0)?;
    let probs = g.value(probs);
    let taxonomy = ClassTaxonomy::default();
    let mut written = Vec::new();
    for k in 0..model.cfg.classes {
        let name = taxonomy.classes.get(k).map_or_else(|| format!("class{k}"), |c| c.name().to_string());
        let path = out.join(format!("prob_{k}_{name}.png"));
        let plane: Vec<f32> =
            probs.data()[k * n * n..(k + 1) * n * n].iter().map(|v| v.to_f64_lossy() as f32).collect();
        raster::write_gray_png(&path, n, n, &raster::to_gray8(&plane))?;
        written.push(path);
    }
    let branches = [("optical", Some(fwd.fx)), ("dsm", fwd.fy)];
    for (label, var) in branches {
        if let Some(v) = var {
            let path = out.join(format!("feature_{label}.png"));
            raster::write_gray_png(&path, n, n, &raster::to_gray8(&magnitude_map(g.value(v), n)))?;
            written.push(path);
        }
    }
    Ok(written)
}
