//! Sliding-window tiling and overlap-averaged stitching.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Placement of one square window inside a source raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TileIndex {
    /// Position of the source patch in its split.
    pub patch: usize,
    pub row: usize,
    pub col: usize,
    pub window: usize,
    pub stride: usize,
}

/// Window offsets along one axis; the last one shifts back to end at `extent`.
fn offsets(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + window <= extent).collect();
    if let Some(&last) = out.last() {
        if last + window < extent {
            out.push(extent - window);
        }
    }
    out
}

/// Row-major windows covering an `h×w` raster.
pub fn slide_windows(patch: usize, h: usize, w: usize, window: usize, stride: usize) -> Result<Vec<TileIndex>> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("slide_windows", "window and stride must be >= 1"));
    }
    if window > h || window > w {
        return Err(Error::invalid("slide_windows", format!("window {window} exceeds extent {h}x{w}")));
    }
    let cols = offsets(w, window, stride);
    Ok(offsets(h, window, stride)
        .into_iter()
        .flat_map(|row| cols.iter().map(move |&col| TileIndex { patch, row, col, window, stride }))
        .collect())
}

fn crop_planes<S: Scalar>(t: &Tensor<S>, tile: &TileIndex) -> Tensor<S> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let n = tile.window;
    let mut out = Vec::with_capacity(c * n * n);
    for ch in 0..c {
        for r in tile.row..tile.row + n {
            let base = ch * h * w + r * w + tile.col;
            out.extend_from_slice(&t.data()[base..base + n]);
        }
    }
    Tensor::new([c, n, n], out).expect("crop shape")
}

/// Cuts the window described by `tile` out of `sample`.
pub fn crop<S: Scalar>(sample: &Sample<S>, tile: &TileIndex) -> Result<Sample<S>> {
    if tile.row + tile.window > sample.height || tile.col + tile.window > sample.width {
        return Err(Error::invalid("crop", format!("{tile:?} outside {}x{}", sample.height, sample.width)));
    }
    let n = tile.window;
    let mut labels = Vec::with_capacity(n * n);
    for r in tile.row..tile.row + n {
        let base = r * sample.width + tile.col;
        labels.extend_from_slice(&sample.labels[base..base + n]);
    }
    Sample::new(crop_planes(&sample.optical, tile), crop_planes(&sample.dsm, tile), labels)
}

/// Averages per-tile class probabilities `[K×n×n]` into a `[K×h×w]` map,
/// then renormalizes each pixel to sum to one.
pub fn stitch_average<S: Scalar>(
    tiles: &[(TileIndex, Tensor<S>)],
    classes: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let mut acc = vec![S::zero(); classes * h * w];
    let mut count = vec![0u32; h * w];
    for (tile, prob) in tiles {
        let n = tile.window;
        if prob.shape() != [classes, n, n] {
            return Err(Error::shape("stitch_average", prob.shape(), &[classes, n, n]));
        }
        if tile.row + n > h || tile.col + n > w {
            return Err(Error::invalid("stitch_average", format!("{tile:?} outside {h}x{w}")));
        }
        for r in 0..n {
            for c in 0..n {
                count[(tile.row + r) * w + tile.col + c] += 1;
            }
        }
        for k in 0..classes {
            for r in 0..n {
                let src = &prob.data()[k * n * n + r * n..k * n * n + (r + 1) * n];
                let dst = k * h * w + (tile.row + r) * w + tile.col;
                for (a, &p) in acc[dst..dst + n].iter_mut().zip(src) {
                    *a = *a + p;
                }
            }
        }
    }
    if let Some(p) = count.iter().position(|&c| c == 0) {
        return Err(Error::Invariant(format!("pixel ({}, {}) not covered by any tile", p / w, p % w)));
    }
    for (p, &cnt) in count.iter().enumerate() {
        let cnt = S::lit(cnt as f64);
        let mut total = S::zero();
        for k in 0..classes {
            let v = &mut acc[k * h * w + p];
            *v = *v / cnt;
            total = total + *v;
        }
        if total > S::zero() && total != S::one() {
            for k in 0..classes {
                let v = &mut acc[k * h * w + p];
                *v = *v / total;
            }
        }
    }
    Tensor::new([classes, h, w], acc)
}
