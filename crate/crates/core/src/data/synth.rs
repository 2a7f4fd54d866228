//! Procedural multimodal scenes with a class that only elevation separates.
//!
//! Buildings and impervious surfaces are drawn from the same rectangle size
//! and gray-level distribution, so the optical image alone cannot tell them
//! apart; buildings stand several metres above the terrain.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    normalize_dsm, raster, Class, ClassTaxonomy, Sample, DSM_FILE, DSM_HEADER_FILE, LABEL_FILE, OPTICAL_FILE,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An unnormalized generated patch: interleaved RGB bytes, elevation in
/// metres, and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPatch {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
    pub elevation: Vec<f32>,
    pub labels: Vec<u8>,
}

impl RawPatch {
    /// The sample `load_patch` produces for this patch once written to disk.
    pub fn to_sample<S: Scalar>(&self) -> Sample<S> {
        let (h, w) = (self.height, self.width);
        let optical = Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            S::lit(self.rgb[p * 3 + c] as f64 / 255.0)
        });
        let dsm = normalize_dsm(&self.elevation);
        let dsm = Tensor::from_fn([1, h, w], |i| S::lit(dsm[i] as f64));
        Sample::new(optical, dsm, self.labels.clone()).expect("consistent extents")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        raster::write_rgb_png(&dir.join(OPTICAL_FILE), self.width, self.height, &self.rgb)?;
        raster::write_dsm(&dir.join(DSM_FILE), &dir.join(DSM_HEADER_FILE), self.height, self.width, &self.elevation)?;
        let palette = ClassTaxonomy::default().palette();
        raster::write_indexed_png(&dir.join(LABEL_FILE), self.width, self.height, &palette, &self.labels)
    }
}

struct Canvas<'a> {
    n: usize,
    rng: &'a mut ChaCha8Rng,
    ground: Vec<f32>,
    rgb: Vec<u8>,
    elevation: Vec<f32>,
    labels: Vec<u8>,
}

impl Canvas<'_> {
    fn noisy(&mut self, base: [u8; 3], amp: i32) -> [u8; 3] {
        let mut px = [0; 3];
        for (o, &b) in px.iter_mut().zip(&base) {
            *o = (b as i32 + self.rng.random_range(-amp..=amp)).clamp(0, 255) as u8;
        }
        px
    }

    fn paint(&mut self, p: usize, class: Class, color: [u8; 3], height: f32) {
        self.rgb[p * 3..p * 3 + 3].copy_from_slice(&color);
        self.elevation[p] = self.ground[p] + height + self.rng.random_range(-0.1..0.1);
        self.labels[p] = class.index() as u8;
    }

    /// A rectangle of `class` with a per-rectangle gray level.
    fn slab(&mut self, class: Class, height: f32) {
        let n = self.n;
        let (hh, ww) = (self.rng.random_range(n / 8..n / 3), self.rng.random_range(n / 8..n / 3));
        let (r0, c0) = (self.rng.random_range(0..n - hh), self.rng.random_range(0..n - ww));
        let gray = self.rng.random_range(110..=170u8);
        for r in r0..r0 + hh {
            for c in c0..c0 + ww {
                let px = self.noisy([gray, gray, gray], 10);
                self.paint(r * n + c, class, px, height);
            }
        }
    }

    fn blob(&mut self, class: Class, color: [u8; 3], texture: i32, peak: f32, radius: (usize, usize)) {
        let n = self.n;
        let rad = self.rng.random_range(radius.0..radius.1) as f32;
        let (cr, cc) = (self.rng.random_range(0..n) as f32, self.rng.random_range(0..n) as f32);
        for r in 0..n {
            for c in 0..n {
                let d2 = ((r as f32 - cr).powi(2) + (c as f32 - cc).powi(2)) / (rad * rad);
                if d2 < 1.0 {
                    let px = self.noisy(color, texture);
                    self.paint(r * n + c, class, px, peak * (1.0 - d2));
                }
            }
        }
    }

    fn car(&mut self) {
        let n = self.n;
        let (hh, ww) = if self.rng.random() { (3, 6) } else { (6, 3) };
        let (r0, c0) = (self.rng.random_range(0..n - hh), self.rng.random_range(0..n - ww));
        let building = Class::Building.index() as u8;
        if (r0..r0 + hh).any(|r| (c0..c0 + ww).any(|c| self.labels[r * n + c] == building)) {
            return;
        }
        let color = self.noisy([200, 30, 30], 25);
        for r in r0..r0 + hh {
            for c in c0..c0 + ww {
                let px = self.noisy(color, 8);
                self.paint(r * n + c, Class::Car, px, 1.5);
            }
        }
    }
}

fn scene(rng: &mut ChaCha8Rng, id: String, n: usize) -> RawPatch {
    let base = rng.random_range(20.0..40.0f32);
    let (sr, sc) = (rng.random_range(-2.0..2.0f32), rng.random_range(-2.0..2.0f32));
    let ground: Vec<f32> =
        (0..n * n).map(|p| base + sr * (p / n) as f32 / n as f32 + sc * (p % n) as f32 / n as f32).collect();
    let mut cv = Canvas { n, rng, elevation: ground.clone(), ground, rgb: vec![0; n * n * 3], labels: vec![0; n * n] };
    for p in 0..n * n {
        let px = cv.noisy([150, 200, 120], 12);
        cv.paint(p, Class::LowVegetation, px, 0.0);
    }
    let slabs = cv.rng.random_range(3..=5);
    for _ in 0..slabs {
        cv.slab(Class::ImperviousSurface, 0.0);
    }
    if cv.rng.random_bool(0.6) {
        cv.blob(Class::Clutter, [40, 70, 160], 10, -0.5, (n / 12, n / 6));
    }
    let trees = cv.rng.random_range(3..=6);
    for _ in 0..trees {
        let peak = cv.rng.random_range(3.0..8.0);
        cv.blob(Class::Tree, [60, 130, 55], 30, peak, (n / 32 + 2, n / 10 + 3));
    }
    let buildings = cv.rng.random_range(2..=4);
    for _ in 0..buildings {
        let h = cv.rng.random_range(6.0..12.0);
        cv.slab(Class::Building, h);
    }
    let cars = cv.rng.random_range(4..=8);
    for _ in 0..cars {
        cv.car();
    }
    RawPatch { id, height: n, width: n, rgb: cv.rgb, elevation: cv.elevation, labels: cv.labels }
}

/// Generates `n` square patches of side `size` from one seeded stream.
pub fn synth_generate(n: usize, seed: u64, size: usize) -> Result<Vec<RawPatch>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
    }
    if size < 32 {
        return Err(Error::InvalidArgument(format!("synthetic tile size {size} must be >= 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| scene(&mut rng, format!("patch_{i:04}"), size)).collect())
}

/// Writes `n` training and `m` test patches under `root/{train,test}`.
pub fn write_dataset(root: &Path, n: usize, m: usize, seed: u64, size: usize) -> Result<()> {
    let patches = synth_generate(n + m, seed, size)?;
    for (i, p) in patches.iter().enumerate() {
        let split = if i < n { "train" } else { "test" };
        p.write(&root.join(split).join(&p.id))?;
    }
    Ok(())
}
