use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use manet::data::raster::{self, write_dsm, write_gray_png, write_indexed_png, write_rgb_png};
use manet::data::{
    crop, fingerprint, load_patch, load_patch_dir, load_split, normalize_dsm, slide_windows, stitch_average,
    synth_generate, write_dataset, Augmentation, Class, ClassTaxonomy, Sample, TileIndex,
};
use manet::tensor::Tensor;
use manet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every offset a window may start at, computed by scanning all positions.
fn brute_offsets(extent: usize, window: usize, stride: usize) -> BTreeSet<usize> {
    let mut out: BTreeSet<usize> = (0..=extent - window).filter(|o| o % stride == 0).collect();
    out.insert(extent - window);
    out
}

proptest! {
    #[test]
    fn windows_cover_raster(h in 8usize..150, w in 8usize..150, window in 1usize..8, stride_frac in 1usize..=4) {
        let stride = (window * stride_frac).div_ceil(4).max(1);
        let tiles = slide_windows(3, h, w, window, stride).unwrap();
        let rows: BTreeSet<usize> = tiles.iter().map(|t| t.row).collect();
        let cols: BTreeSet<usize> = tiles.iter().map(|t| t.col).collect();
        prop_assert_eq!(rows, brute_offsets(h, window, stride));
        prop_assert_eq!(cols, brute_offsets(w, window, stride));
        let mut covered = vec![0u32; h * w];
        for t in &tiles {
            prop_assert_eq!(t.patch, 3);
            prop_assert!(t.row + window <= h && t.col + window <= w);
            for r in t.row..t.row + window {
                for c in t.col..t.col + window {
                    covered[r * w + c] += 1;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c > 0));
        // Row-major order.
        prop_assert!(tiles.windows(2).all(|p| (p[0].row, p[0].col) < (p[1].row, p[1].col)));
    }

    #[test]
    fn augmentation_moves_every_raster_together(n in 2usize..12, turns in 0u8..4, flip: bool, seed: u64) {
        let s = random_sample(n, n, seed);
        let aug = Augmentation { quarter_turns: turns, flip };
        let out = aug.apply(&s).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (r, c) = aug.target(n, i, j);
                prop_assert_eq!(out.labels[r * n + c], s.labels[i * n + j]);
                prop_assert_eq!(out.dsm.at(&[0, r, c]), s.dsm.at(&[0, i, j]));
                for ch in 0..3 {
                    prop_assert_eq!(out.optical.at(&[ch, r, c]), s.optical.at(&[ch, i, j]));
                }
            }
        }
        prop_assert_eq!(out.label_histogram(6), s.label_histogram(6));
        let back = Augmentation { quarter_turns: 4 - turns, flip: false }.apply(&Augmentation { quarter_turns: 0, flip }.apply(&out).unwrap()).unwrap();
        prop_assert_eq!(back.labels, s.labels);
    }
}

fn random_sample(h: usize, w: usize, seed: u64) -> Sample<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..h * w).map(|_| rng.random_range(0..6u8)).collect();
    Sample::new(Tensor::uniform([3, h, w], 0.0, 1.0, &mut rng), Tensor::uniform([1, h, w], 0.0, 1.0, &mut rng), labels)
        .unwrap()
}

#[test]
fn taxonomy_has_clutter_as_background() {
    let t = ClassTaxonomy::default();
    assert_eq!(t.len(), 6);
    assert_eq!(t.foreground_indices(), vec![0, 1, 2, 3, 4]);
    assert_eq!(t.classes[5], Class::Clutter);
    assert_eq!(Class::ImperviousSurface.color(), [255, 255, 255]);
}

#[test]
fn overlapping_windows_on_512_raster() {
    let tiles = slide_windows(0, 512, 512, 256, 128).unwrap();
    assert_eq!(tiles.len(), 9);
    let offsets: Vec<(usize, usize)> = tiles.iter().map(|t| (t.row, t.col)).collect();
    assert_eq!(offsets[..4], [(0, 0), (0, 128), (0, 256), (128, 0)]);
    // The last window is shifted back to the border rather than padded.
    assert_eq!(slide_windows(0, 300, 300, 256, 128).unwrap().last().map(|t| (t.row, t.col)), Some((44, 44)));
    assert!(slide_windows(0, 100, 100, 256, 128).is_err());
    assert!(slide_windows(0, 100, 100, 64, 0).is_err());
}

/// Constant distribution per tile so every pixel's expectation is easy to form.
fn tile_probs(k: usize, n: usize, seed: usize) -> (Vec<f64>, Tensor<f64>) {
    let raw: Vec<f64> = (0..k).map(|c| ((seed * 7 + c * 3) % 5 + 1) as f64).collect();
    let total: f64 = raw.iter().sum();
    let dist: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let t = Tensor::from_fn([k, n, n], |i| dist[i / (n * n)]);
    (dist, t)
}

#[test]
fn stitching_averages_overlaps() {
    let (k, size) = (3, 512);
    let tiles = slide_windows(0, size, size, 256, 128).unwrap();
    let mut inputs = Vec::new();
    let mut dists = Vec::new();
    for (i, t) in tiles.iter().enumerate() {
        let (d, p) = tile_probs(k, 256, i);
        dists.push(d);
        inputs.push((*t, p));
    }
    let out = stitch_average(&inputs, k, size, size).unwrap();
    assert_eq!(out.shape(), &[k, size, size]);
    for (r, c) in [(0, 0), (200, 300), (255, 255), (256, 256), (511, 0), (130, 10), (384, 511)] {
        let covering: Vec<usize> = (0..tiles.len())
            .filter(|&i| {
                let t = tiles[i];
                (t.row..t.row + 256).contains(&r) && (t.col..t.col + 256).contains(&c)
            })
            .collect();
        for (ch, _) in dists[0].iter().enumerate() {
            let want = covering.iter().map(|&i| dists[i][ch]).sum::<f64>() / covering.len() as f64;
            assert!((out.at(&[ch, r, c]) - want).abs() < 1e-12, "({r},{c}) class {ch}");
        }
    }
    // Interior pixels see at most four windows, corners exactly one.
    let cover = |r: usize, c: usize| {
        tiles.iter().filter(|t| (t.row..t.row + 256).contains(&r) && (t.col..t.col + 256).contains(&c)).count()
    };
    assert_eq!((cover(200, 300), cover(0, 511), cover(256, 100)), (4, 1, 2));
}

#[test]
fn non_overlapping_stitch_is_concatenation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tiles = slide_windows(0, 8, 12, 4, 4).unwrap();
    let inputs: Vec<(TileIndex, Tensor<f64>)> = tiles
        .iter()
        .map(|t| {
            let raw = Tensor::<f64>::uniform([2, 4, 4], 0.1, 1.0, &mut rng);
            let norm = Tensor::from_fn([2, 4, 4], |i| raw.data()[i] / (raw.data()[i % 16] + raw.data()[16 + i % 16]));
            (*t, norm)
        })
        .collect();
    let out = stitch_average(&inputs, 2, 8, 12).unwrap();
    for (t, p) in &inputs {
        for ch in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    assert!((out.at(&[ch, t.row + r, t.col + c]) - p.at(&[ch, r, c])).abs() < 1e-15);
                }
            }
        }
    }
    let partial = &inputs[..inputs.len() - 1];
    assert!(matches!(stitch_average(partial, 2, 8, 12), Err(Error::Invariant(_))));
}

#[test]
fn crop_extracts_window() {
    let s = random_sample(10, 12, 4);
    let t = TileIndex { patch: 0, row: 3, col: 5, window: 4, stride: 4 };
    let c = crop(&s, &t).unwrap();
    assert_eq!((c.height, c.width), (4, 4));
    for r in 0..4 {
        for col in 0..4 {
            assert_eq!(c.labels[r * 4 + col], s.labels[(3 + r) * 12 + 5 + col]);
            assert_eq!(c.optical.at(&[2, r, col]), s.optical.at(&[2, 3 + r, 5 + col]));
        }
    }
    assert!(crop(&s, &TileIndex { row: 7, ..t }).is_err());
}

#[test]
fn synthetic_patches_are_deterministic_and_varied() {
    let a = synth_generate(4, 9, 128).unwrap();
    assert_eq!(a, synth_generate(4, 9, 128).unwrap());
    for p in &a {
        let present: BTreeSet<u8> = p.labels.iter().copied().collect();
        assert!(present.len() >= 4, "{}: classes {present:?}", p.id);
        assert!(p.elevation.iter().all(|v| v.is_finite()));
        let mean = |class: Class| {
            let v: Vec<f32> = (0..p.labels.len())
                .filter(|&i| p.labels[i] as usize == class.index())
                .map(|i| p.elevation[i])
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f32>() / v.len() as f32)
        };
        if let (Some(b), Some(g)) = (mean(Class::Building), mean(Class::ImperviousSurface)) {
            assert!(b > g + 3.0, "{}: building {b} vs ground {g}", p.id);
        }
    }
    assert!(synth_generate(1, 0, 16).is_err());
}

fn write_triplet(dir: &Path, h: usize, w: usize, elevation: &[f32], labels: &[u8]) {
    let rgb: Vec<u8> = (0..h * w * 3).map(|i| (i * 31 % 256) as u8).collect();
    write_rgb_png(&dir.join("o.png"), w, h, &rgb).unwrap();
    write_dsm(&dir.join("d.raw"), &dir.join("d.hdr"), h, w, elevation).unwrap();
    write_indexed_png(&dir.join("l.png"), w, h, &ClassTaxonomy::default().palette(), labels).unwrap();
}

fn load(dir: &Path) -> manet::Result<Sample<f32>> {
    load_patch(&dir.join("o.png"), &dir.join("d.raw"), &dir.join("l.png"), 6)
}

#[test]
fn loads_full_patch() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (512, 512);
    let elev: Vec<f32> = (0..h * w).map(|i| 30.0 + (i % 97) as f32 * 0.25).collect();
    let labels: Vec<u8> = (0..h * w).map(|i| (i % 6) as u8).collect();
    write_triplet(dir.path(), h, w, &elev, &labels);
    let s = load(dir.path()).unwrap();
    assert_eq!(s.optical.shape(), &[3, 512, 512]);
    assert_eq!(s.dsm.shape(), &[1, 512, 512]);
    assert_eq!(s.labels, labels);
    assert_eq!(s.optical.at(&[1, 0, 0]), 31.0 / 255.0);
    let (lo, hi) = s.dsm.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert_eq!((lo, hi), (0.0, 1.0));
}

#[test]
fn rejects_mismatched_extent() {
    let dir = tempfile::tempdir().unwrap();
    write_triplet(dir.path(), 8, 8, &[1.0; 64], &[0; 64]);
    write_dsm(&dir.path().join("d.raw"), &dir.path().join("d.hdr"), 8, 6, &[1.0; 48]).unwrap();
    assert!(matches!(load(dir.path()), Err(Error::Data { .. })));
}

#[test]
fn flat_dsm_normalizes_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    write_triplet(dir.path(), 6, 6, &[42.5; 36], &[1; 36]);
    let s = load(dir.path()).unwrap();
    assert!(s.dsm.data().iter().all(|&v| v == 0.0));
    assert_eq!(normalize_dsm(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
}

#[test]
fn four_band_optical_keeps_last_three() {
    let dir = tempfile::tempdir().unwrap();
    write_triplet(dir.path(), 4, 4, &[0.0; 16], &[0; 16]);
    let px: Vec<u8> = (0..16).flat_map(|i| [200u8, i as u8, 100, 50]).collect();
    let file = fs::File::create(dir.path().join("o.png")).unwrap();
    let mut enc = png::Encoder::new(file, 4, 4);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().unwrap().write_image_data(&px).unwrap();
    let s = load(dir.path()).unwrap();
    assert_eq!(s.optical.at(&[0, 0, 3]), 3.0 / 255.0);
    assert_eq!(s.optical.at(&[1, 0, 0]), 100.0 / 255.0);
    assert_eq!(s.optical.at(&[2, 1, 1]), 50.0 / 255.0);
}

#[test]
fn rejects_out_of_range_label() {
    let dir = tempfile::tempdir().unwrap();
    let mut labels = vec![2u8; 16];
    labels[5] = 6;
    write_triplet(dir.path(), 4, 4, &[0.0; 16], &[0; 16]);
    write_gray_png(&dir.path().join("l.png"), 4, 4, &labels).unwrap();
    let err = load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("label 6"), "{err}");
}

#[test]
fn written_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 3, 2, 4, 64).unwrap();
    let raw = synth_generate(5, 4, 64).unwrap();
    let train = load_split::<f32>(dir.path(), "train", 6).unwrap();
    let test = load_split::<f32>(dir.path(), "test", 6).unwrap();
    assert_eq!(train.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["patch_0000", "patch_0001", "patch_0002"]);
    assert_eq!(test.len(), 2);
    for (p, r) in train.iter().chain(&test).zip(&raw) {
        assert_eq!(p.id, r.id);
        assert_eq!(p.sample, r.to_sample::<f32>());
        assert_eq!(p.sample.dsm.data(), normalize_dsm(&r.elevation));
    }
    let (hdr, elev) =
        raster::read_dsm(&dir.path().join("train/patch_0000/dsm.raw"), &dir.path().join("train/patch_0000/dsm.hdr"))
            .unwrap();
    assert_eq!((hdr.height, hdr.width), (64, 64));
    assert_eq!(elev, raw[0].elevation);

    let fp = fingerprint(dir.path()).unwrap();
    assert_eq!(fp.len(), 64);
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), 3, 2, 4, 64).unwrap();
    assert_eq!(fingerprint(again.path()).unwrap(), fp);
    fs::remove_file(dir.path().join("test/patch_0004/labels.png")).unwrap();
    assert!(load_patch_dir::<f32>(&dir.path().join("test/patch_0004"), 6).is_err());
    assert!(load_split::<f32>(dir.path(), "valid", 6).is_err());
}
