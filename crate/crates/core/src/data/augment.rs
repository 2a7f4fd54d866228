//! Random right-angle rotations and horizontal flips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Counter-clockwise rotation by `quarter_turns·90°`, then an optional
/// horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Augmentation {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Augmentation {
    pub const IDENTITY: Self = Self { quarter_turns: 0, flip: false };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { quarter_turns: rng.random_range(0..4), flip: rng.random() }
    }

    /// Where pixel `(i, j)` of an `n×n` raster lands.
    pub fn target(self, n: usize, i: usize, j: usize) -> (usize, usize) {
        let (mut r, mut c) = (i, j);
        for _ in 0..self.quarter_turns % 4 {
            (r, c) = (n - 1 - c, r);
        }
        if self.flip {
            c = n - 1 - c;
        }
        (r, c)
    }

    fn permute<T: Copy>(self, n: usize, planes: usize, src: &[T]) -> Vec<T> {
        let mut out = src.to_vec();
        for p in 0..planes {
            let base = p * n * n;
            for i in 0..n {
                for j in 0..n {
                    let (r, c) = self.target(n, i, j);
                    out[base + r * n + c] = src[base + i * n + j];
                }
            }
        }
        out
    }

    fn permute_tensor<S: Scalar>(self, t: &Tensor<S>) -> Tensor<S> {
        let n = t.shape()[1];
        Tensor::new(t.shape().to_vec(), self.permute(n, t.shape()[0], t.data())).expect("same shape")
    }

    /// Applies the same pixel permutation to every raster of a square sample.
    pub fn apply<S: Scalar>(self, s: &Sample<S>) -> Result<Sample<S>> {
        if s.height != s.width {
            return Err(Error::invalid("augment", format!("tile must be square, got {}x{}", s.height, s.width)));
        }
        if self == Self::IDENTITY {
            return Ok(s.clone());
        }
        Sample::new(self.permute_tensor(&s.optical), self.permute_tensor(&s.dsm), self.permute(s.height, 1, &s.labels))
    }
}

/// Applies an augmentation drawn deterministically from `seed`.
pub fn augment<S: Scalar>(sample: &Sample<S>, seed: u64) -> Result<Sample<S>> {
    Augmentation::sample(&mut ChaCha8Rng::seed_from_u64(seed)).apply(sample)
}
