//! Training-time image augmentation on normalized batches.
//!
//! Padding and erasing work in pixel space: the crop border is a raw zero
//! pixel and erased cells get uniform `[0, 1]` noise, both mapped through the
//! dataset normalization.

use pgp_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;

pub const CROP_PAD: usize = 4;
pub const ERASE_PROB: f64 = 0.5;
pub const FLIP_PROB: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augment {
    Flip,
    Crop,
    Erase,
}

impl std::str::FromStr for Augment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flip" => Ok(Augment::Flip),
            "crop" => Ok(Augment::Crop),
            "erase" => Ok(Augment::Erase),
            _ => Err(format!("unknown augmentation `{s}` (flip, crop, erase)")),
        }
    }
}

/// Applies `ops` to every sample of `batch`, in the order flip, crop, erase.
pub fn augment<R: Rng + ?Sized>(batch: &mut Tensor<f32>, ops: &[Augment], rng: &mut R, norm: &Normalization) {
    if ops.is_empty() {
        return;
    }
    let has = |a| ops.contains(&a);
    for b in 0..batch.shape().b {
        if has(Augment::Flip) && rng.random_bool(FLIP_PROB) {
            flip_horizontal(batch, b);
        }
        if has(Augment::Crop) {
            let dy = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
            let dx = rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
            shift(batch, b, dy, dx, norm);
        }
        if has(Augment::Erase) && rng.random_bool(ERASE_PROB) {
            if let Some(rect) = erase_rect(batch.shape().h, batch.shape().w, rng) {
                erase(batch, b, rect, rng, norm);
            }
        }
    }
}

/// Mirrors sample `b` left to right.
pub fn flip_horizontal(batch: &mut Tensor<f32>, b: usize) {
    let s = batch.shape();
    let per = s.c * s.plane();
    for row in batch.data_mut()[b * per..(b + 1) * per].chunks_mut(s.w) {
        row.reverse();
    }
}

/// Crop of the `CROP_PAD`-padded sample at offset `(PAD + dy, PAD + dx)`,
/// so the content moves by `(−dy, −dx)`.
pub fn shift(batch: &mut Tensor<f32>, b: usize, dy: isize, dx: isize, norm: &Normalization) {
    let s = batch.shape();
    let per = s.c * s.plane();
    let sample = &mut batch.data_mut()[b * per..(b + 1) * per];
    let src = sample.to_vec();
    for c in 0..s.c {
        let pad = norm.apply(c, 0.0);
        for y in 0..s.h {
            for x in 0..s.w {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < s.h && (sx as usize) < s.w;
                sample[(c * s.h + y) * s.w + x] = if inside {
                    src[(c * s.h + sy as usize) * s.w + sx as usize]
                } else {
                    pad
                };
            }
        }
    }
}

/// Rectangle `(top, left, height, width)`.
pub type Rect = (usize, usize, usize, usize);

/// Draws an erasing rectangle with area fraction in `[0.02, 0.4]` and aspect
/// ratio in `[0.3, 3.3]`; gives up after 100 draws that do not fit.
pub fn erase_rect<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Option<Rect> {
    for _ in 0..100 {
        let area = rng.random_range(0.02..=0.4) * (h * w) as f64;
        let aspect = rng.random_range(0.3..=3.3);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh <= h && ew <= w {
            let top = rng.random_range(0..=h - eh);
            let left = rng.random_range(0..=w - ew);
            return Some((top, left, eh, ew));
        }
    }
    None
}

/// Fills `rect` of sample `b` in every channel with uniform pixel noise.
pub fn erase<R: Rng + ?Sized>(batch: &mut Tensor<f32>, b: usize, rect: Rect, rng: &mut R, norm: &Normalization) {
    let s = batch.shape();
    let (top, left, eh, ew) = rect;
    let per = s.c * s.plane();
    let sample = &mut batch.data_mut()[b * per..(b + 1) * per];
    for c in 0..s.c {
        for y in top..top + eh {
            for x in left..left + ew {
                sample[(c * s.h + y) * s.w + x] = norm.apply(c, rng.random::<f64>());
            }
        }
    }
}
