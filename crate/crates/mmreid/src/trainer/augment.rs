//! Training-time image augmentation: horizontal flip, pad-and-crop jitter,
//! random erasing. Applied in that order; labels never change.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::synthdata::dataset::{Dataset, ImageRecord};
use crate::synthdata::render::{IMG_C, IMG_H, IMG_W};

#[derive(Debug, Clone, Copy)]
pub struct AugmentToggles {
    pub hflip: bool,
    pub pad_crop: bool,
    pub erase: bool,
}

impl Default for AugmentToggles {
    fn default() -> Self {
        AugmentToggles {
            hflip: true,
            pad_crop: true,
            erase: true,
        }
    }
}

impl AugmentToggles {
    pub fn off() -> Self {
        AugmentToggles {
            hflip: false,
            pad_crop: false,
            erase: false,
        }
    }
}

const PAD: usize = 4;
// erased rectangle covers 10% to 30% of the image
const ERASE_LO: f64 = 0.10;
const ERASE_HI: f64 = 0.30;

/// Per-channel mean over a record list, the fill value for pad and erase.
pub fn channel_means(dataset: &Dataset, records: &[ImageRecord]) -> Result<[f64; 3]> {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for rec in records {
        let px = dataset.load_pixels(rec)?;
        for p in px.chunks_exact(IMG_C) {
            for c in 0..IMG_C {
                sums[c] += p[c];
            }
        }
        count += px.len() / IMG_C;
    }
    if count == 0 {
        return Err(crate::error::Error::Empty("records for channel means"));
    }
    Ok([
        sums[0] / count as f64,
        sums[1] / count as f64,
        sums[2] / count as f64,
    ])
}

fn sample_erase_rect(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let total = (IMG_H * IMG_W) as f64;
    let lo = (ERASE_LO * total).ceil() as usize;
    let hi = (ERASE_HI * total).floor() as usize;
    let area = rng.gen_range(ERASE_LO..ERASE_HI) * total;
    let aspect = rng.gen_range(0.5..2.0);
    let h = ((area * aspect).sqrt().round() as usize).clamp(1, IMG_H);
    let mut w = ((area / h as f64).round() as usize).clamp(1, IMG_W);
    if h * w > hi {
        w = hi / h;
    }
    if h * w < lo {
        w = lo.div_ceil(h);
    }
    let r0 = rng.gen_range(0..=IMG_H - h);
    let c0 = rng.gen_range(0..=IMG_W - w);
    (r0, c0, h, w)
}

pub fn augment(
    pixels: &[f64],
    toggles: &AugmentToggles,
    fill: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out = pixels.to_vec();

    if toggles.hflip && rng.gen_bool(0.5) {
        for r in 0..IMG_H {
            for c in 0..IMG_W / 2 {
                let a = (r * IMG_W + c) * IMG_C;
                let b = (r * IMG_W + (IMG_W - 1 - c)) * IMG_C;
                for ch in 0..IMG_C {
                    out.swap(a + ch, b + ch);
                }
            }
        }
    }

    if toggles.pad_crop {
        let dy = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let dx = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let src = out.clone();
        for r in 0..IMG_H {
            for c in 0..IMG_W {
                let sr = r as isize + dy;
                let sc = c as isize + dx;
                let dst = (r * IMG_W + c) * IMG_C;
                if sr >= 0 && sr < IMG_H as isize && sc >= 0 && sc < IMG_W as isize {
                    let s = (sr as usize * IMG_W + sc as usize) * IMG_C;
                    out[dst..dst + IMG_C].copy_from_slice(&src[s..s + IMG_C]);
                } else {
                    out[dst..dst + IMG_C].copy_from_slice(&fill);
                }
            }
        }
    }

    if toggles.erase && rng.gen_bool(0.5) {
        let (r0, c0, h, w) = sample_erase_rect(rng);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                let base = (r * IMG_W + c) * IMG_C;
                out[base..base + IMG_C].copy_from_slice(&fill);
            }
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn image() -> Vec<f64> {
        (0..IMG_H * IMG_W * IMG_C)
            .map(|i| (i % 97) as f64 / 96.0)
            .collect()
    }

    #[test]
    fn all_off_is_identity() {
        let px = image();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&px, &AugmentToggles::off(), [0.5; 3], &mut rng);
        assert_eq!(px, out);
    }

    #[test]
    fn double_flip_restores() {
        let px = image();
        let flip = |p: &[f64]| {
            let mut out = p.to_vec();
            for r in 0..IMG_H {
                for c in 0..IMG_W / 2 {
                    let a = (r * IMG_W + c) * IMG_C;
                    let b = (r * IMG_W + (IMG_W - 1 - c)) * IMG_C;
                    for ch in 0..IMG_C {
                        out.swap(a + ch, b + ch);
                    }
                }
            }
            out
        };
        assert_eq!(flip(&flip(&px)), px);
    }

    #[test]
    fn erase_rect_area_within_bounds_over_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let total = IMG_H * IMG_W;
        let lo = (ERASE_LO * total as f64).ceil() as usize;
        let hi = (ERASE_HI * total as f64).floor() as usize;
        for _ in 0..1000 {
            let (r0, c0, h, w) = sample_erase_rect(&mut rng);
            assert!(r0 + h <= IMG_H && c0 + w <= IMG_W);
            assert!(
                (lo..=hi).contains(&(h * w)),
                "erased {} pixels, bounds [{lo}, {hi}]",
                h * w
            );
        }
    }

    #[test]
    fn output_shape_and_range_preserved() {
        let px = image();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let out = augment(&px, &AugmentToggles::default(), [0.4, 0.5, 0.6], &mut rng);
            assert_eq!(out.len(), px.len());
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let px = image();
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            assert_eq!(
                augment(&px, &AugmentToggles::default(), [0.5; 3], &mut r1),
                augment(&px, &AugmentToggles::default(), [0.5; 3], &mut r2)
            );
        }
    }
}
