//! Synthetic scenes with exact ground truth.
//!
//! Generators for small labeled images used by tests, examples and
//! benchmarks: a foreground region with its own color distribution on a
//! contrasting background, together with the true mask and a loose
//! bounding box. Everything is driven by a seed and fully reproducible.

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imageio::{BBox, LabImage, SegMask};

/// Smallest accepted side for rectangle scenes: fits a 30 pixel foreground
/// with an 8 pixel border margin and a 5 pixel box margin.
pub const MIN_SIDE: u32 = 48;

/// Blob scenes need more room for the sampled ellipse.
pub const MIN_BLOB_SIDE: u32 = 80;

const BG_MEAN: [f64; 3] = [30.0, 8.0, -12.0];
const FG_MEAN: [f64; 3] = [72.0, -14.0, 28.0];

// More palette entries than any mixture size under test, so every K
// underfits smoothly instead of racing for duplicate components.
const BG_PALETTE: [[f64; 3]; 6] = [
    [22.0, 4.0, -18.0],
    [34.0, 14.0, -6.0],
    [44.0, -4.0, -16.0],
    [27.0, -8.0, -10.0],
    [38.0, 8.0, -24.0],
    [30.0, 16.0, -14.0],
];
const FG_PALETTE: [[f64; 3]; 6] = [
    [68.0, -18.0, 30.0],
    [78.0, -6.0, 40.0],
    [60.0, -26.0, 16.0],
    [72.0, 2.0, 24.0],
    [64.0, -10.0, 38.0],
    [75.0, -22.0, 20.0],
];

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: LabImage,
    pub groundtruth: SegMask,
    /// Loose box around the foreground, usable as initialization.
    pub bbox: BBox,
}

/// Axis-aligned foreground rectangle at least 30 pixels per side, kept 8
/// pixels away from every border so the box margin and its surrounding
/// ring stay inside the image.
fn sample_rect(rng: &mut ChaCha8Rng, width: u32, height: u32) -> BBox {
    let side = |rng: &mut ChaCha8Rng, full: u32| {
        let hi = (full - 16).min(3 * full / 5).max(30);
        rng.gen_range(30..=hi)
    };
    let w = side(rng, width);
    let h = side(rng, height);
    let x = rng.gen_range(8..=width - 8 - w);
    let y = rng.gen_range(8..=height - 8 - h);
    BBox { x, y, w, h }
}

fn grow_bbox(rect: BBox, width: u32, height: u32, margin: u32) -> BBox {
    let x = rect.x.saturating_sub(margin);
    let y = rect.y.saturating_sub(margin);
    BBox {
        x,
        y,
        w: (rect.x + rect.w + margin).min(width) - x,
        h: (rect.y + rect.h + margin).min(height) - y,
    }
}

fn paint_flat(
    rng: &mut ChaCha8Rng,
    width: u32,
    height: u32,
    fg: &[bool],
    noise_sd: f64,
) -> LabImage {
    let noise = Normal::new(0.0, noise_sd).unwrap();
    let pixels = fg
        .iter()
        .map(|&is_fg| {
            let mean = if is_fg { FG_MEAN } else { BG_MEAN };
            [
                mean[0] + noise.sample(rng),
                mean[1] + noise.sample(rng),
                mean[2] + noise.sample(rng),
            ]
        })
        .collect();
    LabImage::new(width, height, pixels).unwrap()
}

fn rect_mask(width: u32, height: u32, rect: BBox) -> Vec<bool> {
    let mut fg = vec![false; (width * height) as usize];
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            fg[(y * width + x) as usize] = true;
        }
    }
    fg
}

/// A noisy two-color scene: one uniform foreground rectangle on a uniform
/// background, per-channel Gaussian noise on both.
pub fn rectangle_scene(width: u32, height: u32, seed: u64) -> Scene {
    assert!(
        width >= MIN_SIDE && height >= MIN_SIDE,
        "rectangle scenes need at least {MIN_SIDE} pixels per side"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = sample_rect(&mut rng, width, height);
    let fg = rect_mask(width, height, rect);
    let image = paint_flat(&mut rng, width, height, &fg, 2.0);
    Scene {
        image,
        groundtruth: SegMask::new(width, height, fg).unwrap(),
        bbox: grow_bbox(rect, width, height, 5),
    }
}

/// Like [`rectangle_scene`] but each side draws pixel colors from its own
/// six-color palette, so a single Gaussian per side underfits and the
/// mixture components matter.
pub fn textured_scene(width: u32, height: u32, seed: u64) -> Scene {
    assert!(
        width >= MIN_SIDE && height >= MIN_SIDE,
        "textured scenes need at least {MIN_SIDE} pixels per side"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = sample_rect(&mut rng, width, height);
    let fg = rect_mask(width, height, rect);
    let noise = Normal::new(0.0, 1.5).unwrap();
    let pixels = fg
        .iter()
        .map(|&is_fg| {
            let palette = if is_fg { &FG_PALETTE } else { &BG_PALETTE };
            let mean = palette[rng.gen_range(0..palette.len())];
            [
                mean[0] + noise.sample(&mut rng),
                mean[1] + noise.sample(&mut rng),
                mean[2] + noise.sample(&mut rng),
            ]
        })
        .collect();
    Scene {
        image: LabImage::new(width, height, pixels).unwrap(),
        groundtruth: SegMask::new(width, height, fg).unwrap(),
        bbox: grow_bbox(rect, width, height, 5),
    }
}

/// An elliptical foreground blob, for inputs whose outline the box
/// initialization cannot trace.
pub fn blob_scene(width: u32, height: u32, seed: u64) -> Scene {
    assert!(
        width >= MIN_BLOB_SIDE && height >= MIN_BLOB_SIDE,
        "blob scenes need at least {MIN_BLOB_SIDE} pixels per side"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cx = f64::from(width) * rng.gen_range(0.4..=0.6);
    let cy = f64::from(height) * rng.gen_range(0.4..=0.6);
    // semi-axes capped so the ellipse keeps an 8 pixel border margin
    let rx_max = (cx.min(f64::from(width) - 1.0 - cx) - 8.0).max(15.0);
    let ry_max = (cy.min(f64::from(height) - 1.0 - cy) - 8.0).max(15.0);
    let rx = rng.gen_range(15.0..=rx_max);
    let ry = rng.gen_range(15.0..=ry_max);
    let mut fg = vec![false; (width * height) as usize];
    for y in 0..height {
        for x in 0..width {
            let dx = (f64::from(x) + 0.5 - cx) / rx;
            let dy = (f64::from(y) + 0.5 - cy) / ry;
            fg[(y * width + x) as usize] = dx * dx + dy * dy <= 1.0;
        }
    }
    let image = paint_flat(&mut rng, width, height, &fg, 2.0);
    let (mut x0, mut y0, mut x1, mut y1) = (width, height, 0, 0);
    for y in 0..height {
        for x in 0..width {
            if fg[(y * width + x) as usize] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    let tight = BBox {
        x: x0,
        y: y0,
        w: x1 + 1 - x0,
        h: y1 + 1 - y0,
    };
    Scene {
        image,
        groundtruth: SegMask::new(width, height, fg).unwrap(),
        bbox: grow_bbox(tight, width, height, 5),
    }
}

/// Chebyshev dilation of the foreground by `radius`, returned as a
/// probability map: 1.0 inside the dilated region, 0.0 outside.
pub fn dilate(mask: &SegMask, radius: u32) -> Vec<f64> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let r = radius as usize;
    // square structuring element separates into two box passes
    let mut horiz = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            horiz[y * w + x] = (lo..=hi).any(|xx| mask.foreground[y * w + xx]);
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            if (lo..=hi).any(|yy| horiz[yy * w + x]) {
                out[y * w + x] = 1.0;
            }
        }
    }
    out
}

/// File-format twin of [`rectangle_scene`]: the same geometry rendered as
/// an sRGB image plus a 0/255 ground-truth mask, for tests that exercise
/// the on-disk pipeline.
pub fn rectangle_scene_rgb(width: u32, height: u32, seed: u64) -> (RgbImage, GrayImage, BBox) {
    assert!(
        width >= MIN_SIDE && height >= MIN_SIDE,
        "rectangle scenes need at least {MIN_SIDE} pixels per side"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = sample_rect(&mut rng, width, height);
    let fg = rect_mask(width, height, rect);
    let noise = Normal::new(0.0, 4.0).unwrap();
    let mut img = RgbImage::new(width, height);
    let mut gt = GrayImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let is_fg = fg[(y * width + x) as usize];
            let base: [f64; 3] = if is_fg {
                [200.0, 150.0, 60.0]
            } else {
                [60.0, 70.0, 90.0]
            };
            let px = [
                (base[0] + noise.sample(&mut rng)).clamp(0.0, 255.0) as u8,
                (base[1] + noise.sample(&mut rng)).clamp(0.0, 255.0) as u8,
                (base[2] + noise.sample(&mut rng)).clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x, y, image::Rgb(px));
            gt.put_pixel(x, y, image::Luma([if is_fg { 255u8 } else { 0u8 }]));
        }
    }
    (img, gt, grow_bbox(rect, width, height, 5))
}
