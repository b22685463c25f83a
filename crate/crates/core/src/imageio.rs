//! Image decoding, sRGB to CIELAB conversion, trimap and bounding-box
//! ingestion, and binary mask encoding.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::{Error, Result};

/// An image converted to CIELAB, one `[L, a, b]` triple per pixel in row-major
/// order. L is in [0, 100]; a and b are signed.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl LabImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("zero-sized image".into()));
        }
        if pixels.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidInput(format!(
                "pixel buffer has {} entries for a {}x{} image",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(LabImage {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

/// Per-pixel trimap state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrimapLabel {
    Background,
    Unknown,
    Foreground,
}

/// Where a trimap came from. Bounding-box provenance carries the box so the
/// pipeline can restrict background training to a ring around it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Bbox(BBox),
    TrimapFile,
    PriorMap,
}

/// Axis-aligned box, 0-indexed, half-open: pixels with
/// `x <= px < x + w` and `y <= py < y + h` are inside.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    #[inline]
    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Rejects empty boxes and boxes that poke past the image.
    pub fn check_fits(&self, width: u32, height: u32) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::InvalidInput("empty bounding box".into()));
        }
        if self.x.checked_add(self.w).map_or(true, |r| r > width)
            || self.y.checked_add(self.h).map_or(true, |b| b > height)
        {
            return Err(Error::InvalidInput(format!(
                "bounding box {}+{}x{}+{} exceeds {}x{} image",
                self.x, self.w, self.y, self.h, width, height
            )));
        }
        Ok(())
    }

    /// Chebyshev distance from a pixel to the box; 0 inside.
    pub fn chebyshev_distance(&self, px: u32, py: u32) -> u32 {
        let dx = if px < self.x {
            self.x - px
        } else if px >= self.x + self.w {
            px - (self.x + self.w - 1)
        } else {
            0
        };
        let dy = if py < self.y {
            self.y - py
        } else if py >= self.y + self.h {
            py - (self.y + self.h - 1)
        } else {
            0
        };
        dx.max(dy)
    }
}

/// Per-pixel trimap with the provenance of its construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<TrimapLabel>,
    pub provenance: Provenance,
}

impl TriMap {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> TrimapLabel {
        self.labels[y as usize * self.width as usize + x as usize]
    }
}

/// Binary segmentation mask, `true` = foreground, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub width: u32,
    pub height: u32,
    pub foreground: Vec<bool>,
}

impl SegMask {
    pub fn new(width: u32, height: u32, foreground: Vec<bool>) -> Result<Self> {
        if foreground.len() != (width as usize) * (height as usize) {
            return Err(Error::InvalidInput("mask buffer size mismatch".into()));
        }
        Ok(SegMask {
            width,
            height,
            foreground,
        })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.foreground[y as usize * self.width as usize + x as usize]
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&f| f).count()
    }
}

const REF_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

#[inline]
fn srgb_channel_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    // CIE thresholds as exact rationals.
    const EPS: f64 = 216.0 / 24389.0;
    const KAPPA: f64 = 24389.0 / 27.0;
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// Converts one sRGB pixel (8-bit channels) to CIELAB under D65.
pub fn srgb_pixel_to_lab(r: u8, g: u8, b: u8) -> [f64; 3] {
    let (rl, gl, bl) = (
        srgb_channel_to_linear(r),
        srgb_channel_to_linear(g),
        srgb_channel_to_linear(b),
    );
    let x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl;
    let y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl;
    let z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl;
    let fx = lab_f(x / REF_WHITE[0]);
    let fy = lab_f(y / REF_WHITE[1]);
    let fz = lab_f(z / REF_WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts a decoded sRGB image to CIELAB.
pub fn srgb_to_lab(img: &RgbImage) -> Result<LabImage> {
    let (width, height) = img.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("zero-sized image".into()));
    }
    let mut pixels = Vec::with_capacity(width as usize * height as usize);
    for p in img.pixels() {
        pixels.push(srgb_pixel_to_lab(p.0[0], p.0[1], p.0[2]));
    }
    LabImage::new(width, height, pixels)
}

/// Decodes a PNG or JPEG file and converts it to CIELAB.
pub fn load_lab_image(path: &Path) -> Result<LabImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode()?;
    srgb_to_lab(&img.to_rgb8())
}

/// Builds a trimap from a bounding box: inside UNKNOWN, outside BACKGROUND.
pub fn trimap_from_bbox(width: u32, height: u32, bbox: BBox) -> Result<TriMap> {
    bbox.check_fits(width, height)?;
    let mut labels = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        for x in 0..width {
            labels.push(if bbox.contains(x, y) {
                TrimapLabel::Unknown
            } else {
                TrimapLabel::Background
            });
        }
    }
    Ok(TriMap {
        width,
        height,
        labels,
        provenance: Provenance::Bbox(bbox),
    })
}

/// Reads a trimap from an 8-bit grayscale image: 0 = background,
/// 128 = unknown, 255 = foreground. Any other value is an error.
pub fn trimap_from_gray(img: &GrayImage) -> Result<TriMap> {
    let (width, height) = img.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("zero-sized trimap".into()));
    }
    let mut labels = Vec::with_capacity(width as usize * height as usize);
    for p in img.pixels() {
        labels.push(match p.0[0] {
            0 => TrimapLabel::Background,
            128 => TrimapLabel::Unknown,
            255 => TrimapLabel::Foreground,
            v => {
                return Err(Error::InvalidInput(format!(
                    "trimap value {v} is not one of 0/128/255"
                )))
            }
        });
    }
    Ok(TriMap {
        width,
        height,
        labels,
        provenance: Provenance::TrimapFile,
    })
}

pub fn load_trimap(path: &Path) -> Result<TriMap> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode()?;
    // to_luma8 on an already-gray PNG is lossless; trimaps must be stored gray.
    match img {
        DynamicImage::ImageLuma8(g) => trimap_from_gray(&g),
        other => trimap_from_gray(&other.to_luma8()),
    }
}

/// Builds a trimap from a foreground-probability map: pixels with
/// `p < threshold` become BACKGROUND, the rest UNKNOWN.
pub fn trimap_from_prior(
    width: u32,
    height: u32,
    prior: &[f64],
    threshold: f64,
) -> Result<TriMap> {
    if prior.len() != width as usize * height as usize {
        return Err(Error::InvalidInput("prior map size mismatch".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!(
            "prior threshold {threshold} outside [0, 1]"
        )));
    }
    if prior.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::InvalidInput(
            "prior map contains values outside [0, 1]".into(),
        ));
    }
    let labels = prior
        .iter()
        .map(|&p| {
            if p < threshold {
                TrimapLabel::Background
            } else {
                TrimapLabel::Unknown
            }
        })
        .collect();
    Ok(TriMap {
        width,
        height,
        labels,
        provenance: Provenance::PriorMap,
    })
}

/// Loads a grayscale probability map, scaling 0..255 to 0..1.
pub fn load_prior_map(path: &Path) -> Result<(u32, u32, Vec<f64>)> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode()?.to_luma8();
    let (width, height) = img.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("zero-sized prior map".into()));
    }
    let prior = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Ok((width, height, prior))
}

/// Parses `"x y w h"` (whitespace separated, 0-indexed, half-open).
pub fn parse_bbox(text: &str) -> Result<BBox> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::InvalidInput(format!(
            "bounding box needs 4 fields `x y w h`, got {:?}",
            text.trim()
        )));
    }
    let mut vals = [0u32; 4];
    for (slot, field) in vals.iter_mut().zip(&fields) {
        *slot = field
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad bbox field {field:?}")))?;
    }
    Ok(BBox {
        x: vals[0],
        y: vals[1],
        w: vals[2],
        h: vals[3],
    })
}

/// Reads a bbox text file containing one `x y w h` line.
pub fn load_bbox(path: &Path) -> Result<BBox> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bbox(&text)
}

/// Encodes a mask as an 8-bit grayscale PNG (foreground 255, background 0).
pub fn encode_mask(mask: &SegMask) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(mask.width, mask.height, |x, y| {
        image::Luma([if mask.get(x, y) { 255u8 } else { 0u8 }])
    });
    let mut bytes = Vec::new();
    img.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

/// Decodes a mask PNG produced by [`encode_mask`]. Only 0 and 255 are valid.
pub fn decode_mask(bytes: &[u8]) -> Result<SegMask> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (width, height) = img.dimensions();
    let mut foreground = Vec::with_capacity(width as usize * height as usize);
    for p in img.pixels() {
        foreground.push(match p.0[0] {
            255 => true,
            0 => false,
            v => {
                return Err(Error::InvalidInput(format!(
                    "mask value {v} is not 0 or 255"
                )))
            }
        });
    }
    SegMask::new(width, height, foreground)
}

pub fn save_mask(path: &Path, mask: &SegMask) -> Result<()> {
    let bytes = encode_mask(mask)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a ground-truth mask leniently: values >= 128 count as foreground.
/// Dataset masks sometimes mark boundary pixels with intermediate grays.
pub fn load_groundtruth(path: &Path) -> Result<SegMask> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.decode()?.to_luma8();
    let (width, height) = img.dimensions();
    let foreground = img.pixels().map(|p| p.0[0] >= 128).collect();
    SegMask::new(width, height, foreground)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Straight-line transcription of the sRGB -> XYZ -> LAB chain, kept
    // separate from the production code path on purpose.
    fn reference_lab(r: u8, g: u8, b: u8) -> [f64; 3] {
        fn lin(u: u8) -> f64 {
            let c = u as f64 / 255.0;
            if c <= 0.04045 {
                c / 12.92
            } else {
                ((c + 0.055) / 1.055).powf(2.4)
            }
        }
        let (rl, gl, bl) = (lin(r), lin(g), lin(b));
        let xyz = [
            0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl,
            0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl,
            0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl,
        ];
        let white = [0.95047, 1.0, 1.08883];
        let f = |t: f64| {
            if t > 216.0 / 24389.0 {
                t.powf(1.0 / 3.0)
            } else {
                (24389.0 / 27.0 * t + 16.0) / 116.0
            }
        };
        let fx = f(xyz[0] / white[0]);
        let fy = f(xyz[1] / white[1]);
        let fz = f(xyz[2] / white[2]);
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    #[test]
    fn black_maps_to_origin() {
        let lab = srgb_pixel_to_lab(0, 0, 0);
        assert_eq!(lab, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn white_maps_to_l100_neutral() {
        let [l, a, b] = srgb_pixel_to_lab(255, 255, 255);
        assert!((l - 100.0).abs() < 1e-3, "L = {l}");
        assert!(a.abs() < 0.01 && b.abs() < 0.01, "a = {a}, b = {b}");
    }

    #[test]
    fn mid_gray_matches_reference_chain() {
        let lab = srgb_pixel_to_lab(119, 119, 119);
        let expect = reference_lab(119, 119, 119);
        for (got, want) in lab.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-9, "{lab:?} vs {expect:?}");
        }
        // Frozen from the reference chain.
        assert!((lab[0] - 50.034440993686104).abs() < 1e-9);
        assert!(lab[1].abs() < 1e-4 && lab[2].abs() < 1e-4);
    }

    #[test]
    fn primaries_match_reference_chain() {
        for (r, g, b) in [
            (255u8, 0u8, 0u8),
            (0, 255, 0),
            (0, 0, 255),
            (128, 64, 200),
            (255, 255, 22),
        ] {
            let got = srgb_pixel_to_lab(r, g, b);
            let want = reference_lab(r, g, b);
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-9, "rgb({r},{g},{b}): {got:?} vs {want:?}");
            }
        }
        // One widely published value as an external anchor.
        let yellowish = srgb_pixel_to_lab(255, 255, 22);
        assert!((yellowish[0] - 97.16279981235303).abs() < 1e-6);
    }

    #[test]
    fn gray_ramp_l_strictly_increasing() {
        let mut prev = -1.0;
        for v in 0..=255u8 {
            let [l, a, b] = srgb_pixel_to_lab(v, v, v);
            assert!(l > prev, "L not increasing at {v}: {l} <= {prev}");
            assert!(a.abs() < 1e-4 && b.abs() < 1e-4);
            prev = l;
        }
    }

    #[test]
    fn bbox_trimap_counts() {
        let bbox = BBox {
            x: 10,
            y: 10,
            w: 20,
            h: 20,
        };
        let tri = trimap_from_bbox(100, 100, bbox).unwrap();
        let unknown = tri
            .labels
            .iter()
            .filter(|&&l| l == TrimapLabel::Unknown)
            .count();
        assert_eq!(unknown, 400);
        assert_eq!(tri.labels.len() - unknown, 100 * 100 - 400);
        assert!(tri
            .labels
            .iter()
            .all(|&l| l != TrimapLabel::Foreground));
    }

    #[test]
    fn bbox_out_of_bounds_rejected() {
        let bbox = BBox {
            x: 90,
            y: 10,
            w: 20,
            h: 20,
        };
        assert!(trimap_from_bbox(100, 100, bbox).is_err());
        assert!(trimap_from_bbox(
            100,
            100,
            BBox {
                x: 0,
                y: 0,
                w: 0,
                h: 5
            }
        )
        .is_err());
    }

    #[test]
    fn chebyshev_ring_distances() {
        let bbox = BBox {
            x: 10,
            y: 10,
            w: 5,
            h: 5,
        };
        assert_eq!(bbox.chebyshev_distance(12, 12), 0);
        assert_eq!(bbox.chebyshev_distance(9, 12), 1);
        assert_eq!(bbox.chebyshev_distance(15, 15), 1);
        assert_eq!(bbox.chebyshev_distance(0, 12), 10);
        assert_eq!(bbox.chebyshev_distance(0, 0), 10);
    }

    #[test]
    fn trimap_gray_codes_round_trip() {
        let img = GrayImage::from_raw(3, 1, vec![0, 128, 255]).unwrap();
        let tri = trimap_from_gray(&img).unwrap();
        assert_eq!(
            tri.labels,
            vec![
                TrimapLabel::Background,
                TrimapLabel::Unknown,
                TrimapLabel::Foreground
            ]
        );
        let bad = GrayImage::from_raw(2, 1, vec![0, 7]).unwrap();
        assert!(trimap_from_gray(&bad).is_err());
    }

    #[test]
    fn prior_threshold_splits_labels() {
        let prior = vec![0.0, 0.39, 0.4, 1.0];
        let tri = trimap_from_prior(4, 1, &prior, 0.4).unwrap();
        assert_eq!(
            tri.labels,
            vec![
                TrimapLabel::Background,
                TrimapLabel::Background,
                TrimapLabel::Unknown,
                TrimapLabel::Unknown
            ]
        );
        assert!(trimap_from_prior(4, 1, &prior, 1.5).is_err());
        assert!(trimap_from_prior(4, 1, &[0.0, 2.0, 0.0, 0.0], 0.4).is_err());
    }

    #[test]
    fn parse_bbox_formats() {
        assert_eq!(
            parse_bbox("3 4 10 20").unwrap(),
            BBox {
                x: 3,
                y: 4,
                w: 10,
                h: 20
            }
        );
        assert!(parse_bbox("3 4 10").is_err());
        assert!(parse_bbox("3 4 ten 20").is_err());
    }

    #[test]
    fn mask_png_round_trip_exact() {
        let mask = SegMask::new(3, 2, vec![true, false, true, false, false, true]).unwrap();
        let bytes = encode_mask(&mask).unwrap();
        let back = decode_mask(&bytes).unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn mask_decode_rejects_gray_values() {
        let img = GrayImage::from_raw(2, 1, vec![255, 100]).unwrap();
        let mut bytes = Vec::new();
        img.write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .unwrap();
        assert!(decode_mask(&bytes).is_err());
    }
}
