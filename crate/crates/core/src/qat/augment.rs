//! Pixel-domain data augmentation, applied before encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encode::{ColorSpace, RawImage};

/// Switches and magnitudes of the standard training augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    /// Maximum integer shift per axis, in pixels.
    pub max_shift: i32,
    /// Contrast factor is drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            max_shift: 2,
            contrast: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip: false,
            max_shift: 0,
            contrast: 0.0,
        }
    }
}

/// One concrete draw of the standard augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub dx: i32,
    pub dy: i32,
    pub contrast: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        dx: 0,
        dy: 0,
        contrast: 1.0,
    };

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.flip && rng.random_bool(0.5);
        let (dx, dy) = if cfg.max_shift > 0 {
            (
                rng.random_range(-cfg.max_shift..=cfg.max_shift),
                rng.random_range(-cfg.max_shift..=cfg.max_shift),
            )
        } else {
            (0, 0)
        };
        let contrast = if cfg.contrast > 0.0 {
            rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
        } else {
            1.0
        };
        AugmentParams {
            flip,
            dx,
            dy,
            contrast,
        }
    }

    /// Horizontal flip, then translation with replicated edges, then contrast
    /// about the per-channel mean.
    pub fn apply(&self, img: &RawImage) -> RawImage {
        let (h, w) = (img.height as i32, img.width as i32);
        let mut data = Vec::with_capacity(img.data.len());
        for y in 0..h {
            for x in 0..w {
                let sy = (y - self.dy).clamp(0, h - 1);
                let mut sx = (x - self.dx).clamp(0, w - 1);
                if self.flip {
                    sx = w - 1 - sx;
                }
                data.extend(img.pixel(sy as usize, sx as usize));
            }
        }
        let mut out = RawImage { data, ..img.clone() };
        if self.contrast != 1.0 {
            adjust_contrast(&mut out, self.contrast);
        }
        out
    }
}

pub fn augment(img: &RawImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> RawImage {
    AugmentParams::draw(cfg, rng).apply(img)
}

fn adjust_contrast(img: &mut RawImage, factor: f64) {
    let n = (img.height * img.width) as f64;
    for c in 0..3 {
        let mean = img.data.iter().skip(c).step_by(3).map(|v| *v as f64).sum::<f64>() / n;
        for v in img.data.iter_mut().skip(c).step_by(3) {
            *v = ((*v as f64 - mean) * factor + mean).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// The stronger view augmentation used by the self-supervised term: standard
/// augmentation plus brightness and saturation jitter and a random crop that
/// is resized back to the input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongAugment {
    pub base: AugmentConfig,
    pub brightness: f64,
    pub saturation: f64,
    /// Fraction of the image area kept by the crop.
    pub crop_area: f64,
}

impl Default for StrongAugment {
    fn default() -> Self {
        StrongAugment {
            base: AugmentConfig::default(),
            brightness: 0.2,
            saturation: 0.2,
            crop_area: 0.875,
        }
    }
}

impl StrongAugment {
    pub fn apply(&self, img: &RawImage, rng: &mut impl Rng) -> RawImage {
        let mut out = augment(img, &self.base, rng);
        let b = rng.random_range(1.0 - self.brightness..=1.0 + self.brightness);
        let s = rng.random_range(1.0 - self.saturation..=1.0 + self.saturation);
        jitter(&mut out, b, s);
        random_resized_crop(&out, self.crop_area, rng)
    }
}

fn jitter(img: &mut RawImage, brightness: f64, saturation: f64) {
    let clamp = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    for px in img.data.chunks_exact_mut(3) {
        let [a, b, c] = [px[0] as f64, px[1] as f64, px[2] as f64];
        let out = match img.space {
            ColorSpace::Rgb => {
                let gray = 0.299 * a + 0.587 * b + 0.114 * c;
                [a, b, c].map(|v| (gray + saturation * (v - gray)) * brightness)
            }
            ColorSpace::YCbCr => [
                a * brightness,
                128.0 + saturation * (b - 128.0),
                128.0 + saturation * (c - 128.0),
            ],
        };
        for (d, v) in px.iter_mut().zip(out) {
            *d = clamp(v);
        }
    }
}

/// Crops a random window of `area` times the image area (same aspect) and
/// resizes it back with bilinear interpolation.
pub fn random_resized_crop(img: &RawImage, area: f64, rng: &mut impl Rng) -> RawImage {
    let (h, w) = (img.height, img.width);
    let side = area.clamp(0.0, 1.0).sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let mut data = Vec::with_capacity(img.data.len());
    for y in 0..h {
        let fy = (y as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
        let fy = fy.clamp(0.0, (ch - 1) as f64);
        let (ya, t) = (fy.floor() as usize, fy - fy.floor());
        let yb = (ya + 1).min(ch - 1);
        for x in 0..w {
            let fx = (x as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
            let fx = fx.clamp(0.0, (cw - 1) as f64);
            let (xa, u) = (fx.floor() as usize, fx - fx.floor());
            let xb = (xa + 1).min(cw - 1);
            let p = |yy: usize, xx: usize| img.pixel(y0 + yy, x0 + xx);
            let (p00, p01, p10, p11) = (p(ya, xa), p(ya, xb), p(yb, xa), p(yb, xb));
            for c in 0..3 {
                let v = (1.0 - t) * ((1.0 - u) * p00[c] as f64 + u * p01[c] as f64)
                    + t * ((1.0 - u) * p10[c] as f64 + u * p11[c] as f64);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage { data, ..img.clone() }
}
