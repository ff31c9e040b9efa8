//! Input encoding: colour transform, thermometer codes and the level-only
//! storage format used by native replay.
//!
//! A thermometer code of `k` channels maps an 8-bit value to the level
//! `floor(v·k/256)` and emits that many leading `+1` followed by `-1`. TYCC
//! codes luminance on `2N` channels and each chrominance on `N`, so a pixel
//! costs `4N` binary channels but only `log2(2N) + 2·log2(N)` stored bits.

use serde::{Deserialize, Serialize};

use crate::binmath::BitTensor;
use crate::error::{cfg_err, dim_err, Result};

/// Default chrominance channel count for TYCC.
pub const DEFAULT_TYCC_N: usize = 16;
/// Channels per colour plane for TRGB.
pub const TRGB_CHANNELS: usize = 85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// 8-bit, 3-channel image stored interleaved (HWC).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub space: ColorSpace,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, space: ColorSpace, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return dim_err(format!(
                "{height}x{width}x3 image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            ));
        }
        Ok(RawImage {
            height,
            width,
            space,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, px: [u8; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| px).collect();
        RawImage {
            height,
            width,
            space: ColorSpace::Rgb,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Converts to YCbCr; a no-op for images already in that space.
    pub fn to_ycc(&self) -> RawImage {
        match self.space {
            ColorSpace::YCbCr => self.clone(),
            ColorSpace::Rgb => RawImage {
                height: self.height,
                width: self.width,
                space: ColorSpace::YCbCr,
                data: self
                    .data
                    .chunks_exact(3)
                    .flat_map(|p| rgb_to_ycc([p[0], p[1], p[2]]))
                    .collect(),
            },
        }
    }
}

/// Full-range BT.601 RGB → YCbCr, rounded and clamped to 8 bits.
pub fn rgb_to_ycc([r, g, b]: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    [y, cb, cr].map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Quantization level of `value` for a `k`-channel thermometer.
#[inline]
pub fn thermometer_level(value: u8, k: usize) -> usize {
    value as usize * k / 256
}

/// Thermometer code: `+1` on the first `level` positions, `-1` after.
pub fn thermometer(value: u8, k: usize) -> Result<Vec<i8>> {
    if k == 0 {
        return cfg_err("thermometer needs at least one channel");
    }
    let level = thermometer_level(value, k);
    Ok((0..k).map(|i| if i < level { 1 } else { -1 }).collect())
}

/// Centre of the 8-bit bin that maps to `level` in a `k`-channel code.
#[inline]
pub fn level_midpoint(level: usize, k: usize) -> u8 {
    ((2 * level + 1) * 128 / k).min(255) as u8
}

pub fn ceil_log2(n: usize) -> usize {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Binary input encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Encoding {
    /// Thermometer YCbCr with `2n` luminance and `n` channels per chrominance.
    Tycc { n: usize },
    /// Thermometer RGB, 85 channels per plane.
    Trgb,
}

impl Default for Encoding {
    fn default() -> Self {
        Encoding::Tycc { n: DEFAULT_TYCC_N }
    }
}

impl Encoding {
    /// Per-plane channel counts.
    pub fn plane_channels(&self) -> [usize; 3] {
        match *self {
            Encoding::Tycc { n } => [2 * n, n, n],
            Encoding::Trgb => [TRGB_CHANNELS; 3],
        }
    }

    /// Binary channels per pixel.
    pub fn channels(&self) -> usize {
        self.plane_channels().iter().sum()
    }

    /// Bits needed to store one pixel's quantization levels.
    pub fn bits_per_pixel(&self) -> usize {
        self.plane_channels().iter().map(|k| ceil_log2(*k)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Encoding::Tycc { n } if n == 0 || n > 64 => {
                cfg_err(format!("TYCC channel count {n} outside 1..=64"))
            }
            _ => Ok(()),
        }
    }

    fn space(&self) -> ColorSpace {
        match self {
            Encoding::Tycc { .. } => ColorSpace::YCbCr,
            Encoding::Trgb => ColorSpace::Rgb,
        }
    }

    /// Encodes an image into an `[H, W, channels]` ±1 tensor.
    pub fn encode(&self, img: &RawImage) -> Result<BitTensor> {
        Ok(self.encode_levels(&self.quantize(img)?))
    }

    /// Per-pixel quantization levels of an image.
    pub fn quantize(&self, img: &RawImage) -> Result<QuantizedImage> {
        self.validate()?;
        let src = match (self.space(), img.space) {
            (ColorSpace::YCbCr, ColorSpace::Rgb) => img.to_ycc(),
            (ColorSpace::Rgb, ColorSpace::YCbCr) => {
                return cfg_err("TRGB encoding needs an RGB image");
            }
            _ => img.clone(),
        };
        let ks = self.plane_channels();
        let levels = src
            .data
            .chunks_exact(3)
            .flat_map(|p| [0, 1, 2].map(|c| thermometer_level(p[c], ks[c]) as u8))
            .collect();
        Ok(QuantizedImage {
            height: img.height,
            width: img.width,
            encoding: *self,
            levels,
        })
    }

    /// Thermometer code straight from stored levels.
    pub fn encode_levels(&self, q: &QuantizedImage) -> BitTensor {
        let ks = self.plane_channels();
        let ch = self.channels();
        let mut out = BitTensor::minus_ones(&[q.height, q.width, ch]);
        for (pix, lv) in q.levels.chunks_exact(3).enumerate() {
            let mut off = pix * ch;
            for c in 0..3 {
                for i in 0..lv[c] as usize {
                    out.set(off + i, true);
                }
                off += ks[c];
            }
        }
        out
    }
}

/// TYCC encoding with `n` chrominance channels (`4n` per pixel).
pub fn encode_tycc(img: &RawImage, n: usize) -> Result<BitTensor> {
    Encoding::Tycc { n }.encode(img)
}

/// TRGB encoding (255 channels per pixel).
pub fn encode_trgb(img: &RawImage) -> Result<BitTensor> {
    Encoding::Trgb.encode(img)
}

/// Image stored as quantization levels only.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct QuantizedImage {
    pub height: usize,
    pub width: usize,
    pub encoding: Encoding,
    /// Three levels per pixel, interleaved.
    pub levels: Vec<u8>,
}

impl QuantizedImage {
    /// Storage cost in bits.
    pub fn storage_bits(&self) -> usize {
        self.height * self.width * self.encoding.bits_per_pixel()
    }

    /// Maps each level back to the midpoint of its bin.
    pub fn dequantize(&self) -> RawImage {
        let ks = self.encoding.plane_channels();
        RawImage {
            height: self.height,
            width: self.width,
            space: self.encoding.space(),
            data: self
                .levels
                .chunks_exact(3)
                .flat_map(|lv| [0, 1, 2].map(|c| level_midpoint(lv[c] as usize, ks[c])))
                .collect(),
        }
    }

    pub fn encode(&self) -> BitTensor {
        self.encoding.encode_levels(self)
    }
}

/// Level-only storage of an image under TYCC-`n`.
pub fn quantize(img: &RawImage, n: usize) -> Result<QuantizedImage> {
    Encoding::Tycc { n }.quantize(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_transform_pins() {
        assert_eq!(rgb_to_ycc([0, 0, 0]), [0, 128, 128]);
        assert_eq!(rgb_to_ycc([255, 255, 255]), [255, 128, 128]);
        assert_eq!(rgb_to_ycc([255, 0, 0]), [76, 85, 255]);
    }

    #[test]
    fn thermometer_examples() {
        assert_eq!(thermometer(255, 8).unwrap(), vec![1, 1, 1, 1, 1, 1, 1, -1]);
        assert_eq!(thermometer(0, 8).unwrap(), vec![-1; 8]);
        let t = thermometer(100, 16).unwrap();
        assert_eq!(t.iter().filter(|v| **v == 1).count(), 6);
        assert!(thermometer(3, 0).is_err());
    }

    #[test]
    fn storage_costs() {
        assert_eq!(Encoding::Tycc { n: 16 }.channels(), 64);
        assert_eq!(Encoding::Tycc { n: 16 }.bits_per_pixel(), 13);
        assert_eq!(Encoding::Trgb.bits_per_pixel(), 21);
        assert_eq!(Encoding::Trgb.channels(), 255);
        let q = quantize(&RawImage::filled(32, 32, [9, 9, 9]), 16).unwrap();
        assert_eq!(q.storage_bits(), 13312);
    }

    #[test]
    fn black_and_white_codes() {
        let black = RawImage::filled(2, 2, [0, 0, 0]);
        let t = encode_trgb(&black).unwrap();
        assert_eq!(t.count_plus(), 0);
        let white = RawImage::filled(1, 1, [255, 255, 255]);
        let t = encode_trgb(&white).unwrap();
        for g in 0..3 {
            let group: Vec<i8> = (0..85).map(|i| t.value(g * 85 + i)).collect();
            assert_eq!(group.iter().filter(|v| **v == 1).count(), 84);
            assert_eq!(group[83], 1);
            assert_eq!(group[84], -1);
        }
    }

    #[test]
    fn all_black_tycc_is_not_all_minus() {
        // chroma of black sits at 128, half-way up the code
        let t = encode_tycc(&RawImage::filled(1, 1, [0, 0, 0]), 16).unwrap();
        assert_eq!((0..32).filter(|i| t.bit(*i)).count(), 0);
        assert_eq!(t.count_plus(), 16);
    }

    #[test]
    fn dequantized_luma_level_zero() {
        assert_eq!(level_midpoint(0, 32), 4);
        assert_eq!(thermometer_level(4, 32), 0);
    }
}
