//! Colour statistics transfer in the lαβ space.
//!
//! RGB in `[0, 1]` goes to LMS by a fixed matrix, then through a base-10 log
//! (clamped below at `1e-6`) and a decorrelating rotation into one luminance
//! channel `l` and two chrominance channels `α`, `β`. Matching per-channel
//! mean and standard deviation there moves one camera's colour style onto
//! another's.

mod ppm;

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ColorError {
    #[error("image is {width}x{height} but has {len} samples")]
    Shape { width: usize, height: usize, len: usize },
    #[error("statistics need at least two pixels, got {0}")]
    TooFewPixels(usize),
    #[error("ppm: {0}")]
    Ppm(String),
}

pub type Result<T> = std::result::Result<T, ColorError>;

const RGB_TO_LMS: [[f64; 3]; 3] = [
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
];
/// Linear LMS values are clamped here before the log.
pub const LMS_FLOOR: f64 = 1e-6;
/// Smallest standard deviation reported by [`channel_stats`].
pub const STD_FLOOR: f64 = 1e-6;

/// 8-bit RGB image, row-major `[r, g, b]` triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(ColorError::Shape {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Image in lαβ, row-major `[l, α, β]` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLab {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

/// Per-channel mean and standard deviation in lαβ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn invert(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let cof = [
        [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
        [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
        [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
    ];
    let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
    // inverse is the transposed cofactor matrix over the determinant
    [0, 1, 2].map(|r| [0, 1, 2].map(|col| cof[col][r] / det))
}

fn lms_to_rgb_matrix() -> [[f64; 3]; 3] {
    invert(&RGB_TO_LMS)
}

/// One pixel from RGB in `[0, 1]` to lαβ.
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let [l, m, s] = mat_vec(&RGB_TO_LMS, rgb).map(|v| v.max(LMS_FLOOR).log10());
    [
        (l + m + s) / 3f64.sqrt(),
        (l + m - 2.0 * s) / 6f64.sqrt(),
        (l - m) / 2f64.sqrt(),
    ]
}

/// One lαβ pixel back to (unclamped) RGB in `[0, 1]` units.
fn lab_to_rgb_with(inverse: &[[f64; 3]; 3], lab: [f64; 3]) -> [f64; 3] {
    let a = lab[0] / 3f64.sqrt();
    let b = lab[1] / 6f64.sqrt();
    let c = lab[2] / 2f64.sqrt();
    let log_lms = [a + b + c, a + b - c, a - 2.0 * b];
    mat_vec(inverse, log_lms.map(|v| 10f64.powf(v)))
}

pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    lab_to_rgb_with(&lms_to_rgb_matrix(), lab)
}

/// Clamps to `[0, 1]` and rounds half up onto the 8-bit scale.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

pub fn rgb_to_lab(image: &ImageRgb) -> ImageLab {
    let pixels = image
        .pixels
        .chunks_exact(3)
        .map(|p| rgb_to_lab_pixel([p[0], p[1], p[2]].map(|v| f64::from(v) / 255.0)))
        .collect();
    ImageLab {
        width: image.width,
        height: image.height,
        pixels,
    }
}

pub fn lab_to_rgb(image: &ImageLab) -> ImageRgb {
    let inverse = lms_to_rgb_matrix();
    let pixels = image
        .pixels
        .iter()
        .flat_map(|&p| lab_to_rgb_with(&inverse, p).map(quantize))
        .collect();
    ImageRgb {
        width: image.width,
        height: image.height,
        pixels,
    }
}

/// Pooled lαβ statistics (population standard deviation) over every pixel of every image.
pub fn channel_stats(images: &[&ImageRgb]) -> Result<ChannelStats> {
    let labs: Vec<ImageLab> = images.iter().map(|im| rgb_to_lab(im)).collect();
    lab_stats(&labs.iter().collect::<Vec<_>>())
}

pub fn lab_stats(images: &[&ImageLab]) -> Result<ChannelStats> {
    let n: usize = images.iter().map(|im| im.pixels.len()).sum();
    if n < 2 {
        return Err(ColorError::TooFewPixels(n));
    }
    // shifted by the first pixel so constant images give an exact mean
    let origin = images
        .iter()
        .flat_map(|im| &im.pixels)
        .next()
        .copied()
        .unwrap_or_default();
    let mut shifted = [0.0; 3];
    for p in images.iter().flat_map(|im| &im.pixels) {
        for c in 0..3 {
            shifted[c] += p[c] - origin[c];
        }
    }
    let mean = [0, 1, 2].map(|c| origin[c] + shifted[c] / n as f64);
    let mut var = [0.0; 3];
    for p in images.iter().flat_map(|im| &im.pixels) {
        for c in 0..3 {
            var[c] += (p[c] - mean[c]).powi(2);
        }
    }
    let std = var.map(|v| (v / n as f64).sqrt().max(STD_FLOOR));
    Ok(ChannelStats { mean, std })
}

/// Statistics of every `every`-th frame (starting with the first), pooled.
pub fn reference_stats(frames: &[ImageRgb], every: usize) -> Result<ChannelStats> {
    let picked: Vec<&ImageRgb> = frames.iter().step_by(every.max(1)).collect();
    channel_stats(&picked)
}

/// The transferred image in lαβ, before conversion and quantization.
pub fn transfer_lab(content: &ImageRgb, content_stats: &ChannelStats, reference_stats: &ChannelStats) -> ImageLab {
    let mut lab = rgb_to_lab(content);
    let scale = [0, 1, 2].map(|c| reference_stats.std[c] / content_stats.std[c]);
    for p in &mut lab.pixels {
        for c in 0..3 {
            p[c] = scale[c] * (p[c] - content_stats.mean[c]) + reference_stats.mean[c];
        }
    }
    lab
}

/// Recolours `content` so its lαβ statistics move from `content_stats` to `reference_stats`.
pub fn transfer(content: &ImageRgb, content_stats: &ChannelStats, reference_stats: &ChannelStats) -> ImageRgb {
    lab_to_rgb(&transfer_lab(content, content_stats, reference_stats))
}

/// Transfers one frame using its own statistics as the content statistics.
pub fn transfer_frame(content: &ImageRgb, reference_stats: &ChannelStats) -> Result<ImageRgb> {
    let own = channel_stats(&[content])?;
    Ok(transfer(content, &own, reference_stats))
}
