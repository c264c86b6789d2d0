//! Colour-distribution reconstruction for decoded sketches, plus the small
//! simulations that show why diffusion drifts near-binary images to grey.
//!
//! Post-processing order: grayscale, bilateral smoothing, optional contrast
//! stretch, then bright-side binarization. Binarizing last means nothing can
//! reintroduce values just below white.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{pixel_to_signal, signal_to_pixel};
use crate::ddim::NoiseSchedule;
use crate::image::ImageBuffer;

pub const DEFAULT_BINARIZE_THRESHOLD: u8 = 230;

#[derive(Debug, Error)]
pub enum RcdError {
    #[error("expected a grayscale image, got {0} channels")]
    NotGray(u8),
    #[error("binarize threshold must be in [1,254], got {0}")]
    Threshold(u8),
    #[error("band diagnostic needs a square image, got {0}x{1}")]
    NotSquare(u32, u32),
    #[error("timestep {t} outside schedule of {steps} steps")]
    Timestep { t: usize, steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilateralParams {
    pub enabled: bool,
    pub spatial_sigma: f64,
    pub range_sigma: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            enabled: true,
            spatial_sigma: 2.0,
            range_sigma: 20.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastParams {
    pub enabled: bool,
    /// Blend between the input (0) and the full 1–99 percentile stretch (1).
    pub strength: f64,
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self {
            enabled: true,
            strength: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcdParams {
    pub enabled: bool,
    pub binarize_threshold: u8,
    pub white_value: u8,
    pub bilateral: BilateralParams,
    pub contrast: ContrastParams,
}

impl Default for RcdParams {
    fn default() -> Self {
        Self {
            enabled: true,
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
            white_value: 255,
            bilateral: BilateralParams::default(),
            contrast: ContrastParams::default(),
        }
    }
}

impl RcdParams {
    pub fn validate(&self) -> Result<(), RcdError> {
        if (1..=254).contains(&self.binarize_threshold) {
            Ok(())
        } else {
            Err(RcdError::Threshold(self.binarize_threshold))
        }
    }
}

fn require_gray(img: &ImageBuffer) -> Result<(), RcdError> {
    if img.is_gray() {
        Ok(())
    } else {
        Err(RcdError::NotGray(img.channels()))
    }
}

/// Pixels brighter than the threshold become `white_value`; others are untouched.
pub fn binarize_extremes(img: &ImageBuffer, p: &RcdParams) -> Result<ImageBuffer, RcdError> {
    require_gray(img)?;
    p.validate()?;
    let data = img
        .data()
        .iter()
        .map(|&v| if v > p.binarize_threshold { p.white_value } else { v })
        .collect();
    Ok(ImageBuffer::new_gray(img.width(), img.height(), data).expect("same layout"))
}

/// Edge-preserving smoothing with clamped borders.
pub fn bilateral_smooth(img: &ImageBuffer, p: &BilateralParams) -> Result<ImageBuffer, RcdError> {
    require_gray(img)?;
    if !p.enabled {
        return Ok(img.clone());
    }
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = (2.0 * p.spatial_sigma).ceil().max(1.0) as i64;
    let src = img.data();
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .map(|(dx, dy)| (-((dx * dx + dy * dy) as f64) / (2.0 * p.spatial_sigma * p.spatial_sigma)).exp())
        .collect();
    let range: Vec<f64> = (0..256)
        .map(|d| (-((d * d) as f64) / (2.0 * p.range_sigma * p.range_sigma)).exp())
        .collect();
    let side = (2 * r + 1) as usize;
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let centre = src[(y * w + x) as usize];
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h - 1);
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w - 1);
                    let v = src[(yy * w + xx) as usize];
                    let wgt = spatial[(dy + r) as usize * side + (dx + r) as usize]
                        * range[(v as i32 - centre as i32).unsigned_abs() as usize];
                    num += wgt * v as f64;
                    den += wgt;
                }
            }
            out.push((num / den).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(ImageBuffer::new_gray(img.width(), img.height(), out).expect("same layout"))
}

fn percentile(sorted: &[u8], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx] as f64
}

/// Linear stretch mapping the 1st/99th percentiles to 0/255.
pub fn contrast_stretch(img: &ImageBuffer, p: &ContrastParams) -> Result<ImageBuffer, RcdError> {
    require_gray(img)?;
    if !p.enabled || p.strength <= 0.0 {
        return Ok(img.clone());
    }
    let mut sorted = img.data().to_vec();
    sorted.sort_unstable();
    let (lo, hi) = (percentile(&sorted, 0.01), percentile(&sorted, 0.99));
    if hi <= lo {
        return Ok(img.clone());
    }
    let s = p.strength.min(1.0);
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            let stretched = ((v - lo) / (hi - lo) * 255.0).clamp(0.0, 255.0);
            ((1.0 - s) * v + s * stretched).round() as u8
        })
        .collect();
    Ok(ImageBuffer::new_gray(img.width(), img.height(), data).expect("same layout"))
}

/// Full post-processing chain on a decoded sketch.
pub fn reconstruct(img: &ImageBuffer, p: &RcdParams) -> Result<ImageBuffer, RcdError> {
    p.validate()?;
    let gray = img.to_gray();
    if !p.enabled {
        return Ok(gray);
    }
    let smoothed = bilateral_smooth(&gray, &p.bilateral)?;
    let stretched = contrast_stretch(&smoothed, &p.contrast)?;
    binarize_extremes(&stretched, p)
}

fn signal_mean(img: &ImageBuffer) -> Vec<f64> {
    img.to_gray().data().iter().map(|&v| pixel_to_signal(v)).collect()
}

/// Repeated averaging with zero noise, `x ← x/2`; mean after each step.
pub fn mean_drift_diagnostic(start: &ImageBuffer, steps: usize) -> Vec<f64> {
    let mut x = signal_mean(start);
    (0..steps)
        .map(|_| {
            x.iter_mut().for_each(|v| *v *= 0.5);
            x.iter().sum::<f64>() / x.len() as f64
        })
        .collect()
}

/// `x ← x/2 + ε/2` with standard normal ε drawn from a seeded generator.
pub fn mean_drift_noisy(start: &ImageBuffer, steps: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = signal_mean(start);
    (0..steps)
        .map(|_| {
            for v in x.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = 0.5 * *v + 0.5 * e;
            }
            x.iter().sum::<f64>() / x.len() as f64
        })
        .collect()
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε`.
pub fn forward_noise(x0: &Array2<f64>, alpha_bar: f64, eps: &Array2<f64>) -> Array2<f64> {
    x0 * alpha_bar.sqrt() + eps * (1.0 - alpha_bar).sqrt()
}

/// Clean-image estimate from a noised image.
pub trait ToyDenoiser {
    fn reconstruct(&self, x_t: &Array2<f64>, alpha_bar: f64) -> Array2<f64>;
}

/// `√ᾱ · blur(x_t)` with a 3×3 binomial kernel and wrap-around borders.
/// Smoothing removes noise along with fine detail, the way a real denoiser
/// loses sharp edges first.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlurDenoiser;

impl ToyDenoiser for BlurDenoiser {
    fn reconstruct(&self, x_t: &Array2<f64>, alpha_bar: f64) -> Array2<f64> {
        let (h, w) = x_t.dim();
        let k = [1.0, 2.0, 1.0];
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for (dy, ky) in k.iter().enumerate() {
                for (dx, kx) in k.iter().enumerate() {
                    let yy = (y + h + dy - 1) % h;
                    let xx = (x + w + dx - 1) % w;
                    acc += ky * kx * x_t[[yy, xx]];
                }
            }
            alpha_bar.sqrt() * acc / 16.0
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BandError {
    pub timestep: usize,
    pub high_band_error: f64,
    pub low_band_error: f64,
}

/// Cycles-per-sample cutoff separating the bands (Nyquist is 0.5).
pub const BAND_CUTOFF: f64 = 0.25;

/// Noises the image at `t`, reconstructs it, and splits the mean squared
/// error between low and high spatial frequencies. The two parts sum to the
/// total MSE.
pub fn band_reconstruction_error(
    img: &ImageBuffer,
    schedule: &NoiseSchedule,
    t: usize,
    denoiser: &dyn ToyDenoiser,
    seed: u64,
) -> Result<BandError, RcdError> {
    let gray = img.to_gray();
    if gray.width() != gray.height() {
        return Err(RcdError::NotSquare(gray.width(), gray.height()));
    }
    if t > schedule.num_steps() {
        return Err(RcdError::Timestep {
            t,
            steps: schedule.num_steps(),
        });
    }
    let n = gray.width() as usize;
    let x0 = Array2::from_shape_vec((n, n), gray.data().iter().map(|&v| pixel_to_signal(v)).collect())
        .expect("square");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Array2::from_shape_simple_fn((n, n), || StandardNormal.sample(&mut rng));
    let ab = schedule.alpha_bar(t);
    let x_t = forward_noise(&x0, ab, &eps);
    let err = &x0 - &denoiser.reconstruct(&x_t, ab);
    let (high, low) = split_bands(&err);
    Ok(BandError {
        timestep: t,
        high_band_error: high,
        low_band_error: low,
    })
}

/// Per-band contribution to the mean squared value of `e` (Parseval).
pub fn split_bands(e: &Array2<f64>) -> (f64, f64) {
    let n = e.nrows();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut rows: Vec<Vec<Complex<f64>>> = e
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| Complex::new(v, 0.0)).collect())
        .collect();
    for r in rows.iter_mut() {
        fft.process(r);
    }
    let mut spec = vec![vec![Complex::new(0.0, 0.0); n]; n];
    for x in 0..n {
        let mut col: Vec<Complex<f64>> = (0..n).map(|y| rows[y][x]).collect();
        fft.process(&mut col);
        for y in 0..n {
            spec[y][x] = col[y];
        }
    }
    let freq = |k: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        (k / n as f64).abs()
    };
    let norm = (n * n * n * n) as f64;
    let (mut high, mut low) = (0.0, 0.0);
    for (ky, row) in spec.iter().enumerate() {
        for (kx, c) in row.iter().enumerate() {
            let p = c.norm_sqr() / norm;
            if freq(kx).max(freq(ky)) > BAND_CUTOFF {
                high += p;
            } else {
                low += p;
            }
        }
    }
    (high, low)
}

/// Decoded pixel from the signal value, for building diagnostics fixtures.
pub fn signal_image(width: u32, height: u32, value: f64) -> ImageBuffer {
    ImageBuffer::filled_gray(width, height, signal_to_pixel(value))
}
